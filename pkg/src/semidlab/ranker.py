"""DLRM-style CTR ranker with a contextualized user-history module.

Three stacked sections: embedding lookups for the target item and the
history items (sum-pooled over each lookup's rows), an aggregation
module over the history sequence (Bypass linear map, a pre-norm
single-head Transformer layer, or pooled attention with learnable seed
queries), and an interaction layer taking all pairwise dot products of
the collected vectors followed by an MLP and a sigmoid.

History sequences are most-recent-first. Positions beyond the real
history hold a learned pad embedding; attention is deliberately not
masked over pads, so pad-attention statistics are measurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as T
from .analysis import SingleClassError, normalized_entropy
from .checkpoint import load_checkpoint, save_checkpoint
from .runfiles import read_table, write_table
from .tokenization import (
    ConfigurationError,
    IndividualEmbedding,
    RandomHash,
    SemanticIdLookup,
    TokenParameterization,
)

AGGREGATIONS = ("bypass", "transformer", "pma")


class RankerConfigError(ValueError):
    pass


@dataclass
class RankerConfig:
    d_m: int = 16
    aggregation: str = "bypass"
    d_a: int | None = None  # attention width; must equal d_m for the residual
    d_s: int = 32  # number of learnable seed queries for pooled attention
    history_length: int = 8
    n_ts_buckets: int = 32
    top_mlp: tuple = (64, 32)
    learning_rate: float = 1e-2
    batch_size: int = 32
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise RankerConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.d_a is None:
            self.d_a = self.d_m
        if self.aggregation != "bypass" and self.d_a != self.d_m:
            raise RankerConfigError("attention width must equal d_m (residual connections)")
        if self.history_length < 1 or self.d_m < 1:
            raise RankerConfigError("history_length and d_m must be positive")
        self.top_mlp = tuple(int(w) for w in self.top_mlp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top_mlp"] = list(self.top_mlp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RankerConfig":
        return cls(**d)


# transformer-block position-wise MLP width, relative to d_m
_BLOCK_MLP_RATIO = 4


@dataclass
class RankerModel:
    config: RankerConfig
    target_lookup: object
    history_lookup: object
    params: dict = field(default_factory=dict)
    frozen: bool = False
    _target_rows: dict = field(default_factory=dict, repr=False)
    _history_rows: dict = field(default_factory=dict, repr=False)

    @classmethod
    def initialize(cls, config: RankerConfig, target_lookup, history_lookup) -> "RankerModel":
        rng = np.random.default_rng([config.seed, 0])
        p: dict[str, T.Tensor] = {}
        d = config.d_m

        def table(name, rows, cols, scale=0.05):
            p[name] = T.parameter(rng.normal(0.0, scale, size=(rows, cols)), name=name)

        def mlp(prefix, sizes):
            for i in range(len(sizes) - 1):
                fan_in = sizes[i]
                p[f"{prefix}.{i}.w"] = T.parameter(
                    rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, sizes[i + 1])),
                    name=f"{prefix}.{i}.w",
                )
                p[f"{prefix}.{i}.b"] = T.parameter(np.zeros(sizes[i + 1]), name=f"{prefix}.{i}.b")

        table("target_table", target_lookup.table_size, d)
        table("history_table", history_lookup.table_size, d)
        table("ts_table", config.n_ts_buckets, d)
        table("pad_embed", 1, d)

        t = config.history_length
        if config.aggregation == "bypass":
            p["agg.w"] = T.parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)), name="agg.w")
            m = t + 1
        else:
            table("pos_embed", t, d)
            for name in ("wq", "wk", "wv"):
                if config.aggregation == "pma" and name == "wq":
                    continue
                p[f"agg.{name}"] = T.parameter(
                    rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, config.d_a)), name=f"agg.{name}"
                )
            for ln in ("ln1", "ln2"):
                p[f"agg.{ln}.g"] = T.parameter(np.ones(d), name=f"agg.{ln}.g")
                p[f"agg.{ln}.b"] = T.parameter(np.zeros(d), name=f"agg.{ln}.b")
            mlp("agg.mlp", [d, _BLOCK_MLP_RATIO * d, d])
            if config.aggregation == "pma":
                p["agg.seeds"] = T.parameter(
                    rng.normal(0.0, 1.0 / math.sqrt(config.d_a), size=(config.d_s, config.d_a)),
                    name="agg.seeds",
                )
                m = config.d_s + 1
            else:
                m = t + 1
        interaction_dim = m * (m - 1) // 2 + m * d
        mlp("top", [interaction_dim, *config.top_mlp, 1])
        return cls(config=config, target_lookup=target_lookup, history_lookup=history_lookup, params=p)

    def rows_for_target(self, raw_id: int):
        rows = self._target_rows.get(raw_id)
        if rows is None:
            rows = tuple(self.target_lookup.rows(raw_id))
            self._target_rows[raw_id] = rows
        return rows

    def rows_for_history(self, raw_id: int):
        rows = self._history_rows.get(raw_id)
        if rows is None:
            rows = tuple(self.history_lookup.rows(raw_id))
            self._history_rows[raw_id] = rows
        return rows


def sparse_embed(feature_ids, lookup, table: T.Tensor) -> T.Tensor:
    """Pooled embedding of a sparse feature (a set of raw IDs).

    Each constituent ID contributes the sum of its lookup rows; the set
    is deduplicated and ordered for determinism. An empty feature yields
    the zero vector.
    """
    rows: list[int] = []
    for raw_id in sorted({int(x) for x in feature_ids}):
        rows.extend(lookup.rows(raw_id))
    return T.gather_sum(table, rows)


def ts_bucket(age_seconds: int, n_buckets: int) -> int:
    """Log-spaced age buckets: bucket 0 is under a minute, each further
    bucket doubles the age span."""
    age = max(int(age_seconds), 0)
    return min(n_buckets - 1, int(math.log2(1.0 + age / 60.0)))


@dataclass
class ForwardResult:
    probability: float
    logit: T.Tensor
    attention: np.ndarray | None  # rows sum to 1; None for bypass
    pad_positions: np.ndarray  # bool mask over source positions


def _history_matrix(model: RankerModel, event) -> tuple[T.Tensor, np.ndarray]:
    cfg = model.config
    t = cfg.history_length
    hist = list(event.history[:t])  # most-recent-first; drop the oldest overflow
    n_real = len(hist)
    item_groups = [model.rows_for_history(item) for item, _ in hist] + [()] * (t - n_real)
    ts_groups = [
        (ts_bucket(event.timestamp - ts, cfg.n_ts_buckets),) for _, ts in hist
    ] + [()] * (t - n_real)
    pad_groups = [()] * n_real + [(0,)] * (t - n_real)
    x = T.add(
        T.add(
            T.gather_groups(model.params["history_table"], item_groups),
            T.gather_groups(model.params["ts_table"], ts_groups),
        ),
        T.gather_groups(model.params["pad_embed"], pad_groups),
    )
    if cfg.aggregation != "bypass":
        x = T.add(x, model.params["pos_embed"])
    pad_mask = np.array([False] * n_real + [True] * (t - n_real))
    return x, pad_mask


def _block_mlp(model: RankerModel, x: T.Tensor) -> T.Tensor:
    p = model.params
    h = T.relu(T.add_rowvec(T.matmul(x, p["agg.mlp.0.w"]), p["agg.mlp.0.b"]))
    return T.add_rowvec(T.matmul(h, p["agg.mlp.1.w"]), p["agg.mlp.1.b"])


def _aggregate(model: RankerModel, x: T.Tensor) -> tuple[T.Tensor, T.Tensor | None]:
    cfg = model.config
    p = model.params
    if cfg.aggregation == "bypass":
        return T.matmul(x, p["agg.w"]), None
    normed = T.layernorm(x, p["agg.ln1.g"], p["agg.ln1.b"])
    keys = T.matmul(normed, p["agg.wk"])
    values = T.matmul(normed, p["agg.wv"])
    inv_sqrt = 1.0 / math.sqrt(cfg.d_m)
    if cfg.aggregation == "transformer":
        queries = T.matmul(normed, p["agg.wq"])
        attn = T.softmax_rows(T.scale(T.matmul(queries, T.transpose(keys)), inv_sqrt))
        x1 = T.add(T.matmul(attn, values), x)
    else:
        attn = T.softmax_rows(T.scale(T.matmul(p["agg.seeds"], T.transpose(keys)), inv_sqrt))
        x1 = T.add(T.matmul(attn, values), p["agg.seeds"])
    x2 = T.add(_block_mlp(model, T.layernorm(x1, p["agg.ln2.g"], p["agg.ln2.b"])), x1)
    return x2, attn


def forward(model: RankerModel, event) -> ForwardResult:
    """Score one impression; keeps the attention matrix for analysis."""
    x, pad_mask = _history_matrix(model, event)
    agg, attn = _aggregate(model, x)
    target = T.gather_groups(model.params["target_table"], [model.rows_for_target(event.item_id)])
    vectors = T.concat_rows([target, agg])
    interactions = T.pairwise_dot_upper(vectors)
    flat = T.concat_flat([interactions, vectors])
    h = T.reshape(flat, (1, flat.value.size))
    n_layers = len(model.config.top_mlp) + 1
    for i in range(n_layers):
        h = T.add_rowvec(T.matmul(h, model.params[f"top.{i}.w"]), model.params[f"top.{i}.b"])
        if i < n_layers - 1:
            h = T.relu(h)
    logit = h
    prob = float(T.sigmoid(logit).value[0, 0])
    return ForwardResult(
        probability=prob,
        logit=logit,
        attention=None if attn is None else attn.value.copy(),
        pad_positions=pad_mask,
    )


PREDICTION_CLIP = 1e-7


def clip_prediction(p: float) -> float:
    return min(max(p, PREDICTION_CLIP), 1.0 - PREDICTION_CLIP)


@dataclass(slots=True)
class PredictionRecord:
    event_id: int
    label: int
    prediction: float
    item_id: int


@dataclass
class TrainResult:
    ne_curve: list  # trailing-window NE over the training pass


def train_one_epoch(model: RankerModel, events, ne_window: int = 5000) -> TrainResult:
    """One sequential pass of minibatch cross-entropy training.

    Events must already be time-ordered. The trailing-window NE uses
    each event's pre-update prediction (progressive validation).
    """
    if model.frozen:
        raise RankerConfigError("model is frozen")
    cfg = model.config
    params = list(model.params.values())
    opt = T.make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    curve = []
    window: list[tuple[int, float]] = []
    pending = 0
    opt.zero_grad()
    for i, event in enumerate(events):
        out = forward(model, event)
        loss = T.bce_with_logits(out.logit, np.array([[float(event.label)]]))
        T.backward(T.scale(loss, 1.0 / cfg.batch_size))
        pending += 1
        if pending == cfg.batch_size:
            opt.step()
            opt.zero_grad()
            pending = 0
        window.append((event.label, out.probability))
        if len(window) == ne_window:
            labels = np.array([l for l, _ in window], dtype=float)
            preds = np.array([p for _, p in window])
            if 0.0 < labels.mean() < 1.0:
                curve.append({"events_seen": i + 1, "ne": normalized_entropy(labels, preds)})
            window = []
    if pending:
        opt.step()
        opt.zero_grad()
    return TrainResult(ne_curve=curve)


@dataclass
class EvalResult:
    ne: float
    records: list
    attentions: list  # (attention matrix, pad mask) pairs when requested


def evaluate(model: RankerModel, events, keep_attention: bool = False) -> EvalResult:
    """Frozen-model scoring; NE per the segment's own base rate.

    Raises SingleClassError when the stream holds only one label class
    rather than returning a silent NaN.
    """
    records = []
    attentions = []
    labels = []
    preds = []
    for event in events:
        out = forward(model, event)
        p = clip_prediction(out.probability)
        records.append(PredictionRecord(event.event_id, event.label, p, event.item_id))
        labels.append(float(event.label))
        preds.append(p)
        if keep_attention and out.attention is not None:
            attentions.append((out.attention, out.pad_positions))
    if not records:
        raise ValueError("empty evaluation stream")
    ne = normalized_entropy(np.array(labels), np.array(preds))
    return EvalResult(ne=ne, records=records, attentions=attentions)


# ---------------------------------------------------------------------------
# lookup construction from serializable specs


def build_lookup(spec: dict, *, vocabulary=None, semid_table=None):
    """Build a lookup function from its config-file description.

    ``spec`` keys: kind (individual | random_hash | semantic_id), plus
    table_size and hash_seed for hashing, or variant / prefix_depth /
    codebook_size and table_size for Semantic ID.
    """
    kind = spec["kind"]
    if kind == "individual":
        if vocabulary is None:
            raise ConfigurationError("individual embeddings need the training vocabulary")
        return IndividualEmbedding(vocabulary)
    if kind == "random_hash":
        return RandomHash(int(spec["table_size"]), seed=int(spec.get("hash_seed", 0)))
    if kind == "semantic_id":
        if semid_table is None:
            raise ConfigurationError("semantic_id lookup needs the Semantic ID table")
        p = TokenParameterization(
            variant=spec.get("variant", "prefix_ngram"),
            codebook_size=int(spec["codebook_size"]),
            prefix_depth=int(spec.get("prefix_depth", 0)),
        )
        return SemanticIdLookup(semid_table, p, int(spec["table_size"]))
    raise ConfigurationError(f"unknown lookup kind {kind!r}")


# ---------------------------------------------------------------------------
# persistence


def save_ranker(path, model: RankerModel, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["ranker_config"] = model.config.to_dict()
    save_checkpoint(path, model.params, meta=meta)


def load_ranker(path, target_lookup, history_lookup) -> tuple[RankerModel, dict]:
    """Rebuild a model from a checkpoint plus reconstructed lookups."""
    params, meta = load_checkpoint(path)
    config = RankerConfig.from_dict(meta["ranker_config"])
    model = RankerModel.initialize(config, target_lookup, history_lookup)
    for name, value in params.items():
        model.params[name].value[:] = value
    model.frozen = True
    return model, meta


def save_predictions(path, records, meta: dict, tags: dict | None = None) -> None:
    """Per-example prediction dump; ``tags`` optionally labels events."""
    tags = tags or {}
    write_table(
        path,
        "predictions",
        meta,
        ["event_id", "label", "prediction", "item_id", "segment"],
        (
            [
                str(r.event_id),
                str(r.label),
                repr(float(r.prediction)),
                str(r.item_id),
                tags.get(r.event_id, "-"),
            ]
            for r in records
        ),
    )


def load_predictions(path):
    meta, _, rows = read_table(path, "predictions")
    records = [PredictionRecord(int(r[0]), int(r[1]), float(r[2]), int(r[3])) for r in rows]
    return records, meta
