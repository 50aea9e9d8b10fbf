"""Residual-quantized autoencoder over content embeddings.

An MLP encoder maps a content embedding to a latent vector, a stack of
codebooks greedily quantizes the latent level by level (each level
approximating the residual the previous levels left behind), and an MLP
decoder reconstructs the input from the summed codewords. After
training the model is frozen and every item receives its code sequence,
which downstream modules treat as the item's hierarchical semantic
identifier.

Loss routing follows the usual stop-gradient scheme: the commitment
term (weighted by ``commitment_weight``) pulls the encoder toward the
chosen codewords and leaves the codewords fixed; the unweighted twin
term updates only the codewords; reconstruction reaches the encoder
through a straight-through estimator on the quantized latent.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .runfiles import read_table, write_table


class RqVaeConfigError(ValueError):
    pass


class FrozenModelError(RuntimeError):
    """A gradient-producing call was made on a frozen model."""


@dataclass
class RqVaeConfig:
    levels: int = 3
    codebook_size: int = 64
    input_dim: int = 16
    latent_dim: int = 8
    commitment_weight: float = 0.5
    hidden_sizes: tuple | None = None  # None -> one hidden layer of 2 * latent_dim
    learning_rate: float = 2e-3
    epochs: int = 20
    batch_size: int = 256
    optimizer: str = "adam"
    kmeans_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise RqVaeConfigError("levels must be at least 1")
        if self.codebook_size < 2:
            raise RqVaeConfigError("codebook_size must be at least 2")
        if self.commitment_weight <= 0:
            raise RqVaeConfigError("commitment_weight must be positive")
        if self.hidden_sizes is None:
            self.hidden_sizes = (2 * self.latent_dim,)
        else:
            self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RqVaeConfig":
        return cls(**d)


def _mlp_param_names(prefix: str, sizes) -> list[tuple[str, str]]:
    return [(f"{prefix}.{i}.w", f"{prefix}.{i}.b") for i in range(len(sizes) - 1)]


@dataclass
class RqVaeModel:
    config: RqVaeConfig
    params: dict = field(default_factory=dict)
    frozen: bool = False

    @classmethod
    def initialize(cls, config: RqVaeConfig) -> "RqVaeModel":
        rng = np.random.default_rng([config.seed, 0])
        params: dict[str, T.Tensor] = {}
        enc_sizes = [config.input_dim, *config.hidden_sizes, config.latent_dim]
        dec_sizes = [config.latent_dim, *reversed(config.hidden_sizes), config.input_dim]
        for prefix, sizes in (("enc", enc_sizes), ("dec", dec_sizes)):
            for i, (w_name, b_name) in enumerate(_mlp_param_names(prefix, sizes)):
                fan_in, fan_out = sizes[i], sizes[i + 1]
                params[w_name] = T.parameter(
                    rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), name=w_name
                )
                params[b_name] = T.parameter(np.zeros(fan_out), name=b_name)
        for level in range(config.levels):
            name = f"codebook.{level}"
            params[name] = T.parameter(
                rng.normal(0.0, 0.1, size=(config.codebook_size, config.latent_dim)), name=name
            )
        return cls(config=config, params=params)

    @property
    def codebooks(self) -> list:
        return [self.params[f"codebook.{l}"] for l in range(self.config.levels)]

    def _mlp_np(self, prefix: str, x: np.ndarray) -> np.ndarray:
        sizes = self._sizes(prefix)
        out = x
        for i in range(len(sizes) - 1):
            out = out @ self.params[f"{prefix}.{i}.w"].value + self.params[f"{prefix}.{i}.b"].value
            if i < len(sizes) - 2:
                out = np.maximum(out, 0.0)
        return out

    def _mlp_t(self, prefix: str, x: T.Tensor) -> T.Tensor:
        sizes = self._sizes(prefix)
        out = x
        for i in range(len(sizes) - 1):
            out = T.add_rowvec(
                T.matmul(out, self.params[f"{prefix}.{i}.w"]), self.params[f"{prefix}.{i}.b"]
            )
            if i < len(sizes) - 2:
                out = T.relu(out)
        return out

    def _sizes(self, prefix: str) -> list[int]:
        cfg = self.config
        if prefix == "enc":
            return [cfg.input_dim, *cfg.hidden_sizes, cfg.latent_dim]
        return [cfg.latent_dim, *reversed(cfg.hidden_sizes), cfg.input_dim]


def encode(model: RqVaeModel, x) -> np.ndarray:
    """Deterministic encoder forward pass; accepts a vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != model.config.input_dim:
        raise T.DimensionError(
            f"expected embeddings of dim {model.config.input_dim}, got {batch.shape[1]}"
        )
    z = model._mlp_np("enc", batch)
    return z[0] if single else z


@dataclass
class QuantizeResult:
    codes: tuple  # (c_1, ..., c_L)
    residuals: list  # L+1 vectors: r_1 = z through the final residual
    quantized: np.ndarray  # z minus the final residual (telescoped sum of codewords)


def _nearest_codes(codebook: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    # squared distances via the expansion; argmin breaks ties at the
    # smallest index
    d2 = (
        (residuals * residuals).sum(axis=1, keepdims=True)
        - 2.0 * residuals @ codebook.T
        + (codebook * codebook).sum(axis=1)
    )
    return np.argmin(d2, axis=1)


def quantize_batch(model: RqVaeModel, z: np.ndarray):
    """Greedy per-level quantization of a batch of latents.

    Returns (codes: N x L ints, residuals: list of L+1 arrays, quantized).
    residuals[l] is the input to level l+1; the final entry is what the
    codebooks could not explain, so quantized := z - residuals[-1] makes
    the telescoping identity hold exactly.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    codes = np.empty((n, model.config.levels), dtype=np.int64)
    residuals = [z]
    r = z
    for level, cb in enumerate(model.codebooks):
        c = _nearest_codes(cb.value, r)
        codes[:, level] = c
        r = r - cb.value[c]
        residuals.append(r)
    return codes, residuals, z - residuals[-1]


def quantize(model: RqVaeModel, z) -> QuantizeResult:
    """Quantize one latent vector."""
    z = np.asarray(z, dtype=np.float64)
    codes, residuals, quantized = quantize_batch(model, z[None, :])
    return QuantizeResult(
        codes=tuple(int(c) for c in codes[0]),
        residuals=[r[0] for r in residuals],
        quantized=quantized[0],
    )


@dataclass
class LossParts:
    total: T.Tensor  # graph scalar, mean over the batch
    reconstruction: float
    commitment: float  # sum over levels of the codeword-residual distance


def loss(model: RqVaeModel, x) -> LossParts:
    """Training loss for a batch (or single embedding) with stop-gradients.

    ``total = reconstruction + (1 + commitment_weight) * commitment``
    numerically; gradient-wise the weighted half reaches only the
    encoder and the unweighted half only the codewords.
    """
    if model.frozen:
        raise FrozenModelError("loss() produces gradients; model is frozen")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[0]
    beta = model.config.commitment_weight

    z_t = model._mlp_t("enc", T.constant(x))
    z = z_t.value
    codes, residuals, quantized = quantize_batch(model, z)

    terms: list[T.Tensor] = []
    cum = np.zeros_like(z)
    for level, cb in enumerate(model.codebooks):
        picked = cb.value[codes[:, level]]
        cum = cum + picked
        # encoder half: codewords are constants, gradient flows into z
        terms.append(T.scale(T.sum_sq(T.sub(z_t, T.constant(cum))), beta))
        # codeword half: the residual is a constant, gradient flows into
        # the picked codebook rows
        rows = T.gather_groups(cb, [[int(c)] for c in codes[:, level]])
        terms.append(T.sum_sq(T.sub(T.constant(residuals[level]), rows)))

    # straight-through: decode the quantized latent, pass gradient to z
    z_st = T.add(z_t, T.constant(quantized - z))
    x_hat = model._mlp_t("dec", z_st)
    recon = T.sum_sq(T.sub(T.constant(x), x_hat))

    total = recon
    for term in terms:
        total = T.add(total, term)
    total = T.scale(total, 1.0 / n)

    commitment = float(
        sum(((residuals[l] - cb.value[codes[:, l]]) ** 2).sum() for l, cb in enumerate(model.codebooks))
    ) / n
    return LossParts(total=total, reconstruction=float(recon.value) / n, commitment=commitment)


def evaluate_loss(model: RqVaeModel, x) -> dict:
    """Loss parts without building a graph (works on frozen models)."""
    x = np.asarray(x, dtype=np.float64)
    z = model._mlp_np("enc", x)
    codes, residuals, quantized = quantize_batch(model, z)
    x_hat = model._mlp_np("dec", quantized)
    n = x.shape[0]
    recon = float(((x - x_hat) ** 2).sum()) / n
    commitment = float(
        sum(((residuals[l] - cb.value[codes[:, l]]) ** 2).sum() for l, cb in enumerate(model.codebooks))
    ) / n
    beta = model.config.commitment_weight
    return {
        "reconstruction": recon,
        "commitment": commitment,
        "total": recon + (1.0 + beta) * commitment,
    }


def _kmeans(points: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; empty clusters keep
    their previous centroid."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[int(rng.integers(0, n))]
            continue
        pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        pick = min(pick, n - 1)
        centers[j] = points[pick]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    for _ in range(iters):
        assign = _nearest_codes(centers, points)
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers


def _init_codebooks(model: RqVaeModel, sample: np.ndarray, rng: np.random.Generator) -> None:
    """Warm-start each level by k-means on that level's residuals."""
    z = model._mlp_np("enc", sample)
    r = z
    for cb in model.codebooks:
        centers = _kmeans(r, model.config.codebook_size, model.config.kmeans_iters, rng)
        cb.value[:] = centers
        r = r - centers[_nearest_codes(centers, r)]


def train(model: RqVaeModel, embeddings) -> list[dict]:
    """Mini-batch training; freezes the model and returns the loss curve.

    The curve has one entry per epoch plus the post-initialization state
    at epoch 0, each with full-dataset loss parts. Codewords that go a
    whole epoch unused are reset to a random residual from the last
    batch of that epoch.
    """
    if model.frozen:
        raise FrozenModelError("cannot train a frozen model")
    cfg = model.config
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if n < cfg.codebook_size:
        raise RqVaeConfigError(f"need at least {cfg.codebook_size} embeddings, got {n}")

    rng = np.random.default_rng([cfg.seed, 1])
    _init_codebooks(model, x[: max(cfg.batch_size, cfg.codebook_size)], rng)
    params = list(model.params.values())
    opt = T.make_optimizer(cfg.optimizer, params, cfg.learning_rate)

    curve = [{"epoch": 0, **evaluate_loss(model, x)}]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        usage = np.zeros((cfg.levels, cfg.codebook_size), dtype=np.int64)
        last_residuals = None
        for start in range(0, n, cfg.batch_size):
            batch = x[order[start : start + cfg.batch_size]]
            z_np = model._mlp_np("enc", batch)
            codes, residuals, _ = quantize_batch(model, z_np)
            for level in range(cfg.levels):
                usage[level] += np.bincount(codes[:, level], minlength=cfg.codebook_size)
            last_residuals = residuals
            parts = loss(model, batch)
            opt.zero_grad()
            T.backward(parts.total)
            opt.step()
        if cfg.learning_rate > 0 and last_residuals is not None:
            for level, cb in enumerate(model.codebooks):
                dead = np.flatnonzero(usage[level] == 0)
                if dead.size:
                    pool = last_residuals[level]
                    picks = rng.integers(0, pool.shape[0], size=dead.size)
                    cb.value[dead] = pool[picks]
        curve.append({"epoch": epoch, **evaluate_loss(model, x)})
    model.frozen = True
    return curve


def assign(model: RqVaeModel, items: dict):
    """Map raw IDs to code tuples through the frozen quantizer.

    Items with a malformed embedding get a per-item error entry instead
    of failing the whole pass. Returns (assignments, errors).
    """
    if not model.frozen:
        raise FrozenModelError("assign requires a frozen model")
    d = model.config.input_dim
    good_ids: list[int] = []
    rows: list[np.ndarray] = []
    errors: dict[int, str] = {}
    for raw_id, emb in items.items():
        arr = np.asarray(emb, dtype=np.float64)
        if arr.shape != (d,):
            errors[int(raw_id)] = f"embedding shape {arr.shape}, expected ({d},)"
            continue
        if not np.all(np.isfinite(arr)):
            errors[int(raw_id)] = "non-finite embedding"
            continue
        good_ids.append(int(raw_id))
        rows.append(arr)
    assignments: dict[int, tuple] = {}
    if rows:
        z = encode(model, np.vstack(rows))
        codes, _, _ = quantize_batch(model, z)
        for raw_id, c in zip(good_ids, codes):
            assignments[raw_id] = tuple(int(v) for v in c)
    return assignments, errors


# ---------------------------------------------------------------------------
# persistence


def save_rqvae(path, model: RqVaeModel, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["rqvae_config"] = model.config.to_dict()
    meta["frozen"] = bool(model.frozen)
    save_checkpoint(path, model.params, meta=meta)


def load_rqvae(path) -> tuple[RqVaeModel, dict]:
    params, meta = load_checkpoint(path)
    config = RqVaeConfig.from_dict(meta["rqvae_config"])
    model = RqVaeModel.initialize(config)
    for name, value in params.items():
        model.params[name].value[:] = value
    model.frozen = bool(meta.get("frozen", False))
    return model, meta


def save_semid_table(path, assignments: dict, meta: dict) -> None:
    """Two-column text table: raw ID, comma-separated codes."""
    write_table(
        path,
        "semid_table",
        meta,
        ["raw_id", "codes"],
        (
            [str(raw_id), ",".join(str(c) for c in assignments[raw_id])]
            for raw_id in sorted(assignments)
        ),
    )


def load_semid_table(path):
    meta, _, rows = read_table(path, "semid_table")
    table = {int(r[0]): tuple(int(c) for c in r[1].split(",")) for r in rows}
    return table, meta
