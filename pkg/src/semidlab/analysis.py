"""Diagnostics over trained rankers and persisted prediction dumps.

Everything here is a pure function of its inputs (dumps, tables,
frozen models), so re-running an analysis without retraining is
bit-identical. Normalized entropy lives here and is shared with the
ranker's evaluator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import DAY, ground_truth_ctr
from .runfiles import write_table


class SingleClassError(ValueError):
    """NE is undefined when every label is identical (denominator 0)."""


def normalized_entropy(labels, predictions) -> float:
    """Model cross-entropy over the cross-entropy of the base-rate
    predictor; 1.0 means no lift over predicting the mean."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(predictions, dtype=np.float64), 1e-7, 1.0 - 1e-7)
    if y.size == 0:
        raise SingleClassError("empty stream")
    base = y.mean()
    if base <= 0.0 or base >= 1.0:
        raise SingleClassError(f"single-class stream (positive rate {base})")
    model_ce = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean()
    base_ce = -(base * math.log(base) + (1.0 - base) * math.log(1.0 - base))
    return float(model_ce / base_ce)


# ---------------------------------------------------------------------------
# segments


@dataclass
class SegmentSpec:
    """Head/torso/tail item partition by cumulative training impressions,
    plus the eval-only new-items set."""

    head: set
    torso: set
    tail: set
    new_items: set
    train_seen: set
    cutoffs: tuple = (0.25, 0.75)

    def tag(self, item_id: int) -> str:
        if item_id in self.head:
            return "head"
        if item_id in self.torso:
            return "torso"
        return "tail"


def build_segments(train_counts: dict, universe, eval_item_ids, cutoffs=(0.25, 0.75)) -> SegmentSpec:
    """Cut the impression-sorted item list at the cumulative cutoffs.

    ``train_counts`` maps item id -> training impressions (missing = 0);
    ``universe`` is every item id; items seen only in evaluation form the
    new-items set.
    """
    universe = sorted(int(x) for x in universe)
    counts = np.array([train_counts.get(x, 0) for x in universe], dtype=np.float64)
    order = np.lexsort((universe, -counts))  # impressions desc, id asc for ties
    total = counts.sum()
    head, torso, tail = set(), set(), set()
    cum = 0.0
    for idx in order:
        item = universe[idx]
        c = counts[idx]
        if total > 0 and cum < cutoffs[0] * total:
            head.add(item)
        elif total > 0 and cum < cutoffs[1] * total:
            torso.add(item)
        else:
            tail.add(item)
        cum += c
    train_seen = {x for x in universe if train_counts.get(x, 0) > 0}
    new_items = {int(x) for x in eval_item_ids} - train_seen
    return SegmentSpec(head=head, torso=torso, tail=tail, new_items=new_items,
                       train_seen=train_seen, cutoffs=tuple(cutoffs))


def _ne_or_note(records) -> dict:
    labels = [r.label for r in records]
    preds = [r.prediction for r in records]
    out = {"count": len(records)}
    try:
        out["ne"] = normalized_entropy(labels, preds)
    except SingleClassError as exc:
        out["ne"] = None
        out["note"] = str(exc)
    return out


def segment_ne(records, segments: SegmentSpec) -> dict:
    """NE per segment with the segment's own base rate."""
    buckets = {"head": [], "torso": [], "tail": []}
    seen, new = [], []
    for r in records:
        buckets[segments.tag(r.item_id)].append(r)
        (seen if r.item_id in segments.train_seen else new).append(r)
    report = {name: _ne_or_note(rs) for name, rs in buckets.items()}
    report["overall"] = _ne_or_note(records)
    report["train_seen"] = _ne_or_note(seen)
    report["new_items"] = _ne_or_note(new)
    return report


# ---------------------------------------------------------------------------
# drift


def default_drift_windows(train_end: int, reference_hours=(48.0, 42.0, 6.0)) -> tuple:
    """Early/late training windows, scaled from the 4-day reference.

    At a 4-day horizon the early window is [end-48h, end-42h] and the
    late window the last 6 hours; other horizons scale proportionally.
    """
    scale = train_end / (96.0 * 3600.0)
    early = (train_end - int(reference_hours[0] * 3600 * scale),
             train_end - int(reference_hours[1] * 3600 * scale))
    late = (train_end - int(reference_hours[2] * 3600 * scale), train_end)
    return early, late


def drifting_gap(model, train_events, early_window, late_window) -> dict:
    """NE on the early training window minus NE on the late one.

    Both windows are re-scored with the frozen model; a smaller gap
    means old-item representations survived continued training better.
    """
    from . import ranker  # local import; ranker depends on this module

    def window_events(window):
        lo, hi = window
        return [e for e in train_events if lo <= e.timestamp < hi]

    early = window_events(early_window)
    late = window_events(late_window)
    if not early or not late:
        raise ValueError("empty drift window")
    ne_early = ranker.evaluate(model, early).ne
    ne_late = ranker.evaluate(model, late).ne
    return {"ne_early": ne_early, "ne_late": ne_late, "gap": ne_early - ne_late}


def long_retention(ne_short: dict, ne_long: dict) -> dict:
    """NE(long-trained) - NE(short-trained) per lookup kind; negative
    means the extra data helped."""
    return {kind: ne_long[kind] - ne_short[kind] for kind in ne_short}


# ---------------------------------------------------------------------------
# item representation space


@dataclass
class ClusterGroupStats:
    n_clusters: int
    variance_mean: float | None
    variance_std: float | None
    distance_mean: float | None
    distance_std: float | None


def _cluster_stats(clusters: list, rng: np.random.Generator, max_pairs=1_000_000) -> ClusterGroupStats:
    variances = []
    centroids = []
    for members in clusters:
        arr = np.asarray(members)
        centroids.append(arr.mean(axis=0))
        if len(arr) >= 2:
            variances.append(arr.var(axis=0).mean())
    if not centroids or len(centroids) < 2:
        dist_mean = dist_std = None
    else:
        c = np.vstack(centroids)
        n = len(c)
        n_pairs = n * (n - 1) // 2
        if n_pairs <= max_pairs:
            iu, ju = np.triu_indices(n, k=1)
        else:
            iu = rng.integers(0, n, size=max_pairs)
            ju = rng.integers(0, n, size=max_pairs)
            keep = iu != ju
            iu, ju = iu[keep], ju[keep]
        d = np.linalg.norm(c[iu] - c[ju], axis=1)
        dist_mean, dist_std = float(d.mean()), float(d.std())
    return ClusterGroupStats(
        n_clusters=len(clusters),
        variance_mean=float(np.mean(variances)) if variances else None,
        variance_std=float(np.std(variances)) if variances else None,
        distance_mean=dist_mean,
        distance_std=dist_std,
    )


def cluster_geometry(item_embeddings: dict, partition: dict, small_sizes=(4, 10), top_n=1000, seed=0) -> dict:
    """Intra-cluster variance and centroid pairwise distance for a
    partition of per-item embedding rows.

    Two cluster groups are reported: small clusters (member count inside
    ``small_sizes`` inclusive) and the ``top_n`` largest. Variance is
    per-dimension, averaged over dimensions then clusters; clusters with
    fewer than two members contribute no variance.
    """
    groups: dict = {}
    for item_id, key in partition.items():
        if item_id in item_embeddings:
            groups.setdefault(key, []).append(item_embeddings[item_id])
    ordered = sorted(groups.items(), key=lambda kv: (-len(kv[1]), str(kv[0])))
    clusters = [members for _, members in ordered]
    rng = np.random.default_rng([seed, 17])
    lo, hi = small_sizes
    return {
        "all": _cluster_stats(clusters, rng),
        "small": _cluster_stats([m for m in clusters if lo <= len(m) <= hi], rng),
        "top": _cluster_stats(clusters[:top_n], rng),
    }


# ---------------------------------------------------------------------------
# attention statistics


def attention_metrics(attention_records) -> dict:
    """Mean first-token, padding, entropy, and self-attention statistics.

    Input is (matrix, pad mask) pairs; each matrix row is a distribution
    over source positions. Self-attention needs square matrices and is
    reported as None otherwise (pooled attention has no self position).
    0 * log2(0) counts as 0 in the entropy.
    """
    firsts, pads, entropies, selfs = [], [], [], []
    square = True
    for a, pad_mask in attention_records:
        a = np.asarray(a, dtype=np.float64)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        firsts.append(a[:, 0].mean())
        pads.append(a[:, pad_mask].sum(axis=1).mean() if pad_mask.any() else 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(a > 0.0, np.log2(np.where(a > 0.0, a, 1.0)), 0.0)
        entropies.append(-(a * logs).sum(axis=1).mean())
        if a.shape[0] == a.shape[1]:
            selfs.append(np.trace(a) / a.shape[0])
        else:
            square = False
    if not firsts:
        raise ValueError("no attention records")
    return {
        "first": float(np.mean(firsts)),
        "pad": float(np.mean(pads)),
        "entropy": float(np.mean(entropies)),
        "self": float(np.mean(selfs)) if square and selfs else None,
    }


# ---------------------------------------------------------------------------
# A/A prediction variance


def aar(p_original: float, p_copy: float, eps: float = 1e-9) -> float:
    """Relative prediction difference of an exact-copy pair."""
    return 2.0 * (p_original - p_copy) / (p_original + p_copy + eps)


def aar_report(pair_predictions, eps: float = 1e-9) -> dict:
    values = np.array([aar(p1, p2, eps) for p1, p2 in pair_predictions])
    if values.size == 0:
        raise ValueError("no A/A pairs scored")
    return {
        "mean_abs": float(np.abs(values).mean()),
        "max_abs": float(np.abs(values).max()),
        "n_pairs": int(values.size),
        "values": values,
    }


# ---------------------------------------------------------------------------
# semantic continuity (click-loss analog)


def click_loss_analog(
    model,
    items,
    users,
    semid_table: dict,
    context_events,
    depths,
    *,
    temperature: float,
    bias: float,
    set_size: int = 5,
    pool_size: int = 200,
    seed: int = 0,
) -> dict:
    """Ground-truth CTR change from swapping one recommended item for a
    random alive item sharing its depth-k code prefix.

    For each context event the model scores a seeded candidate pool and
    keeps the top ``set_size`` as the recommendation set; the swap is
    evaluated with the label oracle, isolating semantic continuity from
    model noise. Swaps with no same-prefix alternative are skipped and
    counted.
    """
    from . import ranker  # local import; ranker depends on this module

    rng = np.random.default_rng([seed, 23])
    id_list = [int(x) for x in items.raw_ids]
    by_prefix: dict[int, dict] = {k: {} for k in depths}
    for idx, raw in enumerate(id_list):
        codes = semid_table.get(raw)
        if codes is None:
            continue
        for k in depths:
            by_prefix[k].setdefault(codes[:k], []).append(idx)

    out = {k: {"rates": [], "skipped": 0} for k in depths}
    for event in context_events:
        t = event.timestamp
        alive = np.flatnonzero(items.alive_mask(t))
        if alive.size < set_size + 1:
            continue
        pool = rng.choice(alive, size=min(pool_size, alive.size), replace=False)
        scores = []
        for idx in pool:
            cand = type(event)(
                event.event_id, t, event.user_id, int(items.raw_ids[idx]), 0, event.history
            )
            scores.append(ranker.forward(model, cand).probability)
        top = pool[np.argsort(-np.asarray(scores), kind="stable")[:set_size]]
        pref = users.preferences[event.user_id]
        base_ctrs = [
            ground_truth_ctr(pref, items.embeddings[i], temperature, bias) for i in top
        ]
        base = float(np.mean(base_ctrs))
        swap_pos = int(rng.integers(0, set_size))
        swap_idx = int(top[swap_pos])
        swap_codes = semid_table.get(int(items.raw_ids[swap_idx]))
        if swap_codes is None:
            continue
        for k in depths:
            candidates = [
                i
                for i in by_prefix[k].get(swap_codes[:k], ())
                if i != swap_idx and items.birth[i] <= t < items.death[i]
            ]
            if not candidates:
                out[k]["skipped"] += 1
                continue
            alt = candidates[int(rng.integers(0, len(candidates)))]
            new_ctr = ground_truth_ctr(pref, items.embeddings[alt], temperature, bias)
            mutated = base + (new_ctr - base_ctrs[swap_pos]) / set_size
            out[k]["rates"].append((mutated - base) / base)
    report = {}
    for k in depths:
        rates = out[k]["rates"]
        report[k] = {
            "click_loss_rate": float(np.mean(rates)) if rates else None,
            "abs_click_loss_rate": float(np.abs(np.mean(rates))) if rates else None,
            "n_swaps": len(rates),
            "skipped": out[k]["skipped"],
        }
    return report


# ---------------------------------------------------------------------------
# distribution exports


def gini(values) -> float:
    """Gini coefficient of a nonnegative count vector (0 = even)."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.size
    total = x.sum()
    if n == 0 or total == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float(((2.0 * ranks - n - 1.0) * x).sum() / (n * total))


def distribution_exports(items, train_events, semid_table: dict) -> dict:
    """Series for the skew, survival, and click-marginal figures.

    Returns arrays ready for plotting: the cumulative impression curve
    over popularity-sorted items, the initial-cohort survival curve per
    day, and marginal click counts in raw-ID versus full-code space with
    their Gini coefficients.
    """
    counts: dict[int, int] = {}
    clicks: dict[int, int] = {}
    for e in train_events:
        counts[e.item_id] = counts.get(e.item_id, 0) + 1
        if e.label == 1:
            clicks[e.item_id] = clicks.get(e.item_id, 0) + 1
    count_vec = np.array(
        [counts.get(int(x), 0) for x in items.raw_ids], dtype=np.float64
    )
    order = np.argsort(-count_vec, kind="stable")
    cum = np.cumsum(count_vec[order])
    total = cum[-1] if cum.size and cum[-1] > 0 else 1.0
    item_share = np.arange(1, len(order) + 1) / len(order)
    impression_share = cum / total

    cohort = items.birth == 0
    horizon_days = int(np.ceil(items.death.max() / DAY))
    days = np.arange(0, horizon_days + 1)
    survival = np.array([(items.death[cohort] > d * DAY).mean() for d in days])

    raw_clicks = np.array(sorted(clicks.values(), reverse=True), dtype=np.float64)
    semid_clicks: dict[tuple, int] = {}
    for item_id, n in clicks.items():
        codes = semid_table.get(item_id)
        if codes is not None:
            semid_clicks[codes] = semid_clicks.get(codes, 0) + n
    code_clicks = np.array(sorted(semid_clicks.values(), reverse=True), dtype=np.float64)
    return {
        "impression_curve": (item_share, impression_share),
        "survival_curve": (days, survival),
        "raw_click_counts": raw_clicks,
        "semid_click_counts": code_clicks,
        "gini_raw": gini(raw_clicks),
        "gini_semid": gini(code_clicks),
    }


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    """Named metrics plus run metadata; serializes deterministically."""

    kind: str
    metrics: dict
    metadata: dict = field(default_factory=dict)

    def to_json_text(self) -> str:
        payload = {"kind": self.kind, "metadata": self.metadata, "metrics": self.metrics}
        return json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n"

    def to_table_text(self) -> str:
        lines = [f"{self.kind} report"]
        for key in sorted(self.metadata):
            lines.append(f"  {key} = {self.metadata[key]}")
        width = max((len(k) for k in self.metrics), default=0)
        lines.append("")
        for name in sorted(self.metrics):
            value = self.metrics[name]
            if isinstance(value, float):
                value = f"{value:.6f}"
            lines.append(f"  {name:<{width}}  {value}")
        return "\n".join(lines) + "\n"

    def save(self, path_prefix) -> None:
        with open(str(path_prefix) + ".json", "w", encoding="utf-8") as fh:
            fh.write(self.to_json_text())
        with open(str(path_prefix) + ".txt", "w", encoding="utf-8") as fh:
            fh.write(self.to_table_text())


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def save_series(path, kind: str, meta: dict, columns, arrays) -> None:
    """Plot-ready delimited series file."""
    rows = ([repr(float(v)) for v in row] for row in zip(*arrays))
    write_table(path, kind, meta, list(columns), rows)
