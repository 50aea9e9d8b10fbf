"""Shared test oracles, independent of the implementation under test."""

import numpy as np


def cluster_purity(cluster_labels, true_labels) -> float:
    """Weighted purity: dominant-true-label count per cluster over total."""
    clusters = {}
    for c, t in zip(cluster_labels, true_labels):
        clusters.setdefault(c, []).append(t)
    hits = 0
    for members in clusters.values():
        _, counts = np.unique(members, return_counts=True)
        hits += counts.max()
    return hits / len(list(cluster_labels))


def nearest_index_bruteforce(codebook, vector):
    """Plain linear scan nearest-codeword search (tie: smallest index)."""
    best, best_d = 0, float("inf")
    for i, row in enumerate(codebook):
        d = float(sum((a - b) ** 2 for a, b in zip(row, vector)))
        if d < best_d:
            best, best_d = i, d
    return best


def gmm_hierarchy_embeddings(n, dim, branching, scales, seed):
    """Independent nested-Gaussian generator for purity checks."""
    rng = np.random.default_rng(seed)
    b1, b2, b3 = branching
    s0, s1, s2, s3 = scales
    top = rng.normal(0, s0, (b1, dim))
    mid = np.repeat(top, b2, axis=0) + rng.normal(0, s1, (b1 * b2, dim))
    leaf = np.repeat(mid, b3, axis=0) + rng.normal(0, s2, (b1 * b2 * b3, dim))
    leaf_idx = rng.integers(0, b1 * b2 * b3, size=n)
    emb = leaf[leaf_idx] + rng.normal(0, s3, (n, dim))
    top_idx = leaf_idx // (b2 * b3)
    return emb, top_idx, leaf_idx
