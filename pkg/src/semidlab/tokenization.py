"""Mappings from identifiers to embedding-table row indices.

Three families: individual embeddings (one row per raw ID), random
hashing (seeded integer mix modulo the table size), and Semantic ID
lookups that expand an item's hierarchical codes into one or more rows
via a token parameterization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

log = logging.getLogger(__name__)

VARIANTS = ("trigram", "fourgram", "all_bigrams", "prefix_ngram")


class ConfigurationError(ValueError):
    """Parameterization and code length are incompatible."""


@dataclass(frozen=True)
class TokenParameterization:
    """Rule turning a code sequence into pre-hash table indices.

    ``codebook_size`` is the number of distinct values per code position;
    ``prefix_depth`` only applies to the prefix-ngram variant.
    """

    variant: str
    codebook_size: int
    prefix_depth: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown parameterization variant {self.variant!r}")
        if self.codebook_size < 2:
            raise ConfigurationError("codebook_size must be at least 2")
        if self.variant == "prefix_ngram" and self.prefix_depth < 1:
            raise ConfigurationError("prefix_ngram needs prefix_depth >= 1")

    def output_count(self, levels: int) -> int:
        """Number of indices emitted for a length-``levels`` code."""
        if self.variant == "trigram":
            if levels < 3:
                raise ConfigurationError(f"trigram needs at least 3 code levels, got {levels}")
            return 1
        if self.variant == "fourgram":
            if levels < 4:
                raise ConfigurationError(f"fourgram needs at least 4 code levels, got {levels}")
            return 1
        if self.variant == "all_bigrams":
            if levels < 2:
                raise ConfigurationError(f"all_bigrams needs at least 2 code levels, got {levels}")
            return levels - 1
        if self.prefix_depth > levels:
            raise ConfigurationError(
                f"prefix_ngram depth {self.prefix_depth} exceeds code length {levels}"
            )
        return self.prefix_depth


def parameterize(codes, p: TokenParameterization) -> list[int]:
    """Expand a code sequence into pre-hash indices.

    Prefix-ngram emits one index per prefix depth 1..n; each depth-i
    index enumerates all K^i possible prefixes of that depth, offset past
    the shallower depths, so deeper prefixes never collide with shallower
    ones before table fitting.
    """
    codes = tuple(int(c) for c in codes)
    k = p.codebook_size
    for c in codes:
        if not 0 <= c < k:
            raise ConfigurationError(f"code {c} outside [0, {k})")
    g = p.output_count(len(codes))
    if p.variant == "trigram":
        return [k * k * codes[0] + k * codes[1] + codes[2]]
    if p.variant == "fourgram":
        return [k**3 * codes[0] + k * k * codes[1] + k * codes[2] + codes[3]]
    if p.variant == "all_bigrams":
        return [k * k * i + k * codes[i] + codes[i + 1] for i in range(len(codes) - 1)]
    out = []
    for depth in range(1, g + 1):
        acc = 0
        for t in range(depth):
            acc += k ** (depth - 1 - t) * (codes[t] + 1)
        out.append(acc - 1)
    return out


def prefix_depth_range(k: int, depth: int) -> tuple[int, int]:
    """Half-open range of pre-hash indices emitted at one prefix depth."""
    lo = (k**depth - k) // (k - 1)
    hi = (k ** (depth + 1) - k) // (k - 1)
    return lo, hi


def fit_to_table(indices, table_size: int, output_count: int) -> list[int]:
    """Fold pre-hash indices into table rows without cross-position collisions.

    Position g (0-based) owns the disjoint row block
    [g*floor(H/G), (g+1)*floor(H/G)) and folds its index into that block
    by modulo, so two different positions can never share a row.
    """
    indices = list(indices)
    if len(indices) != output_count:
        raise ConfigurationError(f"expected {output_count} indices, got {len(indices)}")
    if table_size < output_count:
        raise ConfigurationError(f"table size {table_size} smaller than position count {output_count}")
    block = table_size // output_count
    return [g * block + (int(ix) % block) for g, ix in enumerate(indices)]


_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """Finalizer of the splitmix64 generator; a bijection on 64-bit ints."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RandomHash:
    """Seeded well-mixing hash of raw IDs into [0, H).

    The seed is mixed once and xored into every key, so the map is a
    fixed pure function for a given (seed, H) across processes.
    """

    kind = "random_hash"

    def __init__(self, table_size: int, seed: int = 0):
        if table_size < 1:
            raise ConfigurationError("table size must be positive")
        self.table_size = int(table_size)
        self.seed_mix = _splitmix64(int(seed) & _MASK64)
        self.output_count = 1

    def rows(self, raw_id: int) -> list[int]:
        return [_splitmix64((int(raw_id) & _MASK64) ^ self.seed_mix) % self.table_size]


class IndividualEmbedding:
    """One dedicated row per raw ID seen in training.

    IDs outside the training vocabulary map to a single reserved row at
    the end of the table, which never receives gradient during training.
    """

    kind = "individual"

    def __init__(self, vocabulary):
        ids = sorted({int(x) for x in vocabulary})
        self._row = {x: i for i, x in enumerate(ids)}
        self.unseen_row = len(ids)
        self.table_size = len(ids) + 1
        self.output_count = 1

    def rows(self, raw_id: int) -> list[int]:
        return [self._row.get(int(raw_id), self.unseen_row)]


class SemanticIdLookup:
    """Semantic ID lookup: assignment table, then parameterize, then fit.

    Items missing from the assignment table fall back to the all-zeros
    code with a logged warning; the simulator assigns codes at item
    birth, so hitting the fallback indicates a misconfigured run.
    """

    kind = "semantic_id"

    def __init__(self, id_table, parameterization: TokenParameterization, table_size: int):
        if not id_table:
            raise ConfigurationError("empty Semantic ID table")
        lengths = {len(c) for c in id_table.values()}
        if len(lengths) != 1:
            raise ConfigurationError(f"inconsistent code lengths in table: {sorted(lengths)}")
        self.levels = lengths.pop()
        self.parameterization = parameterization
        self.output_count = parameterization.output_count(self.levels)
        if table_size < self.output_count:
            raise ConfigurationError("table size smaller than index count")
        self.table_size = int(table_size)
        self._table = {int(k): tuple(int(c) for c in v) for k, v in id_table.items()}
        self._fallback = (0,) * self.levels

    def codes(self, raw_id: int):
        codes = self._table.get(int(raw_id))
        if codes is None:
            log.warning("raw id %d missing from Semantic ID table; using all-zeros code", raw_id)
            return self._fallback
        return codes

    def rows(self, raw_id: int) -> list[int]:
        pre = parameterize(self.codes(raw_id), self.parameterization)
        return fit_to_table(pre, self.table_size, self.output_count)
