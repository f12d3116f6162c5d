"""Batch construction, negative sampling regimes, ablation pair sets,
and train/test splits.

Every operation here is a pure function of its inputs and a seed;
repeated calls agree bit-exactly. No produced PairSet contains
self-pairs or orientation duplicates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import EmbeddingSet, PairRole, PairSet, SeededRng
from .errors import ConfigError, ParseError, SamplingError, SplitError


class SplitKind(enum.Enum):
    EDGE_SPLIT = "edge_split"
    NODE_SPLIT = "node_split"


@dataclass(frozen=True)
class SplitSpec:
    kind: SplitKind
    train_fraction: float = 0.7
    seed: int = 42

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )


@dataclass(frozen=True)
class NegativeMode:
    """Training negative regime: the other batch rows, k random partners
    per step, or (evaluation only) degree-matched sampling."""

    kind: str  # in_batch | random_k | degree_matched
    k: int | None = None

    def __post_init__(self):
        if self.kind not in ("in_batch", "random_k", "degree_matched"):
            raise ConfigError(f"unknown negative mode {self.kind!r}")
        if self.kind == "random_k":
            if self.k is None or self.k < 1:
                raise ConfigError("random_k requires k >= 1")

    @staticmethod
    def in_batch() -> "NegativeMode":
        return NegativeMode("in_batch")

    @staticmethod
    def random_k(k: int) -> "NegativeMode":
        return NegativeMode("random_k", k)


def make_batches(positives: PairSet, batch_size: int, epoch_seed: int):
    """Shuffle pair positions and cut consecutive chunks of batch_size.

    The trailing partial chunk is dropped so the contrastive normalizer
    stays constant across steps; when the whole set is smaller than one
    batch, a single short batch (>= 2 pairs) is used instead so small
    sets remain trainable.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    n = len(positives)
    perm = SeededRng(epoch_seed).permutation(n)
    n_full = n // batch_size
    if n_full == 0:
        return [perm] if n >= 2 else []
    return [
        perm[i * batch_size:(i + 1) * batch_size] for i in range(n_full)
    ]


def shuffle_ablation(positives: PairSet, rng: SeededRng) -> PairSet:
    """Permute the second pair column uniformly, keeping the first
    untouched; self-pairs and unordered duplicates created by the
    permutation are dropped."""
    if len(positives) < 2:
        raise ConfigError("need at least 2 pairs to shuffle")
    pairs = positives.pairs.copy()
    pairs[:, 1] = pairs[rng.permutation(len(positives)), 1]
    keep = pairs[:, 0] != pairs[:, 1]
    pairs = pairs[keep]
    canon = np.sort(pairs, axis=1)
    _, first = np.unique(canon, axis=0, return_index=True)
    pairs = pairs[np.sort(first)]
    return PairSet(pairs, positives.role, positives.n_entities)


def similar_positives_ablation(embeddings: EmbeddingSet, n_pairs: int) -> PairSet:
    """The n_pairs unordered pairs with highest cosine similarity,
    ties broken by (lower first index, lower second index)."""
    n = embeddings.n
    total = n * (n - 1) // 2
    if n_pairs > total:
        raise ConfigError(f"requested {n_pairs} pairs but only {total} exist")
    v = embeddings.vectors.astype(np.float64)
    sims = v @ v.T
    ia, ib = np.triu_indices(n, k=1)
    vals = sims[ia, ib]
    order = np.lexsort((ib, ia, -vals))[:n_pairs]
    pairs = np.stack([ia[order], ib[order]], axis=1)
    return PairSet(pairs, PairRole.TRAIN_POSITIVE, n)


def edge_split(positives: PairSet, spec: SplitSpec):
    """Random partition of pairs; entities may appear on both sides."""
    if spec.kind is not SplitKind.EDGE_SPLIT:
        raise ConfigError("edge_split requires SplitSpec(kind=EDGE_SPLIT)")
    n = len(positives)
    perm = SeededRng(spec.seed).permutation(n)
    n_train = int(np.floor(spec.train_fraction * n))
    train = PairSet(positives.pairs[perm[:n_train]], positives.role,
                    positives.n_entities)
    test = PairSet(positives.pairs[perm[n_train:]], PairRole.EVAL_POSITIVE,
                   positives.n_entities)
    return train, test


def node_split(positives: PairSet, n_entities: int, spec: SplitSpec):
    """Hold out entities entirely: train pairs touch only retained
    entities, test pairs touch at least one held-out entity."""
    if spec.kind is not SplitKind.NODE_SPLIT:
        raise ConfigError("node_split requires SplitSpec(kind=NODE_SPLIT)")
    perm = SeededRng(spec.seed).permutation(n_entities)
    n_held = int(np.floor((1.0 - spec.train_fraction) * n_entities))
    held = np.zeros(n_entities, dtype=bool)
    held[perm[:n_held]] = True
    touches_held = held[positives.pairs[:, 0]] | held[positives.pairs[:, 1]]
    train_pairs = positives.pairs[~touches_held]
    test_pairs = positives.pairs[touches_held]
    if len(train_pairs) == 0 or len(test_pairs) == 0:
        raise SplitError(
            f"node split produced {len(train_pairs)} train / "
            f"{len(test_pairs)} test pairs"
        )
    train = PairSet(train_pairs, positives.role, n_entities)
    test = PairSet(test_pairs, PairRole.EVAL_POSITIVE, n_entities)
    held_out = frozenset(int(i) for i in np.flatnonzero(held))
    return train, test, held_out


def split_test_by_exposure(test: PairSet, held_out: frozenset):
    """Partition node-split test pairs into (one seen endpoint, both
    endpoints unseen); both views are reported since either reading of
    the cold-start protocol is defensible."""
    held = np.zeros(test.n_entities, dtype=bool)
    held[list(held_out)] = True
    both = held[test.pairs[:, 0]] & held[test.pairs[:, 1]]
    mixed_pairs = test.pairs[~both]
    unseen_pairs = test.pairs[both]
    mixed = PairSet(mixed_pairs, test.role, test.n_entities) if len(mixed_pairs) else None
    unseen = PairSet(unseen_pairs, test.role, test.n_entities) if len(unseen_pairs) else None
    return mixed, unseen


# sampling chunk size for the rejection loops
_CHUNK = 8192


def sample_eval_negatives(positives: PairSet, n_entities: int,
                          multiplier: int, cap: int, rng: SeededRng) -> PairSet:
    """Uniform negatives: min(multiplier * |positives|, cap) unordered
    pairs drawn from the non-positive, non-self pairs, deduplicated in
    both orientations.

    Rejection sampling with a documented retry bound of 200 draws per
    requested pair; when the request is a large fraction of the pairs
    that exist, falls back to exhaustive enumeration so dense graphs
    still sample exactly.
    """
    if multiplier < 1:
        raise ConfigError(f"multiplier must be >= 1, got {multiplier}")
    target = min(multiplier * len(positives), cap)
    total = n_entities * (n_entities - 1) // 2
    available = total - len(positives)
    if available < target:
        raise SamplingError(
            f"need {target} negatives but only {available} non-positive "
            f"pairs exist"
        )
    pos_keys = positives.canonical_key_set()

    if total <= 4_000_000 and target > available // 4:
        # dense regime: enumerate every non-positive pair and choose
        ia, ib = np.triu_indices(n_entities, k=1)
        keys = ia.astype(np.int64) * n_entities + ib
        pos_arr = np.fromiter(
            (a * n_entities + b for a, b in pos_keys), dtype=np.int64,
            count=len(pos_keys),
        )
        mask = ~np.isin(keys, pos_arr)
        ia, ib = ia[mask], ib[mask]
        pick = rng.permutation(len(ia))[:target]
        pick.sort()
        pairs = np.stack([ia[pick], ib[pick]], axis=1)
        return PairSet(pairs, PairRole.EVAL_NEGATIVE, n_entities)

    chosen: set = set()
    out = np.empty((target, 2), dtype=np.int64)
    n_out = 0
    draws = 0
    max_draws = 200 * target + 10_000
    while n_out < target:
        if draws >= max_draws:
            raise SamplingError(
                f"retry bound exceeded after {draws} draws "
                f"({n_out}/{target} sampled)"
            )
        cand = rng.integers(0, n_entities, size=(_CHUNK, 2))
        draws += _CHUNK
        cand = cand[cand[:, 0] != cand[:, 1]]
        cand.sort(axis=1)
        for a, b in cand:
            key = (int(a), int(b))
            if key in pos_keys or key in chosen:
                continue
            chosen.add(key)
            out[n_out] = key
            n_out += 1
            if n_out == target:
                break
    return PairSet(out, PairRole.EVAL_NEGATIVE, n_entities)


def degree_vector(graph, ids) -> np.ndarray:
    """Per-index degree array for an id list, zero for absent entities."""
    return np.array([graph.degree_of(i) for i in ids], dtype=np.int64)


def _degree_bin(deg: np.ndarray) -> np.ndarray:
    """Logarithmic degree bins with power-of-two edges; degree zero gets
    its own bin below the rest."""
    out = np.full(deg.shape, -1, dtype=np.int64)
    pos = deg >= 1
    out[pos] = np.floor(np.log2(deg[pos])).astype(np.int64)
    return out


def sample_degree_matched_negatives(positives: PairSet, degrees: np.ndarray,
                                    rng: SeededRng) -> PairSet:
    """One negative per positive whose endpoint degrees fall in the same
    power-of-two degree bins as the positive's endpoints.

    After 100 rejections for a pair, the search widens to the nearest
    nonempty bins (then to uniform), so the call always makes progress.
    When no fallback triggers, the matched-negative bin histogram equals
    the positive histogram exactly.
    """
    n_entities = positives.n_entities
    degrees = np.asarray(degrees, dtype=np.int64)
    bins = _degree_bin(degrees)
    present = sorted(set(int(b) for b in bins))
    members = {b: np.flatnonzero(bins == b) for b in present}
    pos_keys = positives.canonical_key_set()
    chosen: set = set()
    out = np.empty((len(positives), 2), dtype=np.int64)

    def nearest_bins(b):
        return sorted(present, key=lambda x: (abs(x - b), x))

    pair_bins = bins[positives.pairs]
    for row, (ba, bb) in enumerate(pair_bins):
        placed = False
        for widen, (ca_bin, cb_bin) in enumerate(
            [(ba, bb)] + [(wa, wb) for wa in nearest_bins(ba)
                          for wb in nearest_bins(bb)]
        ):
            pool_a = members.get(int(ca_bin))
            pool_b = members.get(int(cb_bin))
            if pool_a is None or pool_b is None:
                continue
            tries = 100 if widen == 0 else 50
            for _ in range(tries):
                a = int(pool_a[rng.integers(0, len(pool_a))])
                b = int(pool_b[rng.integers(0, len(pool_b))])
                if a == b:
                    continue
                key = (a, b) if a < b else (b, a)
                if key in pos_keys or key in chosen:
                    continue
                chosen.add(key)
                out[row] = key
                placed = True
                break
            if placed:
                break
        if not placed:
            # uniform last resort; guarantees progress on tiny graphs
            while True:
                a = int(rng.integers(0, n_entities))
                b = int(rng.integers(0, n_entities))
                if a == b:
                    continue
                key = (a, b) if a < b else (b, a)
                if key in pos_keys or key in chosen:
                    continue
                chosen.add(key)
                out[row] = key
                break
    return PairSet(out, PairRole.EVAL_NEGATIVE, n_entities)


def save_pairs(path, pairset: PairSet, ids) -> None:
    """Order-preserving TSV of id_a, id_b, role for audit and replay."""
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in pairset.pairs:
            fh.write(f"{ids[a]}\t{ids[b]}\t{pairset.role.value}\n")


def load_pairs(path, embeddings: EmbeddingSet) -> PairSet:
    pairs = []
    role = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError("expected id_a<TAB>id_b<TAB>role", line=lineno)
            id_a, id_b, role_str = parts
            try:
                row_role = PairRole(role_str)
            except ValueError as exc:
                raise ParseError(f"unknown role {role_str!r}", line=lineno) from exc
            if role is None:
                role = row_role
            elif role is not row_role:
                raise ParseError("mixed roles in one pair file", line=lineno)
            pairs.append((embeddings.index_of(id_a), embeddings.index_of(id_b)))
    if role is None:
        role = PairRole.TRAIN_POSITIVE
    return PairSet(np.array(pairs, dtype=np.int64).reshape(-1, 2), role,
                   embeddings.n)
