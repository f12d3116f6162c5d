"""Shared domain types and deterministic pseudo-randomness.

Types are immutable after construction and safe to share across threads.
All randomness in the package flows through SeededRng, which pins a fixed,
named generator (Philox 4x64, counter-based) so that a given seed yields
the same stream on every platform. Parallel callers derive independent
child generators with SeededRng.child(); never share one instance.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NormalizationError

# 64-bit training dtype is reserved for gradient checking; production
# training tensors are float32, evaluation statistics float64.
TRAIN_DTYPE = np.float32
EVAL_DTYPE = np.float64

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(x: int) -> int:
    """One splitmix64 step; the documented child-seed derivation."""
    x = (int(x) + _SPLITMIX_GAMMA) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class SeededRng:
    """Deterministic random stream backed by the Philox 4x64 generator.

    Same seed => identical draws on all platforms and numpy versions that
    implement Philox (the bit stream is part of numpy's stability
    guarantee). Child generators are derived as
    ``child_seed = splitmix64(splitmix64(seed) ^ stream_index)`` so that
    independent streams never overlap.
    """

    def __init__(self, seed: int):
        if not (0 <= int(seed) <= _MASK64):
            raise ValueError(f"seed must be a u64, got {seed!r}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, stream_index: int) -> "SeededRng":
        """Derive an independent generator for a named substream."""
        return SeededRng(
            splitmix64(splitmix64(self.seed) ^ (int(stream_index) & _MASK64))
        )

    # Thin pass-throughs; keeping them explicit documents what the
    # package actually consumes from the generator.
    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high=high, size=size)

    def random(self, size=None):
        return self.generator.random(size=size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size=size)

    def shuffle(self, x):
        self.generator.shuffle(x)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm.

    Raises NormalizationError on any (near-)zero row, which signals a
    degenerate embedding upstream rather than silently producing NaNs.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        n = np.linalg.norm(v)
        if n < 1e-300 or not np.isfinite(n):
            raise NormalizationError("cannot normalize zero or non-finite vector")
        return v / n
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms < 1e-300) or not np.all(np.isfinite(norms)):
        bad = int(np.argmin(norms))
        raise NormalizationError(f"row {bad} has zero or non-finite norm")
    return v / norms


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit vectors (their cosine similarity)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


@dataclass(frozen=True)
class EmbeddingSet:
    """Entity identifiers plus a row-aligned matrix of unit vectors.

    ``vectors[i]`` is the L2-normalized feature vector of ``ids[i]``.
    ``pca_mean`` / ``pca_components`` (raw_dim and raw_dim x dim) are kept
    when the set came out of a PCA projection so held-out entities can be
    projected identically later.
    """

    ids: tuple
    vectors: np.ndarray
    pca_mean: np.ndarray | None = None
    pca_components: np.ndarray | None = None
    variance_explained: float | None = None
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        vecs = np.asarray(self.vectors)
        if len(self.ids) != vecs.shape[0]:
            raise DimensionError(
                f"{len(self.ids)} ids for {vecs.shape[0]} vector rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("entity ids must be unique")
        norms = np.linalg.norm(vecs.astype(np.float64), axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise NormalizationError("embedding rows must be unit-norm (1e-6)")
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(
            self, "_index", {eid: i for i, eid in enumerate(self.ids)}
        )

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def index_of(self, entity_id: str) -> int:
        return self._index[entity_id]

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._index


@dataclass(frozen=True)
class AssociationGraph:
    """Undirected weighted association edges with per-channel scores.

    ``edges`` maps each unordered id pair (stored with id_a < id_b) to a
    dict of channel-name -> integer score in [0, 1000]. ``degree`` counts
    filtered edges incident to each entity; entities absent from the map
    have degree zero.
    """

    edges: dict
    degree: dict

    @staticmethod
    def from_edge_list(edge_list) -> "AssociationGraph":
        """Build from (id_a, id_b, channels) triples, deduplicating
        unordered pairs and dropping self-loops."""
        edges = {}
        for id_a, id_b, channels in edge_list:
            if id_a == id_b:
                continue
            key = (id_a, id_b) if id_a < id_b else (id_b, id_a)
            if key not in edges:
                edges[key] = dict(channels)
        degree: dict = {}
        for a, b in edges:
            degree[a] = degree.get(a, 0) + 1
            degree[b] = degree.get(b, 0) + 1
        return AssociationGraph(edges=edges, degree=degree)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degree_of(self, entity_id: str) -> int:
        return self.degree.get(entity_id, 0)


class PairRole(enum.Enum):
    TRAIN_POSITIVE = "train_positive"
    EVAL_POSITIVE = "eval_positive"
    EVAL_NEGATIVE = "eval_negative"


@dataclass(frozen=True)
class PairSet:
    """Ordered list of (index_a, index_b) pairs into an EmbeddingSet.

    Pairs are deduplicated in both orientations and never contain
    self-pairs; construction enforces both.
    """

    pairs: np.ndarray
    role: PairRole
    n_entities: int

    def __post_init__(self):
        arr = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if arr.size:
            if arr.min() < 0 or arr.max() >= self.n_entities:
                raise IndexError("pair index out of range")
            if np.any(arr[:, 0] == arr[:, 1]):
                raise ValueError("self-pairs are not allowed")
            canon = np.sort(arr, axis=1)
            uniq = np.unique(canon, axis=0)
            if uniq.shape[0] != arr.shape[0]:
                raise ValueError("pairs duplicated across orientations")
        object.__setattr__(self, "pairs", arr)

    def __len__(self) -> int:
        return int(self.pairs.shape[0])

    def canonical_key_set(self) -> set:
        """Set of (min, max) tuples for membership tests."""
        canon = np.sort(self.pairs, axis=1)
        return {(int(a), int(b)) for a, b in canon}

    def with_role(self, role: PairRole) -> "PairSet":
        return PairSet(self.pairs.copy(), role, self.n_entities)
