"""Deterministic synthetic scenario generator.

Each scenario plants one operating regime at desk scale so the training
recipe's success conditions and failure modes can be exercised without
real data:

* latent_signal - entities carry a community component that a hidden
  two-layer map exposes but raw cosine does not: associated pairs have
  near-zero cosine on average while an oracle scoring in the hidden
  map's output space separates them almost perfectly.
* clustered_positives - associations live inside tight embedding
  clusters (plus a thin slice between paired clusters), the regime
  where in-batch negatives poison training and random negatives fix it.
* degree_confound - a small high-activity entity subset carries most
  pairs and activity is readable from the embedding, so frequency
  structure dominates; a sliver of genuinely structured low-degree
  pairs hides underneath.
* no_signal - associations are independent of the embeddings.

Generation is a pure function of the spec; outputs satisfy every core
invariant (unit rows, deduplicated undirected pairs, no self-loops).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import (
    AssociationGraph,
    EmbeddingSet,
    PairRole,
    PairSet,
    SeededRng,
)
from .errors import ConfigError
from .model import gelu

SYNTH_CHANNEL = "combined_score"
SYNTH_SCORE = 999


class ScenarioKind(enum.Enum):
    LATENT_SIGNAL = "latent_signal"
    CLUSTERED_POSITIVES = "clustered_positives"
    DEGREE_CONFOUND = "degree_confound"
    NO_SIGNAL = "no_signal"


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind
    n_entities: int = 2000
    dim: int = 50
    n_pairs: int = 20000
    noise_level: float = 0.1
    seed: int = 42

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if self.n_entities < 4:
            raise ConfigError(f"n_entities must be >= 4, got {self.n_entities}")
        if self.noise_level < 0:
            raise ConfigError(f"noise_level must be >= 0, got {self.noise_level}")
        cap = self.n_entities * (self.n_entities - 1) // 2
        if not (1 <= self.n_pairs <= cap):
            raise ConfigError(
                f"n_pairs must be in [1, {cap}], got {self.n_pairs}"
            )


def _ids(n: int):
    return tuple(f"g{i:05d}" for i in range(n))


def _random_orthonormal(rng: SeededRng, d: int, k: int) -> np.ndarray:
    """k orthonormal directions in R^d (rows), deterministic in rng."""
    g = rng.standard_normal((d, k))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
    return q.T[:k]


def _finish_embeddings(raw: np.ndarray, noise_level: float, rng: SeededRng):
    d = raw.shape[1]
    if noise_level > 0:
        raw = raw + noise_level * rng.standard_normal(raw.shape) / np.sqrt(d)
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _dedup_pairs(pairs: np.ndarray) -> np.ndarray:
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    canon = np.sort(pairs, axis=1)
    _, first = np.unique(canon, axis=0, return_index=True)
    return canon[np.sort(first)]


def _graph_from_pairs(pairs: np.ndarray, ids) -> AssociationGraph:
    return AssociationGraph.from_edge_list(
        (ids[a], ids[b], {SYNTH_CHANNEL: SYNTH_SCORE}) for a, b in pairs
    )


def _sample_within_group_pairs(groups, n_pairs, rng: SeededRng) -> np.ndarray:
    """Uniform sample of n_pairs distinct unordered pairs drawn inside
    the given index groups."""
    all_pairs = []
    for members in groups:
        m = len(members)
        if m < 2:
            continue
        ia, ib = np.triu_indices(m, k=1)
        all_pairs.append(np.stack([members[ia], members[ib]], axis=1))
    all_pairs = np.concatenate(all_pairs, axis=0)
    if n_pairs > len(all_pairs):
        raise ConfigError(
            f"{n_pairs} pairs requested but only {len(all_pairs)} exist "
            f"inside the planted groups"
        )
    pick = rng.permutation(len(all_pairs))[:n_pairs]
    pick.sort()
    return all_pairs[pick]


def _latent_signal(spec: ScenarioSpec, rng: SeededRng):
    n, d = spec.n_entities, spec.dim
    n_comm = min(40, max(4, d - 10, 4), d - 2)
    n_comm = min(n_comm, n // 4)
    beta = 0.22
    hidden_width = 16

    dirs = _random_orthonormal(rng.child(0), d, n_comm)
    member_of = rng.child(1).integers(0, n_comm, size=n)
    # noise lives in the orthogonal complement of the community directions
    g = rng.child(2).standard_normal((n, d))
    g -= (g @ dirs.T) @ dirs
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    raw = beta * dirs[member_of] + np.sqrt(1.0 - beta * beta) * g
    vectors = _finish_embeddings(raw, spec.noise_level, rng.child(3))

    groups = [np.flatnonzero(member_of == k) for k in range(n_comm)]
    pairs = _sample_within_group_pairs(groups, spec.n_pairs, rng.child(4))

    # the hidden two-layer map: first layer reads the community
    # projections, second mixes them; shallower than the trained model
    w1 = 4.0 * dirs  # (n_comm, d)
    b1 = np.zeros(n_comm)
    w2 = rng.child(5).standard_normal((hidden_width, n_comm)) / np.sqrt(n_comm)
    info = {
        "kind": spec.kind.value,
        "communities": n_comm,
        "signal_strength": beta,
        "member_of": member_of,
        "hidden_map": {"w1": w1, "b1": b1, "w2": w2},
    }
    return vectors, pairs, info


def hidden_map_scores(info: dict, embeddings: EmbeddingSet,
                      pairs: np.ndarray) -> np.ndarray:
    """Oracle association score: cosine in the hidden map's output
    space. Only meaningful for latent_signal scenarios."""
    hm = info["hidden_map"]
    z = gelu(embeddings.vectors.astype(np.float64) @ hm["w1"].T + hm["b1"]) @ hm["w2"].T
    z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    return np.sum(z[pairs[:, 0]] * z[pairs[:, 1]], axis=1)


def _clustered_positives(spec: ScenarioSpec, rng: SeededRng):
    n, d = spec.n_entities, spec.dim
    n_clusters = min(10, d, n // 8)
    if n_clusters % 2:
        n_clusters -= 1
    if n_clusters < 2:
        raise ConfigError("clustered_positives needs room for >= 2 clusters")
    spread = 0.5
    cross_fraction = 0.09

    centers = _random_orthonormal(rng.child(0), d, n_clusters)
    # two dominant clusters: batches then hold enough same-cluster rows
    # for the in-batch regime to poison training
    weights = np.full(n_clusters, 0.5 / max(n_clusters - 2, 1))
    weights[:2] = 0.25
    member_of = np.searchsorted(
        np.cumsum(weights / weights.sum()), rng.child(1).random(n),
        side="right",
    ).clip(0, n_clusters - 1)
    # noise direction has unit expected norm, so spread ~ tangent radius
    raw = centers[member_of] + spread * rng.child(3).standard_normal((n, d)) / np.sqrt(d)
    vectors = _finish_embeddings(raw, spec.noise_level, rng.child(4))

    n_cross = int(round(cross_fraction * spec.n_pairs))
    n_within = spec.n_pairs - n_cross
    groups = [np.flatnonzero(member_of == k) for k in range(n_clusters)]
    within = _sample_within_group_pairs(groups, n_within, rng.child(5))

    # cross pairs connect paired clusters (2k <-> 2k+1)
    cross = []
    crng = rng.child(6)
    seen = {(int(a), int(b)) for a, b in within}
    guard = 0
    while len(cross) < n_cross and guard < 100 * n_cross + 1000:
        guard += 1
        k = int(crng.integers(0, n_clusters // 2))
        ga, gb = groups[2 * k], groups[2 * k + 1]
        if len(ga) == 0 or len(gb) == 0:
            continue
        a = int(ga[crng.integers(0, len(ga))])
        b = int(gb[crng.integers(0, len(gb))])
        key = (a, b) if a < b else (b, a)
        if key in seen:
            continue
        seen.add(key)
        cross.append(key)
    pairs = np.concatenate(
        [within, np.array(cross, dtype=np.int64).reshape(-1, 2)], axis=0
    )
    info = {
        "kind": spec.kind.value,
        "clusters": n_clusters,
        "spread": spread,
        "cross_fraction": cross_fraction,
        "member_of": member_of,
    }
    return vectors, pairs, info


def _degree_confound(spec: ScenarioSpec, rng: SeededRng):
    n, d = spec.n_entities, spec.dim
    genuine_fraction = 0.0125
    activity_gain = 1.0
    beta_g = 0.80
    participants_per_community = 8

    n_hub_pairs = spec.n_pairs - int(round(genuine_fraction * spec.n_pairs))
    n_active = max(10, int(round(spec.n_pairs / 100)))
    if n_active * (n_active - 1) // 2 < 1.15 * n_hub_pairs:
        n_active = int(np.ceil((1 + np.sqrt(1 + 8.0 * 1.15 * n_hub_pairs)) / 2)) + 5
    if n_active >= n // 2:
        raise ConfigError("degree_confound needs n_entities >> n_pairs/100")

    perm = rng.child(0).permutation(n)
    active = perm[:n_active]
    rest = perm[n_active:]

    # activity: heavy-tailed, readable from the embedding through a
    # single direction
    a_levels = rng.child(1).uniform(0.0, 1.0, size=n_active) ** 2.0
    a_levels = 0.25 + 0.75 * a_levels
    u = _random_orthonormal(rng.child(2), d, 1)[0]
    raw = rng.child(3).standard_normal((n, d))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    raw -= np.outer(raw @ u, u)  # keep the activity axis clean
    raw[active] += activity_gain * a_levels[:, None] * u
    activity = np.zeros(n)
    activity[active] = a_levels

    # genuinely structured low-degree communities, deliberately larger
    # than the set of entities that ever appear in a pair: the
    # unannotated members are the incomplete-annotation "holes" that
    # uniform negatives keep hitting
    n_comm = min(11, max(4, d // 5))
    comm_size = min(90, max(participants_per_community + 4,
                            len(rest) // n_comm))
    genuine_entities = rest[: n_comm * comm_size]
    comm_of = np.repeat(np.arange(n_comm), comm_size)
    comm_dirs = _random_orthonormal(rng.child(4), d, n_comm)
    raw_g = raw[genuine_entities]
    raw_g -= (raw_g @ comm_dirs.T) @ comm_dirs
    raw_g /= np.linalg.norm(raw_g, axis=1, keepdims=True)
    raw[genuine_entities] = (
        beta_g * comm_dirs[comm_of] + np.sqrt(1 - beta_g**2) * raw_g
    )
    vectors = _finish_embeddings(raw, spec.noise_level, rng.child(6))

    n_genuine = int(round(genuine_fraction * spec.n_pairs))
    groups = [
        genuine_entities[comm_of == k][:participants_per_community]
        for k in range(n_comm)
    ]
    genuine_pairs = _sample_within_group_pairs(groups, n_genuine, rng.child(7))

    # hub pairs among actives with endpoint probability ~ activity
    n_hub = spec.n_pairs - n_genuine
    cumw = np.cumsum(a_levels / a_levels.sum())
    hrng = rng.child(8)
    seen = {(int(a), int(b)) for a, b in genuine_pairs}
    hub = []
    guard = 0
    while len(hub) < n_hub:
        guard += 1
        if guard > 400 * n_hub + 10_000:
            raise ConfigError(
                "degree_confound could not place hub pairs; "
                "n_pairs too dense for the active set"
            )
        i = int(active[_weighted_draw(hrng, cumw)])
        j = int(active[_weighted_draw(hrng, cumw)])
        if i == j:
            continue
        key = (i, j) if i < j else (j, i)
        if key in seen:
            continue
        seen.add(key)
        hub.append(key)
    pairs = np.concatenate(
        [np.array(hub, dtype=np.int64).reshape(-1, 2), genuine_pairs], axis=0
    )
    info = {
        "kind": spec.kind.value,
        "n_active": n_active,
        "activity": activity,
        "genuine_fraction": genuine_fraction,
        "genuine_entities": genuine_entities,
        "genuine_communities": n_comm,
    }
    return vectors, pairs, info


def _weighted_draw(rng: SeededRng, cumw: np.ndarray) -> int:
    r = rng.random()
    return int(min(np.searchsorted(cumw, r, side="right"), len(cumw) - 1))


def _no_signal(spec: ScenarioSpec, rng: SeededRng):
    # Fingerprint regime: many entities collide onto a small vocabulary
    # of embedding prototypes (as structurally similar compounds share a
    # fingerprint), so no function of the embedding can recover the
    # independently drawn pair labels.
    n, d = spec.n_entities, spec.dim
    n_prototypes = max(10, min(32, n // 64))
    protos = rng.child(0).standard_normal((n_prototypes, d))
    assign = rng.child(3).integers(0, n_prototypes, size=n)
    vectors = _finish_embeddings(protos[assign], spec.noise_level, rng.child(1))
    prng = rng.child(2)
    seen = set()
    pairs = []
    while len(pairs) < spec.n_pairs:
        cand = prng.integers(0, n, size=(4096, 2))
        for a, b in cand:
            if a == b:
                continue
            key = (int(a), int(b)) if a < b else (int(b), int(a))
            if key in seen:
                continue
            seen.add(key)
            pairs.append(key)
            if len(pairs) == spec.n_pairs:
                break
    info = {"kind": spec.kind.value}
    return vectors, np.array(pairs, dtype=np.int64), info


_BUILDERS = {
    ScenarioKind.LATENT_SIGNAL: _latent_signal,
    ScenarioKind.CLUSTERED_POSITIVES: _clustered_positives,
    ScenarioKind.DEGREE_CONFOUND: _degree_confound,
    ScenarioKind.NO_SIGNAL: _no_signal,
}


def generate(spec: ScenarioSpec):
    """Build a scenario: (EmbeddingSet, train-positive PairSet,
    AssociationGraph, info).

    info carries the planted parameters (community assignments, hidden
    map weights, activity levels) for oracle checks and the scenario
    manifest; it is not part of what a trained model may consult.
    """
    rng = SeededRng(spec.seed)
    vectors, pairs, info = _BUILDERS[spec.kind](spec, rng)
    pairs = _dedup_pairs(np.asarray(pairs, dtype=np.int64))
    ids = _ids(spec.n_entities)
    embeddings = EmbeddingSet(ids=ids, vectors=vectors)
    positives = PairSet(pairs, PairRole.TRAIN_POSITIVE, spec.n_entities)
    graph = _graph_from_pairs(pairs, ids)
    return embeddings, positives, graph, info


def write_scenario_files(embeddings: EmbeddingSet, positives: PairSet,
                         out_dir, spec: ScenarioSpec, info: dict):
    """Emit the scenario in the ingest module's external formats plus a
    manifest, so the full file-based pipeline can run end to end."""
    import json
    import os

    os.makedirs(out_dir, exist_ok=True)
    emb_path = os.path.join(out_dir, "embeddings.tsv")
    with open(emb_path, "w", encoding="utf-8") as fh:
        for i, eid in enumerate(embeddings.ids):
            row = "\t".join(f"{v:.9g}" for v in embeddings.vectors[i])
            fh.write(f"{eid}\t{row}\n")
    assoc_path = os.path.join(out_dir, "associations.tsv")
    with open(assoc_path, "w", encoding="utf-8") as fh:
        fh.write(f"protein1 protein2 {SYNTH_CHANNEL}\n")
        for a, b in positives.pairs:
            fh.write(
                f"{embeddings.ids[a]} {embeddings.ids[b]} {SYNTH_SCORE}\n"
            )
    manifest = {
        "scenario": {
            "kind": spec.kind.value,
            "n_entities": spec.n_entities,
            "dim": spec.dim,
            "n_pairs": spec.n_pairs,
            "noise_level": spec.noise_level,
            "seed": spec.seed,
        },
        "planted": {
            k: (v.tolist() if isinstance(v, np.ndarray) else
                {kk: vv.tolist() for kk, vv in v.items()}
                if isinstance(v, dict) else v)
            for k, v in info.items()
        },
        "files": {"embeddings": "embeddings.tsv",
                  "associations": "associations.tsv"},
    }
    man_path = os.path.join(out_dir, "manifest.json")
    with open(man_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return {"embeddings": emb_path, "associations": assoc_path,
            "manifest": man_path}
