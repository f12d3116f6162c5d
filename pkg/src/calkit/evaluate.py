"""Evaluation statistics: association scoring, rank-based AUC with
bootstrap intervals, cross-boundary analysis and sweeps, degree
analyses, and per-pair improvement reports.

All statistics run in float64 regardless of the model's training dtype.
AUC uses midrank (Mann-Whitney) accounting, so ties contribute one half
and auc(pos, neg) + auc(neg, pos) accounts to one exactly.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata, spearmanr

from .core import EmbeddingSet, PairSet, SeededRng
from .errors import ConfigError, DimensionError, EmptyDataError, IoError
from .model import CalModel, transform


class Scoring(enum.Enum):
    HALF_TRANSFORMED = "half_transformed"
    BOTH_TRANSFORMED = "both_transformed"
    COSINE_ONLY = "cosine_only"
    BLEND = "blend"


@dataclass(frozen=True)
class ScoringMode:
    kind: Scoring = Scoring.HALF_TRANSFORMED
    lam: float = 1.0

    def __post_init__(self):
        if self.kind is Scoring.BLEND and not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"blend weight must be in [0, 1], got {self.lam}")

    @staticmethod
    def parse(text: str) -> "ScoringMode":
        if text.startswith("blend:"):
            return ScoringMode(Scoring.BLEND, float(text.split(":", 1)[1]))
        return ScoringMode(Scoring(text))

    def label(self) -> str:
        if self.kind is Scoring.BLEND:
            return f"blend:{self.lam:g}"
        return self.kind.value


def association_score(model: CalModel, e_a: np.ndarray, e_b: np.ndarray,
                      mode: ScoringMode = ScoringMode()) -> float:
    """Score one pair of unit vectors under the given mode.

    half_transformed averages f(a).b and f(b).a, so it is symmetric by
    construction; blend(lam) mixes it with raw cosine.
    """
    e_a = np.asarray(e_a, dtype=np.float64)
    e_b = np.asarray(e_b, dtype=np.float64)
    if e_a.shape != e_b.shape or e_a.shape != (model.d,):
        raise DimensionError(
            f"expected two ({model.d},) vectors, got {e_a.shape}, {e_b.shape}"
        )
    scores = score_pairs(
        model,
        np.stack([e_a, e_b]),
        np.array([[0, 1]]),
        mode,
    )
    return float(scores[0])


def score_pairs(model: CalModel | None, vectors: np.ndarray,
                pairs: np.ndarray, mode: ScoringMode,
                transformed: np.ndarray | None = None) -> np.ndarray:
    """Vectorized scoring of index pairs against a vector matrix.

    ``transformed`` may carry a precomputed f(vectors) to amortize the
    forward pass across calls.
    """
    v = np.asarray(vectors, dtype=np.float64)
    pairs = np.asarray(pairs)
    a, b = pairs[:, 0], pairs[:, 1]
    cos = np.sum(v[a] * v[b], axis=1)
    if mode.kind is Scoring.COSINE_ONLY:
        return cos
    if transformed is None:
        if model is None:
            raise ConfigError("a model is required for transformed scoring")
        transformed = transform(model, v)
    f = transformed
    if mode.kind is Scoring.BOTH_TRANSFORMED:
        return np.sum(f[a] * f[b], axis=1)
    half = 0.5 * (np.sum(f[a] * v[b], axis=1) + np.sum(f[b] * v[a], axis=1))
    if mode.kind is Scoring.HALF_TRANSFORMED:
        return half
    return mode.lam * half + (1.0 - mode.lam) * cos


def pair_cosines(vectors: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    return np.sum(v[pairs[:, 0]] * v[pairs[:, 1]], axis=1)


def auc(pos_scores, neg_scores) -> float:
    """Rank-based AUC with midrank tie handling:
    P(pos > neg) + 0.5 P(pos == neg)."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise EmptyDataError("auc needs scores on both sides")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def bootstrap_auc_ci(pos_scores, neg_scores, n_boot: int = 1000,
                     rng: SeededRng | None = None):
    """Percentile 95% interval of the AUC over paired resampling of both
    score sets with replacement."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size < 2 or neg.size < 2:
        raise EmptyDataError("bootstrap needs >= 2 scores per side")
    if rng is None:
        rng = SeededRng(42)
    vals = np.empty(n_boot, dtype=np.float64)
    for i in range(n_boot):
        p = pos[rng.integers(0, pos.size, size=pos.size)]
        n = neg[rng.integers(0, neg.size, size=neg.size)]
        vals[i] = auc(p, n)
    lo, hi = np.percentile(vals, [2.5, 97.5])
    return float(lo), float(hi)


def cross_boundary_eval(model: CalModel, embeddings: EmbeddingSet,
                        pos: PairSet, neg: PairSet,
                        thresholds=(0.30, 0.20, 0.15, 0.10, 0.05),
                        mode: ScoringMode = ScoringMode(),
                        transformed: np.ndarray | None = None,
                        min_positives: int = 10):
    """AUC restricted to pairs with |cosine| < t, applied to positives
    and negatives alike. A row with fewer than min_positives surviving
    positives is flagged insufficient rather than raising.

    An infinite threshold reproduces the overall AUC exactly.
    """
    v = embeddings.vectors
    if transformed is None:
        transformed = transform(model, v)
    pos_cos = pair_cosines(v, pos.pairs)
    neg_cos = pair_cosines(v, neg.pairs)
    pos_scores = score_pairs(model, v, pos.pairs, mode, transformed)
    neg_scores = score_pairs(model, v, neg.pairs, mode, transformed)
    rows = []
    for t in thresholds:
        pm = np.abs(pos_cos) < t
        nm = np.abs(neg_cos) < t
        row = {
            "threshold": float(t),
            "pos_count": int(pm.sum()),
            "neg_count": int(nm.sum()),
            "insufficient": bool(pm.sum() < min_positives or nm.sum() == 0),
        }
        if not row["insufficient"]:
            row["cosine_auc"] = auc(pos_cos[pm], neg_cos[nm])
            row["cal_auc"] = auc(pos_scores[pm], neg_scores[nm])
        else:
            row["cosine_auc"] = None
            row["cal_auc"] = None
        rows.append(row)
    return rows


def lambda_sweep(model: CalModel, embeddings: EmbeddingSet,
                 pos: PairSet, neg: PairSet, cb_threshold: float = 0.2,
                 grid=None, transformed: np.ndarray | None = None):
    """Overall and cross-boundary AUC for blend weights on a 0..1 grid."""
    if grid is None:
        grid = [round(0.1 * i, 1) for i in range(11)]
    v = embeddings.vectors
    if transformed is None:
        transformed = transform(model, v)
    pos_cos = pair_cosines(v, pos.pairs)
    neg_cos = pair_cosines(v, neg.pairs)
    pos_half = score_pairs(model, v, pos.pairs,
                           ScoringMode(Scoring.HALF_TRANSFORMED), transformed)
    neg_half = score_pairs(model, v, neg.pairs,
                           ScoringMode(Scoring.HALF_TRANSFORMED), transformed)
    pm = np.abs(pos_cos) < cb_threshold
    nm = np.abs(neg_cos) < cb_threshold
    rows = []
    for lam in grid:
        ps = lam * pos_half + (1.0 - lam) * pos_cos
        ns = lam * neg_half + (1.0 - lam) * neg_cos
        row = {"lam": float(lam), "overall_auc": auc(ps, ns)}
        row["cb_auc"] = auc(ps[pm], ns[nm]) if pm.any() and nm.any() else None
        rows.append(row)
    return rows


def _pair_degrees(degrees: np.ndarray, pairs: np.ndarray):
    d = degrees[pairs]
    return d.mean(axis=1), d.max(axis=1)


def degree_analysis(model: CalModel, embeddings: EmbeddingSet,
                    degrees: np.ndarray, pos: PairSet, neg: PairSet,
                    cb_threshold: float = 0.2,
                    mode: ScoringMode = ScoringMode(),
                    transformed: np.ndarray | None = None,
                    n_quantiles: int = 5):
    """Degree dependence of the association score.

    Pair degree is the arithmetic mean of the endpoint degrees (the
    max-of-endpoints variant is reported alongside). Spearman rank
    correlation runs over all evaluated pairs; the quantile table is
    computed over cross-boundary positives.
    """
    v = embeddings.vectors
    if transformed is None:
        transformed = transform(model, v)
    all_pairs = np.concatenate([pos.pairs, neg.pairs], axis=0)
    scores = score_pairs(model, v, all_pairs, mode, transformed)
    deg_mean, deg_max = _pair_degrees(np.asarray(degrees, dtype=np.float64),
                                      all_pairs)

    def _spear(x):
        if np.all(x == x[0]) or np.all(scores == scores[0]):
            return None, "constant input makes rank correlation undefined"
        r, p = spearmanr(x, scores)
        return {"r": float(r), "p": float(p)}, None

    mean_sp, mean_reason = _spear(deg_mean)
    max_sp, _ = _spear(deg_max)

    pos_cos = pair_cosines(v, pos.pairs)
    pos_scores = score_pairs(model, v, pos.pairs, mode, transformed)
    cb = np.abs(pos_cos) < cb_threshold
    quintiles = []
    if cb.sum() >= n_quantiles:
        pdeg = _pair_degrees(np.asarray(degrees, dtype=np.float64),
                             pos.pairs[cb])[0]
        edges = np.percentile(
            pdeg, np.linspace(0, 100, n_quantiles + 1)[1:-1]
        )
        # ties go to the lower bucket
        bucket = np.searchsorted(edges, pdeg, side="left")
        for q in range(n_quantiles):
            sel = bucket == q
            if not sel.any():
                quintiles.append({"quantile": q, "n": 0})
                continue
            quintiles.append({
                "quantile": q,
                "degree_min": float(pdeg[sel].min()),
                "degree_max": float(pdeg[sel].max()),
                "n": int(sel.sum()),
                "mean_cosine": float(pos_cos[cb][sel].mean()),
                "mean_association": float(pos_scores[cb][sel].mean()),
                "delta": float(
                    pos_scores[cb][sel].mean() - pos_cos[cb][sel].mean()
                ),
            })
    return {
        "spearman_mean_degree": mean_sp,
        "spearman_mean_degree_reason": mean_reason,
        "spearman_max_degree": max_sp,
        "quantile_table": quintiles,
    }


def degree_quantile_model_comparison(reference_model: CalModel,
                                     other_model: CalModel,
                                     embeddings: EmbeddingSet,
                                     degrees: np.ndarray,
                                     pos: PairSet, neg: PairSet,
                                     n_quantiles: int = 5,
                                     mode: ScoringMode = ScoringMode()):
    """AUC per pair-degree quantile bucket for two models trained on the
    same embeddings; buckets with one class only are flagged."""
    v = embeddings.vectors
    ref_t = transform(reference_model, v)
    oth_t = transform(other_model, v)
    deg = np.asarray(degrees, dtype=np.float64)
    pos_deg = _pair_degrees(deg, pos.pairs)[0]
    neg_deg = _pair_degrees(deg, neg.pairs)[0]
    all_deg = np.concatenate([pos_deg, neg_deg])
    edges = np.percentile(all_deg, np.linspace(0, 100, n_quantiles + 1)[1:-1])
    pos_bucket = np.searchsorted(edges, pos_deg, side="left")
    neg_bucket = np.searchsorted(edges, neg_deg, side="left")

    ref_pos = score_pairs(reference_model, v, pos.pairs, mode, ref_t)
    ref_neg = score_pairs(reference_model, v, neg.pairs, mode, ref_t)
    oth_pos = score_pairs(other_model, v, pos.pairs, mode, oth_t)
    oth_neg = score_pairs(other_model, v, neg.pairs, mode, oth_t)

    rows = []
    for q in range(n_quantiles):
        pm = pos_bucket == q
        nm = neg_bucket == q
        row = {"quantile": q, "n_pos": int(pm.sum()), "n_neg": int(nm.sum())}
        if pm.any() and nm.any():
            row["reference_auc"] = auc(ref_pos[pm], ref_neg[nm])
            row["other_auc"] = auc(oth_pos[pm], oth_neg[nm])
            row["delta"] = row["reference_auc"] - row["other_auc"]
            row["insufficient"] = False
        else:
            row["insufficient"] = True
        rows.append(row)
    return rows


def top_improvement_pairs(model: CalModel, embeddings: EmbeddingSet,
                          positives: PairSet, k: int,
                          mode: ScoringMode = ScoringMode(),
                          transformed: np.ndarray | None = None):
    """Positive pairs ranked by association minus cosine, best first."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    v = embeddings.vectors
    cos = pair_cosines(v, positives.pairs)
    assoc = score_pairs(model, v, positives.pairs, mode, transformed)
    delta = assoc - cos
    order = np.argsort(-delta, kind="stable")[:k]
    return [
        {
            "id_a": embeddings.ids[int(positives.pairs[i, 0])],
            "id_b": embeddings.ids[int(positives.pairs[i, 1])],
            "cosine": float(cos[i]),
            "association": float(assoc[i]),
            "delta": float(delta[i]),
        }
        for i in order
    ]


def export_transformed(model: CalModel, embeddings: EmbeddingSet, path,
                       distance_matrix_path=None, binary: bool = False):
    """Write f(e) rows in the embedding TSV layout; optionally also the
    1 - cosine distance matrix of the transformed rows for external
    clustering tools (TSV with id headers, or the compact binary upper
    triangle)."""
    f = transform(model, embeddings.vectors)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for i, eid in enumerate(embeddings.ids):
                row = "\t".join(f"{x:.9g}" for x in f[i])
                fh.write(f"{eid}\t{row}\n")
        if distance_matrix_path is not None:
            dist = 1.0 - f @ f.T
            np.fill_diagonal(dist, 0.0)
            if binary:
                import struct

                iu = np.triu_indices(len(f), k=1)
                with open(distance_matrix_path, "wb") as fh:
                    fh.write(b"CALDST1")
                    fh.write(struct.pack("<I", len(f)))
                    fh.write(dist[iu].astype("<f4").tobytes())
            else:
                with open(distance_matrix_path, "w", encoding="utf-8") as fh:
                    fh.write("\t" + "\t".join(embeddings.ids) + "\n")
                    for i, eid in enumerate(embeddings.ids):
                        fh.write(
                            eid + "\t"
                            + "\t".join(f"{x:.9g}" for x in dist[i]) + "\n"
                        )
    except OSError as exc:
        raise IoError(f"export failed: {exc}") from exc
    return f


def eval_set_hash(pos: PairSet, neg: PairSet) -> str:
    """Stable digest of the evaluation pair sets, for verifying that two
    reports were computed on identical data."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(pos.pairs, dtype=np.int64).tobytes())
    h.update(b"|")
    h.update(np.ascontiguousarray(neg.pairs, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


@dataclass
class EvalReport:
    """Everything the evaluation battery measures for one model."""

    overall_auc: float
    cb_auc: float | None
    cb_threshold: float
    auc_ci: tuple
    cosine_auc: float
    cb_cosine_auc: float | None
    n_pos: int
    n_neg: int
    scoring: str
    lambda_sweep: list = field(default_factory=list)
    cb_sweep: list = field(default_factory=list)
    degree: dict = field(default_factory=dict)
    top_improvements: list = field(default_factory=list)
    eval_hash: str = ""
    config_hash: str = ""
    seeds: list = field(default_factory=list)
    final_alpha: float | None = None
    pair_degree_convention: str = "mean of endpoint degrees"

    def to_dict(self) -> dict:
        return {
            "overall_auc": self.overall_auc,
            "cb_auc": self.cb_auc,
            "cb_threshold": self.cb_threshold,
            "auc_ci": list(self.auc_ci),
            "cosine_auc": self.cosine_auc,
            "cb_cosine_auc": self.cb_cosine_auc,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "scoring": self.scoring,
            "lambda_sweep": self.lambda_sweep,
            "cb_sweep": self.cb_sweep,
            "degree": self.degree,
            "top_improvements": self.top_improvements,
            "eval_hash": self.eval_hash,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "final_alpha": self.final_alpha,
            "pair_degree_convention": self.pair_degree_convention,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        try:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(self.to_json() + "\n")
        except OSError as exc:
            raise IoError(f"cannot write report {path}: {exc}") from exc

    def format_table(self) -> str:
        def fmt(x):
            return "n/a" if x is None else f"{x:.4f}"

        lines = [
            f"scoring: {self.scoring}   pairs: {self.n_pos} pos / {self.n_neg} neg",
            f"overall AUC     {fmt(self.overall_auc)}   "
            f"(95% CI {fmt(self.auc_ci[0])}..{fmt(self.auc_ci[1])})",
            f"cosine  AUC     {fmt(self.cosine_auc)}",
            f"CB AUC (|cos|<{self.cb_threshold:g})  {fmt(self.cb_auc)}   "
            f"cosine {fmt(self.cb_cosine_auc)}",
        ]
        if self.lambda_sweep:
            lines.append("lambda sweep (lam overall cb):")
            for row in self.lambda_sweep:
                lines.append(
                    f"  {row['lam']:.1f}  {fmt(row['overall_auc'])}  "
                    f"{fmt(row.get('cb_auc'))}"
                )
        if self.cb_sweep:
            lines.append("cross-boundary sweep (t pos neg cosine cal):")
            for row in self.cb_sweep:
                lines.append(
                    f"  {row['threshold']:.2f}  {row['pos_count']:6d} "
                    f"{row['neg_count']:6d}  {fmt(row['cosine_auc'])}  "
                    f"{fmt(row['cal_auc'])}"
                    + ("  [insufficient]" if row["insufficient"] else "")
                )
        sp = self.degree.get("spearman_mean_degree")
        if sp:
            lines.append(
                f"degree spearman (mean-of-endpoints): r={sp['r']:.3f} "
                f"p={sp['p']:.2e}"
            )
        return "\n".join(lines)


def evaluate_model(model: CalModel, embeddings: EmbeddingSet,
                   pos: PairSet, neg: PairSet,
                   degrees: np.ndarray | None = None,
                   cb_threshold: float = 0.2,
                   mode: ScoringMode = ScoringMode(),
                   n_boot: int = 200,
                   boot_seed: int = 42,
                   cb_thresholds=(0.30, 0.20, 0.15, 0.10, 0.05),
                   with_lambda_sweep: bool = True,
                   top_k: int = 10,
                   config_hash: str = "",
                   seeds=None) -> EvalReport:
    """Run the full battery for one model and one evaluation pair set."""
    if len(pos) == 0 or len(neg) == 0:
        raise EmptyDataError("evaluation needs positives and negatives")
    v = embeddings.vectors
    t = transform(model, v)
    pos_scores = score_pairs(model, v, pos.pairs, mode, t)
    neg_scores = score_pairs(model, v, neg.pairs, mode, t)
    pos_cos = pair_cosines(v, pos.pairs)
    neg_cos = pair_cosines(v, neg.pairs)
    pm = np.abs(pos_cos) < cb_threshold
    nm = np.abs(neg_cos) < cb_threshold

    report = EvalReport(
        overall_auc=auc(pos_scores, neg_scores),
        cb_auc=auc(pos_scores[pm], neg_scores[nm])
        if pm.any() and nm.any() else None,
        cb_threshold=cb_threshold,
        auc_ci=bootstrap_auc_ci(pos_scores, neg_scores, n_boot,
                                SeededRng(boot_seed)),
        cosine_auc=auc(pos_cos, neg_cos),
        cb_cosine_auc=auc(pos_cos[pm], neg_cos[nm])
        if pm.any() and nm.any() else None,
        n_pos=len(pos),
        n_neg=len(neg),
        scoring=mode.label(),
        eval_hash=eval_set_hash(pos, neg),
        config_hash=config_hash,
        seeds=list(seeds) if seeds else [],
        final_alpha=model.alpha,
    )
    report.cb_sweep = cross_boundary_eval(
        model, embeddings, pos, neg, cb_thresholds, mode, t
    )
    if with_lambda_sweep:
        report.lambda_sweep = lambda_sweep(
            model, embeddings, pos, neg, cb_threshold, transformed=t
        )
    if degrees is not None:
        report.degree = degree_analysis(
            model, embeddings, degrees, pos, neg, cb_threshold, mode, t
        )
    report.top_improvements = top_improvement_pairs(
        model, embeddings, pos, min(top_k, len(pos)), mode, t
    )
    return report
