"""Contrastive training of the association transform.

The loss is symmetric InfoNCE: for a batch of pairs, score matrix
S_ij = f(a_i) . b_j / tau (the second side stays a raw embedding), with
cross-entropy against the diagonal applied along rows and columns and
averaged. AdamW with decoupled weight decay (gate and LayerNorm
parameters excluded) and per-epoch cosine annealing of the learning
rate realize the optimizer recipe.

One training run is a single logical thread; identical config and seed
reproduce the final parameters bit for bit on one platform.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import EmbeddingSet, PairSet, SeededRng, TRAIN_DTYPE
from .errors import ConfigError, DivergenceError
from .model import (
    CalModel,
    DECAYED,
    ForwardCache,
    GradientBuffer,
    backward,
    forward,
    init_model,
    save_checkpoint,
)
from .sampler import NegativeMode, make_batches

DEFAULT_SEEDS = (42, 123, 456)


@dataclass
class TrainConfig:
    batch_size: int = 512
    temperature: float = 0.05
    lr: float = 3e-4
    weight_decay: float = 1e-4
    epochs: int = 100
    anneal_T_max: int = 100
    seed: int = 42
    negative_mode: NegativeMode = field(default_factory=NegativeMode.in_batch)
    hidden: int = 1024
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.anneal_T_max < 1:
            raise ConfigError(f"anneal_T_max must be >= 1, got {self.anneal_T_max}")

    def replace(self, **kw) -> "TrainConfig":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    epoch_lr: list = field(default_factory=list)
    final_alpha: float = 0.0
    wall_time_s: float = 0.0
    steps: int = 0
    zero_norm_rows: int = 0
    optimizer: str = "adamw(beta1=0.9,beta2=0.999,eps=1e-8)"

    def to_lines(self) -> str:
        """Line-delimited record: epoch, loss, accuracy, lr, plus a
        trailing summary record."""
        rows = ["epoch\tloss\taccuracy\tlr"]
        for e, (l, a, r) in enumerate(
            zip(self.epoch_loss, self.epoch_accuracy, self.epoch_lr)
        ):
            rows.append(f"{e}\t{l:.6f}\t{a:.6f}\t{r:.8g}")
        rows.append(
            f"summary\tfinal_alpha={self.final_alpha:.6f}"
            f"\twall_time_s={self.wall_time_s:.3f}\tsteps={self.steps}"
        )
        return "\n".join(rows) + "\n"


def cosine_lr(base_lr: float, epoch: int, t_max: int) -> float:
    """Cosine annealing from base_lr at epoch 0 to zero at t_max."""
    e = min(epoch, t_max)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * e / t_max))


def info_nce_loss(model: CalModel, batch_a: np.ndarray, batch_b: np.ndarray,
                  temperature: float, cache: ForwardCache | None = None):
    """Symmetric InfoNCE over one batch.

    Returns (loss, accuracy, dY, cache): dY is the gradient of the loss
    with respect to the transformed side f(batch_a); the raw side
    receives no gradient. Accuracy is the fraction of rows whose
    highest-scoring partner is their own (ties to the first index).
    """
    B = batch_a.shape[0]
    if B < 2:
        raise ConfigError(f"contrastive batch needs >= 2 pairs, got {B}")
    if batch_a.shape != batch_b.shape:
        raise ConfigError(
            f"batch sides must align, got {batch_a.shape} vs {batch_b.shape}"
        )
    dt = model.dtype
    batch_b = np.ascontiguousarray(batch_b, dtype=dt)
    y, cache = forward(model, batch_a, cache)
    inv_t = dt.type(1.0 / temperature)
    s = (y @ batch_b.T) * inv_t

    # row-softmax for CE(S), column-softmax for CE(S^T)
    p = s - s.max(axis=1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=1, keepdims=True)
    q = s - s.max(axis=0, keepdims=True)
    np.exp(q, out=q)
    q /= q.sum(axis=0, keepdims=True)

    diag = np.arange(B)
    eps = np.finfo(dt).tiny
    loss_rows = -np.log(np.maximum(p[diag, diag], eps)).mean(dtype=np.float64)
    loss_cols = -np.log(np.maximum(q[diag, diag], eps)).mean(dtype=np.float64)
    loss = 0.5 * (loss_rows + loss_cols)
    accuracy = float(np.mean(s.argmax(axis=1) == diag))

    ds = p
    ds += q
    ds[diag, diag] -= dt.type(2.0)
    ds *= dt.type(0.5 / B)
    dy = (ds @ batch_b) * inv_t
    return float(loss), accuracy, dy, cache


def info_nce_loss_random(model: CalModel, batch_a, batch_b, negatives,
                         temperature: float, cache_a=None, cache_n=None):
    """InfoNCE against k freshly sampled negatives shared across the
    batch, in both directions.

    Direction 1 scores the transformed anchor against its raw partner
    plus raw negatives; direction 2 scores the raw partner against the
    transformed anchor plus transformed negatives, so gradients flow
    through the transform on both legs exactly as in the in-batch
    regime.

    Returns (loss, accuracy, dY_a, dY_n, cache_a, cache_n).
    """
    B = batch_a.shape[0]
    if B < 2:
        raise ConfigError(f"contrastive batch needs >= 2 pairs, got {B}")
    dt = model.dtype
    batch_b = np.ascontiguousarray(batch_b, dtype=dt)
    negatives = np.ascontiguousarray(negatives, dtype=dt)
    k = negatives.shape[0]
    inv_t = dt.type(1.0 / temperature)

    ya, cache_a = forward(model, batch_a, cache_a)
    pos = np.sum(ya * batch_b, axis=1, keepdims=True) * inv_t  # (B,1)
    z1 = np.concatenate([pos, (ya @ negatives.T) * inv_t], axis=1)

    # separate cache: the anchor intermediates must survive for backward
    yn, cache_n = forward(model, negatives, cache_n)
    z2 = np.concatenate([pos, (batch_b @ yn.T) * inv_t], axis=1)

    eps = np.finfo(dt).tiny
    losses = []
    probs = []
    for z in (z1, z2):
        pz = z - z.max(axis=1, keepdims=True)
        np.exp(pz, out=pz)
        pz /= pz.sum(axis=1, keepdims=True)
        losses.append(-np.log(np.maximum(pz[:, 0], eps)).mean(dtype=np.float64))
        probs.append(pz)
    loss = 0.5 * (losses[0] + losses[1])
    accuracy = float(np.mean(z1.argmax(axis=1) == 0))

    d1 = probs[0]
    d1[:, 0] -= dt.type(1.0)
    d1 *= dt.type(0.5 / B)
    d2 = probs[1]
    d2[:, 0] -= dt.type(1.0)
    d2 *= dt.type(0.5 / B)

    dya = (d1[:, :1] * batch_b + d1[:, 1:] @ negatives) * inv_t
    dya += d2[:, :1] * batch_b * inv_t
    dyn = (d2[:, 1:].T @ batch_b) * inv_t
    return float(loss), accuracy, dya, dyn, cache_a, cache_n


class _AdamW:
    """Decoupled-weight-decay Adam over the model's parameter dict plus
    the gate logit; decay skips the gate and all LayerNorm affines."""

    def __init__(self, model: CalModel, config: TrainConfig):
        self.beta1 = model.dtype.type(config.adam_beta1)
        self.beta2 = model.dtype.type(config.adam_beta2)
        self.eps = model.dtype.type(config.adam_eps)
        self.weight_decay = config.weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.m_alpha = np.zeros_like(model.alpha_logit)
        self.v_alpha = np.zeros_like(model.alpha_logit)
        self._scr = {k: np.empty_like(v) for k, v in model.params.items()}

    def step(self, model: CalModel, grads: GradientBuffer, lr: float):
        self.t += 1
        dt = model.dtype
        c1 = dt.type(1.0 - float(self.beta1) ** self.t)
        c2 = dt.type(1.0 - float(self.beta2) ** self.t)
        lr_t = dt.type(lr)
        decay = dt.type(lr * self.weight_decay)
        one_m_b1 = dt.type(1.0) - self.beta1
        one_m_b2 = dt.type(1.0) - self.beta2

        for name, p in model.params.items():
            g = grads.grads[name]
            m, v, scr = self.m[name], self.v[name], self._scr[name]
            m *= self.beta1
            np.multiply(g, one_m_b1, out=scr)
            m += scr
            v *= self.beta2
            np.multiply(g, g, out=scr)
            scr *= one_m_b2
            v += scr
            # scr = m_hat / (sqrt(v_hat) + eps)
            np.divide(v, c2, out=scr)
            np.sqrt(scr, out=scr)
            scr += self.eps
            np.divide(m, scr, out=scr)
            scr *= lr_t / c1
            p -= scr
            if name in DECAYED and self.weight_decay > 0:
                np.multiply(p, decay, out=scr)
                p -= scr

        g = grads.alpha_logit
        self.m_alpha *= self.beta1
        self.m_alpha += one_m_b1 * g
        self.v_alpha *= self.beta2
        self.v_alpha += one_m_b2 * g * g
        model.alpha_logit -= (lr_t / c1) * self.m_alpha / (
            np.sqrt(self.v_alpha / c2) + self.eps
        )


def _add_grads(into: GradientBuffer, other: GradientBuffer):
    for name, g in into.grads.items():
        g += other.grads[name]
    into.alpha_logit += other.alpha_logit


def train(model: CalModel, positives: PairSet, embeddings: EmbeddingSet,
          config: TrainConfig, divergence_checkpoint=None):
    """Run the full optimization; returns (model, TrainLog).

    The model is updated in place and also returned. Raises
    DivergenceError (carrying the last finite model, checkpointed to
    divergence_checkpoint when given) if the loss leaves the finite
    range or exceeds three times its initial value for five consecutive
    epochs.
    """
    if len(positives) < 2:
        raise ConfigError("need at least 2 training pairs")
    x32 = np.ascontiguousarray(embeddings.vectors, dtype=TRAIN_DTYPE)
    root = SeededRng(config.seed)
    neg_rng = root.child(1)
    log = TrainLog(
        optimizer=(
            f"adamw(beta1={config.adam_beta1},beta2={config.adam_beta2},"
            f"eps={config.adam_eps})"
        )
    )
    opt = _AdamW(model, config)
    cache = None
    cache_n = None
    gbuf = GradientBuffer.zeros_like(model)
    gbuf_n = GradientBuffer.zeros_like(model)
    mode = config.negative_mode
    t0 = time.perf_counter()

    initial_loss = None
    runaway_epochs = 0
    last_good = model.copy()

    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr, epoch, config.anneal_T_max)
        batches = make_batches(positives, config.batch_size,
                               root.child(100_000 + epoch).seed)
        ep_loss = 0.0
        ep_acc = 0.0
        for batch in batches:
            idx = positives.pairs[batch]
            a = x32[idx[:, 0]]
            b = x32[idx[:, 1]]
            if mode.kind == "in_batch":
                loss, acc, dy, cache = info_nce_loss(
                    model, a, b, config.temperature, cache
                )
                gb = backward(model, cache, dy, out=gbuf)
            elif mode.kind == "random_k":
                negs = x32[neg_rng.integers(0, embeddings.n, size=mode.k)]
                loss, acc, dya, dyn, cache, cache_n = info_nce_loss_random(
                    model, a, b, negs, config.temperature, cache, cache_n
                )
                gb = backward(model, cache, dya, out=gbuf)
                gn = backward(model, cache_n, dyn, out=gbuf_n)
                _add_grads(gb, gn)
            else:
                raise ConfigError(
                    f"negative mode {mode.kind!r} is evaluation-only"
                )
            if not np.isfinite(loss):
                err = DivergenceError(
                    f"non-finite loss at epoch {epoch}", last_good
                )
                if divergence_checkpoint is not None:
                    save_checkpoint(last_good, divergence_checkpoint)
                    err.checkpoint_path = divergence_checkpoint
                raise err
            if initial_loss is None:
                initial_loss = loss
            opt.step(model, gb, lr)
            ep_loss += loss
            ep_acc += acc
        n_b = max(len(batches), 1)
        log.epoch_loss.append(ep_loss / n_b)
        log.epoch_accuracy.append(ep_acc / n_b)
        log.epoch_lr.append(lr)
        log.steps += len(batches)

        if initial_loss is not None and log.epoch_loss[-1] > 3.0 * initial_loss:
            runaway_epochs += 1
            if runaway_epochs >= 5:
                err = DivergenceError(
                    f"loss exceeded 3x initial for 5 consecutive epochs "
                    f"(epoch {epoch})", last_good
                )
                if divergence_checkpoint is not None:
                    save_checkpoint(last_good, divergence_checkpoint)
                    err.checkpoint_path = divergence_checkpoint
                raise err
        else:
            runaway_epochs = 0
            last_good = model.copy()

    for c in (cache, cache_n):
        if c is not None:
            log.zero_norm_rows += c.zero_norm_rows
    log.final_alpha = model.alpha
    log.wall_time_s = time.perf_counter() - t0
    return model, log


def train_from_config(embeddings: EmbeddingSet, positives: PairSet,
                      config: TrainConfig, divergence_checkpoint=None):
    """Initialize a fresh model from the config seed and train it."""
    rng = SeededRng(config.seed)
    model = init_model(embeddings.dim, config.hidden, rng.child(0))
    return train(model, positives, embeddings, config,
                 divergence_checkpoint=divergence_checkpoint)


def train_multi_seed(embeddings: EmbeddingSet, positives: PairSet,
                     eval_positives: PairSet, eval_negatives: PairSet,
                     config: TrainConfig, seeds=DEFAULT_SEEDS,
                     evaluate_fn=None):
    """Train and evaluate once per seed; summarize mean and sample SD of
    the overall and cross-boundary AUC. Per-seed failures are recorded
    and the remaining seeds still run."""
    if len(seeds) < 2:
        raise ConfigError("need at least 2 seeds for a spread estimate")
    if evaluate_fn is None:
        from .evaluate import evaluate_model

        def evaluate_fn(model):
            return evaluate_model(model, embeddings, eval_positives,
                                  eval_negatives)

    runs = []
    for seed in seeds:
        try:
            model, log = train_from_config(
                embeddings, positives, config.replace(seed=int(seed))
            )
            report = evaluate_fn(model)
            runs.append({
                "seed": int(seed),
                "overall_auc": report.overall_auc,
                "cb_auc": report.cb_auc,
                "final_alpha": log.final_alpha,
            })
        except Exception as exc:  # noqa: BLE001 - per-run isolation
            runs.append({"seed": int(seed), "error": f"{type(exc).__name__}: {exc}"})

    ok = [r for r in runs if "error" not in r]
    summary = {"runs": runs, "n_ok": len(ok), "seeds": [int(s) for s in seeds]}
    for key in ("overall_auc", "cb_auc"):
        vals = np.array([r[key] for r in ok], dtype=np.float64)
        if len(vals):
            summary[f"{key}_mean"] = float(vals.mean())
            summary[f"{key}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return summary
