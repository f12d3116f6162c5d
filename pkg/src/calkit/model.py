"""The learned association transform and its exact gradients.

Architecture: Linear(d->h) -> LN -> GELU -> Linear(h->h) -> LN -> GELU ->
Linear(h->h) -> LN -> GELU -> Linear(h->d) -> LN, blended with the input
through a learned residual gate and re-normalized:

    f(x) = normalize(alpha * x + (1 - alpha) * g(x)),  alpha = sigmoid(a)

GELU uses the exact erf form. Forward and backward are written against
preallocated caches because the training loop is allocation-bound
otherwise; pass ``cache=None`` for a safe one-shot call.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .core import SeededRng, TRAIN_DTYPE
from .errors import FormatError, IoError, NumericsError, ShapeError

LN_EPS = 1e-5
# rows whose pre-normalization norm falls below this get zero gradient
NORM_GUARD = 1e-12

# serialization and optimizer traversal order; alpha_logit lives in the
# checkpoint header, not the tensor list
TENSOR_ORDER = (
    "w1", "b1", "ln1_scale", "ln1_shift",
    "w2", "b2", "ln2_scale", "ln2_shift",
    "w3", "b3", "ln3_scale", "ln3_shift",
    "w4", "b4", "ln4_scale", "ln4_shift",
)

# tensors subject to decoupled weight decay (gates and norms excluded)
DECAYED = frozenset(
    name for name in TENSOR_ORDER if name.startswith(("w", "b"))
)

CHECKPOINT_MAGIC = b"CALCKPT1\n"
CHECKPOINT_VERSION = 1


def parameter_count(d: int, hidden: int) -> int:
    """Number of scalar parameters: four affine layers, four affine
    LayerNorms, one residual gate logit."""
    h = hidden
    return (d * h + h) + 2 * (h * h + h) + (h * d + d) + 3 * 2 * h + 2 * d + 1


@dataclass
class CalModel:
    """All learnable parameters of the association transform."""

    d: int
    hidden: int
    params: dict
    alpha_logit: np.ndarray  # shape (1,)

    @property
    def dtype(self):
        return self.params["w1"].dtype

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-float(self.alpha_logit[0]))))

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values()) + 1

    def copy(self) -> "CalModel":
        return CalModel(
            d=self.d,
            hidden=self.hidden,
            params={k: v.copy() for k, v in self.params.items()},
            alpha_logit=self.alpha_logit.copy(),
        )

    def astype(self, dtype) -> "CalModel":
        return CalModel(
            d=self.d,
            hidden=self.hidden,
            params={k: v.astype(dtype) for k, v in self.params.items()},
            alpha_logit=self.alpha_logit.astype(dtype),
        )

    def equal_bits(self, other: "CalModel") -> bool:
        if (self.d, self.hidden) != (other.d, other.hidden):
            return False
        if self.alpha_logit.tobytes() != other.alpha_logit.tobytes():
            return False
        return all(
            self.params[k].tobytes() == other.params[k].tobytes()
            for k in TENSOR_ORDER
        )


@dataclass
class GradientBuffer:
    """Gradients mirroring CalModel's parameter shapes."""

    grads: dict
    alpha_logit: np.ndarray

    @staticmethod
    def zeros_like(model: CalModel) -> "GradientBuffer":
        return GradientBuffer(
            grads={k: np.zeros_like(v) for k, v in model.params.items()},
            alpha_logit=np.zeros_like(model.alpha_logit),
        )


def init_model(d: int, hidden: int, rng: SeededRng, dtype=TRAIN_DTYPE) -> CalModel:
    """Fresh model: weights ~ uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    biases zero, LayerNorm scale one / shift zero, gate logit zero
    (alpha = 0.5). Weight draws happen in declaration order so a seed
    pins every bit of the initialization."""
    if d < 1 or hidden < 1:
        raise ShapeError(f"d and hidden must be >= 1, got d={d} hidden={hidden}")
    h = hidden

    def draw(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    params = {
        "w1": draw(d, (d, h)),
        "b1": np.zeros(h, dtype),
        "ln1_scale": np.ones(h, dtype),
        "ln1_shift": np.zeros(h, dtype),
        "w2": draw(h, (h, h)),
        "b2": np.zeros(h, dtype),
        "ln2_scale": np.ones(h, dtype),
        "ln2_shift": np.zeros(h, dtype),
        "w3": draw(h, (h, h)),
        "b3": np.zeros(h, dtype),
        "ln3_scale": np.ones(h, dtype),
        "ln3_shift": np.zeros(h, dtype),
        "w4": draw(h, (h, d)),
        "b4": np.zeros(d, dtype),
        "ln4_scale": np.ones(d, dtype),
        "ln4_shift": np.zeros(d, dtype),
    }
    return CalModel(d=d, hidden=h, params=params,
                    alpha_logit=np.zeros(1, dtype))


class ForwardCache:
    """Preallocated intermediates for one (batch, model) shape.

    Reusing a cache across steps avoids ~10x allocator overhead in the
    hot loop. Arrays returned by forward() alias this storage and are
    only valid until the next forward() call with the same cache.
    """

    def __init__(self, model: CalModel, batch: int):
        d, h, dt = model.d, model.hidden, model.dtype
        self.batch = batch
        self.d = d
        self.hidden = h
        self.dtype = dt

        def bh():
            return np.empty((batch, h), dt)

        def bd():
            return np.empty((batch, d), dt)

        def col():
            return np.empty((batch, 1), dt)

        self.x = bd()
        # per block: pre-affine normalized rows, inverse std, LN output
        # (= GELU input), GELU cdf, GELU output (= next linear input)
        self.xn1, self.inv1, self.a1, self.phi1, self.h1 = bh(), col(), bh(), bh(), bh()
        self.xn2, self.inv2, self.a2, self.phi2, self.h2 = bh(), col(), bh(), bh(), bh()
        self.xn3, self.inv3, self.a3, self.phi3, self.h3 = bh(), col(), bh(), bh(), bh()
        self.xn4, self.inv4, self.u = bd(), col(), bd()
        self.v, self.vnorm, self.y = bd(), col(), bd()
        self.mean_buf = col()
        # backward scratch; rotated so no call reads a buffer it writes
        self.sA, self.sB, self.sC = bh(), bh(), bh()
        self.dd1, self.dd2, self.dd3 = bd(), bd(), bd()
        self.zero_norm_rows = 0

    def matches(self, model: CalModel, batch: int) -> bool:
        return (self.batch, self.d, self.hidden, self.dtype) == (
            batch, model.d, model.hidden, model.dtype,
        )


def _ln_forward(x, scale, shift, out, xn, inv, mean_buf):
    np.mean(x, axis=1, keepdims=True, out=mean_buf)
    np.subtract(x, mean_buf, out=xn)
    np.multiply(xn, xn, out=out)
    np.mean(out, axis=1, keepdims=True, out=inv)
    inv += x.dtype.type(LN_EPS)
    np.sqrt(inv, out=inv)
    np.divide(x.dtype.type(1.0), inv, out=inv)
    xn *= inv
    np.multiply(xn, scale, out=out)
    out += shift


def _ln_backward(dy, xn, inv, scale, dscale, dshift, dx, scratch, mean_buf):
    # parameter grads (accumulated into provided buffers)
    np.multiply(dy, xn, out=scratch)
    np.sum(scratch, axis=0, out=dscale)
    np.sum(dy, axis=0, out=dshift)
    # input grad: inv * (dxn - mean(dxn) - xn * mean(dxn * xn))
    np.multiply(dy, scale, out=dx)          # dxn
    np.multiply(dx, xn, out=scratch)
    np.mean(scratch, axis=1, keepdims=True, out=mean_buf)
    np.multiply(xn, mean_buf, out=scratch)  # xn * mean(dxn*xn)
    np.mean(dx, axis=1, keepdims=True, out=mean_buf)
    dx -= mean_buf
    dx -= scratch
    dx *= inv


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU: x * Phi(x) with the Gaussian cdf via erf."""
    x = np.asarray(x)
    return x * (0.5 * (1.0 + erf(x * x.dtype.type(_SQRT1_2))))


def _gelu_forward(x, out, phi):
    np.multiply(x, x.dtype.type(_SQRT1_2), out=phi)
    erf(phi, out=phi)
    phi += x.dtype.type(1.0)
    phi *= x.dtype.type(0.5)
    np.multiply(x, phi, out=out)


def _gelu_backward(x, phi, dy, out, scratch):
    # d gelu = Phi(x) + x * pdf(x)
    np.multiply(x, x, out=scratch)
    scratch *= x.dtype.type(-0.5)
    np.exp(scratch, out=scratch)
    scratch *= x.dtype.type(_INV_SQRT_2PI)
    np.multiply(x, scratch, out=out)
    out += phi
    out *= dy


def forward(model: CalModel, X: np.ndarray, cache: ForwardCache | None = None):
    """Apply the transform to a batch of unit rows.

    Returns (Y, cache); Y rows are unit-norm. Y aliases cache storage.
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise ShapeError(f"expected (B, {model.d}) input, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericsError("non-finite values in forward input")
    if X.dtype != model.dtype:
        X = X.astype(model.dtype)
    B = X.shape[0]
    if cache is None or not cache.matches(model, B):
        cache = ForwardCache(model, B)
    c, p = cache, model.params
    np.copyto(c.x, X)

    np.matmul(c.x, p["w1"], out=c.a1)
    c.a1 += p["b1"]
    _ln_forward(c.a1, p["ln1_scale"], p["ln1_shift"], c.a1, c.xn1, c.inv1, c.mean_buf)
    _gelu_forward(c.a1, c.h1, c.phi1)

    np.matmul(c.h1, p["w2"], out=c.a2)
    c.a2 += p["b2"]
    _ln_forward(c.a2, p["ln2_scale"], p["ln2_shift"], c.a2, c.xn2, c.inv2, c.mean_buf)
    _gelu_forward(c.a2, c.h2, c.phi2)

    np.matmul(c.h2, p["w3"], out=c.a3)
    c.a3 += p["b3"]
    _ln_forward(c.a3, p["ln3_scale"], p["ln3_shift"], c.a3, c.xn3, c.inv3, c.mean_buf)
    _gelu_forward(c.a3, c.h3, c.phi3)

    np.matmul(c.h3, p["w4"], out=c.u)
    c.u += p["b4"]
    _ln_forward(c.u, p["ln4_scale"], p["ln4_shift"], c.u, c.xn4, c.inv4, c.mean_buf)

    alpha = model.dtype.type(model.alpha)
    np.multiply(c.x, alpha, out=c.v)
    np.multiply(c.u, model.dtype.type(1.0) - alpha, out=c.y)  # y as scratch
    c.v += c.y

    np.multiply(c.v, c.v, out=c.y)
    np.sum(c.y, axis=1, keepdims=True, out=c.vnorm)
    np.sqrt(c.vnorm, out=c.vnorm)
    np.maximum(c.vnorm, model.dtype.type(NORM_GUARD), out=c.vnorm)
    np.divide(c.v, c.vnorm, out=c.y)
    return c.y, cache


def backward(model: CalModel, cache: ForwardCache, dY: np.ndarray,
             out: GradientBuffer | None = None) -> GradientBuffer:
    """Exact parameter gradients for a preceding forward() call.

    Rows whose pre-normalization norm fell below the guard get zero
    gradient; cache.zero_norm_rows counts them.
    """
    c, p = cache, model.params
    dY = np.asarray(dY, dtype=model.dtype)
    if dY.shape != (c.batch, c.d):
        raise ShapeError(
            f"dY shape {dY.shape} does not match cache ({c.batch}, {c.d})"
        )
    if out is None:
        out = GradientBuffer.zeros_like(model)
    g = out.grads

    # through row normalization: dv = (dY - y (dY.y)) / ||v||
    dv = c.dd1
    np.multiply(dY, c.y, out=c.dd2)
    np.sum(c.dd2, axis=1, keepdims=True, out=c.mean_buf)
    np.multiply(c.y, c.mean_buf, out=dv)
    np.subtract(dY, dv, out=dv)
    guarded = c.vnorm <= model.dtype.type(NORM_GUARD)
    dv /= c.vnorm
    if np.any(guarded):
        dv[guarded[:, 0], :] = 0
        c.zero_norm_rows += int(guarded.sum())

    # residual gate: v = alpha x + (1-alpha) u
    alpha = model.alpha
    np.subtract(c.x, c.u, out=c.dd2)
    dalpha = float(np.sum(dv * c.dd2, dtype=np.float64))
    out.alpha_logit[0] = model.dtype.type(dalpha * alpha * (1.0 - alpha))
    du = c.dd3
    np.multiply(dv, model.dtype.type(1.0 - alpha), out=du)

    _ln_backward(du, c.xn4, c.inv4, p["ln4_scale"],
                 g["ln4_scale"], g["ln4_shift"], c.dd1, c.dd2, c.mean_buf)
    dz4 = c.dd1
    np.matmul(c.h3.T, dz4, out=g["w4"])
    np.sum(dz4, axis=0, out=g["b4"])
    dh = c.sA
    np.matmul(dz4, p["w4"].T, out=dh)

    # h3/xn4 are dead once dW4/dh exist; sA..sC rotate from here on
    _gelu_backward(c.a3, c.phi3, dh, c.sB, c.sC)
    _ln_backward(c.sB, c.xn3, c.inv3, p["ln3_scale"],
                 g["ln3_scale"], g["ln3_shift"], c.sA, c.sC, c.mean_buf)
    dz3 = c.sA
    np.matmul(c.h2.T, dz3, out=g["w3"])
    np.sum(dz3, axis=0, out=g["b3"])
    dh = c.sB
    np.matmul(dz3, p["w3"].T, out=dh)

    _gelu_backward(c.a2, c.phi2, dh, c.sA, c.sC)
    _ln_backward(c.sA, c.xn2, c.inv2, p["ln2_scale"],
                 g["ln2_scale"], g["ln2_shift"], c.sB, c.sC, c.mean_buf)
    dz2 = c.sB
    np.matmul(c.h1.T, dz2, out=g["w2"])
    np.sum(dz2, axis=0, out=g["b2"])
    dh = c.sA
    np.matmul(dz2, p["w2"].T, out=dh)

    _gelu_backward(c.a1, c.phi1, dh, c.sB, c.sC)
    _ln_backward(c.sB, c.xn1, c.inv1, p["ln1_scale"],
                 g["ln1_scale"], g["ln1_shift"], c.sA, c.sC, c.mean_buf)
    dz1 = c.sA
    np.matmul(c.x.T, dz1, out=g["w1"])
    np.sum(dz1, axis=0, out=g["b1"])
    return out


def transform(model: CalModel, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """f(X) for a full matrix, chunked; returns a fresh float64 array."""
    X = np.asarray(X)
    outp = np.empty((X.shape[0], model.d), np.float64)
    for lo in range(0, X.shape[0], chunk):
        hi = min(lo + chunk, X.shape[0])
        y, _ = forward(model, X[lo:hi])
        outp[lo:hi] = y
    return outp


def save_checkpoint(model: CalModel, path) -> None:
    """Write the binary checkpoint; round-trips bit-exactly for float32
    models. Layout: magic, u32 version, u32 d, u32 hidden, f32
    alpha_logit, then each tensor as u32 element count + f32 data."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IIIf", CHECKPOINT_VERSION, model.d, model.hidden,
                          float(model.alpha_logit[0])))
    for name in TENSOR_ORDER:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        buf.write(struct.pack("<I", arr.size))
        buf.write(arr.tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


_TENSOR_SHAPES = {
    "w1": lambda d, h: (d, h), "b1": lambda d, h: (h,),
    "ln1_scale": lambda d, h: (h,), "ln1_shift": lambda d, h: (h,),
    "w2": lambda d, h: (h, h), "b2": lambda d, h: (h,),
    "ln2_scale": lambda d, h: (h,), "ln2_shift": lambda d, h: (h,),
    "w3": lambda d, h: (h, h), "b3": lambda d, h: (h,),
    "ln3_scale": lambda d, h: (h,), "ln3_shift": lambda d, h: (h,),
    "w4": lambda d, h: (h, d), "b4": lambda d, h: (d,),
    "ln4_scale": lambda d, h: (d,), "ln4_shift": lambda d, h: (d,),
}


def checkpoint_file_size(d: int, hidden: int) -> int:
    """Exact byte size of a checkpoint for the given dims."""
    n_scalars = parameter_count(d, hidden)  # includes alpha_logit
    return len(CHECKPOINT_MAGIC) + 12 + 4 * n_scalars + 4 * len(TENSOR_ORDER)


def load_checkpoint(path) -> CalModel:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 16:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, d, hidden, alpha_logit = struct.unpack_from("<IIIf", raw, off)
    off += 16
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    params = {}
    for name in TENSOR_ORDER:
        shape = _TENSOR_SHAPES[name](d, hidden)
        count = int(np.prod(shape))
        if len(raw) < off + 4:
            raise FormatError(f"{path}: truncated before tensor {name}")
        (stored,) = struct.unpack_from("<I", raw, off)
        off += 4
        if stored != count:
            raise FormatError(
                f"{path}: tensor {name} has {stored} elements, expected {count}"
            )
        end = off + 4 * count
        if len(raw) < end:
            raise FormatError(f"{path}: truncated inside tensor {name}")
        params[name] = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape).copy()
        off += 4 * count
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return CalModel(d=d, hidden=hidden, params=params,
                    alpha_logit=np.array([alpha_logit], np.float32))
