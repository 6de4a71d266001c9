"""Dense float64 arithmetic, a replayable RNG, and manual-backprop units.

Everything downstream is built on three pieces:

* shape-checked float64 vectors/matrices (plain ``numpy`` arrays; any
  dimension mismatch raises :class:`~ual.errors.ShapeError`, nothing is
  broadcast silently),
* :class:`SeededRng`, a splitmix64 counter generator with Box-Muller
  normals whose exact algorithm is documented below so the stream can be
  replayed by an independent implementation,
* small differentiable units (affine map, softmax cross-entropy) with
  hand-written backward passes, a :class:`ParameterStore` for their
  weights, and a central-finite-difference :func:`gradient_check`.

The model here is tiny, so float64 is used throughout; gradient checking
needs the precision anyway.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DataError, NumericError, ShapeError

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# ---------------------------------------------------------------------------
# shape-checked dense storage


def as_f64(a, name: str = "array") -> np.ndarray:
    """Return ``a`` as a contiguous float64 array, rejecting non-finite input."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def ensure_vector(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    arr = as_f64(x, name)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ShapeError(f"{name} must have length {dim}, got {arr.shape[0]}")
    return arr


def ensure_matrix(
    w, rows: int | None = None, cols: int | None = None, name: str = "matrix"
) -> np.ndarray:
    arr = as_f64(w, name)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeError(f"{name} must have {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"{name} must have {cols} cols, got {arr.shape[1]}")
    return arr


# ---------------------------------------------------------------------------
# seeded RNG


def _mix64(z: int) -> int:
    """splitmix64 finalizer on python ints (masked to 64 bits)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; used to fold string keys into RNG stream seeds."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class SeededRng:
    """Deterministic splitmix64 generator with Box-Muller normals.

    Algorithm (fixed; replayable from the seed alone):

    * raw 64-bit word ``i`` (0-based) is ``mix(seed + (i+1) * GAMMA) mod 2^64``
      where ``GAMMA = 0x9E3779B97F4A7C15`` and ``mix`` is the splitmix64
      finalizer (xor-shift 30, mul 0xBF58476D1CE4E5B9, xor-shift 27,
      mul 0x94D049BB133111EB, xor-shift 31);
    * a uniform in ``[0, 1)`` is ``(word >> 11) * 2**-53``;
    * normals come in Box-Muller pairs: with ``u1 = ((w1 >> 11) + 1) * 2**-53``
      (so ``u1 in (0, 1]``) and ``u2 = (w2 >> 11) * 2**-53``,
      ``z0 = sqrt(-2 ln u1) cos(2 pi u2)`` and ``z1 = ... sin(...)``.
      A request for ``k`` normals consumes ``2 * ceil(k / 2)`` raw words;
      no spare value is cached across calls.

    ``derive`` folds extra key material into the seed (not the state), so
    child streams are independent of how much the parent has consumed:
    ``child = mix(seed ^ (token + GAMMA))`` applied per part, where ``token``
    is ``mix(part)`` for ints and FNV-1a64 of the UTF-8 bytes for strings.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._count = 0  # raw words consumed

    def derive(self, *parts: int | str) -> "SeededRng":
        s = self.seed
        for part in parts:
            if isinstance(part, str):
                token = fnv1a64(part.encode("utf-8"))
            elif isinstance(part, (int, np.integer)):
                token = _mix64(int(part) & _MASK64)
            else:
                raise TypeError(f"rng stream key parts must be int or str, got {type(part)!r}")
            s = _mix64(s ^ ((token + _GAMMA) & _MASK64))
        return SeededRng(s)

    def _raw(self, k: int) -> np.ndarray:
        """Next ``k`` raw uint64 words, vectorized."""
        start = self._count + 1
        self._count += k
        with np.errstate(over="ignore"):
            idx = np.arange(start, start + k, dtype=np.uint64)
            z = (np.uint64(self.seed) + idx * np.uint64(_GAMMA)).astype(np.uint64)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
            return z ^ (z >> np.uint64(31))

    def uniforms(self, k: int) -> np.ndarray:
        """``k`` i.i.d. uniforms in [0, 1)."""
        return (self._raw(k) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, shape: int | tuple[int, ...]) -> np.ndarray:
        """Standard normal draws with the given shape (Box-Muller)."""
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),)
        k = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if k == 0:
            return np.zeros(shape, dtype=np.float64)
        pairs = (k + 1) // 2
        words = self._raw(2 * pairs)
        u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:k].reshape(shape)

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def integer(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError("integer() needs n >= 1")
        return min(int(self.uniform() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of ``range(n)``."""
        idx = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx


# ---------------------------------------------------------------------------
# parameter storage

PARAM_FORMAT_VERSION = 1


def _format_float(v: float) -> str:
    # 17 significant digits: lossless for IEEE754 doubles. Force a decimal
    # point so json round-trips -0.0 (a bare "-0" parses as int 0).
    s = format(float(v), ".17g")
    if not any(c in s for c in ".eE"):
        s += ".0"
    return s


class ParameterStore:
    """Named, versioned flat collection of trainable float64 arrays.

    Names are hierarchical strings such as ``face.embed.mu.weight``. The
    on-disk format is a single JSON document
    ``{"version": 1, "params": {name: {"shape": [...], "data": [...]}}}``
    with floats written at 17 significant digits, which makes a
    save -> restore round trip bit-exact.
    """

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}

    def register(self, name: str, value) -> np.ndarray:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.array(value, dtype=np.float64)
        self._params[name] = arr
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def get(self, name: str) -> np.ndarray:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def set(self, name: str, value) -> None:
        cur = self.get(name)
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != cur.shape:
            raise ShapeError(
                f"parameter {name!r} has shape {cur.shape}, cannot assign {arr.shape}"
            )
        cur[...] = arr

    def subset(self, prefix: str) -> "ParameterStore":
        """New store holding only parameters whose name starts with ``prefix``."""
        sub = ParameterStore()
        for name in self.names():
            if name.startswith(prefix):
                sub.register(name, self._params[name].copy())
        return sub

    def clone(self) -> "ParameterStore":
        out = ParameterStore()
        for name in self.names():
            out.register(name, self._params[name].copy())
        return out

    def save(self, path) -> None:
        lines = ['{"version": %d, "params": {' % PARAM_FORMAT_VERSION]
        entries = []
        for name in self.names():
            arr = self._params[name]
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"parameter {name!r} contains non-finite values")
            shape = ", ".join(str(int(d)) for d in arr.shape)
            data = ", ".join(_format_float(v) for v in arr.reshape(-1))
            entries.append('"%s": {"shape": [%s], "data": [%s]}' % (name, shape, data))
        lines.append(",\n".join(entries))
        lines.append("}}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines))
            fh.write("\n")

    def restore(self, path) -> None:
        """Load values from ``path`` into already-registered parameters.

        The file must carry exactly the registered names with matching
        shapes; unknown or missing names are errors.
        """
        import json

        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("version") != PARAM_FORMAT_VERSION:
            raise DataError(f"{path}: unsupported parameter file version")
        params = doc.get("params")
        if not isinstance(params, dict):
            raise DataError(f"{path}: missing 'params' object")
        unknown = sorted(set(params) - set(self._params))
        if unknown:
            raise DataError(f"{path}: unknown parameter names on load: {unknown}")
        missing = sorted(set(self._params) - set(params))
        if missing:
            raise DataError(f"{path}: parameter names missing from file: {missing}")
        for name, entry in params.items():
            shape = tuple(entry["shape"])
            arr = np.array(entry["data"], dtype=np.float64).reshape(shape)
            self.set(name, arr)


# ---------------------------------------------------------------------------
# differentiable units

# A differentiable unit follows the convention: forward(...) returns the
# output plus whatever tape it needs, backward(tape, d_output) accumulates
# parameter gradients into a dict and returns the input gradient.


class AffineMap:
    """y = W x + b with a manual backward pass.

    ``W`` has shape ``(out_dim, in_dim)``. Forward accepts a single vector or
    a stack of rows ``(n, in_dim)``; gradients are accumulated into a plain
    ``{name: array}`` dict so several units can share one backward sweep.
    """

    def __init__(self, name: str, in_dim: int, out_dim: int):
        self.name = name
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.weight_name = f"{name}.weight"
        self.bias_name = f"{name}.bias"

    def param_names(self) -> list[str]:
        return [self.weight_name, self.bias_name]

    def register(self, store: ParameterStore, rng: SeededRng, weight_scale: float | None = None):
        scale = weight_scale if weight_scale is not None else self.in_dim**-0.5
        store.register(self.weight_name, scale * rng.normals((self.out_dim, self.in_dim)))
        store.register(self.bias_name, np.zeros(self.out_dim))

    def forward(self, store: ParameterStore, x: np.ndarray) -> np.ndarray:
        W = store.get(self.weight_name)
        b = store.get(self.bias_name)
        if x.ndim == 1:
            if x.shape[0] != self.in_dim:
                raise ShapeError(f"{self.name}: input has length {x.shape[0]}, need {self.in_dim}")
            return W @ x + b
        if x.ndim == 2:
            if x.shape[1] != self.in_dim:
                raise ShapeError(f"{self.name}: input has width {x.shape[1]}, need {self.in_dim}")
            return x @ W.T + b
        raise ShapeError(f"{self.name}: input must be 1-D or 2-D, got shape {x.shape}")

    def backward(
        self,
        store: ParameterStore,
        x: np.ndarray,
        d_out: np.ndarray,
        grads: dict[str, np.ndarray],
    ) -> np.ndarray:
        W = store.get(self.weight_name)
        if x.ndim == 1:
            x2 = x[None, :]
            d2 = d_out[None, :]
        else:
            x2, d2 = x, d_out
        _accumulate(grads, self.weight_name, d2.T @ x2)
        _accumulate(grads, self.bias_name, d2.sum(axis=0))
        d_in = d2 @ W
        return d_in[0] if x.ndim == 1 else d_in


def _accumulate(grads: dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, dtype=np.float64)


def linear_forward(x, W, b) -> np.ndarray:
    """y = W x + b on explicit vectors; dimension mismatch raises."""
    x = ensure_vector(x, name="x")
    W = ensure_matrix(W, cols=x.shape[0], name="W")
    b = ensure_vector(b, dim=W.shape[0], name="b")
    return W @ x + b


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """Loss ``-log p[label]`` and the probability vector, via max-subtraction.

    Stable for any finite logits; ``label`` outside ``[0, C)`` raises.
    """
    z = ensure_vector(logits, name="logits")
    c = z.shape[0]
    if c < 2:
        raise ShapeError(f"need at least 2 classes, got {c}")
    if not (0 <= int(label) < c):
        raise DataError(f"label {label} out of range for {c} classes")
    m = float(z.max())
    e = np.exp(z - m)
    total = float(e.sum())
    probs = e / total
    loss = float(np.log(total) + m - z[int(label)])
    return loss, probs


def softmax_cross_entropy_grad(probs: np.ndarray, label: int) -> np.ndarray:
    """d loss / d logits for :func:`softmax_cross_entropy`."""
    g = probs.copy()
    g[int(label)] -= 1.0
    return g


# ---------------------------------------------------------------------------
# gradient checking

# Callable contract: loss_fn(store) -> (scalar loss, {param name: gradient}).
LossWithGrads = Callable[[ParameterStore], tuple[float, Mapping[str, np.ndarray]]]


@dataclass
class GradCheckResult:
    """Outcome of one finite-difference sweep."""

    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    failure: str | None = None  # parameter with a non-finite gradient, if any

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.worst < self.tolerance


def gradient_check(
    loss_fn: LossWithGrads,
    store: ParameterStore,
    names: Iterable[str] | None = None,
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckResult:
    """Compare analytic gradients with central finite differences.

    Per element: ``fd = (loss(p + h) - loss(p - h)) / (2 h)`` at ``h = step``;
    the relative error is ``|fd - g| / max(|fd|, |g|, 1e-8)``. The result
    records the max relative error per parameter.
    """
    result = GradCheckResult(tolerance=tolerance)
    _, grads = loss_fn(store)
    check_names = list(names) if names is not None else sorted(grads)
    for name in check_names:
        g = np.asarray(grads.get(name, np.zeros_like(store.get(name))), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            result.failure = name
            return result
        arr = store.get(name)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        worst = 0.0
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + step
            lo_hi, _ = loss_fn(store)
            flat[i] = orig - step
            lo_lo, _ = loss_fn(store)
            flat[i] = orig
            fd = (lo_hi - lo_lo) / (2.0 * step)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
        result.max_rel_error[name] = worst
    return result
