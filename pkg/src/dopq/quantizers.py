"""Uniform, logarithmic, shift-uniform-log2 and tangent quantizers.

Every quantizer is a pair of pure functions ``*_quant`` (float -> int32 codes)
and ``*_dequant`` (codes -> float), plus a calibration routine that picks its
parameters from a corpus. ``quantize``/``dequantize``/``fake_quant`` dispatch on
the parameter type. Rounding is round-half-to-even throughout (``np.rint``).
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError, DomainError, ParameterError

LOG_EPS = 1e-10
SQRT2 = math.sqrt(2.0)

LAYER_WISE = "layer-wise"
CHANNEL_WISE = "channel-wise"


def qmax(bits: int) -> int:
    return (1 << bits) - 1


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Affine uniform-quantizer parameters.

    ``axis`` is the channel axis of the tensors this quantizer is applied to;
    ``None`` means one (scale, zero_point) pair for the whole tensor.
    """

    bits: int
    scale: Union[float, np.ndarray]
    zero_point: Union[int, np.ndarray]
    axis: int | None = None

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 2:
            raise ParameterError(f"bitwidth must be an integer >= 2, got {self.bits}")
        s = np.asarray(self.scale, dtype=np.float64)
        z = np.asarray(self.zero_point)
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ParameterError("scale must be finite and positive")
        if not np.all(np.rint(z) == z):
            raise ParameterError("zero point must be integral")
        if np.any(z < 0) or np.any(z > qmax(self.bits)):
            raise ParameterError(f"zero point outside [0, {qmax(self.bits)}]")
        if self.axis is None:
            if s.ndim or z.ndim:
                raise ParameterError("layer-wise params need scalar scale and zero point")
            object.__setattr__(self, "scale", float(s))
            object.__setattr__(self, "zero_point", int(z))
        else:
            if s.ndim != 1 or s.shape != z.shape:
                raise ParameterError("channel-wise scale and zero point must be equal-length vectors")
            object.__setattr__(self, "scale", s.copy())
            object.__setattr__(self, "zero_point", z.astype(np.int64))

    @property
    def granularity(self) -> str:
        return LAYER_WISE if self.axis is None else CHANNEL_WISE

    @property
    def qmax(self) -> int:
        return qmax(self.bits)

    def broadcast(self, ndim: int):
        """Scale and zero point shaped to broadcast against an ``ndim`` tensor."""
        if self.axis is None:
            return self.scale, self.zero_point
        shape = [1] * ndim
        shape[self.axis] = self.scale.shape[0]
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def with_scale(self, scale) -> "QuantParams":
        return QuantParams(self.bits, scale, self.zero_point, self.axis)


@dataclass(frozen=True)
class LogParams:
    bits: int
    s: float
    base: float = 2.0

    def __post_init__(self):
        if self.bits < 2:
            raise ParameterError("bitwidth must be >= 2")
        if not (math.isfinite(self.s) and self.s > 0):
            raise ParameterError("LogQ scale must be positive")
        if self.base not in (2.0, SQRT2):
            raise ParameterError(f"LogQ base must be 2 or sqrt(2), got {self.base}")

    @property
    def codes_per_octave(self) -> float:
        # log_base(y) = log2(y) * codes_per_octave, exact for both bases
        return 1.0 if self.base == 2.0 else 2.0


@dataclass(frozen=True)
class SulqParams:
    eta: float
    inner: QuantParams

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise ParameterError("SULQ offset eta must be positive")

    @property
    def bits(self) -> int:
        return self.inner.bits


def tanq_feasible(a: float, b_focus: float) -> bool:
    """Constraint block on TanQ's (a, b): b + pi/2a > 1, b - pi/2a < 0, a > 0, 0 < b < 1."""
    if not (a > 0 and 0 < b_focus < 1):
        return False
    half = math.pi / (2.0 * a)
    return b_focus + half > 1.0 and b_focus - half < 0.0


@dataclass(frozen=True)
class TanParams:
    a: float
    b_focus: float
    inner: QuantParams

    def __post_init__(self):
        if not tanq_feasible(self.a, self.b_focus):
            raise ParameterError(
                f"infeasible TanQ parameters a={self.a}, b={self.b_focus}: "
                "need b + pi/(2a) > 1 and b - pi/(2a) < 0"
            )
        if self.inner.axis is not None:
            raise ParameterError("TanQ inner grid is layer-wise")

    @property
    def bits(self) -> int:
        return self.inner.bits


Quantizer = Union[QuantParams, LogParams, SulqParams, TanParams]


# --- uniform --------------------------------------------------------------

def uq_calibrate(x, bits: int, granularity: str = LAYER_WISE, axis: int = -1) -> QuantParams:
    """Min/max calibration: s = (max - min) / (2^b - 1), z = round(-min / s).

    A channel whose range is empty gets s = 1 and z = clamp(round(-min)).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("cannot calibrate on an empty tensor")
    top = qmax(bits)
    if granularity == LAYER_WISE:
        mn = np.asarray(x.min())
        mx = np.asarray(x.max())
        ax = None
    elif granularity == CHANNEL_WISE:
        # stored negative so the params apply to tensors with extra leading dims
        ax = axis % x.ndim - x.ndim
        flat = np.moveaxis(x, ax, -1).reshape(-1, x.shape[ax])
        mn, mx = flat.min(axis=0), flat.max(axis=0)
    else:
        raise ParameterError(f"unknown granularity {granularity!r}")
    flat_range = mx == mn
    s = np.where(flat_range, 1.0, (mx - mn) / top)
    z = np.clip(np.rint(-mn / s), 0, top).astype(np.int64)
    if ax is None:
        return QuantParams(bits, float(s), int(z))
    return QuantParams(bits, s, z, ax)


def uq_quant(x, p: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s, z = p.broadcast(x.ndim)
    return np.clip(np.rint(x / s) + z, 0, p.qmax).astype(np.int32)


def uq_dequant(q, p: QuantParams) -> np.ndarray:
    q = np.asarray(q)
    s, z = p.broadcast(q.ndim)
    return s * (q.astype(np.float64) - z)


# --- logarithmic ----------------------------------------------------------

def log_calibrate(x, bits: int, base: float = 2.0) -> LogParams:
    """LogQ scale defaults to the corpus maximum so the largest value gets code 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("cannot calibrate on an empty tensor")
    if np.any(x < 0):
        raise DomainError("LogQ input must be non-negative")
    mx = float(x.max())
    return LogParams(bits, mx if mx > LOG_EPS else 1.0, base)


def log_quant(x, p: LogParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DomainError("LogQ input must be non-negative")
    top = qmax(p.bits)
    tiny = x <= LOG_EPS
    with np.errstate(divide="ignore"):
        e = -np.log2(np.where(tiny, 1.0, x) / p.s) * p.codes_per_octave
    q = np.clip(np.rint(e), 0, top)
    return np.where(tiny, top, q).astype(np.int32)


def log_dequant(q, p: LogParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return p.s * np.exp2(-q / p.codes_per_octave)


# --- shift-uniform-log2 ---------------------------------------------------

SULQ_ETAS = tuple(2.0 ** -k for k in range(1, 15))


def _sulq_transform(x, eta):
    return -np.log2(x + eta)


def sulq_calibrate(x, bits: int, eta: float | None = None) -> SulqParams:
    """Calibrate the inner grid on -log2(x + eta); search eta over 2^-k, k=1..14 when omitted."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("cannot calibrate on an empty tensor")
    if np.any(x < 0):
        raise DomainError("SULQ input must be non-negative")
    if eta is not None:
        return SulqParams(eta, uq_calibrate(_sulq_transform(x, eta), bits))
    best, best_err = None, math.inf
    for e in SULQ_ETAS:
        p = SulqParams(e, uq_calibrate(_sulq_transform(x, e), bits))
        err = float(np.mean((sulq_dequant(sulq_quant(x, p), p) - x) ** 2))
        if err < best_err:
            best, best_err = p, err
    return best


def sulq_quant(x, p: SulqParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DomainError("SULQ input must be non-negative")
    return uq_quant(_sulq_transform(x, p.eta), p.inner)


def sulq_dequant(q, p: SulqParams) -> np.ndarray:
    return np.maximum(np.exp2(-uq_dequant(q, p.inner)) - p.eta, 0.0)


# --- tangent --------------------------------------------------------------

def tanq_transform(x, a: float, b_focus: float) -> np.ndarray:
    return np.tan(a * (np.asarray(x, dtype=np.float64) - b_focus))


def tanq_calibrate(x, bits: int, a: float, b_focus: float) -> TanParams:
    """Min/max calibration of the inner uniform grid in the tan domain.

    tan is increasing on the principal branch, so the transformed extremes are
    the transforms of the input extremes.
    """
    if not tanq_feasible(a, b_focus):
        raise ParameterError(f"infeasible TanQ parameters a={a}, b={b_focus}")
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    if x.size == 0:
        raise DomainError("cannot calibrate on an empty tensor")
    ends = tanq_transform(np.array([x.min(), x.max()]), a, b_focus)
    return TanParams(a, b_focus, uq_calibrate(ends, bits))


def tanq_quant(x, tp: TanParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    outside = np.count_nonzero((x < 0.0) | (x > 1.0))
    if outside:
        warnings.warn(f"tanq_quant: {outside} inputs outside [0, 1] clamped", RuntimeWarning, stacklevel=2)
        x = np.clip(x, 0.0, 1.0)
    return uq_quant(tanq_transform(x, tp.a, tp.b_focus), tp.inner)


def tanq_dequant(q, tp: TanParams, literal: bool = False) -> np.ndarray:
    """arctan(s * (q - z)) / a + b, clamped to [0, 1].

    ``literal=True`` rounds the argument of arctan to an integer first, as the
    formula is sometimes printed; it wipes out most small codes.
    """
    t = uq_dequant(q, tp.inner)
    if literal:
        t = np.rint(t)
    return np.clip(np.arctan(t) / tp.a + tp.b_focus, 0.0, 1.0)


@dataclass(frozen=True)
class SearchGrid:
    a_values: tuple = field(default_factory=lambda: tuple(np.geomspace(0.3, 12.0, 32)))
    b_values: tuple = field(default_factory=lambda: tuple(np.linspace(0.0, 1.0, 34)[1:-1]))

    def feasible_pairs(self) -> list[tuple[float, float]]:
        return [
            (float(a), float(b))
            for a in sorted(self.a_values)
            for b in sorted(self.b_values)
            if tanq_feasible(a, b)
        ]


def tanq_mse(x, tp: TanParams) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((tanq_dequant(tanq_quant(x, tp), tp) - x) ** 2))


def tanq_grid_table(x, bits: int, grid: SearchGrid | None = None, workers: int = 1):
    """MSE of every feasible grid pair, in (a, b_focus) ascending order."""
    x = np.clip(np.asarray(x, dtype=np.float64).ravel(), 0.0, 1.0)
    if x.size == 0:
        raise DomainError("cannot search on an empty tensor")
    pairs = (grid or SearchGrid()).feasible_pairs()
    if not pairs:
        raise ConfigError("grid", "no feasible (a, b_focus) pair in the TanQ search grid")

    def score(pair):
        tp = tanq_calibrate(x, bits, *pair)
        return tp, tanq_mse(x, tp)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(score, pairs))
    return [score(pr) for pr in pairs]


def tanq_grid_search(x, bits: int, grid: SearchGrid | None = None, workers: int = 1) -> TanParams:
    """Feasible (a, b_focus) pair minimizing reconstruction MSE.

    Ties go to the smallest a, then the smallest b_focus (the table is sorted
    that way and only strict improvements replace the incumbent).
    """
    best, best_err = None, math.inf
    for tp, err in tanq_grid_table(x, bits, grid, workers):
        if err < best_err:
            best, best_err = tp, err
    return best


# --- dispatch -------------------------------------------------------------

def quantize(x, p: Quantizer) -> np.ndarray:
    if isinstance(p, QuantParams):
        return uq_quant(x, p)
    if isinstance(p, LogParams):
        return log_quant(x, p)
    if isinstance(p, SulqParams):
        return sulq_quant(x, p)
    if isinstance(p, TanParams):
        return tanq_quant(x, p)
    raise TypeError(f"not a quantizer: {type(p).__name__}")


def dequantize(q, p: Quantizer) -> np.ndarray:
    if isinstance(p, QuantParams):
        return uq_dequant(q, p)
    if isinstance(p, LogParams):
        return log_dequant(q, p)
    if isinstance(p, SulqParams):
        return sulq_dequant(q, p)
    if isinstance(p, TanParams):
        return tanq_dequant(q, p)
    raise TypeError(f"not a quantizer: {type(p).__name__}")


def fake_quant(x, p: Quantizer) -> np.ndarray:
    """dequantize(quantize(x)): simulated quantization, shape-preserving."""
    return dequantize(quantize(x, p), p)


QUANTIZER_KINDS = ("uq", "log2", "logsqrt2", "sulq", "tanq")


def calibrate(kind: str, x, bits: int, granularity: str = LAYER_WISE, axis: int = -1,
              grid: SearchGrid | None = None, workers: int = 1) -> Quantizer:
    """Calibrate a quantizer of the named kind on corpus ``x``."""
    if kind == "uq":
        return uq_calibrate(x, bits, granularity, axis)
    if kind == "log2":
        return log_calibrate(x, bits, 2.0)
    if kind == "logsqrt2":
        return log_calibrate(x, bits, SQRT2)
    if kind == "sulq":
        return sulq_calibrate(x, bits)
    if kind == "tanq":
        return tanq_grid_search(x, bits, grid, workers)
    raise ConfigError("quantizer", f"unknown quantizer kind {kind!r}; expected one of {QUANTIZER_KINDS}")


def kind_of(p: Quantizer) -> str:
    if isinstance(p, QuantParams):
        return "uq"
    if isinstance(p, LogParams):
        return "log2" if p.base == 2.0 else "logsqrt2"
    if isinstance(p, SulqParams):
        return "sulq"
    if isinstance(p, TanParams):
        return "tanq"
    raise TypeError(f"not a quantizer: {type(p).__name__}")


# --- configuration documents ----------------------------------------------

def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def to_config(p: Quantizer) -> dict:
    """Flat, JSON-ready description of a quantizer."""
    doc = dict(kind=kind_of(p), bitwidth=p.bits, granularity=LAYER_WISE,
               a=None, b_focus=None, eta=None, base=None, s=None, z=None, axis=None)
    if isinstance(p, LogParams):
        doc.update(base=p.base, s=p.s)
        return doc
    inner = p
    if isinstance(p, SulqParams):
        doc["eta"] = p.eta
        inner = p.inner
    elif isinstance(p, TanParams):
        doc.update(a=p.a, b_focus=p.b_focus)
        inner = p.inner
    doc.update(granularity=inner.granularity, s=_plain(inner.scale),
               z=_plain(inner.zero_point), axis=inner.axis)
    return doc


def from_config(doc: dict) -> Quantizer:
    try:
        kind = doc["kind"]
        bits = int(doc["bitwidth"])
        if kind in ("log2", "logsqrt2"):
            return LogParams(bits, float(doc["s"]), 2.0 if kind == "log2" else SQRT2)
        if doc.get("granularity", LAYER_WISE) == CHANNEL_WISE:
            inner = QuantParams(bits, np.asarray(doc["s"], dtype=np.float64),
                                np.asarray(doc["z"], dtype=np.int64), int(doc["axis"]))
        else:
            inner = QuantParams(bits, float(doc["s"]), int(doc["z"]))
        if kind == "uq":
            return inner
        if kind == "sulq":
            return SulqParams(float(doc["eta"]), inner)
        if kind == "tanq":
            return TanParams(float(doc["a"]), float(doc["b_focus"]), inner)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), "missing quantizer field") from None
    raise ConfigError("kind", f"unknown quantizer kind {doc.get('kind')!r}")


def dumps(p: Quantizer) -> str:
    return json.dumps(to_config(p), sort_keys=True)


def loads(text: str) -> Quantizer:
    return from_config(json.loads(text))
