"""Fixed-point shift-add CORDIC for tan and arctan.

Angles and coordinates are Q-format integers (``fraction_bits`` fractional
bits) held in int64 arrays. The iteration loops only add, subtract and
arithmetically shift; the arctan(2^-i) table is the sole transcendental input
and is built once per config. Negative arguments are handled by symmetry so
``f(-x) == -f(x)`` holds bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DomainError, ParameterError
from .quantizers import TanParams, uq_dequant, uq_quant

BRANCH_GUARD = 0.01
_HALF_PI = math.pi / 2.0


@dataclass(frozen=True)
class CordicConfig:
    iterations: int = 30
    fraction_bits: int = 32

    def __post_init__(self):
        if not 8 <= self.iterations <= 48:
            raise ParameterError("iterations must lie in [8, 48]")
        if not 16 <= self.fraction_bits <= 40:
            raise ParameterError("fraction_bits must lie in [16, 40]")

    @cached_property
    def table(self) -> np.ndarray:
        """round(arctan(2^-i) * 2^F) for i = 0 .. iterations-1."""
        one = 1 << self.fraction_bits
        return np.array([round(math.atan(2.0 ** -i) * one) for i in range(self.iterations)], dtype=np.int64)

    @property
    def one(self) -> int:
        return 1 << self.fraction_bits

    def to_fixed(self, v) -> np.ndarray:
        return np.rint(np.asarray(v, dtype=np.float64) * self.one).astype(np.int64)

    def to_float(self, v) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) / self.one


def rotate(angle: np.ndarray, cfg: CordicConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rotation mode from (1, 0) by non-negative fixed-point ``angle``.

    Returns (x, y) = K * (cos, sin) in fixed point, K ~ 1.6468 the CORDIC gain.
    """
    x = np.full(angle.shape, cfg.one, dtype=np.int64)
    y = np.zeros(angle.shape, dtype=np.int64)
    z = angle.astype(np.int64, copy=True)
    for i, step in enumerate(cfg.table):
        up = z >= 0
        xs, ys = x >> i, y >> i
        x, y = np.where(up, x - ys, x + ys), np.where(up, y + xs, y - xs)
        z = np.where(up, z - step, z + step)
    return x, y


def vector(y0: np.ndarray, cfg: CordicConfig) -> np.ndarray:
    """Vectoring mode from (1, y0): drives y to zero, returns the accumulated angle."""
    x = np.full(y0.shape, cfg.one, dtype=np.int64)
    y = y0.astype(np.int64, copy=True)
    z = np.zeros(y0.shape, dtype=np.int64)
    for i, step in enumerate(cfg.table):
        down = y >= 0
        xs, ys = x >> i, y >> i
        x, y = np.where(down, x + ys, x - ys), np.where(down, y - xs, y + xs)
        z = np.where(down, z + step, z - step)
    return z


def cordic_tan(theta, cfg: CordicConfig = CordicConfig()):
    """tan(theta) for |theta| <= pi/2 - 0.01 as the ratio sin/cos of a rotation."""
    th = np.asarray(theta, dtype=np.float64)
    if np.any(~np.isfinite(th)) or np.any(np.abs(th) > _HALF_PI - BRANCH_GUARD):
        raise DomainError("cordic_tan argument outside the guarded principal branch")
    angle = cfg.to_fixed(np.abs(th))
    x, y = rotate(angle, cfg)
    # the residual of a zero rotation is a few ulp of oscillation, not zero
    out = np.where(angle == 0, 0.0, y.astype(np.float64) / x.astype(np.float64))
    out = np.where(th < 0, -out, out)
    return float(out) if out.ndim == 0 else out


def cordic_arctan(y, cfg: CordicConfig = CordicConfig()):
    """arctan(y); |y| > 8 is folded through arctan(y) = pi/2 - arctan(1/y)."""
    yv = np.asarray(y, dtype=np.float64)
    if np.any(~np.isfinite(yv)):
        raise DomainError("cordic_arctan needs a finite argument")
    mag = np.abs(yv)
    big = mag > 8.0
    arg = np.where(big, 1.0 / np.where(big, mag, 1.0), mag)
    fixed = cfg.to_fixed(arg)
    ang = np.where(fixed == 0, 0.0, cfg.to_float(vector(fixed, cfg)))
    ang = np.where(big, _HALF_PI - ang, ang)
    out = np.where(yv < 0, -ang, ang)
    return float(out) if out.ndim == 0 else out


def tanq_quant_cordic(x, tp: TanParams, cfg: CordicConfig = CordicConfig()) -> np.ndarray:
    """TanQ codes with the tangent evaluated by CORDIC.

    Angles beyond the branch guard are pinned to it; feasible parameters only
    reach that region in the outermost cells.
    """
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    lim = _HALF_PI - BRANCH_GUARD
    theta = np.clip(tp.a * (x - tp.b_focus), -lim, lim)
    return uq_quant(np.asarray(cordic_tan(theta, cfg)), tp.inner)


def tanq_dequant_cordic(q, tp: TanParams, cfg: CordicConfig = CordicConfig()) -> np.ndarray:
    t = uq_dequant(q, tp.inner)
    return np.clip(np.asarray(cordic_arctan(t, cfg)) / tp.a + tp.b_focus, 0.0, 1.0)
