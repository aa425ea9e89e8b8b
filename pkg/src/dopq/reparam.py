"""Channel-wise to layer-wise scale reparameterization of post-LayerNorm activations.

Per-channel quantizer factors (s, z) are folded into the LayerNorm affine and
the next linear layer so that a single (s~, z~) quantizes every channel:

    r1 = s / s~,  r2 = z - z~
    gamma' = gamma / r1,      beta' = (beta + s * r2) / r1
    W'[i, :] = r1[i] * W[i, :],  bias' = bias - (s * r2) @ W

With integral z~ the layer-wise codes equal the channel-wise codes exactly,
whatever s~ is; s~ and z~ only matter through what happens to W' afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError, ParameterError
from .quantizers import QuantParams, qmax, uq_dequant, uq_quant
from .tensor import mean_abs_dev, median


@dataclass(frozen=True, eq=False)
class LayerNormAffine:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if g.ndim != 1 or g.shape != b.shape:
            raise DimensionError("gamma and beta must be vectors of equal length")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)

    def __call__(self, xhat):
        return xhat * self.gamma + self.beta


@dataclass(frozen=True, eq=False)
class LinearLayer:
    W: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[1],):
            raise DimensionError(f"linear layer expects W[D, out] and bias[out], got {W.shape}, {b.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "bias", b)

    def __call__(self, x):
        return x @ self.W + self.bias


def mosf_select(s, z) -> tuple[float, int]:
    """Shared factors from the medians; z~ rounded half-to-even to stay integral."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise DomainError("no scales to select from")
    if np.any(s <= 0):
        raise DomainError("scales must be positive")
    return median(s), int(np.rint(median(z)))


def repq_select(s, z) -> tuple[float, int]:
    """Shared factors from the arithmetic means (the RepQ-ViT baseline)."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise DomainError("no scales to select from")
    if np.any(s <= 0):
        raise DomainError("scales must be positive")
    return float(np.mean(s)), int(np.rint(np.mean(np.asarray(z, dtype=np.float64))))


SELECTORS: dict[str, Callable] = {"median": mosf_select, "mean": repq_select}


def histogram_mode(s, bins: int = 64) -> float:
    """Centre of the most populated histogram bin (first one on ties)."""
    s = np.asarray(s, dtype=np.float64)
    if s.min() == s.max():
        return float(s[0])
    counts, edges = np.histogram(s, bins=bins)
    k = int(np.argmax(counts))
    return float((edges[k] + edges[k + 1]) / 2.0)


def score_candidates(s) -> list[tuple[str, float, float]]:
    """(statistic, value, MAD) rows for mean, median, min, max and histogram mode, best first.

    Sorting is stable and median is listed first, so it leads whenever it ties.
    MADs within 1e-12 relative of the smallest count as ties: for even lengths
    every point between the middle pair is a minimizer, and summation order
    alone can split them by an ulp.
    """
    s = np.asarray(s, dtype=np.float64).ravel()
    if s.size == 0:
        raise DomainError("no scales to score")
    stats = [
        ("median", median(s)),
        ("mean", float(np.mean(s))),
        ("min", float(s.min())),
        ("max", float(s.max())),
        ("mode", histogram_mode(s)),
    ]
    rows = [(name, value, mean_abs_dev(s, value)) for name, value in stats]
    floor = min(r[2] for r in rows) * (1.0 + 1e-12)
    return sorted(rows, key=lambda r: max(r[2], floor))


@dataclass(frozen=True, eq=False)
class ReparamBundle:
    """Per-channel factors, the shared factors, and the variation factors between them."""

    s: np.ndarray
    z: np.ndarray
    s_tilde: float
    z_tilde: int
    bits: int

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        z = np.asarray(self.z, dtype=np.int64)
        if s.ndim != 1 or s.shape != z.shape:
            raise DimensionError("s and z must be vectors of equal length")
        if np.any(s <= 0) or not self.s_tilde > 0:
            raise ParameterError("scales must be positive")
        if int(self.z_tilde) != self.z_tilde or not 0 <= self.z_tilde <= qmax(self.bits):
            raise ParameterError(f"z~ must be an integer in [0, {qmax(self.bits)}]")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "s_tilde", float(self.s_tilde))
        object.__setattr__(self, "z_tilde", int(self.z_tilde))

    @property
    def r1(self) -> np.ndarray:
        return self.s / self.s_tilde

    @property
    def r2(self) -> np.ndarray:
        return (self.z - self.z_tilde).astype(np.float64)

    @classmethod
    def from_params(cls, p: QuantParams, select: Callable = mosf_select) -> "ReparamBundle":
        if p.axis is None:
            raise ParameterError("reparameterization starts from channel-wise params")
        s_t, z_t = select(p.scale, p.zero_point)
        return cls(p.scale, p.zero_point, s_t, z_t, p.bits)

    def channel_params(self) -> QuantParams:
        return QuantParams(self.bits, self.s, self.z, axis=-1)

    def layer_params(self) -> QuantParams:
        return QuantParams(self.bits, self.s_tilde, self.z_tilde)


def reparameterize(ln: LayerNormAffine, lin: LinearLayer,
                   bundle: ReparamBundle) -> tuple[LayerNormAffine, LinearLayer]:
    D = bundle.s.shape[0]
    if ln.gamma.shape[0] != D or lin.W.shape[0] != D:
        raise DimensionError(f"bundle has {D} channels, LayerNorm {ln.gamma.shape[0]}, linear {lin.W.shape[0]}")
    r1, r2 = bundle.r1, bundle.r2
    shift = bundle.s * r2
    ln_new = LayerNormAffine(ln.gamma / r1, (ln.beta + shift) / r1)
    lin_new = LinearLayer(r1[:, None] * lin.W, lin.bias - shift @ lin.W)
    return ln_new, lin_new


@dataclass(frozen=True)
class EquivalenceReport:
    fp_max_abs: float
    fp_max_rel: float
    code_agreement: float
    deq_max_abs: float
    deq_max_rel: float

    @property
    def exact(self) -> bool:
        return self.code_agreement == 1.0 and self.deq_max_rel <= 1e-9 and self.fp_max_rel <= 1e-9


def _rel(a, b):
    diff = float(np.max(np.abs(a - b)))
    ref = float(np.max(np.abs(a)))
    return diff, diff / ref if ref > 0 else diff


def verify_equivalence(ln: LayerNormAffine, lin: LinearLayer, bundle: ReparamBundle,
                       xhat, bits: int | None = None) -> EquivalenceReport:
    """Compare the channel-wise path with the reparameterized layer-wise path.

    ``xhat`` holds normalized (pre-affine) LayerNorm outputs with channels last.
    """
    if bits is not None and bits != bundle.bits:
        raise ParameterError("bitwidth disagrees with the bundle")
    xhat = np.asarray(xhat, dtype=np.float64)
    ln2, lin2 = reparameterize(ln, lin, bundle)
    x_ch, x_lw = ln(xhat), ln2(xhat)
    fp_abs, fp_rel = _rel(lin(x_ch), lin2(x_lw))
    pc, pl = bundle.channel_params(), bundle.layer_params()
    q_ch, q_lw = uq_quant(x_ch, pc), uq_quant(x_lw, pl)
    agree = float(np.mean(q_ch == q_lw))
    dq_abs, dq_rel = _rel(lin(uq_dequant(q_ch, pc)), lin2(uq_dequant(q_lw, pl)))
    return EquivalenceReport(fp_abs, fp_rel, agree, dq_abs, dq_rel)


def site_report(site: str, bundle: ReparamBundle, eq: EquivalenceReport | None = None) -> dict:
    """JSON-ready per-site summary: shared factors, MAD table, equivalence deltas."""
    doc = {
        "site": site,
        "s_tilde": bundle.s_tilde,
        "z_tilde": bundle.z_tilde,
        "s_mean": float(np.mean(bundle.s)),
        "s_median": median(bundle.s),
        "mad": [{"statistic": n, "value": v, "mad": m} for n, v, m in score_candidates(bundle.s)],
    }
    if eq is not None:
        doc.update(code_agreement=eq.code_agreement, fp_max_rel=eq.fp_max_rel, deq_max_rel=eq.deq_max_rel)
    return doc
