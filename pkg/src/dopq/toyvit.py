"""Deterministic desk-scale ViT encoder with fake-quant insertion points.

Inputs are token sequences ``[..., N, D]``; there is no patch embedding. Each
block is ``Y = X + MSA(LN1(X))``, ``X' = Y + MLP(LN2(Y))``; the model appends a
mean-pool over tokens and a linear classifier.

Quantization sites per block (activation name -> tensor quantized):

    ln1      post-LayerNorm input of the qkv projection (channel-wise)
    q, k     query/key inputs of the score matmul
    softmax  attention probabilities (any quantizer kind)
    v        value input of the attention-weighted sum
    proj     concatenated head outputs, input of the output projection
    ln2      post-LayerNorm input of fc1 (channel-wise)
    fc2      post-GELU input of fc2

Weights ``qkv``, ``proj``, ``fc1``, ``fc2`` are quantized per output column.
LayerNorm and Softmax themselves always run in float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import DimensionError, ParameterError
from .quantizers import Quantizer, QuantParams, fake_quant, from_config, to_config
from .reparam import LayerNormAffine, LinearLayer
from .tensor import matmul, read_dqt1, write_dqt1

LN_EPS = 1e-6
ACT_SITES = ("ln1", "q", "k", "softmax", "v", "proj", "ln2", "fc2")
CHANNEL_SITES = ("ln1", "ln2")
WEIGHT_SITES = ("qkv", "proj", "fc1", "fc2")
# post-LN site -> (LayerNorm, successor linear) it reparameterizes
REPARAM_SITES = {"ln1": ("ln1", "qkv"), "ln2": ("ln2", "fc1")}


@dataclass(frozen=True)
class ViTConfig:
    L: int = 2
    N: int = 16
    D: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    seed: int = 0
    init_std: float = 0.02
    # std of the query and key columns of W_qkv; None keeps init_std
    qk_std: float | None = None

    def __post_init__(self):
        for name in ("L", "N", "D", "heads", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be >= 1")
        if self.D % self.heads:
            raise DimensionError(f"D={self.D} is not divisible by heads={self.heads}")
        if self.init_std <= 0 or (self.qk_std is not None and self.qk_std <= 0):
            raise ParameterError("init_std and qk_std must be positive")

    @property
    def head_dim(self) -> int:
        return self.D // self.heads


@dataclass(eq=False)
class BlockWeights:
    ln1: LayerNormAffine
    qkv: LinearLayer
    proj: LinearLayer
    ln2: LayerNormAffine
    fc1: LinearLayer
    fc2: LinearLayer
    heads: int = 4


@dataclass(eq=False)
class ModelWeights:
    cfg: ViTConfig
    blocks: list[BlockWeights]
    head: LinearLayer


@dataclass(eq=False)
class BlockPlan:
    """Quantizers for one block; a missing site runs at full precision."""

    acts: dict[str, Quantizer] = field(default_factory=dict)
    weights: dict[str, QuantParams] = field(default_factory=dict)

    def copy(self) -> "BlockPlan":
        return BlockPlan(dict(self.acts), dict(self.weights))

    def to_config(self) -> dict:
        return {
            "acts": {k: to_config(v) for k, v in sorted(self.acts.items())},
            "weights": {k: to_config(v) for k, v in sorted(self.weights.items())},
        }

    @classmethod
    def from_config(cls, doc: dict) -> "BlockPlan":
        return cls({k: from_config(v) for k, v in doc.get("acts", {}).items()},
                   {k: from_config(v) for k, v in doc.get("weights", {}).items()})


@dataclass(eq=False)
class QuantPlan:
    blocks: list[BlockPlan]

    def copy(self) -> "QuantPlan":
        return QuantPlan([b.copy() for b in self.blocks])

    def to_config(self) -> dict:
        return {"blocks": [b.to_config() for b in self.blocks]}

    @classmethod
    def from_config(cls, doc: dict) -> "QuantPlan":
        return cls([BlockPlan.from_config(b) for b in doc["blocks"]])


# --- primitives -----------------------------------------------------------

def normalize(x) -> np.ndarray:
    """Zero-mean, unit (population) variance over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise DimensionError("LayerNorm needs at least two channels")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def layernorm(x, affine: LayerNormAffine) -> np.ndarray:
    return affine(normalize(x))


def softmax(scores, axis: int = -1) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    e = np.exp(scores - scores.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def gelu(x) -> np.ndarray:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


# --- forward passes -------------------------------------------------------
#
# A block runs as a chain of stages over a state dict of named tensors. Every
# activation site is stored before its fake-quant, so a caller that changes one
# quantizer can resume from the first stage reading that site.

def _q(state, site, acts):
    x = state[site]
    p = acts.get(site) if acts else None
    return x if p is None else fake_quant(x, p)


def quantized_weights(w: BlockWeights, plan: BlockPlan | None) -> BlockWeights:
    """Block weights with every planned weight quantizer applied."""
    if plan is None or not plan.weights:
        return w
    updates = {}
    for name, p in plan.weights.items():
        lin = getattr(w, name)
        updates[name] = LinearLayer(fake_quant(lin.W, p), lin.bias)
    return replace(w, **updates)


def _split_heads(t, heads):
    *lead, n, d = t.shape
    return np.swapaxes(t.reshape(*lead, n, heads, d // heads), -2, -3)


def _merge_heads(t):
    t = np.swapaxes(t, -2, -3)
    *lead, n, h, dh = t.shape
    return t.reshape(*lead, n, h * dh)


def _st_ln1(s, w, acts):
    s["ln1_hat"] = normalize(s["x"])
    s["ln1"] = w.ln1(s["ln1_hat"])


def _st_qkv(s, w, acts):
    qkv = matmul(_q(s, "ln1", acts), w.qkv.W) + w.qkv.bias
    s["q"], s["k"], s["v"] = (_split_heads(t, w.heads) for t in np.split(qkv, 3, axis=-1))


def _st_scores(s, w, acts):
    q, k = _q(s, "q", acts), _q(s, "k", acts)
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(q.shape[-1])
    s["softmax"] = softmax(scores)


def _st_attn(s, w, acts):
    s["proj"] = _merge_heads(np.matmul(_q(s, "softmax", acts), _q(s, "v", acts)))


def _st_proj(s, w, acts):
    s["msa"] = matmul(_q(s, "proj", acts), w.proj.W) + w.proj.bias


def _st_res1(s, w, acts):
    s["y"] = s["x"] + s["msa"]
    s["ln2_hat"] = normalize(s["y"])
    s["ln2"] = w.ln2(s["ln2_hat"])


def _st_fc1(s, w, acts):
    s["fc2"] = gelu(matmul(_q(s, "ln2", acts), w.fc1.W) + w.fc1.bias)


def _st_fc2(s, w, acts):
    s["mlp"] = matmul(_q(s, "fc2", acts), w.fc2.W) + w.fc2.bias


def _st_res2(s, w, acts):
    s["out"] = s["y"] + s["mlp"]


STAGES = (
    ("ln1", _st_ln1), ("qkv", _st_qkv), ("scores", _st_scores), ("attn", _st_attn),
    ("proj", _st_proj), ("res1", _st_res1), ("fc1", _st_fc1), ("fc2", _st_fc2), ("res2", _st_res2),
)
_STAGE_INDEX = {name: i for i, (name, _) in enumerate(STAGES)}
# first stage that reads each activation site / weight
SITE_STAGE = {"ln1": "qkv", "q": "scores", "k": "scores", "softmax": "attn", "v": "attn",
              "proj": "proj", "ln2": "fc1", "fc2": "fc2"}
WEIGHT_STAGE = {"qkv": "qkv", "proj": "proj", "fc1": "fc1", "fc2": "fc2"}


def run_stages(state: dict, w: BlockWeights, plan: BlockPlan | None, start: str = "ln1",
               stop: str = "res2") -> dict:
    """Run stages ``start`` .. ``stop`` on a shallow copy of ``state``.

    ``w`` must already carry quantized weights; stages never modify arrays in
    place, so the input state can be reused for other resumptions.
    """
    s = dict(state)
    acts = plan.acts if plan else None
    for _, fn in STAGES[_STAGE_INDEX[start]:_STAGE_INDEX[stop] + 1]:
        fn(s, w, acts)
    return s


def msa_forward(x, w: BlockWeights, plan: BlockPlan | None = None, capture: dict | None = None) -> np.ndarray:
    """Multi-head self-attention on post-LayerNorm input ``x[..., N, D]``."""
    x = np.asarray(x, dtype=np.float64)
    D = w.qkv.W.shape[0]
    if x.shape[-1] != D:
        raise DimensionError(f"MSA expects {D} channels, got {x.shape[-1]}")
    s = run_stages({"ln1": x}, quantized_weights(w, plan), plan, "qkv", "proj")
    if capture is not None:
        capture.update(s)
    return s["msa"]


def mlp_forward(y, w: BlockWeights, plan: BlockPlan | None = None, capture: dict | None = None) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != w.fc1.W.shape[0]:
        raise DimensionError(f"MLP expects {w.fc1.W.shape[0]} channels, got {y.shape[-1]}")
    s = run_stages({"ln2": y}, quantized_weights(w, plan), plan, "fc1", "fc2")
    if capture is not None:
        capture.update(s)
    return s["mlp"]


def block_forward(x, w: BlockWeights, plan: BlockPlan | None = None, capture: dict | None = None,
                  *, weights_quantized: bool = False) -> np.ndarray:
    """One encoder block. ``weights_quantized`` skips weight fake-quant (already applied).

    ``capture`` receives every intermediate, activation sites before quantization.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.qkv.W.shape[0]:
        raise DimensionError(f"block expects {w.qkv.W.shape[0]} channels, got {x.shape[-1]}")
    if not weights_quantized:
        w = quantized_weights(w, plan)
    s = run_stages({"x": x}, w, plan)
    if capture is not None:
        capture.update(s)
    return s["out"]


def model_forward(x, weights: ModelWeights, plan: QuantPlan | None = None) -> np.ndarray:
    """Logits ``[..., C]`` from token sequences ``[..., N, D]``."""
    h = np.asarray(x, dtype=np.float64)
    for i, w in enumerate(weights.blocks):
        h = block_forward(h, w, plan.blocks[i] if plan else None)
    return weights.head(h.mean(axis=-2))


def block_inputs(x, weights: ModelWeights, plan: QuantPlan | None = None) -> list[np.ndarray]:
    """Input of every block (and the final output last), under ``plan``."""
    h = np.asarray(x, dtype=np.float64)
    out = [h]
    for i, w in enumerate(weights.blocks):
        h = block_forward(h, w, plan.blocks[i] if plan else None)
        out.append(h)
    return out


def init_weights(cfg: ViTConfig) -> ModelWeights:
    """Seeded Gaussian weights (std ``cfg.init_std``), zero biases, identity LayerNorm affine.

    With ``cfg.qk_std`` set, the query and key columns are rescaled to that std;
    the random stream is the same either way.
    """
    rng = np.random.default_rng(cfg.seed)
    D, H = cfg.D, cfg.D * cfg.mlp_ratio

    def lin(fan_in, fan_out):
        return LinearLayer(rng.normal(0.0, cfg.init_std, (fan_in, fan_out)), np.zeros(fan_out))

    def ln():
        return LayerNormAffine(np.ones(D), np.zeros(D))

    blocks = []
    for _ in range(cfg.L):
        ln1, qkv = ln(), lin(D, 3 * D)
        if cfg.qk_std is not None:
            qkv.W[:, : 2 * D] *= cfg.qk_std / cfg.init_std
        blocks.append(BlockWeights(ln1=ln1, qkv=qkv, proj=lin(D, D), ln2=ln(),
                                   fc1=lin(D, H), fc2=lin(H, D), heads=cfg.heads))
    return ModelWeights(cfg, blocks, lin(D, cfg.num_classes))


# --- serialization --------------------------------------------------------

def weight_tensors(weights: ModelWeights) -> dict[str, np.ndarray]:
    """Flat ``name -> array`` view, e.g. ``blocks.0.qkv.W``."""
    out = {}
    for i, b in enumerate(weights.blocks):
        for ln in ("ln1", "ln2"):
            aff = getattr(b, ln)
            out[f"blocks.{i}.{ln}.gamma"] = aff.gamma
            out[f"blocks.{i}.{ln}.beta"] = aff.beta
        for name in WEIGHT_SITES:
            lin = getattr(b, name)
            out[f"blocks.{i}.{name}.W"] = lin.W
            out[f"blocks.{i}.{name}.bias"] = lin.bias
    out["head.W"] = weights.head.W
    out["head.bias"] = weights.head.bias
    return out


def save_weights(weights: ModelWeights, directory) -> Path:
    """One DQT1 file per tensor plus ``manifest.json`` mapping names to files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in weight_tensors(weights).items():
        fname = f"{name}.dqt"
        write_dqt1(d / fname, np.ascontiguousarray(arr, dtype=np.float64))
        files[name] = fname
    manifest = {"config": vars(weights.cfg), "tensors": files}
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_weights(directory) -> ModelWeights:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = ViTConfig(**manifest["config"])
    t = {name: read_dqt1(d / fname) for name, fname in manifest["tensors"].items()}
    blocks = []
    for i in range(cfg.L):
        def g(key):
            return t[f"blocks.{i}.{key}"]
        kw = {ln: LayerNormAffine(g(f"{ln}.gamma"), g(f"{ln}.beta")) for ln in ("ln1", "ln2")}
        kw.update({n: LinearLayer(g(f"{n}.W"), g(f"{n}.bias")) for n in WEIGHT_SITES})
        blocks.append(BlockWeights(heads=cfg.heads, **kw))
    return ModelWeights(cfg, blocks, LinearLayer(t["head.W"], t["head.bias"]))
