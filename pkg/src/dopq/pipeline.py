"""Calibration, block-wise reconstruction and the three-stage quantization pipeline.

Stage 1 quantizes every activation and reconstructs block by block (activation
parameters only). Stage 2 folds each channel-wise post-LayerNorm quantizer into
a layer-wise one through scale reparameterization. Stage 3 quantizes the
weights and reconstructs again.

Reconstruction is deterministic coordinate descent: each parameter in turn is
swept over a multiplicative grid around its current value, the argmin is kept
(ties go to the smaller value), and the sweep is repeated once on a finer grid.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, DomainError
from .quantizers import (
    CHANNEL_WISE,
    LAYER_WISE,
    LogParams,
    QuantParams,
    SearchGrid,
    SulqParams,
    TanParams,
    calibrate,
    fake_quant,
    tanq_calibrate,
    tanq_feasible,
    uq_calibrate,
)
from .reparam import SELECTORS, LayerNormAffine, LinearLayer, ReparamBundle, reparameterize, site_report, verify_equivalence
from .toyvit import (
    ACT_SITES,
    CHANNEL_SITES,
    REPARAM_SITES,
    WEIGHT_SITES,
    BlockPlan,
    BlockWeights,
    ModelWeights,
    QuantPlan,
    SITE_STAGE,
    WEIGHT_STAGE,
    block_forward,
    block_inputs,
    model_forward,
    quantized_weights,
    run_stages,
)


# --- configuration --------------------------------------------------------

@dataclass(frozen=True)
class PlanTemplate:
    """What to quantize and how; ``bits_w=None`` keeps weights in float."""

    bits_a: int = 4
    bits_w: int | None = 4
    softmax: str = "tanq"
    softmax_bits: int | None = None
    sites: tuple = ACT_SITES
    tan_sample: int = 65536
    seed: int = 0


@dataclass(frozen=True)
class ReconConfig:
    passes: int = 4
    grid_points: int = 33
    grid_lo: float = 0.5
    grid_hi: float = 2.0
    refine: bool = True
    refine_points: int = 9
    batch: int | None = None
    stage3_acts: bool = True
    input_mode: str = "fp"
    workers: int = 1

    def __post_init__(self):
        if self.passes < 1:
            raise ConfigError("recon.passes", "must be >= 1")
        if self.grid_points < 1:
            raise ConfigError("recon.grid_points", "must be >= 1")
        if self.refine_points < 1:
            raise ConfigError("recon.refine_points", "must be >= 1")
        if not 0 < self.grid_lo <= 1 <= self.grid_hi:
            raise ConfigError("recon.grid_lo", "grid must bracket 1: 0 < lo <= 1 <= hi")
        if self.input_mode not in ("fp", "quant"):
            raise ConfigError("recon.input_mode", "must be 'fp' or 'quant'")

    def factors(self) -> list[np.ndarray]:
        """Coarse grid, then (optionally) a grid spanning one coarse step either side."""
        lo, hi, n = math.log2(self.grid_lo), math.log2(self.grid_hi), self.grid_points
        grids = [np.exp2(np.linspace(lo, hi, n))] if n > 1 else [np.ones(1)]
        if self.refine and n > 1:
            step = (hi - lo) / (n - 1)
            grids.append(np.exp2(np.linspace(-step, step, self.refine_points)))
        return grids


# --- block records and loss -----------------------------------------------

@dataclass(eq=False)
class BlockRecord:
    index: int
    weights: BlockWeights
    m: np.ndarray
    target: np.ndarray
    plan: BlockPlan
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.m.shape != self.target.shape:
            raise DimensionError("cached input and target shapes differ")

    def quant_output(self, plan: BlockPlan | None = None, wq: BlockWeights | None = None) -> np.ndarray:
        plan = self.plan if plan is None else plan
        if wq is not None:
            return block_forward(self.m, wq, plan, weights_quantized=True)
        return block_forward(self.m, self.weights, plan)


def rms(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def block_loss(rec: BlockRecord, plan: BlockPlan | None = None, wq: BlockWeights | None = None) -> float:
    """||g_f(m) - g_q(m)||_2 / sqrt(#elements): invariant to duplicating the batch."""
    return rms(rec.target, rec.quant_output(plan, wq))


# --- reconstruction knobs -------------------------------------------------

class ActScale:
    """Scale of an activation quantizer (a common gain for channel-wise ones)."""

    touches_weights = False

    def __init__(self, site):
        self.site = site
        self.name = f"act:{site}"
        self.stage = SITE_STAGE[site]

    def candidates(self, plan: BlockPlan, factors, rec):
        p = plan.acts[self.site]
        out = []
        for f in factors:
            f = float(f)
            if isinstance(p, QuantParams):
                key = f if p.axis is not None else p.scale * f
                new = p.with_scale(p.scale * f)
            elif isinstance(p, LogParams):
                key, new = p.s * f, replace(p, s=p.s * f)
            else:  # SULQ / TanQ: scale of the inner grid
                key, new = p.inner.scale * f, replace(p, inner=p.inner.with_scale(p.inner.scale * f))
            out.append((key, _with_act(plan, self.site, new)))
        return out


class TanShape:
    """TanQ curvature ``a`` or focus ``b_focus``; the inner grid is recalibrated per candidate."""

    touches_weights = False

    def __init__(self, site, attr):
        self.site, self.attr = site, attr
        self.name = f"tan:{site}.{attr}"
        self.stage = SITE_STAGE[site]

    def candidates(self, plan: BlockPlan, factors, rec):
        p = plan.acts[self.site]
        lo, hi = rec.ranges[self.site]
        out = []
        for f in factors:
            a, b = p.a, p.b_focus
            if self.attr == "a":
                a = a * float(f)
            else:
                b = b * float(f)
            if not tanq_feasible(a, b):
                continue
            new = p if f == 1.0 else tanq_calibrate(np.array([lo, hi]), p.bits, a, b)
            out.append((a if self.attr == "a" else b, _with_act(plan, self.site, new)))
        return out


class WeightScale:
    """Common gain on the per-column scales of one weight quantizer."""

    touches_weights = True

    def __init__(self, name):
        self.name = f"w:{name}"
        self.site = name
        self.stage = WEIGHT_STAGE[name]

    def candidates(self, plan: BlockPlan, factors, rec):
        p = plan.weights[self.site]
        out = []
        for f in factors:
            new = plan.copy()
            new.weights[self.site] = p.with_scale(p.scale * float(f))
            out.append((float(f), new))
        return out

    def requantize(self, wq: BlockWeights, rec: BlockRecord, plan: BlockPlan) -> BlockWeights:
        lin = getattr(rec.weights, self.site)
        return replace(wq, **{self.site: LinearLayer(fake_quant(lin.W, plan.weights[self.site]), lin.bias)})


def _with_act(plan, site, p):
    new = plan.copy()
    new.acts[site] = p
    return new


def activation_knobs(plan: BlockPlan) -> list:
    knobs = []
    for site in ACT_SITES:
        p = plan.acts.get(site)
        if p is None:
            continue
        if isinstance(p, TanParams):
            knobs += [TanShape(site, "a"), TanShape(site, "b_focus")]
        knobs.append(ActScale(site))
    return knobs


def weight_knobs(plan: BlockPlan) -> list:
    return [WeightScale(n) for n in WEIGHT_SITES if n in plan.weights]


@dataclass
class ReconResult:
    plan: BlockPlan
    loss_before: float
    loss_after: float
    trace: list


def reconstruct_block(rec: BlockRecord, cfg: ReconConfig = ReconConfig(), knobs=None) -> ReconResult:
    """Greedy coordinate search over ``knobs``; the loss trace never increases.

    Candidates are scored by resuming the block forward from the first stage
    their parameter feeds, which gives the same bits as a full forward.
    """
    plan = rec.plan.copy()
    knobs = activation_knobs(plan) if knobs is None else knobs
    wq = quantized_weights(rec.weights, plan)
    base = run_stages({"x": rec.m}, wq, plan)
    loss = rms(rec.target, base["out"])
    trace = [loss]
    start = loss
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for _ in range(cfg.passes):
            for knob in knobs:
                for factors in cfg.factors():
                    cands = knob.candidates(plan, factors, rec)
                    if not cands:
                        trace.append(loss)
                        continue

                    def score(c, knob=knob):
                        w_c = knob.requantize(wq, rec, c[1]) if knob.touches_weights else wq
                        return rms(rec.target, run_stages(base, w_c, c[1], knob.stage)["out"])

                    losses = list(pool.map(score, cands)) if pool else [score(c) for c in cands]
                    k = min(range(len(cands)), key=lambda i: (losses[i], cands[i][0]))
                    if losses[k] <= loss:
                        plan, loss = cands[k][1], losses[k]
                        if knob.touches_weights:
                            wq = knob.requantize(wq, rec, plan)
                        base = run_stages(base, wq, plan, knob.stage)
                    trace.append(loss)
    finally:
        if pool:
            pool.shutdown()
    return ReconResult(plan, start, loss, trace)


# --- calibration ----------------------------------------------------------

def capture_block(x, w: BlockWeights, plan: BlockPlan | None = None) -> dict:
    cap = {}
    block_forward(x, w, plan, cap)
    return cap


def _tan_sample(x, size, seed):
    flat = np.ravel(x)
    if flat.size <= size:
        return flat
    rng = np.random.default_rng(seed)
    pick = flat[rng.choice(flat.size, size - 2, replace=False)]
    return np.concatenate([pick, [flat.min(), flat.max()]])


def calibrate_block(w: BlockWeights, cap: dict, t: PlanTemplate, workers: int = 1,
                    seed: int = 0) -> tuple[BlockPlan, dict]:
    """BlockPlan from captured FP activations, plus the activation ranges seen."""
    plan = BlockPlan()
    ranges = {}
    for site in t.sites:
        x = cap[site]
        ranges[site] = (float(x.min()), float(x.max()))
        if site == "softmax":
            bits = t.softmax_bits or t.bits_a
            sample = _tan_sample(x, t.tan_sample, seed) if t.softmax == "tanq" else x
            plan.acts[site] = calibrate(t.softmax, sample, bits, workers=workers)
        elif site in CHANNEL_SITES:
            plan.acts[site] = uq_calibrate(x, t.bits_a, CHANNEL_WISE, axis=-1)
        else:
            plan.acts[site] = uq_calibrate(x, t.bits_a, LAYER_WISE)
    if t.bits_w is not None:
        plan.weights = calibrate_weights(w, t.bits_w)
    return plan, ranges


def calibrate_weights(w: BlockWeights, bits: int) -> dict:
    return {n: uq_calibrate(getattr(w, n).W, bits, CHANNEL_WISE, axis=-1) for n in WEIGHT_SITES}


def calibrate_model(weights: ModelWeights, corpus, template: PlanTemplate = PlanTemplate(),
                    workers: int = 1) -> QuantPlan:
    """Fill a QuantPlan from FP activation statistics on ``corpus``."""
    plan, _ = _calibrate_with_ranges(weights, corpus, template, workers)
    return plan


def _calibrate_with_ranges(weights, corpus, template, workers):
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.size == 0 or corpus.shape[0] == 0:
        raise DomainError("calibration corpus is empty")
    blocks, ranges = [], []
    h = corpus
    for i, w in enumerate(weights.blocks):
        cap = capture_block(h, w)
        bp, rg = calibrate_block(w, cap, template, workers, seed=template.seed + i)
        blocks.append(bp)
        ranges.append(rg)
        h = block_forward(h, w)
    return QuantPlan(blocks), ranges


# --- outlier injection ----------------------------------------------------

def inject_outliers(weights: ModelWeights, factor: float, count: int = 16, shift: float = 3.0,
                    seed: int = 0) -> ModelWeights:
    """Blow up ``count`` channels of every post-LayerNorm site without changing the FP model.

    gamma is multiplied by ``factor`` and beta moved by ``shift * (factor - 1)``,
    so the chosen channels get ranges ``factor`` times wider and one-sided. The
    successor layer absorbs the change (rows divided by ``factor``, bias
    corrected for the shift), so only what the quantizers see is different.
    Scaling gamma alone would leave every zero point in place, and then the
    shared scale cancels out of all downstream arithmetic. ``factor=1`` is the
    identity.
    """
    if factor <= 0:
        raise ConfigError("outlier_factor", "must be positive")
    D = weights.cfg.D
    if not 0 <= count <= D:
        raise ConfigError("outlier_count", f"must lie in [0, {D}]")
    if factor == 1.0 or count == 0:
        return weights
    rng = np.random.default_rng(seed)
    blocks = []
    for b in weights.blocks:
        upd = {}
        for ln_name, lin_name in REPARAM_SITES.values():
            aff, lin = getattr(b, ln_name), getattr(b, lin_name)
            idx = np.sort(rng.choice(D, count, replace=False))
            g, be, W = aff.gamma.copy(), aff.beta.copy(), lin.W.copy()
            delta = shift * (factor - 1.0)
            bias = lin.bias - delta / factor * W[idx].sum(axis=0)
            g[idx] *= factor
            be[idx] = be[idx] * factor + delta
            W[idx] /= factor
            upd[ln_name] = LayerNormAffine(g, be)
            upd[lin_name] = LinearLayer(W, bias)
        blocks.append(replace(b, **upd))
    return replace(weights, blocks=blocks)


# --- the three-stage pipeline ---------------------------------------------

@dataclass(frozen=True)
class DopqConfig:
    template: PlanTemplate = PlanTemplate()
    recon: ReconConfig = ReconConfig()
    scaling: str = "median"
    recalibrate: bool = False
    reconstruct: bool = True

    def __post_init__(self):
        if self.scaling not in SELECTORS:
            raise ConfigError("scaling", f"must be one of {sorted(SELECTORS)}")


@dataclass(eq=False)
class DopqResult:
    weights: ModelWeights
    plan: QuantPlan
    report: dict


def agreement(weights_fp: ModelWeights, weights_q: ModelWeights, plan: QuantPlan | None, x) -> float:
    """Fraction of inputs whose top-1 class matches the FP model."""
    a = np.argmax(model_forward(x, weights_fp), axis=-1)
    b = np.argmax(model_forward(x, weights_q, plan), axis=-1)
    return float(np.mean(a == b))


def _records(weights, fp_in, plan, ranges, cfg: ReconConfig, qweights=None):
    """BlockRecords for every block; in 'quant' mode inputs come from the quantized predecessors."""
    recs = []
    n = fp_in[0].shape[0] if cfg.batch is None else min(cfg.batch, fp_in[0].shape[0])
    h_q = fp_in[0][:n]
    for i, w in enumerate(weights.blocks):
        if cfg.input_mode == "fp":
            m, target = fp_in[i][:n], fp_in[i + 1][:n]
        else:
            m = h_q
            target = block_forward(m, qweights.blocks[i] if qweights else w)
        recs.append(BlockRecord(i, w, m, target, plan.blocks[i], ranges[i]))
        if cfg.input_mode == "quant":
            h_q = block_forward(m, w, plan.blocks[i])
    return recs


def _reconstruct_stage(weights, fp_in, plan, ranges, cfg: ReconConfig, stage, with_weights, with_acts):
    rows = []
    recs = None
    for i in range(len(weights.blocks)):
        # rebuild records each block so 'quant' mode sees already-reconstructed predecessors
        recs = _records(weights, fp_in, plan, ranges, cfg)
        rec = recs[i]
        knobs = []
        if with_acts:
            knobs += activation_knobs(rec.plan)
        if with_weights:
            knobs += weight_knobs(rec.plan)
        res = reconstruct_block(rec, cfg, knobs)
        plan.blocks[i] = res.plan
        rows.append({"stage": stage, "block": i, "loss_before": res.loss_before,
                     "loss_after": res.loss_after, "trace": res.trace})
    return rows


def _block_mse(weights, fp_in, plan, n):
    return [float(np.mean((fp_in[i + 1][:n] - block_forward(fp_in[i][:n], w, plan.blocks[i])) ** 2))
            for i, w in enumerate(weights.blocks)]


def run_dopq(weights: ModelWeights, corpus, eval_set, cfg: DopqConfig = DopqConfig(),
             workers: int = 1) -> DopqResult:
    """Activations -> reconstruct -> reparameterize (median/mean) -> weights -> reconstruct."""
    corpus = np.asarray(corpus, dtype=np.float64)
    recon = replace(cfg.recon, workers=workers) if workers != cfg.recon.workers else cfg.recon
    t = cfg.template
    fp_in = block_inputs(corpus, weights)
    plan, ranges = _calibrate_with_ranges(weights, corpus, replace(t, bits_w=None), workers)
    report = {"stages": [], "reparam": [], "stage2_safety": []}

    # stage 1: activations only
    if cfg.reconstruct:
        report["stages"] += _reconstruct_stage(weights, fp_in, plan, ranges, recon, 1, False, True)

    # stage 2: channel-wise -> layer-wise for every post-LayerNorm site
    select = SELECTORS[cfg.scaling]
    blocks = []
    h = corpus
    for i, w in enumerate(weights.blocks):
        bp = plan.blocks[i]
        before = block_forward(h, w, bp)
        cap = capture_block(h, w)
        new_w, new_bp = w, bp.copy()
        for site, (ln_name, lin_name) in REPARAM_SITES.items():
            p = bp.acts.get(site)
            if p is None or not isinstance(p, QuantParams) or p.axis is None:
                continue
            bundle = ReparamBundle.from_params(p, select)
            xhat = cap[f"{site}_hat"]
            eq = verify_equivalence(getattr(w, ln_name), getattr(w, lin_name), bundle, xhat)
            ln2, lin2 = reparameterize(getattr(new_w, ln_name), getattr(new_w, lin_name), bundle)
            new_w = replace(new_w, **{ln_name: ln2, lin_name: lin2})
            new_bp.acts[site] = bundle.layer_params()
            doc = site_report(site, bundle, eq)
            doc["block"] = i
            report["reparam"].append(doc)
        after = block_forward(h, new_w, new_bp)
        diff = float(np.max(np.abs(after - before)))
        report["stage2_safety"].append({"block": i, "max_abs": diff,
                                        "max_rel": diff / float(np.max(np.abs(before)))})
        if cfg.recalibrate:
            cap2 = capture_block(h, new_w)
            for site in REPARAM_SITES:
                if site in new_bp.acts:
                    new_bp.acts[site] = uq_calibrate(cap2[site], t.bits_a, LAYER_WISE)
        blocks.append(new_w)
        plan.blocks[i] = new_bp
        h = block_forward(h, w)
    qweights = replace(weights, blocks=blocks)

    # stage 3: weights
    if t.bits_w is not None:
        for i, w in enumerate(qweights.blocks):
            plan.blocks[i].weights = calibrate_weights(w, t.bits_w)
        if cfg.reconstruct:
            report["stages"] += _reconstruct_stage(qweights, fp_in, plan, ranges, recon, 3, True,
                                                   recon.stage3_acts)

    n = corpus.shape[0] if recon.batch is None else min(recon.batch, corpus.shape[0])
    report["block_mse"] = _block_mse(qweights, fp_in, plan, n)
    report["agreement"] = agreement(weights, qweights, plan, eval_set)
    return DopqResult(qweights, plan, report)


def ab_compare_scaling(weights: ModelWeights, corpus, eval_set, cfg: DopqConfig = DopqConfig(),
                       workers: int = 1) -> dict:
    """Run the pipeline with median (MOSF) and with mean (RepQ) shared factors."""
    out = {}
    for name in ("median", "mean"):
        res = run_dopq(weights, corpus, eval_set, replace(cfg, scaling=name), workers)
        r = res.report
        out[name] = {
            "block_mse": r["block_mse"],
            "mean_block_mse": float(np.mean(r["block_mse"])),
            "agreement": r["agreement"],
            "equivalence_exact": all(d["code_agreement"] == 1.0 and d["deq_max_rel"] <= 1e-9
                                     for d in r["reparam"]),
            "reparam": r["reparam"],
            "monotone": all(all(b <= a for a, b in zip(st["trace"], st["trace"][1:])) for st in r["stages"]),
        }
    med, mean = out["median"]["mean_block_mse"], out["mean"]["mean_block_mse"]
    out["median_le_mean"] = med <= mean
    out["rel_diff"] = abs(med - mean) / max(mean, 1e-300)
    return out


def config_dict(cfg: DopqConfig) -> dict:
    return asdict(cfg)
