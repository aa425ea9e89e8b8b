"""Command-line driver: corpora, quantizer sweep, ablations, full runs and reports.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 invariant violation.
``DOPQ_THREADS`` caps BLAS threads and grid-search workers; outputs do not
depend on it.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import postln_channels, softmax_rows, token_sequences
from .errors import ConfigError, DopqError
from .experiments import (
    SWEEP_BITS,
    SWEEP_COLUMNS,
    TANQ_EXPERIMENT,
    ExperimentConfig,
    ablation_mosf,
    ablation_tanq,
    default_softmax_corpus,
    mosf_verdicts,
    seeds_for,
    sweep_checks,
    sweep_quantizers,
    tanq_verdicts,
)
from .pipeline import DopqConfig, PlanTemplate, ReconConfig, inject_outliers, run_dopq
from .quantizers import QUANTIZER_KINDS
from .tensor import read_dqt1, write_dqt1
from .toyvit import ViTConfig, init_weights, save_weights

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4


class DataError(DopqError):
    """Missing or malformed input files."""


class InvariantError(DopqError):
    """A property the pipeline guarantees did not hold."""


# --- run configuration ----------------------------------------------------

@dataclass(frozen=True)
class ModelSection:
    L: int = 2
    N: int = 16
    D: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    init_std: float = 0.125


@dataclass(frozen=True)
class DataSection:
    calib: int = 256
    eval: int = 512


@dataclass(frozen=True)
class QuantSection:
    bits_a: int = 4
    bits_w: int | None = 4
    softmax: str = "tanq"
    softmax_bits: int | None = None


@dataclass(frozen=True)
class ReconSection:
    passes: int = 4
    grid_points: int = 33
    refine_points: int = 9
    batch: int | None = 64
    stage3_acts: bool = True
    input_mode: str = "fp"


@dataclass(frozen=True)
class OutlierSection:
    factor: float = 1.0
    count: int = 16
    shift: float = 3.0


@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    quant: QuantSection = field(default_factory=QuantSection)
    recon: ReconSection = field(default_factory=ReconSection)
    outliers: OutlierSection = field(default_factory=OutlierSection)
    scaling: str = "median"
    recalibrate: bool = False
    reconstruct: bool = True
    schema: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return asdict(self)

    def dopq_config(self) -> DopqConfig:
        q, r = self.quant, self.recon
        return DopqConfig(
            template=PlanTemplate(bits_a=q.bits_a, bits_w=q.bits_w, softmax=q.softmax,
                                  softmax_bits=q.softmax_bits, seed=self.seed),
            recon=ReconConfig(passes=r.passes, grid_points=r.grid_points, refine_points=r.refine_points,
                              batch=r.batch, stage3_acts=r.stage3_acts, input_mode=r.input_mode),
            scaling=self.scaling, recalibrate=self.recalibrate, reconstruct=self.reconstruct)


_SECTIONS = {"model": ModelSection, "data": DataSection, "quant": QuantSection,
             "recon": ReconSection, "outliers": OutlierSection}
_REQUIRED = ("schema", "seed")


def _check_type(name, value, default):
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and (default is None or isinstance(default, bool))
    elif isinstance(default, int):
        ok = isinstance(value, int)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:  # optional int
        ok = value is None or isinstance(value, int)
    if not ok:
        raise ConfigError(name, f"wrong type {type(value).__name__}")


def _section(name, cls, doc):
    if not isinstance(doc, dict):
        raise ConfigError(name, "must be an object")
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
        _check_type(f"{name}.{key}", value, getattr(defaults, key))
    return cls(**doc)


def parse_config(doc) -> RunConfig:
    """Validate a config document; every error names the offending field."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in _REQUIRED:
        if key not in doc:
            raise ConfigError(key, "required field missing")
    if doc["schema"] != SCHEMA_VERSION:
        raise ConfigError("schema", f"unsupported version {doc['schema']!r}, expected {SCHEMA_VERSION}")
    kw = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kw[key] = _section(key, _SECTIONS[key], value)
        elif key in ("seed", "schema"):
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(key, "must be a non-negative integer")
            kw[key] = value
        elif key == "scaling":
            if value not in ("median", "mean"):
                raise ConfigError(key, "must be 'median' or 'mean'")
            kw[key] = value
        elif key in ("recalibrate", "reconstruct"):
            if not isinstance(value, bool):
                raise ConfigError(key, "must be true or false")
            kw[key] = value
        else:
            raise ConfigError(key, "unknown field")
    cfg = RunConfig(**kw)
    if cfg.quant.softmax not in QUANTIZER_KINDS:
        raise ConfigError("quant.softmax", f"must be one of {list(QUANTIZER_KINDS)}")
    for name, b in (("quant.bits_a", cfg.quant.bits_a), ("quant.bits_w", cfg.quant.bits_w)):
        if b is not None and not 2 <= b <= 30:
            raise ConfigError(name, "must lie in [2, 30]")
    try:
        cfg.dopq_config()
        ViTConfig(**asdict(cfg.model))
    except ConfigError:
        raise
    except DopqError as e:
        raise ConfigError("model", str(e)) from e
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e.strerror}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("<json>", f"line {e.lineno} column {e.colno}: {e.msg}") from e
    return parse_config(doc)


def with_overrides(cfg: RunConfig, args) -> RunConfig:
    from dataclasses import replace
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    q = cfg.quant
    if getattr(args, "bits_a", None) is not None:
        q = replace(q, bits_a=args.bits_a)
    if getattr(args, "bits_w", None) is not None:
        q = replace(q, bits_w=args.bits_w)
    if getattr(args, "quantizer", None) is not None:
        q = replace(q, softmax=args.quantizer)
    cfg = replace(cfg, quant=q)
    if getattr(args, "outlier_factor", None) is not None:
        cfg = replace(cfg, outliers=replace(cfg.outliers, factor=args.outlier_factor))
    return parse_config(cfg.to_json())


# --- helpers ----------------------------------------------------------------

def thread_cap() -> int:
    raw = os.environ.get("DOPQ_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("DOPQ_THREADS", f"not an integer: {raw!r}") from None
    if n < 1:
        raise ConfigError("DOPQ_THREADS", "must be >= 1")
    return n


@contextmanager
def threads():
    n = thread_cap()
    with threadpool_limits(limits=n):
        yield n


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in columns})


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def manifest(subcommand, seed, out, config_path=None) -> dict:
    return {"subcommand": subcommand, "seed": seed, "config": str(config_path) if config_path else None,
            "out": str(out), "version": f"v{__version__}"}


def _seeds(args) -> list[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",")]
        except ValueError:
            raise ConfigError("--seeds", "comma-separated integers expected") from None
    return [args.seed]


# --- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.kind == "softmax-rows":
        arr = softmax_rows(args.rows, args.n, args.sigma, args.seed)
    elif args.kind == "postln-channels":
        arr = postln_channels(args.rows, args.channels, args.seed, outliers=args.outliers,
                              outlier_factor=args.outlier_factor)
    else:
        arr = token_sequences(args.rows, args.n, args.channels, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dqt1(out, arr)
    print(f"{args.kind}: shape {list(arr.shape)} -> {out}")
    return EXIT_OK


def cmd_sweep_quantizers(args) -> int:
    if args.corpus:
        try:
            corpus = read_dqt1(args.corpus)
        except OSError as e:
            raise DataError(f"cannot read corpus {args.corpus}: {e.strerror}") from e
    else:
        corpus = default_softmax_corpus(args.seed)
    bits = tuple(int(b) for b in args.bits.split(",")) if args.bits else SWEEP_BITS
    kinds = (args.quantizer,) if args.quantizer else QUANTIZER_KINDS
    with threads() as n:
        rows = sweep_quantizers(corpus, bits, kinds, workers=n)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, rows, SWEEP_COLUMNS)
    checks = sweep_checks(rows)
    for r in rows:
        print(f"{r['quantizer']:>9} b={r['bitwidth']}  mse={r['mse']:.3e}  max_err={r['max_err']:.3e}")
    if "tanq_lowest" in checks:
        print(f"TanQ lowest MSE at b=4: {'pass' if checks['tanq_lowest'] else 'fail'}")
    bad = [k for k, ok in checks["refines"].items() if not ok]
    if bad:
        raise InvariantError(f"MSE did not shrink with bitwidth for {bad}")
    return EXIT_OK


def _experiment_cfg(args, base: ExperimentConfig) -> ExperimentConfig:
    cfg = base
    if args.attention_sigma is not None:
        cfg = replace(cfg, attention_sigma=None if args.attention_sigma <= 0 else args.attention_sigma)
    if args.passes is not None or args.batch is not None:
        r = cfg.recon
        cfg = replace(cfg, recon=replace(r, passes=args.passes or r.passes, batch=args.batch or r.batch))
    return cfg


def cmd_ablation_tanq(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _seeds(args)
    with threads() as n:
        rows = ablation_tanq(seeds, _experiment_cfg(args, TANQ_EXPERIMENT), bits_a=args.bits_a or 3, workers=n,
                             isolate=args.isolate)
    write_csv(out / "ablation_tanq.csv", rows, ["seed", "quantizer", "bits_a", "agreement", "mean_block_mse",
                                                  "monotone"])
    verdicts = tanq_verdicts(rows)
    write_json(out / "verdicts.json", {str(k): v for k, v in verdicts.items()})
    write_json(out / "manifest.json", manifest("ablation-tanq", seeds, out))
    for r in rows:
        print(f"seed {r['seed']} {r['quantizer']:>8}: agreement {r['agreement']:.4f}")
    for seed, v in verdicts.items():
        print(f"seed {seed}: " + ", ".join(f"{k} {'pass' if ok else 'fail'}" for k, ok in v.items()))
    if not all(r["monotone"] for r in rows):
        raise InvariantError("a reconstruction trace increased")
    return EXIT_OK


def cmd_ablation_mosf(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _seeds(args)
    factors = ([args.outlier_factor] if args.outlier_factor is not None
               else [float(f) for f in args.factors.split(",")])
    bits = args.bits_a or 4
    with threads() as n:
        rows, mad_rows = ablation_mosf(seeds, factors, _experiment_cfg(args, ExperimentConfig()), bits=bits, workers=n)
    write_csv(out / "ablation_mosf.csv", rows, ["factor", "seed", "scaling", "mean_block_mse", "block_mse",
                                                  "agreement", "equivalence_exact", "monotone"])
    write_csv(out / "mad_tables.csv", mad_rows, ["factor", "seed", "scaling", "block", "site", "statistic",
                                                   "value", "mad"])
    verdicts = mosf_verdicts(rows)
    write_json(out / "verdicts.json", {repr(f): {str(s): ok for s, ok in v.items()} for f, v in verdicts.items()})
    write_json(out / "manifest.json", manifest("ablation-mosf", seeds, out))
    for f, v in verdicts.items():
        print(f"factor {f:g}: median <= mean on {sum(v.values())}/{len(v)} seeds")
    if not all(r["equivalence_exact"] for r in rows):
        raise InvariantError("reparameterization changed quantized codes")
    if not all(r["monotone"] for r in rows):
        raise InvariantError("a reconstruction trace increased")
    return EXIT_OK


def execute_run(cfg: RunConfig, out, config_path=None, workers: int = 1) -> dict:
    """Full pipeline into ``out``; returns the report written to report.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    s_model, s_calib, s_eval = seeds_for(cfg.seed)
    vit = ViTConfig(seed=s_model, **asdict(cfg.model))
    weights = init_weights(vit)
    if cfg.outliers.factor != 1.0:
        weights = inject_outliers(weights, cfg.outliers.factor, cfg.outliers.count, cfg.outliers.shift, s_model)
    corpus = token_sequences(cfg.data.calib, vit.N, vit.D, s_calib)
    ev = token_sequences(cfg.data.eval, vit.N, vit.D, s_eval)
    res = run_dopq(weights, corpus, ev, cfg.dopq_config(), workers)
    rep = res.report
    report = {"schema": SCHEMA_VERSION, "config": cfg.to_json(), **rep}
    for st in rep["stages"]:
        if any(b > a for a, b in zip(st["trace"], st["trace"][1:])):
            raise InvariantError(f"stage {st['stage']} block {st['block']}: loss trace increased")
    for d in rep["stage2_safety"]:
        if d["max_rel"] > 1e-9:
            raise InvariantError(f"block {d['block']}: reparameterization changed the output by {d['max_rel']:.2e}")
    write_json(out / "report.json", report)
    write_json(out / "manifest.json", manifest("run", cfg.seed, out, config_path))
    write_json(out / "config.json", cfg.to_json())
    write_json(out / "plan.json", res.plan.to_config())
    write_csv(out / "blocks.csv",
              [{**{k: s[k] for k in ("stage", "block", "loss_before", "loss_after")}, "steps": len(s["trace"])}
               for s in rep["stages"]],
              ["stage", "block", "loss_before", "loss_after", "steps"])
    write_csv(out / "mad_tables.csv",
              [{"block": d["block"], "site": d["site"], "statistic": m["statistic"], "value": m["value"],
                "mad": m["mad"]} for d in rep["reparam"] for m in d["mad"]],
              ["block", "site", "statistic", "value", "mad"])
    save_weights(res.weights, out / "weights")
    return report


def cmd_run(args) -> int:
    if args.config:
        cfg = with_overrides(load_config(args.config), args)
    else:
        cfg = with_overrides(RunConfig(seed=0), args)
    with threads() as n:
        report = execute_run(cfg, args.out, args.config, workers=n)
    print(f"agreement {report['agreement']:.4f}  block mse {report['block_mse']}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    try:
        report = json.loads((run / "report.json").read_text())
    except OSError as e:
        raise DataError(f"no report in {run}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"report.json is not valid JSON: {e.msg}") from e
    print(f"run {run}  schema {report.get('schema')}  seed {report['config']['seed']}")
    for s in report["stages"]:
        print(f"  stage {s['stage']} block {s['block']}: {s['loss_before']:.5f} -> {s['loss_after']:.5f}")
    for d in report["reparam"]:
        best = d["mad"][0]
        print(f"  block {d['block']} {d['site']}: s~={d['s_tilde']:.4g} z~={d['z_tilde']} "
              f"best {best['statistic']} MAD {best['mad']:.4g}  codes {d['code_agreement']:.3f}")
    for i, m in enumerate(report["block_mse"]):
        print(f"  block {i} output MSE {m:.5g}")
    print(f"  top-1 agreement {report['agreement']:.4f}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dopq", description="Desk-scale ViT post-training quantization lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic corpus as DQT1")
    g.add_argument("kind", choices=["softmax-rows", "postln-channels", "token-sequences"])
    g.add_argument("--rows", type=int, default=4096, help="rows, tokens or sequences")
    g.add_argument("--n", type=int, default=16, help="softmax width or tokens per sequence")
    g.add_argument("--channels", type=int, default=64)
    g.add_argument("--sigma", type=float, default=3.0)
    g.add_argument("--outliers", type=int, default=2)
    g.add_argument("--outlier-factor", type=float, default=50.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("sweep-quantizers", help="MSE of every quantizer at several bitwidths")
    s.add_argument("--corpus", help="DQT1 corpus (default: sigma=3 softmax rows)")
    s.add_argument("--bits", help="comma-separated bitwidths (default 3,4,6,8)")
    s.add_argument("--quantizer", choices=QUANTIZER_KINDS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_quantizers)

    for name, func, help_ in (("ablation-tanq", cmd_ablation_tanq, "post-Softmax quantizer ablation"),
                              ("ablation-mosf", cmd_ablation_mosf, "median vs mean shared factors")):
        a = sub.add_parser(name, help=help_)
        a.add_argument("--seed", type=int, default=0)
        a.add_argument("--seeds", help="comma-separated seeds (overrides --seed)")
        a.add_argument("--bits-a", type=int)
        a.add_argument("--passes", type=int)
        a.add_argument("--batch", type=int)
        a.add_argument("--attention-sigma", type=float,
                       help="attention score std of the toy model; 0 keeps the plain init")
        a.add_argument("--out", required=True)
        if name == "ablation-tanq":
            a.add_argument("--isolate", action="store_true",
                           help="quantize the post-Softmax site alone, calibration only")
        if name == "ablation-mosf":
            a.add_argument("--factors", default="1,10,50")
            a.add_argument("--outlier-factor", type=float)
        a.set_defaults(func=func)

    r = sub.add_parser("run", help="full three-stage pipeline")
    r.add_argument("--config", help="JSON run config")
    r.add_argument("--seed", type=int)
    r.add_argument("--bits-w", type=int)
    r.add_argument("--bits-a", type=int)
    r.add_argument("--quantizer", choices=QUANTIZER_KINDS, help="post-Softmax quantizer")
    r.add_argument("--outlier-factor", type=float)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="summarize a run directory")
    rp.add_argument("run")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DopqError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
