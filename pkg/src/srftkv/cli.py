"""Rotate-then-quantize KV-cache tools: oracle checks, benchmarks, calibration and cost models.

Every command prints a JSON report on stdout and a short human summary on
stderr. Exit status: 0 when every checked invariant holds, 1 when one fails,
2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import diagnostics as dg
from . import oracle
from . import transform as tr
from .calibration import CalibConfig, RotationKind, fit
from .errors import ConfigError, SrftkvError
from .kvcache import CacheConfig, simulate_decode
from .models import load_model_config, memtable
from .perfmodel import CostModel, ledger_append, microbench, write_bench_csv
from .quantizer import Granularity, QuantScheme

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

PCT_IDENTICAL_MIN = 99.99
SCALE_REL_MAX = 1e-6
ROUNDTRIP_TOL = 1e-5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, default=_jsonable)
    sys.stdout.write("\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _say(msg):
    print(msg, file=sys.stderr)


def _pow2(text):
    try:
        d = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if d < tr.D_MIN or d > tr.D_MAX or d & (d - 1):
        raise argparse.ArgumentTypeError(f"d must be a power of two in [{tr.D_MIN}, {tr.D_MAX}], got {d}")
    return d


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _tokens(text):
    """Parse ``16K``/``128k``/``4096`` style token counts."""
    t = text.strip().lower()
    mult = 1
    if t.endswith("k"):
        mult, t = 1024, t[:-1]
    try:
        v = int(t) * mult
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad token count {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("token counts must be >= 0")
    return v


def _token_list(text):
    return [_tokens(x) for x in text.split(",") if x.strip()]


def _sweep(text):
    """``6:18`` (powers of two, inclusive) or a comma list of sizes."""
    if ":" in text:
        lo, hi = (int(x) for x in text.split(":"))
        if lo < 0 or hi < lo:
            raise argparse.ArgumentTypeError(f"bad sweep {text!r}")
        return [2 ** e for e in range(lo, hi + 1)]
    sizes = [_positive(x) for x in text.split(",") if x.strip()]
    if not sizes:
        raise argparse.ArgumentTypeError("empty sweep")
    return sizes


def _scheme_from(args, d):
    try:
        gran = Granularity.parse(args.scheme)
        return QuantScheme(args.bits, gran, d, args.group if gran.grouped else 0)
    except SrftkvError as exc:
        raise _UsageError(str(exc)) from None


class _UsageError(Exception):
    pass


# -- commands -----------------------------------------------------------------


def cmd_roundtrip(args):
    scheme = _scheme_from(args, args.d)
    report = {"command": "roundtrip"}
    xv = oracle.crossval(scheme, n_values=args.n, seed=args.seed)
    report["crossval"] = xv
    spec = tr.make_spec(args.transform, args.d, args.seed)
    rng = np.random.default_rng(args.seed)
    n_vec = max(1, min(1000, -(-args.n // args.d)))
    X = rng.standard_normal((n_vec, args.d)).astype(np.float32)
    Y = tr.forward(spec, X)
    back = tr.inverse(spec, Y)
    rt_err = float(np.abs(back - X).max())
    norm_err = float(np.max(np.abs(np.linalg.norm(Y, axis=1) - np.linalg.norm(X, axis=1))
                            / np.linalg.norm(X, axis=1)))
    transform = {"kind": spec.kind.value, "n_vec": n_vec, "max_roundtrip_err": rt_err,
                 "max_norm_rel_err": norm_err}
    if args.d <= oracle.DENSE_MAX_D:
        M = oracle.dense_matrix(spec)
        transform["max_dense_err"] = float(np.abs(X.astype(np.float64) @ M.T - Y).max())
    report["transform"] = transform

    checks = {
        "pct_identical": xv["pct_identical"] >= PCT_IDENTICAL_MIN,
        "mismatches_are_ties": xv["n_ties"] == xv["n_mismatch"],
        "scale_rel_err": xv["max_scale_rel_err"] <= SCALE_REL_MAX,
        "roundtrip": rt_err <= ROUNDTRIP_TOL,
        "norm_preserved": norm_err <= ROUNDTRIP_TOL,
    }
    if "max_dense_err" in transform:
        checks["dense_oracle"] = transform["max_dense_err"] <= ROUNDTRIP_TOL
    report["checks"] = checks
    report["failed"] = [k for k, ok in checks.items() if not ok]
    _emit(report)
    _say(f"roundtrip {scheme.label()}: {xv['pct_identical']:.4f}% identical codes, "
         f"{xv['n_ties']}/{xv['n_mismatch']} mismatches are ties, "
         f"scale rel err {xv['max_scale_rel_err']:.2e}, round-trip {rt_err:.2e}")
    if report["failed"]:
        _say("FAILED: " + ", ".join(report["failed"]))
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(args):
    results = microbench(args.d, args.bits, args.sweep, repeats=args.repeats, seed=args.seed,
                         transform=args.transform)
    for r in results:
        sys.stdout.write(json.dumps(r.as_dict(), sort_keys=True) + "\n")
        flag = f"  [flagged: {r.flag_reason}]" if r.flagged else ""
        _say(f"n_vec={r.n_vec:>7d}  {r.ns_per_vec:10.2f} ns/vec  {r.gflops:7.3f} GFLOPS  "
             f"disp {r.dispersion:.2f}{flag}")
    if args.ledger:
        config = {"d": args.d, "bits": args.bits, "sweep": args.sweep, "repeats": args.repeats,
                  "seed": args.seed, "transform": args.transform}
        wrote = ledger_append(args.ledger, "bench", config, results)
        _say(f"ledger {'appended' if wrote else 'unchanged (same config and revision)'}: {args.ledger}")
    if args.csv:
        write_bench_csv(args.csv, results)
    return EXIT_OK


def cmd_calibrate(args):
    batch = dg.synth_activations(args.profile, args.n, args.d, args.seed)
    kind = RotationKind.parse(args.kind)
    try:
        gran = Granularity.parse(args.scheme)
        cfg = CalibConfig(steps=args.steps, lr=args.lr, bits=args.bits, granularity=gran,
                          group=args.group if gran.grouped else 0, seed=args.seed,
                          transform_seed=args.seed if args.apply_srft else None)
    except SrftkvError as exc:
        raise _UsageError(str(exc)) from None
    params, report = fit(kind, cfg, batch.data)
    out = report.as_dict()
    out.update(profile=dg.Profile.parse(args.profile).value, d=args.d, n=args.n, bits=args.bits,
               seed=args.seed, lr=args.lr,
               transform="srft" if args.apply_srft and kind.uses_srft else "none")
    R = params.rotation()
    orth = float(np.abs(R.T.astype(np.float64) @ R - np.eye(args.d)).max())
    out["orthogonality_err"] = orth
    checks = {"mse_monotone": report.mse_final <= report.mse_initial, "orthogonal": orth <= 1e-5}
    if args.out:
        params.save(args.out)
        reloaded = type(params).load(args.out)
        checks["reload_identical"] = reloaded.to_bytes() == params.to_bytes()
        out["out"] = args.out
    out["checks"] = checks
    out["failed"] = [k for k, ok in checks.items() if not ok]
    _emit(out)
    _say(f"calibrate {kind.value} on {out['profile']}: MSE {report.mse_initial:.5g} -> "
         f"{report.mse_final:.5g} ({report.reduction_pct:.1f}% reduction)")
    return EXIT_FAIL if out["failed"] else EXIT_OK


def cmd_cachesim(args):
    model = load_model_config(args.config)
    cost = CostModel.load(args.cost_model) if args.cost_model else CostModel()
    d = model.head_dim
    scheme = _scheme_from(args, d)
    lam_src = "calibrated" if scheme.granularity.needs_lambda else "none"
    cfg = CacheConfig(d=d, n_layers=model.n_layers, n_kv_heads=model.n_kv_heads, scheme=scheme,
                      window=args.window, lambda_source=lam_src)
    rows = []
    trace_fh = open(args.trace, "w") if args.trace else None
    try:
        for prefix in args.prefix:
            sim = simulate_decode(cfg, prefix, args.new_tokens, cost,
                                  layer_windows=model.layer_windows(),
                                  other_bytes=model.weight_bytes if args.weights else 0)
            if trace_fh:
                for rec in sim.records:
                    trace_fh.write(json.dumps({"prefix": prefix, **rec}) + "\n")
            s = dict(sim.summary)
            s.pop("flushes_per_layer")
            s.pop("dequant_rebuilds_per_layer")
            rows.append({"model": model.name, **s})
    finally:
        if trace_fh:
            trace_fh.close()
    _emit({"command": "cachesim", "cost_model": cost.as_dict(), "scheme": scheme.label(),
           "window": args.window, "rows": rows})
    _say(f"{'model':<14} {'prefix':>6} {'fp16 ms/tok':>12} {'int4 ms/tok':>12} {'delta':>8} {'mem ratio':>10}")
    for r in rows:
        _say(f"{r['model']:<14} {r['prefix_len']:>6} {r['ms_per_tok_fp16']:>12.3f} "
             f"{r['ms_per_tok_int4']:>12.3f} {r['delta_pct']:>+7.2f}% {r['memory_ratio']:>9.2f}x")
    return EXIT_OK


def cmd_memtable(args):
    model = load_model_config(args.model_config)
    scheme = _scheme_from(args, model.head_dim)
    rows = memtable(model, args.contexts, scheme)
    _emit({"command": "memtable", "gb_convention": "1 GB = 1000 * 2**20 bytes", "rows": rows})
    _say(f"{'model':<14} {'d':>4} {'ctx':>8} {'fp16 GB':>9} {scheme.label() + ' GB':>14}")
    for r in rows:
        _say(f"{r['model']:<14} {r['d']:>4} {r['ctx']:>8} {r['gb_fp16']:>9.2f} {r['gb_quant']:>14.2f}")
    return EXIT_OK


def cmd_diagnose(args):
    batch = dg.synth_activations(args.profile, args.n, args.d, args.seed)
    X = batch.data
    spec = tr.make_spec(args.transform, args.d, args.seed)
    Y = tr.forward(spec, X)

    def stats(A):
        return {
            "excess_kurtosis": dg.excess_kurtosis(A),
            "argmax_entropy": dg.argmax_entropy(A),
            "energy_top1pct": dg.energy_concentration(A, 0.01),
        }

    report = {"command": "diagnose", **batch.metadata, "transform": spec.kind.value,
              "ln_d": math.log(args.d), "before": stats(X), "after": stats(Y)}
    if args.csv:
        dg.write_stats_csv(args.csv, [{"stage": "before", **report["before"]},
                                      {"stage": "after", **report["after"]}])
    _emit(report)
    b, a = report["before"], report["after"]
    _say(f"{batch.metadata['generator']} n={args.n} d={args.d}: kurtosis {b['excess_kurtosis']:.3f} -> "
         f"{a['excess_kurtosis']:.3f}, argmax entropy {b['argmax_entropy']:.3f} -> "
         f"{a['argmax_entropy']:.3f} (ln d = {math.log(args.d):.3f}), top-1% energy "
         f"{b['energy_top1pct']:.3f} -> {a['energy_top1pct']:.3f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_scheme(p, default_scheme="per_token", default_group=32):
    p.add_argument("--bits", type=int, default=4, choices=(3, 4, 6, 8))
    p.add_argument("--scheme", default=default_scheme,
                   choices=[g.value for g in Granularity])
    p.add_argument("--group", type=_positive, default=default_group)


def build_parser():
    parser = _Parser(prog="srftkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("roundtrip", help="fast path vs scalar oracle cross-validation")
    p.add_argument("--d", type=_pow2, default=128)
    _add_scheme(p)
    p.add_argument("--n", type=_positive, default=10 ** 6, help="number of values to compare")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--transform", default="srft", choices=("srft", "srht"))
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("bench", help="transform + quantize microbenchmark")
    p.add_argument("--d", type=_pow2, default=128)
    p.add_argument("--bits", type=int, default=4, choices=(3, 4, 6, 8))
    p.add_argument("--sweep", type=_sweep, default=_sweep("0:14"),
                   help="lo:hi powers of two, or a comma list of batch sizes")
    p.add_argument("--repeats", type=_positive, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--transform", default="srft", choices=("srft", "srht"))
    p.add_argument("--ledger", help="append results to this JSON-lines ledger")
    p.add_argument("--csv", help="also write the series as CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("calibrate", help="fit lambda / rotations on a synthetic batch")
    p.add_argument("--kind", default="scale_only", choices=[k.value for k in RotationKind])
    p.add_argument("--d", type=_pow2, default=64)
    p.add_argument("--n", type=_positive, default=512)
    _add_scheme(p, default_group=16)
    p.add_argument("--steps", type=_positive, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--profile", default="heteroscedastic_channels",
                   choices=[pr.value for pr in dg.Profile])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--apply-srft", action="store_true",
                   help="run the SRFT before the learned stages; by default the batch is taken "
                        "to be transformed-domain activations (no_srft_cayley never transforms)")
    p.add_argument("--out", help="write the fitted parameters here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("cachesim", help="analytic decode simulation against a fp16 baseline")
    p.add_argument("--config", required=True, help="model config file or preset name")
    p.add_argument("--prefix", type=_token_list, default=[256, 1024, 2048, 4096])
    p.add_argument("--new-tokens", type=_nonneg, default=64)
    p.add_argument("--cost-model", help="key-value cost model file")
    p.add_argument("--window", type=_positive, default=16)
    p.add_argument("--no-weights", dest="weights", action="store_false",
                   help="leave weight streaming out of the per-token cost")
    p.add_argument("--trace", help="write the per-op JSON-lines trace here")
    _add_scheme(p, default_scheme="per_channel_group")
    p.set_defaults(func=cmd_cachesim)

    p = sub.add_parser("memtable", help="KV-cache memory at given context lengths")
    p.add_argument("--model-config", required=True, help="model config file or preset name")
    p.add_argument("--contexts", type=_token_list, default=[16 * 1024, 128 * 1024])
    _add_scheme(p)
    p.set_defaults(func=cmd_memtable)

    p = sub.add_parser("diagnose", help="outlier statistics before and after the transform")
    p.add_argument("--profile", default="heavy_tail_mixture", choices=[pr.value for pr in dg.Profile])
    p.add_argument("--n", type=_positive, default=4096)
    p.add_argument("--d", type=_pow2, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--transform", default="srft", choices=("srft", "srht"))
    p.add_argument("--csv", help="also write the statistics as CSV")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (_UsageError, ConfigError, OSError) as exc:
        _say(f"srftkv {args.command}: error: {exc}")
        return EXIT_USAGE
    except SrftkvError as exc:
        _say(f"srftkv {args.command}: {type(exc).__name__}: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
