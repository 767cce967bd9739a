"""Command line interface: ``contdid {estimate,simulate,montecarlo,diagnose}``.

Exit codes: 0 success, 1 usage error, 2 estimation or data error (a JSON
error document is written to standard output).
"""

from __future__ import annotations

import argparse
import dataclasses
import inspect
import json
import math
import sys

import numpy as np

from . import __version__
from . import estimators as est
from .errors import ContDidError, NoStayers, SeparationDetected, TooFewObservations
from .inference import BootstrapSpec, attach, bootstrap_many
from .montecarlo import ESTIMATORS, run_montecarlo, summary_tsv
from .panel import ColumnSchema, check_monotone_baseline, classify, ingest, overlap_report, validation_report
from .propensity import fit_pscore
from .simulate import DgpSpec, generate, oracle, parse_config

SCHEMA_VERSION = "report-v1"

TARGETS = ("delta1", "delta2", "delta2i", "delta2d", "delta1_t_to_t+l", "delta_plus", "twfe")
_TARGET_ALIASES = {"long_run": "delta1_t_to_t+l", "delta1_long": "delta1_t_to_t+l"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _bandwidth_arg(text):
    if text in ("rot", "rule-of-thumb", "cv", "leave-one-out-cv"):
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bandwidth must be a positive number, 'rot' or 'cv', got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return value


def _trim_arg(text):
    if text == "auto":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"trim must be a number or 'auto', got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("trim must be nonnegative")
    return value


def _clip_arg(text):
    if text.lower() in ("none", "off"):
        return None
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("clip must be positive or 'none'")
    return value


def _add_data_args(p):
    p.add_argument("--input", required=True, help="long-format CSV file")
    p.add_argument("--unit", default="unit")
    p.add_argument("--time", default="time")
    p.add_argument("--d", default="d", help="treatment column")
    p.add_argument("--y", default="y", help="outcome column")
    p.add_argument("--weight", default=None, help="optional unit weight column")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--tol", type=float, default=0.0, help="stayer tolerance on |dD|")


def _add_tuning_args(p):
    p.add_argument("--bandwidth", type=_bandwidth_arg, default="rot")
    p.add_argument("--kernel", choices=("epanechnikov", "gaussian", "rectangular"), default="epanechnikov")
    p.add_argument("--degree", type=int, choices=(0, 1), default=1, help="local polynomial degree")
    p.add_argument("--min-ess", type=float, default=5.0)
    p.add_argument("--pscore-degree", type=int, default=2)
    p.add_argument("--clip", type=_clip_arg, default=20.0)
    p.add_argument("--trim", type=_trim_arg, default="auto")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="contdid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"contdid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="estimate target parameters on a panel")
    _add_data_args(p)
    _add_tuning_args(p)
    p.add_argument("--target", action="append", default=None,
                   help=f"one of {', '.join(TARGETS)} (repeatable, comma-separated allowed)")
    p.add_argument("--method", choices=("reg", "ps", "both"), default="reg")
    p.add_argument("--nostayers", action="store_true", help="use quasi-stayers as controls")
    p.add_argument("--delta-grid", type=_floats, default=None)
    p.add_argument("--min-quasi", type=int, default=10)
    p.add_argument("--ell", type=int, default=None, help="horizon for delta1_t_to_t+l")
    p.add_argument("--lr-controls", choices=("stayers", "not_yet_moved"), default="stayers")
    p.add_argument("--lmax", type=int, default=None, help="largest horizon for delta_plus")
    p.add_argument("--sign-split", action="store_true")
    p.add_argument("--boot", type=int, default=200, help="bootstrap replications (0 disables)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--reselect", action="store_true", help="reselect tuning inside every bootstrap replicate")
    p.add_argument("--format", choices=("json", "tsv"), default="json")
    p.add_argument("--output", default=None)

    p = sub.add_parser("simulate", help="draw a panel from a DGP config")
    p.add_argument("--config", default=None, help="key = value DGP file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None, help="CSV path (stdout if omitted)")
    p.add_argument("--truth", default=None, help="write oracle values as JSON to this path")

    p = sub.add_parser("montecarlo", help="repeat simulate + estimate and compare with the oracle")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--estimators", default="ampos_reg,wampos_reg,wampos_ps",
                   help=f"comma-separated subset of {', '.join(ESTIMATORS)}")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--boot", type=int, default=0)
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--ell", type=int, default=1)
    p.add_argument("--lr-controls", choices=("stayers", "not_yet_moved"), default="stayers")
    p.add_argument("--lmax", type=int, default=None)
    p.add_argument("--format", choices=("json", "tsv"), default="json")
    p.add_argument("--output", default=None)

    p = sub.add_parser("diagnose", help="validation, mover counts and overlap diagnostics")
    _add_data_args(p)
    p.add_argument("--pscore-degree", type=int, default=2)
    p.add_argument("--min-prob", type=float, default=0.01)
    p.add_argument("--output", default=None)
    return parser


# JSON helpers -------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def _emit(text, output):
    if output:
        with open(output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _error_doc(exc: ContDidError, command: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "software": _software(),
            "error": exc.to_dict()}


def _software():
    return {"name": "contdid", "version": __version__}


# estimate -----------------------------------------------------------------------

def _targets(args):
    raw = args.target or ["delta1", "delta2"]
    out = []
    for chunk in raw:
        for t in chunk.split(","):
            t = _TARGET_ALIASES.get(t.strip(), t.strip())
            if t not in TARGETS:
                raise UsageError(f"unknown target {t!r}; choose from {', '.join(TARGETS)}")
            if t not in out:
                out.append(t)
    return out


def _validate_estimate(args, targets):
    if args.delta_grid is not None and not args.nostayers:
        raise UsageError("--delta-grid only applies with --nostayers")
    if args.nostayers:
        bad = [t for t in targets if t not in ("delta1", "delta2", "delta2i", "delta2d")]
        if bad:
            raise UsageError(f"--nostayers is not available for {', '.join(bad)}")
        if args.method != "ps" and any(t.startswith("delta2") for t in targets):
            raise UsageError("with --nostayers, delta2 targets are estimated by reweighting only; use --method ps")
        if args.method != "reg" and "delta1" in targets:
            raise UsageError("delta1 has only a regression form; use --method reg")
    if args.ell is not None and "delta1_t_to_t+l" not in targets:
        raise UsageError("--ell only applies to target delta1_t_to_t+l")
    if "delta1_t_to_t+l" in targets and args.ell is None:
        raise UsageError("target delta1_t_to_t+l needs --ell")
    if (args.lmax is not None or args.sign_split) and "delta_plus" not in targets:
        raise UsageError("--lmax and --sign-split only apply to target delta_plus")
    if args.method == "ps" and any(t in ("delta1", "delta1_t_to_t+l") for t in targets) and not args.nostayers:
        raise UsageError("delta1 targets have only a regression form; use --method reg or both")
    if args.boot != 0 and args.boot < 2:
        raise UsageError("--boot must be 0 or at least 2")
    if not 0 < args.ci_level < 1:
        raise UsageError("--ci-level must lie in (0, 1)")
    if not 0 <= args.pscore_degree <= 5:
        raise UsageError("--pscore-degree must be between 0 and 5")


def _kwargs(fn, options):
    params = inspect.signature(fn).parameters
    return {k: v for k, v in options.items() if k in params}


def _jobs(args, targets):
    """(label, function, kwargs, targets it serves) for every estimator to run."""
    common = dict(tol=args.tol, bandwidth=None if args.bandwidth in ("rot", "rule-of-thumb") else args.bandwidth,
                  kernel=args.kernel, degree=args.degree, min_ess=args.min_ess, trim=args.trim,
                  delta_grid=args.delta_grid, min_quasi=args.min_quasi)
    ps_common = dict(tol=args.tol, degree=args.pscore_degree, clip=args.clip, delta_grid=args.delta_grid,
                     min_quasi=args.min_quasi)
    use_reg = args.method in ("reg", "both")
    use_ps = args.method in ("ps", "both")
    d2 = [t for t in targets if t.startswith("delta2")]
    jobs = []
    if "delta1" in targets:
        fn = est.ampos_nostayers if args.nostayers else est.ampos_reg
        jobs.append(("delta1", fn, _kwargs(fn, common), ["delta1"]))
    if d2:
        if args.nostayers:
            jobs.append(("wampos_ps", est.wampos_ps_nostayers, _kwargs(est.wampos_ps_nostayers, ps_common), d2))
        else:
            if use_reg:
                jobs.append(("wampos_reg", est.wampos_reg, _kwargs(est.wampos_reg, common), d2))
            if use_ps:
                jobs.append(("wampos_ps", est.wampos_ps, _kwargs(est.wampos_ps, ps_common), d2))
    if "delta1_t_to_t+l" in targets:
        kw = _kwargs(est.long_run_reg, common)
        kw.update(ell=args.ell, controls=args.lr_controls)
        jobs.append(("long_run", est.long_run_reg, kw, ["delta1_t_to_t+l"]))
    if "delta_plus" in targets:
        dyn = dict(tol=args.tol, ell_max=args.lmax, bandwidth=common["bandwidth"], kernel=args.kernel,
                   cef_degree=args.degree, min_ess=args.min_ess, degree=args.pscore_degree, clip=args.clip,
                   sign_split=args.sign_split)
        if use_reg:
            jobs.append(("dynamic_reg", est.dynamic_effects, dict(dyn, method="regression"), None))
        if use_ps:
            jobs.append(("dynamic_ps", est.dynamic_effects, dict(dyn, method="pscore"), None))
    if "twfe" in targets:
        jobs.append(("twfe", est.twfe_reference, {}, ["twfe"]))
    return jobs


def _as_set(result) -> est.EstimateSet:
    if isinstance(result, est.EstimateSet):
        return result
    return est.EstimateSet({result.target: result})


def _select(result_set, wanted, label):
    out = est.EstimateSet(errors=result_set.errors, diagnostics=result_set.diagnostics)
    for key, value in result_set.items():
        if wanted is None or key in wanted:
            out[key] = value
    if wanted is not None:
        for key in wanted:
            if key not in out and not any(e["target"] == key for e in out.errors):
                out.errors.append({"target": key, "code": "NoEstimate", "message": f"{label} did not produce {key}"})
    return out


def _run_jobs(panel, jobs, args):
    blocks = []
    errors = []
    for label, fn, kw, wanted in jobs:
        res = _select(_as_set(fn(panel, **kw)), wanted, label)
        for e in res.errors:
            errors.append(dict(e, estimator=label))
        if not res:
            first = res.errors[0] if res.errors else {"code": "NoEstimate", "message": "nothing estimated"}
            raise _RaisedFromSet(first)
        if args.boot:
            _bootstrap_job(panel, fn, kw, res, args, label)
        blocks.append((label, res))
    return blocks, errors


class _RaisedFromSet(ContDidError):
    def __init__(self, entry):
        super().__init__(entry["message"])
        self._code = entry["code"]

    @property
    def code(self):
        return self._code


def _bootstrap_job(panel, fn, kw, res, args, label):
    frozen = dict(kw)
    if not args.reselect:
        # tuning is shared by every target of one job; take it from the first block
        first = next(iter(res.values()))
        frozen.update(_kwargs(fn, est.frozen_tuning(first)))
        if fn is est.wampos_ps_nostayers and "delta" in first.tuning:
            frozen["delta_grid"] = [first.tuning["delta"]]

    def replicate(p):
        return _as_set(fn(p, **frozen)).values_dict()

    spec = BootstrapSpec(args.boot, args.seed, args.ci_level)
    results, failures = bootstrap_many(replicate, panel, spec, keys=list(res))
    heuristic = fn in (est.ampos_nostayers, est.wampos_ps_nostayers)
    for key, e in res.items():
        if key in results:
            attach(e, results[key], heuristic=heuristic)
            e.tuning["bootstrap"] = {"replications": args.boot, "seed": args.seed,
                                     "tuning": "reselected" if args.reselect else "fixed"}
        else:
            e.diagnostics["bootstrap_error"] = failures[key].to_dict()


def _overlap(panel, status, args):
    pscores = {}
    for k in range(status.n_transitions):
        if not status.m[:, k].any() or status.m[:, k].all():
            continue
        labels = np.where(status.m_i[:, k], 1, np.where(status.m_d[:, k], 2, 0))
        try:
            pscores[k + 2] = fit_pscore(panel.d[:, k], labels, panel.w, degree=args.pscore_degree)
        except (SeparationDetected, TooFewObservations):
            pass
    try:
        return overlap_report(panel, status, pscores, min_prob=getattr(args, "min_prob", 0.01)).to_dict()
    except NoStayers as exc:
        return {"error": exc.to_dict()}


def _settings(args, targets):
    keys = ("tol", "bandwidth", "kernel", "degree", "min_ess", "pscore_degree", "clip", "trim", "method",
            "nostayers", "delta_grid", "min_quasi", "ell", "lr_controls", "lmax", "sign_split", "boot", "seed",
            "ci_level", "reselect", "unit", "time", "d", "y", "weight")
    out = {k: getattr(args, k) for k in keys}
    out["targets"] = targets
    return out


def run_estimate(args) -> tuple[dict, list]:
    targets = _targets(args)
    _validate_estimate(args, targets)
    schema = ColumnSchema(args.unit, args.time, args.d, args.y, args.weight)
    panel = ingest(args.input, schema, delimiter=args.delimiter)
    status = classify(panel, args.tol)
    jobs = _jobs(args, targets)
    blocks, errors = _run_jobs(panel, jobs, args)
    estimates = []
    for label, res in blocks:
        for key, e in res.items():
            d = e.to_dict()
            d["estimator"] = label
            estimates.append(d)
    by = {(b["estimator"], b["target"]): b["value"] for b in estimates}
    differences = []
    for t in ("delta2", "delta2i", "delta2d"):
        if ("wampos_reg", t) in by and ("wampos_ps", t) in by:
            differences.append({"target": t, "regression_minus_pscore": by[("wampos_reg", t)] - by[("wampos_ps", t)]})
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "estimate",
        "software": _software(),
        "input": dict(validation_report(panel), file=str(args.input)),
        "settings": _settings(args, targets),
        "counts": status.counts(panel.periods),
        "overlap": _overlap(panel, status, args),
        "estimates": estimates,
        "differences": differences,
        "errors": errors,
    }
    if "delta_plus" in targets:
        report["baseline_partition"] = check_monotone_baseline(panel).counts()
    return report, estimates


def _estimates_tsv(estimates) -> str:
    cols = ("estimator", "target", "method", "value", "se", "ci_low", "ci_high", "n_movers_used",
            "n_movers_dropped", "n_controls")
    lines = ["\t".join(cols)]
    for b in estimates:
        lines.append("\t".join("" if b[c] is None else (f"{b[c]:.12g}" if isinstance(b[c], float) else str(b[c]))
                               for c in cols))
    return "\n".join(lines) + "\n"


# simulate / montecarlo ----------------------------------------------------------

def _spec_from(args) -> DgpSpec:
    text = ""
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    text += "\n" + "\n".join(s.replace("=", " = ", 1) for s in args.set)
    spec = parse_config(text)
    if getattr(args, "seed", None) is not None and args.command == "simulate":
        spec = spec.replace(seed=args.seed)
    return spec


def run_simulate(args):
    spec = _spec_from(args)
    panel, truth = generate(spec)
    frame = panel.to_frame()
    text = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    _emit(text, args.output)
    if args.truth:
        values = {}
        for target in ("delta1", "delta2i", "delta2d", "delta2", "delta_plus"):
            try:
                values[target] = oracle(truth, target)
            except ContDidError:
                values[target] = None
        for ell in range(spec.T - 1):
            for target in ("delta_plus_l", "delta_D_plus_l", "delta1_t_to_t+l"):
                name = target.replace("_l", f"_{ell}") if target != "delta1_t_to_t+l" else f"delta1_t_to_t+{ell}"
                try:
                    values[name] = oracle(truth, target, ell=ell)
                except ContDidError:
                    values[name] = None
        _emit(dumps({"schema_version": SCHEMA_VERSION, "command": "simulate", "software": _software(),
                     "spec": vars_spec(spec), "truth": values}), args.truth)


def vars_spec(spec: DgpSpec) -> dict:
    return {f.name: getattr(spec, f.name) for f in dataclasses.fields(spec)}


def run_mc(args):
    spec = _spec_from(args)
    names = [n.strip() for n in args.estimators.split(",") if n.strip()]
    options = {"long_run_reg": {"ell": args.ell, "controls": args.lr_controls}}
    if args.lmax is not None:
        options["dynamic_reg"] = {"ell_max": args.lmax}
        options["dynamic_ps"] = {"ell_max": args.lmax}
    rows = run_montecarlo(spec, names, R=args.reps, master_seed=args.seed, options=options, boot=args.boot,
                          ci_level=args.ci_level)
    if args.format == "tsv":
        return summary_tsv(rows)
    return dumps({"schema_version": SCHEMA_VERSION, "command": "montecarlo", "software": _software(),
                  "spec": vars_spec(spec), "reps": args.reps, "seed": args.seed, "boot": args.boot,
                  "rows": [r.to_dict() for r in rows]})


def run_diagnose(args) -> dict:
    schema = ColumnSchema(args.unit, args.time, args.d, args.y, args.weight)
    panel = ingest(args.input, schema, delimiter=args.delimiter)
    status = classify(panel, args.tol)
    dd = np.abs(status.dd)
    return {
        "schema_version": SCHEMA_VERSION,
        "command": "diagnose",
        "software": _software(),
        "input": dict(validation_report(panel), file=str(args.input)),
        "counts": status.counts(panel.periods),
        "overlap": _overlap(panel, status, args),
        "baseline_partition": check_monotone_baseline(panel).counts(),
        "exact_stayer_share": float((dd == 0).mean()),
        "abs_dd_quantiles": {str(q): float(np.quantile(dd, q)) for q in (0.1, 0.2, 0.3, 0.4, 0.5)},
    }


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "estimate":
            report, estimates = run_estimate(args)
            _emit(_estimates_tsv(estimates) if args.format == "tsv" else dumps(report), args.output)
        elif args.command == "simulate":
            run_simulate(args)
        elif args.command == "montecarlo":
            _emit(run_mc(args), args.output)
        else:
            _emit(dumps(run_diagnose(args)), args.output)
    except UsageError as exc:
        print(f"contdid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"contdid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ContDidError as exc:
        sys.stdout.write(dumps(_error_doc(exc, args.command)))
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
