"""Command-line driver: ``gradperm test``, ``gradperm simulate`` and ``gradperm rerun``.

Every run that writes files also writes a manifest next to them recording the
exact arguments, input checksums, seed, package version and timing.  Result
files themselves carry no timestamps, so ``gradperm rerun MANIFEST`` can
reproduce them byte for byte and verify the checksums.

Exit codes: 0 success, 1 rerun mismatch, 2 invalid input or configuration,
3 training divergence.
"""

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import math
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, nn_core, permtests, simgen
from .errors import DivergenceError, GradpermError

log = logging.getLogger("gradperm")

EXIT_OK, EXIT_MISMATCH, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3
MANIFEST_VERSION = "1.0"
MISSING = {"", "na", "nan", "null", "none", "n/a", "?"}
TEST_CSV_COLUMNS = ("feature", "test", "T_observed", "p_value", "B", "n_null", "verdict")
NONLIN5_LABELS = ("Linear", "Quadratic", "Cubic", "Trigonometric", "Nonsmooth")


class UsageError(GradpermError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _hidden(text):
    try:
        sizes = tuple(int(s) for s in str(text).split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"hidden sizes must be integers, got {text!r}")
    if not sizes:
        raise argparse.ArgumentTypeError("give at least one hidden size")
    return sizes


def _resolve_workers(value):
    return permtests.default_workers() if value is None else value


def read_csv(path, outcome, features=None):
    """Load a header-first numeric CSV into a Dataset.

    Missing or non-numeric cells are rejected with their line numbers (the
    header is line 1).
    """
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise UsageError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise UsageError("duplicate column names in header")
    if outcome not in header:
        raise UsageError(f"outcome column {outcome!r} not found; columns are {header}")
    predictors = [h for h in header if h != outcome]
    for name in features or ():
        if name not in predictors:
            raise UsageError(f"feature column {name!r} not found among predictors {predictors}")
    body = rows[1:]
    values = np.empty((len(body), len(header)))
    bad = []
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise UsageError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        for k, cell in enumerate(row):
            cell = cell.strip()
            if cell.lower() in MISSING:
                bad.append(f"line {line}, column {header[k]!r}: missing value")
                continue
            try:
                v = float(cell)
            except ValueError:
                bad.append(f"line {line}, column {header[k]!r}: non-numeric {cell!r}")
                continue
            if not math.isfinite(v):
                bad.append(f"line {line}, column {header[k]!r}: non-finite {cell!r}")
            values[i, k] = v
    if bad:
        shown = "; ".join(bad[:10]) + (f"; ... {len(bad) - 10} more" if len(bad) > 10 else "")
        raise UsageError(f"{len(bad)} invalid cell(s): {shown}")
    cols = [header.index(h) for h in predictors]
    return nn_core.Dataset(values[:, cols], values[:, header.index(outcome)], predictors)


def _prepare_out(path, force, is_dir=False):
    path = Path(path)
    if is_dir:
        if path.exists() and not path.is_dir():
            raise UsageError(f"{path} exists and is not a directory")
        if path.exists() and any(path.iterdir()) and not force:
            raise UsageError(f"output directory {path} is not empty; pass --force to overwrite")
        path.mkdir(parents=True, exist_ok=True)
    else:
        if path.exists() and not force:
            raise UsageError(f"{path} exists; pass --force to overwrite")
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(command, args_dict, inputs, config, seed, outputs, started, wall):
    return {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "args": args_dict,
        "inputs": [{"path": str(Path(p).resolve()), "sha256": _sha256(p)} for p in inputs],
        "config": config,
        "master_seed": int(seed),
        "version": __version__,
        "started": started,
        "finished": _now(),
        "wall_time": wall,
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
    }


# ---------------------------------------------------------------------------
# test
# ---------------------------------------------------------------------------

def _network_config(args, data):
    act = args.output_activation
    if act == "auto":
        act = "sigmoid" if data.is_binary() else "identity"
    return nn_core.NetworkConfig(
        hidden_sizes=args.hidden, output_activation=act, epochs=args.epochs,
        initial_learning_rate=args.lr, lr_decay_per_epoch=args.decay, l2_lambda=args.l2,
        batch_size=args.batch_size, init_scale=args.init_scale)


def _test_rows(name, test, res):
    if test == "both":
        rows = [("association", res.association)]
        if res.nonlinearity is not None:
            rows.append(("nonlinearity", res.nonlinearity))
        return [[name, kind, repr(r.T_observed), repr(r.p_value), r.B, len(r.T_null),
                 res.verdict] for kind, r in rows]
    return [[name, res.kind, repr(res.T_observed), repr(res.p_value), res.B,
             len(res.T_null), ""]]


def cmd_test(args):
    started, t0 = _now(), time.perf_counter()
    data = read_csv(args.csv, args.outcome, args.feature)
    features = args.feature or list(data.feature_names)
    if args.standardize:
        data = data.standardized()
    cfg = permtests.TestConfig(
        B=args.permutations, network=_network_config(args, data), q=args.q,
        master_seed=args.seed, workers=_resolve_workers(args.workers), add_one=args.add_one,
        level=args.level)
    out = _prepare_out(args.out, args.force) if args.out else None

    results, rows = [], []
    for name in features:
        log.info("testing %s (%s, B=%d)", name, args.test, cfg.B)
        if args.test == "assoc":
            res = permtests.association_test(data, name, cfg)
        elif args.test == "nonlin":
            res = permtests.nonlinearity_test(data, name, cfg)
        else:
            res = permtests.combined_protocol(data, name, cfg)
        entry = res.to_dict(include_gradients=not args.no_gradients)
        entry["feature_name"] = name
        results.append(entry)
        rows.extend(_test_rows(name, args.test, res))

    if args.format == "json":
        text = _dump({
            "schema_version": permtests.SCHEMA_VERSION,
            "test": args.test,
            "outcome": args.outcome,
            "scale": "standardized" if args.standardize else "original",
            "n": data.n,
            "results": results,
        })
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TEST_CSV_COLUMNS)
        w.writerows(rows)
        text = buf.getvalue()

    if out is None:
        sys.stdout.write(text)
        return EXIT_OK
    _write_text(out, text)
    man = _manifest("test", _args_dict(args), [args.csv], cfg.to_dict(), cfg.master_seed,
                    [out], started, time.perf_counter() - t0)
    _write_text(_manifest_path(out), _dump(man))
    print(f"wrote {out}")
    return EXIT_OK


def _manifest_path(out):
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _feature_label(kind, j):
    if kind == "nonlin5":
        return NONLIN5_LABELS[j]
    return f"X{j + 1}"


def _summary_table(setting, test, layers, reports, B):
    """Markdown table; one row per tested feature, rejection rate at alpha."""
    method = "LM" if test == "lm" else f"NN-{layers}"
    head = ["Feature", "Method", "Test", "Hypothesis", "m", "n", "B", "Sims", "Alpha",
            "Rejection rate"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for j, rep in reports:
        done = rep.n_sims - len(rep.failed_sims)
        cells = [_feature_label(setting.kind, j), method, test, setting.hypothesis,
                 "" if setting.beta_mean is None else f"{setting.beta_mean:g}",
                 str(setting.n), "" if test == "lm" else str(B), str(done),
                 f"{rep.alpha:g}", f"{rep.rejection_rate:.3f}"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_simulate(args):
    started, t0 = _now(), time.perf_counter()
    n, B, n_sims = simgen.scale_preset(args.kind, args.scale)
    n = args.n or n
    B = args.permutations or B
    n_sims = args.n_sims or n_sims
    if args.hypothesis == "alternative" and args.m is None and args.kind in simgen.PAPER_M:
        raise UsageError("--hypothesis alternative needs --m for this kind")
    setting = simgen.SimSetting(
        kind=args.kind, n=n, beta_mean=args.m, hypothesis=args.hypothesis,
        correlation=args.correlation if args.kind == "correlated" else None,
        noise_scale=args.noise_scale, seed=args.seed)
    if args.features:
        features = args.features
    elif args.kind == "nonlin5":
        features = list(range(5))
    else:
        features = [simgen.DEFAULT_FEATURE[args.kind]]
    for j in features:
        if not 0 <= j < setting.p:
            raise UsageError(f"feature index {j} out of range for kind {args.kind}")
    cfg = permtests.TestConfig(B=B, network=simgen.network_preset(args.kind, args.layers),
                               master_seed=args.seed)
    out = _prepare_out(args.out, args.force, is_dir=True)
    workers = _resolve_workers(args.workers)

    reports, files, timing = [], [], {}
    for j in features:
        label = f"X{j + 1}"
        log.info("simulating %s, test %s, feature %s: %d sims", args.kind, args.test, label,
                 n_sims)
        rep = simgen.run_study(setting, args.test, n_sims, args.alpha, cfg, feature=j,
                               workers=workers, progress=_progress if args.verbose else None)
        reports.append((j, rep))
        timing[label] = rep.wall_time
        jpath, cpath = out / f"report_{label}.json", out / f"sims_{label}.csv"
        _write_text(jpath, _dump(rep.to_dict(include_timing=False)))
        _write_text(cpath, rep.to_csv())
        files += [jpath, cpath]
        print(f"{_feature_label(args.kind, j)} ({label}): rejection rate "
              f"{rep.rejection_rate:.3f} over {rep.n_sims - len(rep.failed_sims)} sims")
    spath = out / "summary.md"
    _write_text(spath, _summary_table(setting, args.test, args.layers, reports, B))
    files.append(spath)
    man = _manifest("simulate", _args_dict(args), [], {
        "setting": setting.to_dict(), "test_config": cfg.to_dict(), "n_sims": n_sims,
        "features": features, "study_wall_time": timing}, args.seed, files, started,
        time.perf_counter() - t0)
    _write_text(out / "manifest.json", _dump(man))
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def _progress(done, total):
    if done == total or done % max(1, total // 10) == 0:
        log.info("  %d/%d simulations", done, total)


# ---------------------------------------------------------------------------
# rerun
# ---------------------------------------------------------------------------

# worker count and overwrite permission do not affect results
_NOT_STORED = {"func", "verbose", "workers", "force"}


def _args_dict(args):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())
            if k not in _NOT_STORED}


def cmd_rerun(args):
    mpath = Path(args.manifest)
    if not mpath.is_file():
        raise UsageError(f"manifest not found: {mpath}")
    man = json.loads(mpath.read_text(encoding="utf-8"))
    if man.get("manifest_version") != MANIFEST_VERSION:
        raise UsageError("unsupported manifest version")
    stored = dict(man["args"])
    parser = build_parser()
    ns = parser.parse_args([stored["command"]] + _required_positionals(stored))
    for k, v in stored.items():
        setattr(ns, k, tuple(v) if k == "hidden" else v)
    ns.out = args.out or stored["out"]
    ns.force = True
    ns.workers = args.workers
    ns.verbose = args.verbose
    code = ns.func(ns)
    if code != EXIT_OK:
        return code
    if man["command"] == "test":
        new_files = {Path(ns.out).name: Path(ns.out)}
    else:
        new_files = {name: Path(ns.out) / name for name in man["outputs"]}
    mismatched = [name for name, digest in man["outputs"].items()
                  if not new_files.get(name, Path("/nonexistent")).is_file()
                  or _sha256(new_files[name]) != digest]
    if mismatched:
        print(f"rerun differs from manifest in: {', '.join(sorted(mismatched))}")
        return EXIT_MISMATCH
    print(f"rerun reproduced {len(man['outputs'])} output file(s) byte for byte")
    return EXIT_OK


def _required_positionals(stored):
    if stored["command"] == "test":
        return [stored["csv"], "--outcome", stored["outcome"]]
    return ["--kind", stored["kind"], "--out", stored["out"]]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def build_parser():
    p = argparse.ArgumentParser(
        prog="gradperm", description="Gradient-based permutation tests for neural networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="test features of a CSV dataset")
    t.add_argument("csv", help="comma-separated file with a header row")
    t.add_argument("--outcome", required=True, help="name of the outcome column")
    t.add_argument("--feature", action="append",
                   help="predictor to test (repeatable; default: every predictor)")
    t.add_argument("--test", choices=("assoc", "nonlin", "both"), default="both")
    t.add_argument("--permutations", "-B", type=int, default=500, dest="permutations")
    t.add_argument("--hidden", type=_hidden, default=(40,),
                   help="hidden layer sizes, e.g. 40 or 40,10")
    t.add_argument("--output-activation", choices=("auto", "identity", "sigmoid"),
                   default="auto", help="auto picks sigmoid for a 0/1 outcome")
    t.add_argument("--epochs", type=int, default=150)
    t.add_argument("--lr", type=float, default=0.1, help="initial learning rate")
    t.add_argument("--decay", type=float, default=0.005,
                   help="fraction of the learning rate removed each epoch")
    t.add_argument("--l2", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--init-scale", type=float, default=0.5,
                   help="weights start uniform on [-s, s]")
    t.add_argument("--q", type=int, default=10, help="spline basis dimension")
    t.add_argument("--level", type=float, default=0.05,
                   help="significance level for the combined verdict")
    t.add_argument("--add-one", action="store_true",
                   help="report (1 + #exceed) / (B + 1) instead of #exceed / B")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--standardize", action="store_true",
                   help="z-score predictors before fitting (gradients then refer to that scale)")
    t.add_argument("--format", choices=("json", "csv"), default="json")
    t.add_argument("--no-gradients", action="store_true",
                   help="omit per-row gradients from JSON output")
    t.add_argument("--out", help="output file (default: stdout, no manifest)")
    t.add_argument("--force", action="store_true", help="overwrite existing output")
    t.add_argument("--workers", type=_positive, default=None,
                   help="worker processes (default: $GRADPERM_WORKERS or all cores)")
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="run a simulation study")
    s.add_argument("--kind", required=True, choices=simgen.KINDS)
    s.add_argument("--scale", choices=tuple(simgen.SCALES), default="desk")
    s.add_argument("--test", choices=simgen.TESTS, default="assoc")
    s.add_argument("--layers", type=int, choices=(1, 2), default=1,
                   help="network depth (NN-1 or NN-2)")
    s.add_argument("--hypothesis", choices=("null", "alternative"), default="null")
    s.add_argument("--m", type=float, default=None, help="signal mean under the alternative")
    s.add_argument("--correlation", choices=tuple(simgen.CORRELATIONS), default="identity",
                   help="correlated kind only; low/high are synthetic stand-ins")
    s.add_argument("--noise-scale", choices=("sd", "variance"), default="sd")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--n-sims", type=_positive, default=None)
    s.add_argument("--permutations", "-B", type=_positive, default=None,
                   dest="permutations")
    s.add_argument("--n", type=_positive, default=None, help="sample size per dataset")
    s.add_argument("--features", type=int, nargs="+", default=None,
                   help="0-based feature indices to test")
    s.add_argument("--seed", type=int, default=2023)
    s.add_argument("--out", required=True, help="output directory (created if missing)")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    s.add_argument("--workers", type=_positive, default=None,
                   help="worker processes (default: $GRADPERM_WORKERS or all cores)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("rerun", help="repeat a run from its manifest and verify outputs")
    r.add_argument("manifest")
    r.add_argument("--out", default=None, help="write outputs here instead")
    r.add_argument("--workers", type=_positive, default=None)
    r.set_defaults(func=cmd_rerun)
    return p


def load_schema(name):
    """The bundled JSON schema ``"test_result"`` or ``"study_report"``."""
    text = resources.files("gradperm").joinpath(f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (GradpermError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
