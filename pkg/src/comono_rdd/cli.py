"""``comono-rdd`` command-line interface.

Every subcommand writes its artifacts plus a JSON run manifest holding the
full configuration, input digests and per-stage counts. ``replay`` re-runs a
manifest and, given the same inputs, rewrites the same bytes. The thread
count is deliberately left out of the manifest: results do not depend on it.

Exit codes: 2 usage, 3 data errors, 4 estimation failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import Dataset, Standardization, load_csv, standardize, write_csv
from .dgp import GENERATORS
from .errors import ComonoError, DataError, EstimationError
from .extrapolate import CurvePair, OwnFits, QEstimator, cate_at, estimate_q_conditional
from .frontier import _nn_into, cross_nn
from .inference import BootstrapConfig, bootstrap_bands, comono_diagnostic, frontier_pairs
from .kernels import KernelSpec, get_kernel
from .loclin import BandwidthMode, cv_bandwidth, log_grid, rule_of_thumb_h
from .policy import parse_rule, policy_effect, s_indicator, threshold_sweep

log = logging.getLogger("comono_rdd")

EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 2, 3, 4
TOOL = "comono-rdd"

# argument destinations that name files the command writes; the manifest
# stores their basenames so a replay can redirect them into another directory
OUTPUT_DESTS = ("out", "truth_out", "points_out", "manifest")
# left out of the manifest on purpose
VOLATILE_DESTS = ("threads", "func", "verbose")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument types


def _auto_positive(text: str):
    if text == "auto":
        return None
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive number or 'auto', got {text!r}")
    if not (np.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"expected a positive number or 'auto', got {text!r}")
    return v


def _triple(text: str):
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected lo:hi:steps, got {text!r}")
    try:
        lo, hi, steps = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi:steps, got {text!r}")
    if steps < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"need lo <= hi and steps >= 1, got {text!r}")
    return [lo, hi, steps]


def _names(text: str):
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise argparse.ArgumentTypeError("expected a comma-separated list of column names")
    return names


def _point(text: str):
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _level(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("level must lie in (0, 1)")
    return v


def _draws(text: str) -> int:
    v = int(text)
    if v != 0 and v < 2:
        raise argparse.ArgumentTypeError("bootstrap draws must be 0 (off) or at least 2")
    return v


# ---------------------------------------------------------------------------
# output helpers


def _cell(v) -> str:
    """CSV cell; undefined values are left empty rather than written as numbers."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    return repr(v) if np.isfinite(v) else ""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, KernelSpec):
        return obj.value
    return obj


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects what a subcommand read, resolved and wrote, for the manifest."""

    def __init__(self, args):
        self.args = args
        self.inputs = {}
        self.resolved = {}
        self.counts = {}
        self.outputs = []

    def write_csv(self, path, header, rows):
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
        self.outputs.append(path.name)

    def write_json(self, path, obj):
        path = Path(path)
        path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.outputs.append(path.name)

    def manifest(self) -> dict:
        cfg = {}
        for k, v in sorted(vars(self.args).items()):
            if k in VOLATILE_DESTS:
                continue
            if k in OUTPUT_DESTS and v is not None:
                v = Path(v).name
            if k == "out_dir" or k == "input":
                continue
            cfg[k] = v
        return {
            "tool": {"name": TOOL, "version": __version__},
            "command": self.args.command,
            "config": cfg,
            "inputs": self.inputs,
            "resolved": self.resolved,
            "counts": self.counts,
            "outputs": sorted(set(self.outputs)),
        }


def _load(args, run: Run):
    path = Path(args.input)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    ds = load_csv(path, y_col=args.y_col, d_col=args.d_col, x_cols=args.x_cols)
    run.inputs["in"] = {"path": str(path.resolve()), "sha256": _sha256(path)}
    if args.no_standardize:
        tr = Standardization.identity(ds.k)
        work = ds
    else:
        work, tr = standardize(ds)
    run.counts["n"] = ds.n
    run.counts["n_treated"] = int(np.sum(ds.d == 1))
    run.counts["n_untreated"] = int(np.sum(ds.d == 0))
    run.resolved["standardization"] = {"means": tr.means, "scales": tr.scales}
    return ds, work, tr


def _sidecar(out, suffix: str) -> Path:
    out = Path(out)
    return out.with_name(out.stem + suffix)


# ---------------------------------------------------------------------------
# estimation pipeline shared by the subcommands


class Pipeline:
    """Bandwidths, curve estimators and own-group fits built once per run.

    Estimators are created on first use so a command touching only one
    direction does not pay for the other's cross-validation.
    """

    def __init__(self, ds: Dataset, args, run: Run):
        self.ds = ds
        self.args = args
        self.run = run
        self.kernel = get_kernel(args.kernel)
        self.fi = cross_nn(ds)
        self.h = {}
        self.h_mode = {}
        for g in (1, 0):
            if args.h is not None:
                self.h[g], self.h_mode[g] = args.h, BandwidthMode.MANUAL
            elif args.cv_grid is not None:
                grid = log_grid(args.cv_grid[0], args.cv_grid[1], args.cv_grid[2])
                self.h[g] = cv_bandwidth(ds, g, self.kernel, grid)
                self.h_mode[g] = BandwidthMode.CROSS_VALIDATED
            else:
                self.h[g] = rule_of_thumb_h(int(np.sum(ds.d == g)))
                self.h_mode[g] = BandwidthMode.RULE_OF_THUMB
        self._est = {}
        self._own = None
        run.resolved["kernel"] = self.kernel.value
        run.resolved["h"] = {str(g): self.h[g] for g in (0, 1)}
        run.resolved["h_mode"] = {str(g): self.h_mode[g].value for g in (0, 1)}

    def estimator(self, d: int) -> QEstimator:
        if d not in self._est:
            a = self.args
            est = QEstimator(self.ds, d, self.kernel, h=self.h[d], epsilon=a.epsilon, b=a.b,
                             grid_size=a.grid_size, fi=self.fi, smooth_response=a.smooth_response,
                             rearrange=a.rearrange)
            self._est[d] = est
            self.run.resolved[f"q{est.target}"] = {
                "first_stage_group": d, "h": est.h, "epsilon": est.epsilon, "b": est.b,
                "b_mode": est.b_mode.value, "y_low": est.y_low, "y_high": est.y_high,
                "grid_size": len(est.grid),
            }
        return self._est[d]

    def curves(self, multipliers=None, strict: bool = True) -> CurvePair:
        return CurvePair(q0=self.estimator(1).curve(multipliers, strict),
                         q1=self.estimator(0).curve(multipliers, strict))

    def own(self) -> OwnFits:
        if self._own is None:
            self._own = OwnFits(self.ds, self.kernel, h=self.h)
        return self._own

    def record_curve(self, curve):
        self.run.counts[f"q{curve.target}"] = {
            "n_second_stage": curve.info["n_second_stage"],
            "n_endpoint": curve.info["n_endpoint"],
            "n_first_stage_failed": curve.info["n_first_stage_failed"],
            "near_frontier": curve.info["near_frontier"],
            "n_dropped": curve.n_dropped,
            "dropped_y": curve.grid[curve.dropped],
        }


def _bands(args, run: Run, label: str, estimate, closure, n: int):
    """Bootstrap bands or NaN bands when ``--bootstrap-draws 0``."""
    est = np.asarray(estimate, dtype=float)
    if args.bootstrap_draws == 0:
        nan = np.full(est.shape, np.nan)
        return nan, nan
    cfg = BootstrapConfig(draws=args.bootstrap_draws, level=args.level, seed=args.seed)
    bands = bootstrap_bands(est, closure, n, cfg, threads=args.threads)
    run.counts[f"bootstrap_{label}"] = {"used": bands.n_used, "discarded": bands.n_discarded}
    return bands.lower, bands.upper


def _curve_rows(curve, lower, upper):
    return [(y, q, lo, hi) for y, q, lo, hi in zip(curve.grid, curve.values, lower, upper)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, run: Run):
    kw = {}
    if args.c is not None:
        if args.dgp != "linear":
            raise UsageError("--c applies to the linear DGP only")
        kw["c"] = args.c
    if args.noise_sd is not None:
        if args.dgp == "skill":
            raise UsageError("the skill model has no --noise-sd; its noise is set by its parameters")
        kw["noise_sd"] = args.noise_sd
    ds, truth = GENERATORS[args.dgp](args.n, args.seed, **kw)
    write_csv(ds, args.out)
    run.outputs.append(Path(args.out).name)
    if args.truth_out:
        run.write_json(args.truth_out, truth.to_json())
    run.counts.update(n=ds.n, n_treated=int(np.sum(ds.d == 1)), n_untreated=int(np.sum(ds.d == 0)))


def _raw_stratum(raw: Dataset, work: Dataset, tr: Standardization, cols, pt):
    hit = np.flatnonzero(np.all(work.x[:, cols] == pt, axis=1))
    if hit.size:
        return raw.x[hit[0], cols]
    return np.asarray(pt) * tr.scales[cols] + tr.means[cols]


def cmd_estimate_q(args, run: Run):
    raw, ds, tr = _load(args, run)
    pipe = Pipeline(ds, args, run)
    d = args.direction
    if args.strata_cols:
        cols = [ds.column(c) for c in args.strata_cols]
        est = pipe.estimator(d)
        curves = estimate_q_conditional(
            ds, pipe.fi, d, cols, pipe.kernel, grid_size=args.grid_size, h=est.h,
            epsilon=args.epsilon, b=args.b, smooth_response=args.smooth_response,
            rearrange=args.rearrange)
        rows = []
        strata = []
        for key, curve in curves.items():
            rawpt = _raw_stratum(raw, ds, tr, cols, np.asarray(key))
            strata.append({"stratum": rawpt, "b": curve.b, "n_dropped": curve.n_dropped})
            for y, q in zip(curve.grid, curve.values):
                rows.append((*rawpt, y, q, None, None))
        run.counts["strata"] = strata
        run.write_csv(args.out, [*args.strata_cols, "y", "qhat", "lower", "upper"], rows)
        return
    est = pipe.estimator(d)
    curve = est.curve()
    pipe.record_curve(curve)
    lower, upper = _bands(args, run, f"q{curve.target}", curve.values, est.values, ds.n)
    run.write_csv(args.out, ["y", "qhat", "lower", "upper"], _curve_rows(curve, lower, upper))
    r, resp = est.scatter()
    points = args.points_out or _sidecar(args.out, "_points.csv")
    run.write_csv(points, [f"g{d}_extrapolated", "y"], zip(r, resp))


def cmd_bootstrap(args, run: Run):
    raw, ds, tr = _load(args, run)
    if args.bootstrap_draws == 0:
        raise UsageError("bootstrap needs --bootstrap-draws >= 2")
    pipe = Pipeline(ds, args, run)
    rows = []
    for d in (1, 0):
        est = pipe.estimator(d)
        curve = est.curve()
        pipe.record_curve(curve)
        lower, upper = _bands(args, run, f"q{curve.target}", curve.values, est.values, ds.n)
        rows += [(curve.target, *row) for row in _curve_rows(curve, lower, upper)]
    run.write_csv(args.out, ["target", "y", "qhat", "lower", "upper"], rows)


def _cate_points(args, raw: Dataset):
    """Raw-scale evaluation points and their regions (None where not given)."""
    if args.points is not None:
        path = Path(args.points)
        if not path.is_file():
            raise DataError(f"points file not found: {path}")
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            for c in raw.names:
                if c not in header:
                    from .errors import MissingColumn
                    raise MissingColumn(c)
            has_d = args.d_col in header
            pts, regions = [], []
            for i, row in enumerate(reader, start=1):
                try:
                    pts.append([float(row[c]) for c in raw.names])
                    regions.append(int(float(row[args.d_col])) if has_d else None)
                except (TypeError, ValueError):
                    from .errors import NonNumericCell
                    raise NonNumericCell(i, ",".join(raw.names), str(row))
        return np.array(pts, dtype=float).reshape(-1, raw.k), regions
    pts = np.array(args.at, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != raw.k:
        raise UsageError(f"--at points need {raw.k} coordinates")
    return pts, [None] * len(pts)


def cmd_cate(args, run: Run):
    raw, ds, tr = _load(args, run)
    if args.points is None and not args.at:
        raise UsageError("cate needs --points FILE or at least one --at")
    pts_raw, regions = _cate_points(args, raw)
    z = tr.apply(pts_raw)
    # region of a point without a stated treatment: that of its nearest sample unit
    j, _ = _nn_into(z, ds.x)
    reg = np.array([ds.d[j[i]] if r is None else r for i, r in enumerate(regions)], dtype=int)
    if np.any((reg != 0) & (reg != 1)):
        raise DataError("point regions must be 0 or 1")
    pipe = Pipeline(ds, args, run)
    curves = pipe.curves()
    for c in (curves.q0, curves.q1):
        pipe.record_curve(c)
    fits = OwnFits(ds, pipe.kernel, h=pipe.h, points=z, regions=reg)
    base = [cate_at(ds, curves, z[i], reg[i], fit_value=f) for i, f in enumerate(fits.values())]
    tau = np.array([np.nan if c.tau is None else c.tau for c in base])

    def closure(m):
        cm = pipe.curves(m, strict=False)
        fm = fits.values(m)
        out = np.full(len(base), np.nan)
        for i, c in enumerate(base):
            if c.s == 1:
                e = cate_at(ds, cm, z[i], reg[i], fit_value=fm[i])
                out[i] = np.nan if e.tau is None else e.tau
        return out

    lower, upper = _bands(args, run, "tau", tau, closure, ds.n)
    run.counts["n_identified"] = int(sum(c.s for c in base))
    rows = [(*pts_raw[i], reg[i], c.s, c.tau, c.ey1, c.ey0, lower[i], upper[i])
            for i, c in enumerate(base)]
    run.write_csv(args.out, [*raw.names, "d", "s", "tau", "ey1", "ey0", "tau_lower", "tau_upper"],
                  rows)


def _policy_inputs(ds: Dataset, pipe: Pipeline):
    curves = pipe.curves()
    for c in (curves.q0, curves.q1):
        pipe.record_curve(c)
    fits = pipe.own().values()
    s = s_indicator(ds, curves, fits)
    pipe.run.counts["n_identified"] = int(s.sum())
    return curves, fits, s


def cmd_policy(args, run: Run):
    raw, ds, tr = _load(args, run)
    spec = parse_rule(args.rule, raw.names)
    pipe = Pipeline(ds, args, run)
    curves, fits, s = _policy_inputs(ds, pipe)
    eff = policy_effect(ds, spec, curves, fits, s, x_raw=raw.x)

    def closure(m):
        cm, fm = pipe.curves(m, strict=False), pipe.own().values(m)
        sm = s_indicator(ds, cm, fm)
        return np.array([policy_effect(ds, spec, cm, fm, sm, x_raw=raw.x, multipliers=m).theta])

    lower, upper = _bands(args, run, "theta", [eff.theta], closure, ds.n)
    run.write_json(args.out, {
        "rule": spec.description, "theta": eff.theta, "theta_lower": lower[0],
        "theta_upper": upper[0], "n_identified": eff.n_identified, "n_affected": eff.n_affected,
        "net_cost": eff.net_cost, "net_cost_count": eff.net_cost_count,
    })


def cmd_policy_sweep(args, run: Run):
    raw, ds, tr = _load(args, run)
    axis = raw.column(args.axis)
    cutoffs = np.linspace(args.cutoffs[0], args.cutoffs[1], int(args.cutoffs[2]))
    direction = 1 if args.side == "le" else -1
    pipe = Pipeline(ds, args, run)
    curves, fits, s = _policy_inputs(ds, pipe)
    sweep = threshold_sweep(ds, axis, cutoffs, direction, curves, fits, s=s, x_raw=raw.x,
                            combine=args.combine)

    def thetas(res):
        return np.array([np.nan if isinstance(e, Exception) else e.theta for _, e in res])

    def closure(m):
        cm, fm = pipe.curves(m, strict=False), pipe.own().values(m)
        res = threshold_sweep(ds, axis, cutoffs, direction, cm, fm, x_raw=raw.x,
                              combine=args.combine, multipliers=m)
        return thetas(res)

    lower, upper = _bands(args, run, "theta", thetas(sweep), closure, ds.n)
    rows = []
    for i, (c, e) in enumerate(sweep):
        if isinstance(e, Exception):
            rows.append((c, None, None, None, None, 0))
        else:
            rows.append((c, e.theta, lower[i], upper[i], e.n_affected, e.n_identified))
    run.write_csv(args.out, ["cutoff", "theta", "theta_lower", "theta_upper", "n_affected",
                             "n_identified"], rows)


def cmd_diagnose(args, run: Run):
    raw, ds, tr = _load(args, run)
    kernel = get_kernel(args.kernel)
    fi = cross_nn(ds)
    h = {g: args.h if args.h is not None else rule_of_thumb_h(int(np.sum(ds.d == g))) for g in (0, 1)}
    eps = {g: args.epsilon for g in (0, 1)} if args.epsilon is not None else None
    pairs = frontier_pairs(ds, kernel, h=h, epsilon=eps, fi=fi, n_bins=args.bins or None)
    diag = comono_diagnostic(pairs)
    i, j = diag.violating_pair
    out = diag.to_json() | {"pair_values": [pairs[i], pairs[j]], "violated": diag.violated}
    run.resolved.update(kernel=kernel.value, h={str(g): h[g] for g in (0, 1)}, bins=args.bins)
    run.counts["n_points"] = int(len(pairs))
    run.write_json(args.out, out)


def cmd_demo(args, run: Run):
    """Full pipeline on the expository design: data, both curves, CATE map, sweep, diagnostic."""
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds_raw, truth = GENERATORS["expository"](args.n, args.data_seed)
    data = out_dir / "data.csv"
    write_csv(ds_raw, data)
    run.outputs.append(data.name)
    run.write_json(out_dir / "truth.json", truth.to_json())

    # the rest reads the file back, exactly as a user-driven run would
    args.input, args.y_col, args.d_col, args.x_cols, args.no_standardize = data, "y", "d", None, False
    raw, ds, tr = _load(args, run)
    run.inputs.clear()
    pipe = Pipeline(ds, args, run)

    for d in (1, 0):
        est = pipe.estimator(d)
        curve = est.curve()
        pipe.record_curve(curve)
        lower, upper = _bands(args, run, f"q{curve.target}", curve.values, est.values, ds.n)
        truth_q = truth.q0 if curve.target == 0 else truth.q1
        rows = [(*row, truth_q(row[0])) for row in _curve_rows(curve, lower, upper)]
        run.write_csv(out_dir / f"q{curve.target}.csv", ["y", "qhat", "lower", "upper", "q_true"], rows)
        r, resp = est.scatter()
        run.write_csv(out_dir / f"q{curve.target}_points.csv", [f"g{d}_extrapolated", "y"],
                      zip(r, resp))

    # CATE on a regular grid over the unit square (region from the known rule)
    g = np.linspace(0.0, 1.0, args.cate_grid)
    pts_raw = np.array([(a, b) for b in g for a in g])
    reg = np.asarray(truth.rule(pts_raw), dtype=int)
    z = tr.apply(pts_raw)
    curves = pipe.curves()
    fits = OwnFits(ds, pipe.kernel, h=pipe.h, points=z, regions=reg).values()
    tau_true = truth.tau(pts_raw)
    rows = []
    for i, f in enumerate(fits):
        c = cate_at(ds, curves, z[i], reg[i], fit_value=f)
        rows.append((*pts_raw[i], reg[i], c.s, c.tau, tau_true[i]))
    run.write_csv(out_dir / "cate_grid.csv", ["x1", "x2", "d", "s", "tau", "tau_true"], rows)

    # widen the treated region by raising the cutoff on x2
    own = pipe.own().values()
    s = s_indicator(ds, curves, own)
    run.counts["n_identified"] = int(s.sum())
    cutoffs = np.linspace(0.5, 0.9, 21)
    axis = raw.column("x2")
    sweep = threshold_sweep(ds, axis, cutoffs, 1, curves, own, s=s, x_raw=raw.x)
    theta = np.array([np.nan if isinstance(e, Exception) else e.theta for _, e in sweep])

    def closure(m):
        # S is re-evaluated within each draw
        res = threshold_sweep(ds, axis, cutoffs, 1, pipe.curves(m, strict=False),
                              pipe.own().values(m), x_raw=raw.x, multipliers=m)
        return np.array([np.nan if isinstance(e, Exception) else e.theta for _, e in res])

    lower, upper = _bands(args, run, "sweep", theta, closure, ds.n)
    rows = [(c, None, None, None, None, 0) if isinstance(e, Exception)
            else (c, e.theta, lower[i], upper[i], e.n_affected, e.n_identified)
            for i, (c, e) in enumerate(sweep)]
    run.write_csv(out_dir / "policy_sweep.csv", ["cutoff", "theta", "theta_lower", "theta_upper",
                                                 "n_affected", "n_identified"], rows)

    pairs = frontier_pairs(ds, pipe.kernel, h=pipe.h, fi=pipe.fi)
    run.write_json(out_dir / "diagnose.json", comono_diagnostic(pairs).to_json())
    args.input = None


# ---------------------------------------------------------------------------
# parser


def _data_flags(p, required=True):
    p.add_argument("--in", dest="input", required=required, help="input CSV with a header row")
    p.add_argument("--y-col", default="y")
    p.add_argument("--d-col", default="d")
    p.add_argument("--x-cols", type=_names, default=None,
                   help="comma-separated covariates (default: every other column)")
    p.add_argument("--no-standardize", action="store_true",
                   help="measure distances on the raw covariate scales")


def _estimation_flags(p):
    p.add_argument("--kernel", choices=[k.value for k in KernelSpec], default="uniform")
    p.add_argument("--h", type=_auto_positive, default=None, metavar="REAL|auto")
    p.add_argument("--cv-grid", type=_triple, default=None, metavar="LO:HI:STEPS",
                   help="cross-validate h over a log-spaced grid (used when --h is auto)")
    p.add_argument("--epsilon", type=_auto_positive, default=None, metavar="REAL|auto")
    p.add_argument("--b", type=_auto_positive, default=None, metavar="REAL|auto")
    p.add_argument("--grid-size", type=int, default=100)
    p.add_argument("--rearrange", action="store_true", help="monotone rearrangement of q")
    p.add_argument("--smooth-response", action="store_true",
                   help="regress own-group fits instead of raw outcomes in the second stage")


def _bootstrap_flags(p, draws=100):
    p.add_argument("--bootstrap-draws", type=_draws, default=draws, help="0 disables the bands")
    p.add_argument("--level", type=_level, default=0.90)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $COMONO_RDD_THREADS, else all cores)")


def _manifest_flag(p):
    p.add_argument("--manifest", default=None, help="manifest path (default: next to --out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL, description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic sample")
    p.add_argument("--dgp", choices=sorted(GENERATORS), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--c", type=float, default=None, help="untreated slope of the linear DGP")
    p.add_argument("--noise-sd", type=float, default=None)
    p.add_argument("--out", default="data.csv")
    p.add_argument("--truth-out", default=None)
    _manifest_flag(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate-q", help="estimate a transfer curve")
    _data_flags(p)
    _estimation_flags(p)
    _bootstrap_flags(p)
    p.add_argument("--direction", type=int, choices=(0, 1), default=1,
                   help="first-stage group d; the curve returned is q_{1-d}")
    p.add_argument("--strata-cols", type=_names, default=None)
    p.add_argument("--out", default="qcurve.csv")
    p.add_argument("--points-out", default=None)
    _manifest_flag(p)
    p.set_defaults(func=cmd_estimate_q)

    p = sub.add_parser("cate", help="conditional effects at given points")
    _data_flags(p)
    _estimation_flags(p)
    _bootstrap_flags(p)
    p.add_argument("--points", default=None, help="CSV of evaluation points (optional d column)")
    p.add_argument("--at", type=_point, action="append", default=[], metavar="X1,X2,...")
    p.add_argument("--out", default="cate.csv")
    _manifest_flag(p)
    p.set_defaults(func=cmd_cate)

    p = sub.add_parser("policy", help="effect of a counterfactual treatment rule")
    _data_flags(p)
    _estimation_flags(p)
    _bootstrap_flags(p)
    p.add_argument("--rule", required=True, help="e.g. 'x1<=0.6', '0.4*x1+x2<=0.8' or 'p=0.3'")
    p.add_argument("--out", default="policy.json")
    _manifest_flag(p)
    p.set_defaults(func=cmd_policy)

    p = sub.add_parser("policy-sweep", help="effects of a family of threshold rules")
    _data_flags(p)
    _estimation_flags(p)
    _bootstrap_flags(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--cutoffs", type=_triple, required=True, metavar="LO:HI:COUNT")
    p.add_argument("--side", choices=("le", "ge"), default="le",
                   help="treat at or below (le) or at or above (ge) the cutoff")
    p.add_argument("--combine", choices=("union", "replace"), default="union",
                   help="union keeps the factually treated treated")
    p.add_argument("--out", default="policy_sweep.csv")
    _manifest_flag(p)
    p.set_defaults(func=cmd_policy_sweep)

    p = sub.add_parser("diagnose", help="pairwise comonotonicity statistic on the frontier")
    _data_flags(p)
    p.add_argument("--kernel", choices=[k.value for k in KernelSpec], default="uniform")
    p.add_argument("--h", type=_auto_positive, default=None, metavar="REAL|auto")
    p.add_argument("--epsilon", type=_auto_positive, default=None, metavar="REAL|auto")
    p.add_argument("--bins", type=int, default=5, help="equal-count frontier bins (0: raw units)")
    p.add_argument("--out", default="diagnose.json")
    _manifest_flag(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("bootstrap", help="bands for both transfer curves")
    _data_flags(p)
    _estimation_flags(p)
    _bootstrap_flags(p)
    p.add_argument("--out", default="bands.csv")
    _manifest_flag(p)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("demo", help="whole pipeline on the expository design")
    _estimation_flags(p)
    _bootstrap_flags(p)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--data-seed", type=_seed, default=7)
    p.add_argument("--cate-grid", type=int, default=21)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("replay", help="re-run a manifest")
    p.add_argument("manifest_in", metavar="MANIFEST")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=None)
    return parser


# ---------------------------------------------------------------------------
# driver


def _execute(args) -> None:
    run = Run(args)
    if args.command == "demo":
        args.func(args, run)
        manifest_path = Path(args.out_dir) / "manifest.json"
    else:
        if getattr(args, "manifest", None) is None:
            args.manifest = str(_sidecar(args.out, ".manifest.json"))
        args.func(args, run)
        manifest_path = Path(args.manifest)
    manifest_path.write_text(json.dumps(_jsonable(run.manifest()), indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")


def _replay(args) -> None:
    path = Path(args.manifest_in)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    body = json.loads(path.read_text(encoding="utf-8"))
    if body.get("tool", {}).get("name") != TOOL:
        raise DataError(f"{path} is not a {TOOL} manifest")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = dict(body["config"])
    ns = build_parser().parse_args([body["command"], *_required_stub(body["command"])])
    for k, v in cfg.items():
        if k in OUTPUT_DESTS and v is not None:
            v = str(out_dir / v)
        setattr(ns, k, v)
    ns.threads = args.threads
    if body["command"] == "demo":
        ns.out_dir = str(out_dir)
    inp = body.get("inputs", {}).get("in")
    if inp is not None:
        if not Path(inp["path"]).is_file() or _sha256(inp["path"]) != inp["sha256"]:
            raise DataError(f"input {inp['path']} is missing or differs from the recorded digest")
        ns.input = inp["path"]
    _execute(ns)


def _required_stub(command: str) -> list:
    """Placeholder values for required flags; replay overwrites them from the manifest."""
    return {
        "simulate": ["--dgp", "linear", "--n", "1"],
        "estimate-q": ["--in", "-"],
        "cate": ["--in", "-"],
        "policy": ["--in", "-", "--rule", "p=0"],
        "policy-sweep": ["--in", "-", "--axis", "x", "--cutoffs", "0:1:1"],
        "diagnose": ["--in", "-"],
        "bootstrap": ["--in", "-"],
        "demo": ["--out-dir", "-"],
    }[command]


def _report(exc: Exception, code: int) -> int:
    info = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for k, v in vars(exc).items():
        if not k.startswith("_"):
            info[k] = v
    print(json.dumps(_jsonable(info), sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            _replay(args)
        else:
            _execute(args)
    except DataError as exc:
        return _report(exc, EXIT_DATA)
    except EstimationError as exc:
        return _report(exc, EXIT_ESTIMATION)
    except (UsageError, ComonoError, ValueError) as exc:
        return _report(exc, EXIT_USAGE)
    except OSError as exc:
        return _report(exc, EXIT_DATA)
    return 0


if __name__ == "__main__":
    sys.exit(main())
