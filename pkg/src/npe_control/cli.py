"""Command-line experiment runner.

Every command reads one JSON config, writes its artifacts atomically into the
output directory and finishes with ``report.json`` (config hash, file
checksums, wall-clock, exit status).
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import spectral
from .control import (
    ControlParams,
    SupportBox,
    SynthesisOptions,
    build_control_u,
    certify_decay,
    default_certificate_grid,
    evaluate_plan,
    search_amplitudes,
    synthesize,
    verify_psi_bound,
)
from .dynamics import (
    STATUS_BLOWUP,
    classify,
    oracle_deviation,
    simulate,
    timestep_oracle,
)
from .errors import (
    BlowUpError,
    CertificationFailure,
    ConfigurationError,
    DomainError,
    InvariantError,
    QuadratureFailure,
)
from .functionals import QuadratureSpec, compute_trace, psi
from .spectral import (
    LatticeSpec,
    load_field,
    norm0,
    random_smooth_field,
    save_field,
    single_mode_field,
)

log = logging.getLogger("npe_control")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_CERTIFICATION = 4
EXIT_BLOWUP = 5
EXIT_QUADRATURE = 6
EXIT_ENVELOPE = 7

OUTPUT_ENV = "NPE_OUTPUT_DIR"

DEFAULT_CONFIG = {
    "lattice": {"N": 32, "K": 8},
    "box": {"lower": [0.0, 0.0, 0.0], "upper": [2 * math.pi] * 3},
    "p": None,
    "amplitudes": [1.0, 1.0, 1.0],
    "search_amplitudes": True,
    "quadrature": {"initial_step": 1e-3, "growth": 1.05, "horizon": 30.0, "tail_tolerance": 1e-9,
                   "tail_constant": 1.0},
    "time_grid": {"t_end": 1.0, "n": 101, "spacing": "linear"},
    "certificate": {"n": 200, "t_min": 1e-4, "t_max": 3.0},
    "datum": {"kind": "control_multiple", "mu": 2.0, "relative": True},
    "classification": {"tol": 1e-3},
    "synthesis": {"lambda_policy": "certified", "n_samples_c1": 8, "n_samples_c": 16, "seed": 0,
                  "decay": 1.0, "max_doublings": 200, "lambda_override": None, "lambda_scale": 1.0,
                  "n_points": 400, "extra_time": 10.0},
    "oracle": {"dt": 1e-4, "t_end": 1.0, "scheme": "leapfrog"},
    "sweep": {"axis": None, "values": []},
    "output_dir": "npe_output",
}


# ---------------------------------------------------------------------------
# config handling


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and key not in ("datum", "sweep"):
            if not isinstance(val, dict):
                raise ConfigurationError(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None):
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be a JSON object")
    return _merge(DEFAULT_CONFIG, raw), raw


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def lattice_from(cfg):
    lat = cfg["lattice"]
    try:
        return LatticeSpec(int(lat["N"]), int(lat["K"]))
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"lattice needs integer N and K: {exc}") from None


def params_from(cfg, amplitudes=None):
    b = cfg["box"]
    box = SupportBox(tuple(b["lower"]), tuple(b["upper"]))
    amps = cfg["amplitudes"] if amplitudes is None else amplitudes
    if len(amps) != 3:
        raise ConfigurationError("amplitudes must have three entries")
    return ControlParams(box, cfg["p"], tuple(amps))


def quadrature_from(cfg):
    try:
        return QuadratureSpec(**cfg["quadrature"])
    except TypeError as exc:
        raise ConfigurationError(f"bad quadrature section: {exc}") from None


def time_grid_from(cfg):
    g = cfg["time_grid"]
    t_end, n = float(g["t_end"]), int(g["n"])
    if t_end <= 0 or n < 2:
        raise ConfigurationError("time grid needs t_end > 0 and n >= 2")
    if g.get("spacing", "linear") == "log":
        return np.concatenate([[0.0], np.geomspace(min(1e-4, t_end / 10), t_end, n - 1)])
    if g.get("spacing", "linear") != "linear":
        raise ConfigurationError("time_grid.spacing must be 'linear' or 'log'")
    return np.linspace(0.0, t_end, n)


def certificate_grid_from(cfg):
    c = cfg["certificate"]
    return default_certificate_grid(int(c["n"]), float(c["t_min"]), float(c["t_max"]))


class Context:
    """Resolved config plus lazily built shared objects."""

    def __init__(self, cfg, args):
        self.cfg = cfg
        self.args = args
        self.lattice = lattice_from(cfg)
        self.quadrature = quadrature_from(cfg)
        self.seed = args.seed if args.seed is not None else int(cfg["synthesis"]["seed"])
        self._control = None

    def control(self):
        """Certified control: configured amplitudes, searched if they fail."""
        if self._control is None:
            params = params_from(self.cfg)
            build = build_control_u(params, self.lattice)
            grid = certificate_grid_from(self.cfg)
            cert = certify_decay(build.u, grid, params.amplitudes, raise_on_failure=False)
            search = None
            if not cert.passed and self.cfg["search_amplitudes"]:
                search = search_amplitudes(params, grid)
                params = params_from(self.cfg, search.amplitudes)
                build = build_control_u(params, self.lattice)
                cert = certify_decay(build.u, grid, params.amplitudes, raise_on_failure=False)
            self._control = (params, build, cert, search)
        return self._control

    def datum(self):
        d = self.cfg["datum"]
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigurationError("datum must be an object with a 'kind'")
        kind = d["kind"]
        lat = self.lattice
        if kind == "zero":
            return spectral.SpectralField.zeros(lat), {"kind": "zero"}
        if kind == "single_mode":
            F = single_mode_field(lat, tuple(d.get("k", (0, 0, 1))), int(d.get("component", 0)),
                                  float(d.get("amplitude", 1.0)))
            return F, dict(d)
        if kind == "random_smooth":
            seed = int(d.get("seed", self.seed))
            F = random_smooth_field(lat, seed, float(d.get("decay", 1.0)))
            return F * float(d.get("norm", 1.0)), dict(d, seed=seed)
        if kind == "control_multiple":
            _, build, _, _ = self.control()
            u = build.u
            mu = float(d["mu"])
            info = dict(d)
            if d.get("relative", False):
                g_inf = float(compute_trace(u, self.quadrature).cumulative[-1])
                if g_inf <= 0:
                    raise InvariantError("control trace limit is not positive")
                info.update(g_inf=g_inf, threshold=1.0 / g_inf)
                mu = mu / g_inf
            info["mu_absolute"] = mu
            return u * mu, info
        if kind == "file":
            path = d.get("path")
            if not path or not os.path.exists(path):
                raise ConfigurationError(f"datum file {path!r} does not exist")
            F = load_field(path)
            if F.lattice != lat:
                F = spectral.resample(F, lat)
            return F, dict(d)
        raise ConfigurationError(f"unknown datum kind {kind!r}")


# ---------------------------------------------------------------------------
# output


class Output:
    def __init__(self, directory, timestamp):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.timestamp = timestamp
        self.files = {}

    def _atomic(self, name, data):
        path = self.dir / name
        fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.files[name] = hashlib.sha256(data).hexdigest()
        return path

    def csv(self, name, header, rows):
        buf = io.StringIO()
        buf.write(f"# generated {self.timestamp}\n")
        buf.write(",".join(header) + "\n")
        for row in rows:
            buf.write(",".join(_fmt(v) for v in row) + "\n")
        return self._atomic(name, buf.getvalue().encode())

    def json(self, name, doc):
        return self._atomic(name, (json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n").encode())

    def field(self, name, F):
        tmp_dir = tempfile.mkdtemp(dir=self.dir)
        try:
            p = os.path.join(tmp_dir, name)
            save_field(F, p)
            with open(p, "rb") as fh:
                data = fh.read()
        finally:
            for f in os.listdir(tmp_dir):
                os.unlink(os.path.join(tmp_dir, f))
            os.rmdir(tmp_dir)
        return self._atomic(name, data)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        f = float(x)
        return f if math.isfinite(f) else str(f)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, spectral.SpectralField):
        return {"lattice": [x.lattice.N, x.lattice.K], "norm0": norm0(x)}
    return x


def trajectory_rows(traj, oracle=None):
    if oracle is None:
        yield from traj.rows()
        return
    lookup = {round(float(t), 12): n for t, n in zip(oracle.times, oracle.norm0)}
    for row in traj.rows():
        o = lookup.get(round(row[0], 12), float("nan"))
        dev = abs(o - row[1]) / row[1] if row[1] and not math.isnan(o) else float("nan")
        yield row + [o, dev]


TRAJ_HEADER = ["t", "norm0", "denominator", "envelope", "status"]


# ---------------------------------------------------------------------------
# commands


def cmd_build_control(ctx, out, report):
    params = params_from(ctx.cfg)
    build = build_control_u(params, ctx.lattice)
    out.field("u.npef", build.u)
    report["control"] = build.diagnostics()
    report["control"]["psi_at_0"] = psi(build.u)
    if ctx.args.k_doubling:
        K2 = 2 * ctx.lattice.K
        lat2 = LatticeSpec(2 * ((3 * K2 + 2) // 2), K2)
        b2 = build_control_u(params, lat2)
        out.field(f"u_K{K2}.npef", b2.u)
        rows = []
        for lat, b in ((ctx.lattice, build), (lat2, b2)):
            rows.append([lat.K, lat.N, norm0(b.u), b.divergence_pre_projection, b.truncation_residual, psi(b.u)])
        out.csv("convergence.csv", ["K", "N", "norm0", "divergence_pre_projection", "truncation_residual",
                                    "psi_at_0"], rows)
        report["convergence"] = [dict(zip(["K", "N", "norm0", "divergence", "residual", "psi_at_0"], r))
                                 for r in rows]
    return EXIT_OK


def cmd_certify(ctx, out, report):
    grid = certificate_grid_from(ctx.cfg)
    params, build, cert, search = ctx.control()
    if ctx.args.negate:
        cert = certify_decay(-build.u, grid, params.amplitudes, sign=-1, raise_on_failure=False)
    out.csv("certificate.csv", ["t", "psi", "ratio", "threshold", "margin"],
            ([t, p, r, th, p - th] for t, p, r, th in zip(cert.times, cert.psi_values, cert.ratio, cert.threshold)))
    report["certificate"] = cert.summary()
    report["amplitude_search"] = search.summary() if search else None
    if not cert.passed:
        raise CertificationFailure(f"certificate fails (min ratio {cert.min_ratio:.3e})", cert.argmin_time)
    return EXIT_OK


def cmd_simulate(ctx, out, report):
    y0, info = ctx.datum()
    report["datum"] = info
    grid = time_grid_from(ctx.cfg)
    traj = simulate(y0, grid, ctx.quadrature)
    header = list(TRAJ_HEADER)
    oracle = None
    if ctx.args.oracle:
        o = ctx.cfg["oracle"]
        t_end = min(float(o["t_end"]), float(grid[-1]))
        if traj.blowup_time is not None:
            t_end = min(t_end, 0.9 * traj.blowup_time)
        oracle = timestep_oracle(y0, float(o["dt"]), t_end, scheme=o.get("scheme", "leapfrog"),
                                 sample_times=traj.times)
        header += ["oracle_norm0", "oracle_deviation"]
        report["oracle"] = {"dt": float(o["dt"]), "t_end": t_end, "status": oracle.status,
                            "max_deviation": oracle_deviation(traj, oracle)}
    out.csv("trajectory.csv", header, trajectory_rows(traj, oracle))
    summ = traj.summary()
    report["trajectory"] = summ
    out.json("summary.json", summ)
    return EXIT_BLOWUP if traj.status == STATUS_BLOWUP else EXIT_OK


def cmd_classify(ctx, out, report):
    y0, info = ctx.datum()
    report["datum"] = info
    c = classify(y0, ctx.quadrature, float(ctx.cfg["classification"]["tol"]))
    report["classification"] = c.as_dict()
    out.json("classification.json", c.as_dict())
    return EXIT_OK


def _plan_and_eval(ctx, y0, lam_scale=None, lam_override=None):
    s = ctx.cfg["synthesis"]
    params, build, cert, search = ctx.control()
    if not cert.passed:
        raise CertificationFailure("no certified control available", cert.argmin_time)
    opts = SynthesisOptions(
        lambda_policy=s["lambda_policy"], max_doublings=int(s["max_doublings"]),
        n_samples_c1=int(s["n_samples_c1"]), n_samples_c=int(s["n_samples_c"]), seed=ctx.seed,
        decay=float(s["decay"]), lambda_override=lam_override, screen=False)
    res = synthesize(y0, params, ctx.lattice, ctx.quadrature, opts, certificate_grid_from(ctx.cfg))
    scale = 1.0 if lam_scale is None else lam_scale
    v = res.v if scale == 1.0 else y0 - res.u * (res.plan.lam * scale)
    ev = evaluate_plan(res.plan, y0, v, ctx.quadrature, int(s["n_points"]), float(s["extra_time"]))
    return res, v, ev, scale


def cmd_stabilize(ctx, out, report):
    y0, info = ctx.datum()
    report["datum"] = info
    s = ctx.cfg["synthesis"]
    override = ctx.args.lambda_override if ctx.args.lambda_override is not None else s["lambda_override"]
    scale = ctx.args.lambda_scale if ctx.args.lambda_scale is not None else float(s["lambda_scale"])
    res, v, ev, scale = _plan_and_eval(ctx, y0, scale, override)
    plan = res.plan.as_dict()
    plan["lambda_applied"] = res.plan.lam * scale
    plan["datum"] = info
    out.json("plan.json", plan)
    if ev.uncontrolled is not None:
        out.csv("uncontrolled.csv", TRAJ_HEADER, ev.uncontrolled.rows())
    out.csv("controlled.csv", TRAJ_HEADER, ev.controlled.rows())
    report["plan"] = {k: plan[k] for k in ("lam", "lambda_applied", "beta_hat", "c_hat", "c1_hat", "T", "r0",
                                           "lambda01", "lambda02", "lambda_policy", "amplitudes")}
    report["evaluation"] = ev.summary()
    report["uncontrolled"] = ev.uncontrolled.summary() if ev.uncontrolled is not None else None
    report["controlled"] = ev.controlled.summary()
    return EXIT_OK if ev.ok else EXIT_ENVELOPE


def cmd_sweep(ctx, out, report):
    sw = ctx.cfg["sweep"]
    axis, values = sw.get("axis"), sw.get("values") or []
    if axis not in ("lambda", "mu", "K"):
        raise ConfigurationError("sweep.axis must be one of lambda, mu, K")
    if len(values) == 0:
        raise ConfigurationError("sweep axis has no values")
    rows = []
    if axis == "lambda":
        y0, info = ctx.datum()
        params, build, cert, _ = ctx.control()
        res, _, _, _ = _plan_and_eval(ctx, y0)
        grid = np.concatenate([[0.0], np.geomspace(1e-4, max(res.plan.T, 1e-3), 200)])
        for val in values:
            lam = res.plan.lam * float(val)
            chk = verify_psi_bound(y0, lam, res.u, grid, res.plan.beta_hat)
            ev = evaluate_plan(res.plan, y0, y0 - res.u * lam, ctx.quadrature,
                               int(ctx.cfg["synthesis"]["n_points"]), float(ctx.cfg["synthesis"]["extra_time"]))
            rows += [("lambda", val, "lambda", lam), ("lambda", val, "psi_bound_margin", chk.worst_margin),
                     ("lambda", val, "psi_bound_passed", chk.passed),
                     ("lambda", val, "envelope_margin", ev.envelope_margin),
                     ("lambda", val, "envelope_ok", ev.envelope_ok)]
    elif axis == "mu":
        _, build, _, _ = ctx.control()
        u = build.u
        trace = compute_trace(u, ctx.quadrature)
        g_inf = float(trace.cumulative[-1])
        tol = float(ctx.cfg["classification"]["tol"])
        for val in values:
            y0 = u * (float(val) / g_inf)
            c = classify(y0, ctx.quadrature, tol)
            traj = simulate(y0, np.linspace(0.0, ctx.quadrature.horizon, 301), ctx.quadrature)
            rows += [("mu", val, "sup_g", c.sup_g), ("mu", val, "verdict", c.verdict),
                     ("mu", val, "blowup", traj.status == STATUS_BLOWUP),
                     ("mu", val, "blowup_time", traj.blowup_time if traj.blowup_time is not None else float("nan"))]
    else:
        params, _, _, _ = ctx.control()
        grid = certificate_grid_from(ctx.cfg)
        for val in values:
            K = int(val)
            lat = LatticeSpec(2 * ((3 * K + 2) // 2), K)
            b = build_control_u(params, lat)
            c = certify_decay(b.u, grid, params.amplitudes, raise_on_failure=False)
            rows += [("K", val, "beta_hat", c.beta_hat), ("K", val, "min_ratio", c.min_ratio),
                     ("K", val, "argmin_time", c.argmin_time), ("K", val, "passed", c.passed)]
    out.csv("sweep.csv", ["axis", "value", "metric", "metric_value"], rows)
    report["sweep"] = {"axis": axis, "values": list(values), "n_rows": len(rows)}
    return EXIT_OK


COMMANDS = {
    "build-control": cmd_build_control,
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "classify": cmd_classify,
    "stabilize": cmd_stabilize,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="npe-control", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON experiment config")
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    common.add_argument("--seed", type=int, default=None, help="seed for constant estimation ensembles")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("build-control", parents=[common], help="sample, project and normalize the control")
    p.add_argument("--k-doubling", action="store_true", help="also build at 2K and write a convergence table")
    p = sub.add_parser("certify", parents=[common], help="decay certificate of the control")
    p.add_argument("--negate", action="store_true", help="certify the sign-flipped control")
    p = sub.add_parser("simulate", parents=[common], help="closed-form trajectory of the datum")
    p.add_argument("--oracle", action="store_true", help="add the time-stepping oracle columns")
    sub.add_parser("classify", parents=[common], help="stability / explosion / growing verdict")
    p = sub.add_parser("stabilize", parents=[common], help="synthesize and evaluate the starting control")
    p.add_argument("--lambda-override", type=float, default=None, help="force this lambda")
    p.add_argument("--lambda-scale", type=float, default=None, help="apply lambda times this factor")
    sub.add_parser("sweep", parents=[common], help="parameter sweep over lambda, mu or K")
    return parser


def _exit_code(exc):
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, CertificationFailure):
        return EXIT_CERTIFICATION
    if isinstance(exc, BlowUpError):
        return EXIT_BLOWUP
    if isinstance(exc, QuadratureFailure):
        return EXIT_QUADRATURE
    if isinstance(exc, (InvariantError, DomainError)):
        return EXIT_INVARIANT
    raise exc


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.time()
    timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    out_dir = args.out or os.environ.get(OUTPUT_ENV)
    report = {"command": args.command, "started": timestamp}
    out = None
    try:
        cfg, _ = load_config(args.config)
        out_dir = out_dir or cfg["output_dir"]
        spectral.set_fft_workers(max(1, args.threads))
        report["config_hash"] = config_hash(cfg)
        report["config"] = cfg
        report["seed"] = args.seed
        out = Output(out_dir, timestamp)
        ctx = Context(cfg, args)
        code = COMMANDS[args.command](ctx, out, report)
    except Exception as exc:  # mapped to the exit-code contract below
        code = _exit_code(exc)
        report["error"] = {"type": type(exc).__name__, "message": str(exc)}
        t = getattr(exc, "t", None)
        if isinstance(exc, BlowUpError):
            report["error"]["blowup_time"] = exc.time
        elif t is not None:
            report["error"]["t"] = t
        log.error("%s: %s", type(exc).__name__, exc)
        if out is None:
            out = Output(out_dir or DEFAULT_CONFIG["output_dir"], timestamp)
    report["wall_clock_s"] = time.time() - start
    report["exit_status"] = code
    report["files"] = [{"path": name, "sha256": digest} for name, digest in sorted(out.files.items())]
    out.json("report.json", report)
    print(json.dumps({"command": args.command, "exit_status": code, "output_dir": str(out.dir)}))
    return code


if __name__ == "__main__":
    sys.exit(main())
