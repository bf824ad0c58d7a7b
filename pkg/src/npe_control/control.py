"""Starting-control construction, decay certificate and stabilization plan."""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import bisect

from .dynamics import classify, simulate, small_ball_radius
from .errors import CertificationFailure, ConfigurationError, DomainError, InvariantError
from .functionals import (
    QuadratureSpec,
    estimate_c1,
    estimate_psi_constant,
    psi_along_heat,
)
from .spectral import (
    LatticeSpec,
    PhysicalField,
    SpectralField,
    forward_transform,
    geometry,
    grid_coordinates,
    heat_norms,
    inverse_transform,
    leray_project,
    norm0,
    resample,
    sobolev_norm,
    sup_norm,
    translate,
)

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
DEFAULT_AMPLITUDES = (1.0, 1.0, 1.0)
PSI_FLOOR = 1e-10
ENVELOPE_RTOL = 1e-12


# ---------------------------------------------------------------------------
# support box and scale


@dataclass(frozen=True)
class SupportBox:
    """Axis-aligned box ``[a_i, b_i]`` on the torus, ``0 <= a_i < 2pi``.

    Half-widths ``rho_i = (b_i - a_i) / 2`` lie in ``(0, pi]``; the full
    period ``rho_i = pi`` is allowed so that the scale ``p = 1`` is reachable.
    """

    lower: tuple = (0.0, 0.0, 0.0)
    upper: tuple = (TWO_PI, TWO_PI, TWO_PI)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != 3 or len(hi) != 3:
            raise ConfigurationError("support box needs three lower and three upper bounds")
        for a, b in zip(lo, hi):
            if not 0.0 <= a < TWO_PI:
                raise ConfigurationError(f"box lower bound {a} outside [0, 2pi)")
            if not a < b <= a + TWO_PI * (1 + 1e-15):
                raise ConfigurationError(f"box interval [{a}, {b}] must satisfy a < b <= a + 2pi")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def half_widths(self):
        return tuple(0.5 * (b - a) for a, b in zip(self.lower, self.upper))

    @property
    def center(self):
        return tuple(0.5 * (a + b) for a, b in zip(self.lower, self.upper))

    def contains(self, x):
        """Mask of points ``x`` (shape ``(3, ...)``) inside the box, modulo 2pi."""
        inside = np.ones(np.shape(x)[1:], dtype=bool)
        for i, (a, b) in enumerate(zip(self.lower, self.upper)):
            d = np.mod(x[i] - a, TWO_PI)
            inside &= d <= (b - a) + 1e-12
        return inside


def choose_p(box):
    """Smallest positive integer with ``pi / p <= min rho_i``."""
    rho = min(box.half_widths)
    return max(1, math.ceil(np.pi / rho - 1e-12))


@dataclass(frozen=True)
class ControlParams:
    box: SupportBox = field(default_factory=SupportBox)
    p: int | None = None
    amplitudes: tuple = DEFAULT_AMPLITUDES

    def __post_init__(self):
        p = choose_p(self.box) if self.p is None else int(self.p)
        if p < 1:
            raise ConfigurationError("scale p must be a positive integer")
        if np.pi / p > min(self.box.half_widths) * (1 + 1e-12):
            raise ConfigurationError(f"scale p={p} too small for box half-widths {self.box.half_widths}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))


# ---------------------------------------------------------------------------
# the potential w and the control field


def _s(x, order):
    if order == 0:
        return np.sin(x) + 0.5 * np.sin(2 * x)
    if order == 1:
        return np.cos(x) + np.cos(2 * x)
    if order == 2:
        return -np.sin(x) - 2.0 * np.sin(2 * x)
    raise ValueError(order)


def _c(x, order):
    if order == 0:
        return 1.0 + np.cos(x)
    if order == 1:
        return -np.sin(x)
    if order == 2:
        return -np.cos(x)
    raise ValueError(order)


def w_derivative(x, amplitudes, orders=(0, 0, 0)):
    """Mixed partial derivative of ``w`` with ``orders`` along the three axes.

    ``x`` has shape ``(3, ...)``. ``w`` is the sum over k of
    ``a_k (1 + cos x_k)`` times ``s(x_i) s(x_j)`` for the two other axes, with
    ``s(x) = sin x + sin(2x) / 2``.
    """
    total = 0.0
    for k, a in enumerate(amplitudes):
        if a == 0.0:
            continue
        term = a
        for i in range(3):
            term = term * (_c(x[i], orders[i]) if i == k else _s(x[i], orders[i]))
        total = total + term
    return total


def build_w(x, amplitudes=DEFAULT_AMPLITUDES):
    x = np.asarray(x, dtype=float)
    return w_derivative(x, amplitudes)


def u_tilde_samples(x, params):
    """``p^2 chi(x) (-w_22 - w_33, w_12, w_13)(p x)`` for centered ``x`` of shape ``(3, ...)``."""
    p, a = params.p, params.amplitudes
    xs = p * np.asarray(x, dtype=float)
    chi = np.all(np.abs(x) <= np.pi / p + 1e-12, axis=0)
    comp = [
        -w_derivative(xs, a, (0, 2, 0)) - w_derivative(xs, a, (0, 0, 2)),
        w_derivative(xs, a, (1, 1, 0)),
        w_derivative(xs, a, (1, 0, 1)),
    ]
    return np.stack([p**2 * chi * np.broadcast_to(c, chi.shape) for c in comp])


@dataclass(frozen=True)
class ControlBuild:
    """Normalized control plus diagnostics of its construction."""

    u: SpectralField
    u_tilde: SpectralField
    params: ControlParams
    divergence_pre_projection: float
    truncation_residual: float
    support_leak: float

    @property
    def u_tilde_norm(self):
        return norm0(self.u_tilde)

    def diagnostics(self):
        return {
            "norm0": norm0(self.u),
            "u_tilde_norm0": self.u_tilde_norm,
            "divergence_pre_projection": self.divergence_pre_projection,
            "truncation_residual": self.truncation_residual,
            "support_leak": self.support_leak,
            "p": self.params.p,
            "amplitudes": list(self.params.amplitudes),
            "box": {"lower": list(self.params.box.lower), "upper": list(self.params.box.upper)},
        }


def _centered(x):
    return np.mod(x + np.pi, TWO_PI) - np.pi


def build_control_u(params, lattice, translate_to_box=True):
    """Sample the control on the lattice grid, project, normalize and move it into the box."""
    p = params.p
    if lattice.K < 2 * p:
        raise ConfigurationError(f"cutoff K={lattice.K} does not resolve scale p={p} (need K >= 2p)")
    x = np.stack(grid_coordinates(lattice))
    xc = _centered(x)
    samples = u_tilde_samples(xc, params)
    if not np.any(samples):
        raise InvariantError("control vanishes identically (degenerate amplitudes)")
    raw = forward_transform(PhysicalField(lattice, samples))
    div = _relative_divergence(raw)
    back = inverse_transform(raw).samples
    grid_norm = math.sqrt(float((samples**2).sum()))
    resid = math.sqrt(float(((samples - back) ** 2).sum())) / grid_norm
    projected = leray_project(raw)
    n = norm0(projected)
    if n < 1e-14 * max(1.0, grid_norm / lattice.N**1.5):
        raise InvariantError("control has zero norm after projection (degenerate amplitudes)")
    u = projected / n
    # support check before translation: samples outside the centered cube
    outside = ~np.all(np.abs(xc) <= np.pi / p + 1e-12, axis=0)
    leak = float(np.abs(samples[:, outside]).max() / np.abs(samples).max()) if outside.any() else 0.0
    if translate_to_box:
        u = translate_support(u, params.box)
        projected = translate_support(projected, params.box)
    return ControlBuild(u, projected, params, div, resid, leak)


def _relative_divergence(F):
    k = geometry(F.lattice).k
    div = (k * F.coeffs).sum(axis=0)
    grad = np.sqrt((k**2).sum(axis=0)) * np.sqrt((np.abs(F.coeffs) ** 2).sum(axis=0))
    den = math.sqrt(float((grad**2).sum()))
    return math.sqrt(float((np.abs(div) ** 2).sum())) / den if den > 0 else 0.0


def translate_support(F, box):
    """Move a field supported around the origin to the center of ``box``."""
    return translate(F, box.center)


# ---------------------------------------------------------------------------
# decay certificate


def default_certificate_grid(n=200, t_min=1e-4, t_max=3.0):
    return np.concatenate([[0.0], np.geomspace(t_min, t_max, n)])


@dataclass
class DecayCertificate:
    """``r(t) = Psi(S(t; u)) e^{18t}`` on a time grid and ``beta = min r / 3``."""

    times: np.ndarray
    psi_values: np.ndarray
    ratio: np.ndarray
    floor: np.ndarray
    amplitudes: tuple
    sign: int = 1

    @property
    def min_ratio(self):
        return float(self.ratio.min())

    @property
    def argmin_time(self):
        return float(self.times[int(np.argmin(self.ratio))])

    @property
    def passed(self):
        return bool(np.all(self.psi_values > self.floor))

    @property
    def beta_hat(self):
        return self.min_ratio / 3.0

    @property
    def threshold(self):
        return 3.0 * self.beta_hat * np.exp(-18.0 * self.times)

    def summary(self):
        return {"beta_hat": self.beta_hat, "min_ratio": self.min_ratio, "argmin_time": self.argmin_time,
                "passed": self.passed, "amplitudes": list(self.amplitudes), "sign": self.sign,
                "n_times": int(len(self.times)), "t_max": float(self.times[-1])}

    def to_csv(self, path, comment=None):
        thr = self.threshold
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["t", "psi", "ratio", "threshold", "margin"])
            for t, ps, r, th in zip(self.times, self.psi_values, self.ratio, thr):
                w.writerow([f"{t:.17g}", f"{ps:.17g}", f"{r:.17g}", f"{th:.17g}", f"{ps - th:.17g}"])


def certificate_values(u, t_grid=None):
    """Psi along the heat flow of ``u`` with the roundoff floor used by the certificate."""
    t = default_certificate_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    psis, norms = psi_along_heat(u, t)
    h1 = heat_norms(u, t, s=1.0)
    floor = PSI_FLOOR * norms**2 * h1
    return t, psis, floor


def certify_decay(u, t_grid=None, amplitudes=(), sign=1, raise_on_failure=True):
    """Certify ``Psi(S(t; u)) e^{18t} > 0`` on ``t_grid``.

    Values within ``PSI_FLOOR * ||S||_0^2 ||S||_1`` of zero count as zero:
    fields whose Psi vanishes by symmetry would otherwise pass or fail on
    rounding noise.
    """
    t, psis, floor = certificate_values(u, t_grid)
    cert = DecayCertificate(t, psis, psis * np.exp(18.0 * t), floor, tuple(amplitudes), sign)
    if raise_on_failure and not cert.passed:
        bad = int(np.argmin(psis - floor))
        raise CertificationFailure(
            f"decay certificate fails: Psi(S(t; u)) = {psis[bad]:.3e} not above floor {floor[bad]:.3e}",
            t=float(t[bad]),
        )
    return cert


def _direction_key(a):
    a = np.asarray(a, dtype=float)
    g = np.abs(a[a != 0]).min()
    return tuple(np.round(a / g, 9))


def amplitude_candidates(default=DEFAULT_AMPLITUDES, grid=range(-2, 3)):
    """Default first, then its sign patterns, then a coarse grid; positive multiples deduplicated."""
    seen = set()
    out = []

    def push(a, stage):
        if not np.any(a):
            return
        key = _direction_key(a)
        if key not in seen:
            seen.add(key)
            out.append((tuple(float(v) for v in a), stage))

    push(default, "default")
    for signs in itertools.product((1, -1), repeat=3):
        push(tuple(s * v for s, v in zip(signs, default)), "sign-pattern")
    for a in itertools.product(grid, repeat=3):
        push(a, "grid")
    return out


@dataclass
class AmplitudeSearch:
    amplitudes: tuple
    stage: str
    beta_hat: float
    tried: list

    def summary(self):
        return {"amplitudes": list(self.amplitudes), "stage": self.stage, "beta_hat_screen": self.beta_hat,
                "n_tried": len(self.tried),
                "n_passing": sum(1 for r in self.tried if r[2])}


def search_amplitudes(params, t_grid=None, screen_lattice=None, default=None):
    """Find amplitudes whose control passes the decay certificate.

    The default is kept if it passes; otherwise sign patterns of the default
    are tried, then a coarse integer grid. Within the first stage that has a
    passing candidate the largest screened ``beta`` wins (ties: first in
    order). Screening runs on a small lattice resolving the scale ``p``.
    """
    default = params.amplitudes if default is None else default
    K = 4 * params.p
    lat = screen_lattice or LatticeSpec(2 * ((3 * K + 2) // 2), K)
    tried = []
    best_by_stage = {}
    order = ["default", "sign-pattern", "grid"]
    for a, stage in amplitude_candidates(default):
        if stage != "default" and best_by_stage.get("default") is not None:
            break
        if stage == "grid" and best_by_stage.get("sign-pattern") is not None:
            break
        cand = ControlParams(params.box, params.p, a)
        try:
            u = build_control_u(cand, lat, translate_to_box=False).u
        except InvariantError:
            tried.append((a, stage, False, float("nan")))
            continue
        cert = certify_decay(u, t_grid, a, raise_on_failure=False)
        tried.append((a, stage, cert.passed, cert.beta_hat))
        if cert.passed:
            cur = best_by_stage.get(stage)
            if cur is None or cert.beta_hat > cur[1] * (1 + 1e-9):
                best_by_stage[stage] = (a, cert.beta_hat)
    for stage in order:
        if stage in best_by_stage:
            a, beta = best_by_stage[stage]
            return AmplitudeSearch(a, stage, beta, tried)
    raise CertificationFailure("no amplitude candidate passes the decay certificate")


# ---------------------------------------------------------------------------
# constants and thresholds


def choose_t0(u_inf):
    if u_inf <= 0:
        raise DomainError("choose_t0: sup norm must be positive")
    return 1.0 / (8.0 * math.e * u_inf**4)


def a_constant(t0):
    if t0 <= 0:
        raise DomainError("a_constant: t0 must be positive")
    return math.exp(t0 - 0.25) / (math.sqrt(2.0) * t0**0.25)


def _positive(*vals):
    if any(v <= 0 for v in vals):
        raise DomainError("threshold inputs must be positive")


def lambda_threshold_1(y0_half, T, beta, c, A):
    _positive(y0_half, beta, c, A)
    if T < 0:
        raise DomainError("horizon T must be non-negative")
    return c * math.exp(15.0 * T) / beta * (A**2 * y0_half + A * y0_half**2 + y0_half**3)


def lambda_threshold_2(y0_half, t0, beta, c, A):
    _positive(y0_half, beta, c, A)
    if t0 < 0:
        raise DomainError("t0 must be non-negative")
    return c / beta * (A**2 * y0_half * math.exp(16 * t0) + A * y0_half**2 * math.exp(17 * t0)
                       + y0_half**3 * math.exp(18 * t0))


def stabilization_horizon(beta, c1):
    """Root ``x0`` in (0, 1) of ``beta x^16 + 32 c1 x - beta`` and ``T = ln(1 / x0)``."""
    _positive(beta, c1)

    def F(x):
        return beta * x**16 + 32.0 * c1 * x - beta

    x0 = bisect(F, 0.0, 1.0, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=2000)
    resid = abs(F(x0))
    if resid > 1e-12 * (beta + 32.0 * c1):
        raise InvariantError(f"horizon root residual {resid:.3e} above contract")
    return -math.log(x0), x0


def envelope(t, v_norm, beta):
    """``||v|| e^{-t} / (1 + beta/16 ||v|| (1 - e^{-16 t}))``."""
    t = np.asarray(t, dtype=float)
    return v_norm * np.exp(-t) / (1.0 + beta / 16.0 * v_norm * (1.0 - np.exp(-16.0 * t)))


# ---------------------------------------------------------------------------
# psi bound for the controlled datum


@dataclass
class PsiBoundCheck:
    lam: float
    passed: bool
    precondition: bool
    worst_margin: float
    worst_time: float
    times: np.ndarray = field(repr=False)
    minus_psi: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)

    def summary(self):
        return {"lambda": self.lam, "passed": self.passed, "precondition": self.precondition,
                "worst_margin": self.worst_margin, "worst_time": self.worst_time}


def verify_psi_bound(y0, lam, u, t_grid, beta):
    """Check ``-Psi(S(t; y0 - lam u)) > 2 beta lam^3 e^{-18t}`` and the normalized
    form ``> beta e^{-15t} ||S||^3`` on ``t_grid``; never raises."""
    t = np.asarray(t_grid, dtype=float)
    pre = lam > 7.0 * norm0(y0)
    v = y0 - u * lam
    psis, norms = psi_along_heat(v, t)
    mpsi = -psis
    thr1 = 2.0 * beta * lam**3 * np.exp(-18.0 * t)
    thr2 = beta * np.exp(-15.0 * t) * norms**3
    with np.errstate(divide="ignore", invalid="ignore"):
        m1 = np.where(thr1 > 0, (mpsi - thr1) / thr1, -np.inf)
        m2 = np.where(thr2 > 0, (mpsi - thr2) / thr2, -np.inf)
    margin = np.minimum(m1, m2)
    j = int(np.argmin(margin))
    passed = bool(pre and np.all(margin > 0))
    return PsiBoundCheck(float(lam), passed, bool(pre), float(margin[j]), float(t[j]), t, mpsi, norms)


# ---------------------------------------------------------------------------
# plan


@dataclass
class StabilizationPlan:
    """Constants and the chosen control amplitude for one initial datum."""

    lam: float
    beta_hat: float
    c_hat: float
    c1_hat: float
    t0: float
    A: float
    lambda01: float
    lambda02: float
    lambda_analytic: float
    T: float
    x0: float
    r0: float
    u_inf: float
    y0_norm0: float
    y0_half: float
    amplitudes: tuple
    lambda_policy: str
    psi_bound: dict
    provenance: dict = field(default_factory=dict)
    trivial: bool = False

    def as_dict(self):
        d = asdict(self)
        d["amplitudes"] = list(self.amplitudes)
        d["exceeds_analytic_thresholds"] = bool(self.lam > max(self.lambda01, self.lambda02))
        d["lambda_over_7_norm"] = self.lam / (7.0 * self.y0_norm0) if self.y0_norm0 > 0 else None
        return d


@dataclass
class SynthesisResult:
    plan: StabilizationPlan
    v: SpectralField
    u: SpectralField
    certificate: DecayCertificate | None
    search: AmplitudeSearch | None
    build: ControlBuild | None


@dataclass(frozen=True)
class SynthesisOptions:
    lambda_policy: str = "certified"
    max_doublings: int = 200
    n_samples_c1: int = 8
    n_samples_c: int = 16
    seed: int = 0
    decay: float = 1.0
    lambda_override: float | None = None
    verify_points: int = 200
    screen: bool = True


def _verify_grid(T, n):
    return np.concatenate([[0.0], np.geomspace(1e-4, max(T, 1e-3), n)])


def synthesize(y0, params, lattice, q=None, options=None, t_grid=None):
    """Build, certify and size the starting control for ``y0``; returns the plan and ``v = y0 - lam u``."""
    q = q or QuadratureSpec()
    opt = options or SynthesisOptions()
    if opt.lambda_policy not in ("certified", "analytic"):
        raise ConfigurationError(f"unknown lambda policy {opt.lambda_policy!r}")
    if y0.lattice != lattice:
        y0 = resample(y0, lattice)
    y0_norm = norm0(y0)
    verdict = classify(y0, q).verdict if y0_norm > 0 else "Stability"

    search = None
    if opt.screen:
        search = search_amplitudes(params, t_grid)
        params = ControlParams(params.box, params.p, search.amplitudes)
    build = build_control_u(params, lattice)
    u = build.u
    cert = certify_decay(u, t_grid, params.amplitudes)
    beta = cert.beta_hat

    rng_seed = opt.seed
    c_est = estimate_psi_constant(lattice, opt.n_samples_c, rng_seed, opt.decay, extra=(u,))
    extra = (u,) + ((y0 / y0_norm,) if y0_norm > 0 else ())
    c1_est = estimate_c1(lattice, q, opt.n_samples_c1, rng_seed, opt.decay, extra=extra)
    c_hat, c1_hat = c_est.value, c1_est.value
    r0 = small_ball_radius(c1_hat)
    u_inf = sup_norm(u, refine=2)
    t0 = choose_t0(u_inf)
    A = a_constant(t0)
    T, x0 = stabilization_horizon(beta, c1_hat)
    y_half = sobolev_norm(y0, 0.5)
    if y_half > 0:
        l01 = lambda_threshold_1(y_half, T, beta, c_hat, A)
        l02 = lambda_threshold_2(y_half, t0, beta, c_hat, A)
    else:
        l01 = l02 = 0.0
    l_an = 1.1 * max(l01, l02, 7.0 * y0_norm)

    provenance = {
        "beta_hat": {"source": "certificate", "grid": "t=0 plus geometric grid", "n": int(len(cert.times)),
                     "t_max": float(cert.times[-1])},
        "c_hat": {"source": "estimated", **c_est.as_dict()},
        "c1_hat": {"source": "estimated", **c1_est.as_dict()},
        "t0": {"source": "formula", "rule": "1/(8 e u_inf^4)"},
        "A": {"source": "formula"},
        "lambda01": {"source": "formula"},
        "lambda02": {"source": "formula"},
        "T": {"source": "formula", "rule": "root of beta x^16 + 32 c1 x - beta"},
        "r0": {"source": "formula", "rule": "1/(2 c1)"},
        "u_inf": {"source": "estimated", "refine": 2},
        "classification_of_y0": verdict,
        "amplitude_search": search.summary() if search else None,
        "control": build.diagnostics(),
    }

    vgrid = _verify_grid(T, opt.verify_points)
    trivial = verdict == "Stability" and opt.lambda_override is None
    if trivial:
        lam = 0.0
        check = PsiBoundCheck(0.0, True, True, float("inf"), 0.0, vgrid, np.zeros(1), np.zeros(1))
        policy = "none (datum already stable)"
    elif opt.lambda_override is not None:
        lam = float(opt.lambda_override)
        check = verify_psi_bound(y0, lam, u, vgrid, beta)
        policy = "override"
    else:
        lam = l_an if opt.lambda_policy == "analytic" else 1.1 * 7.0 * y0_norm
        if lam == 0.0:
            lam = 1.0
        for _ in range(opt.max_doublings + 1):
            check = verify_psi_bound(y0, lam, u, vgrid, beta)
            if check.passed:
                break
            lam *= 2.0
        else:
            raise CertificationFailure(
                f"lambda escalation cap reached at lambda={lam:.3e}; worst margin {check.worst_margin:.3e} "
                f"at t={check.worst_time:.3e}", t=check.worst_time)
        policy = opt.lambda_policy
    plan = StabilizationPlan(
        lam=lam, beta_hat=beta, c_hat=c_hat, c1_hat=c1_hat, t0=t0, A=A, lambda01=l01, lambda02=l02,
        lambda_analytic=l_an, T=T, x0=x0, r0=r0, u_inf=u_inf, y0_norm0=y0_norm, y0_half=y_half,
        amplitudes=tuple(params.amplitudes), lambda_policy=policy, psi_bound=check.summary(),
        provenance=provenance, trivial=trivial,
    )
    v = y0 - u * lam
    return SynthesisResult(plan, v, u, cert, search, build)


@dataclass
class PlanEvaluation:
    uncontrolled: object
    controlled: object
    envelope_ok: bool
    envelope_margin: float
    reaches_ball: bool
    norm_at_T: float
    alpha_tail: float

    @property
    def ok(self):
        return self.envelope_ok and self.reaches_ball

    def summary(self):
        return {"envelope_ok": self.envelope_ok, "envelope_margin": self.envelope_margin,
                "reaches_ball": self.reaches_ball, "norm_at_T": self.norm_at_T,
                "alpha_tail": self.alpha_tail, "ok": self.ok}


def evaluate_plan(plan, y0, v, q=None, n_points=400, extra_time=10.0):
    """Simulate ``y0`` and ``v``; check the decay envelope on [0, T], the ball at T and
    the realized exponential rate on [T, T + extra_time]."""
    T = plan.T
    grid = np.unique(np.concatenate([np.linspace(0.0, T, n_points), np.geomspace(1e-5, T, n_points // 2),
                                     np.linspace(T, T + extra_time, n_points)]))
    grid = np.concatenate([[0.0], grid[grid > 0]])
    unc = simulate(y0, grid, q) if norm0(y0) > 0 else None
    ctrl = simulate(v, grid, q)
    vn = norm0(v)
    env = envelope(ctrl.times, vn, plan.beta_hat)
    ctrl.envelope = env
    on = ctrl.times <= T * (1 + 1e-12)
    reached = ctrl.status != "BlowUp" or (ctrl.blowup_time is not None and ctrl.blowup_time > T)
    if np.any(on):
        margin = float(np.min((env[on] - ctrl.norm0[on]) / env[on]))
    else:
        margin = -np.inf
    env_ok = bool(reached and margin >= -ENVELOPE_RTOL and ctrl.times[on][-1] >= T * (1 - 1e-12))
    if ctrl.status == "BlowUp":
        env_ok = False
    at_T = float(np.interp(T, ctrl.times, ctrl.norm0)) if ctrl.times[-1] >= T else float("inf")
    tail = ctrl.alpha_on(T, T + extra_time, reference=vn) if ctrl.status != "BlowUp" else float("inf")
    return PlanEvaluation(unc, ctrl, env_ok, margin, bool(at_T <= plan.r0), at_T, tail)
