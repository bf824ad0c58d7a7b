"""Closed-form NPE evolution, blow-up detection, a time-stepping oracle and
phase-space classification."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import BlowUpError, ConfigurationError, DomainError
from .functionals import (
    QuadratureSpec,
    _psi_batch,
    compute_trace,
    trace_maximum,
)
from .spectral import (
    VOLUME,
    SpectralField,
    geometry,
    heat_norms,
    heat_propagate,
    norm0,
)

EPS_DEN = 1e-8
BISECTION_RTOL = 1e-9

STATUS_COMPLETED = "Completed"
STATUS_BLOWUP = "BlowUp"
STATUS_QUADRATURE = "QuadratureFailure"
STATUS_TRUNCATED = "Truncated"


@dataclass
class Trajectory:
    """Sampled norms of one NPE solution.

    ``status`` is one of Completed, BlowUp, QuadratureFailure, Truncated
    (oracle step rejection). Samples at or after a blow-up are dropped.
    """

    times: np.ndarray
    norm0: np.ndarray
    denominator: np.ndarray
    status: str = STATUS_COMPLETED
    blowup_time: float | None = None
    bracket: tuple | None = None
    initial_norm: float = 0.0
    envelope: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def alpha(self):
        """Realized ``sup_t ||y(t)|| e^t / ||y(0)||`` over the samples."""
        if self.initial_norm == 0.0 or len(self.times) == 0:
            return 1.0
        return float(np.max(self.norm0 * np.exp(self.times)) / self.initial_norm)

    def alpha_on(self, t_lo, t_hi, reference=None):
        ref = reference if reference is not None else self.initial_norm
        sel = (self.times >= t_lo) & (self.times <= t_hi)
        if not np.any(sel) or ref == 0:
            return float("nan")
        return float(np.max(self.norm0[sel] * np.exp(self.times[sel])) / ref)

    def envelope_margin(self):
        """min(envelope - norm0); negative means the envelope is violated."""
        if self.envelope is None:
            return None
        return float(np.min(self.envelope - self.norm0)) if len(self.times) else 0.0

    def summary(self):
        out = {
            "status": self.status,
            "alpha": self.alpha,
            "n_samples": int(len(self.times)),
            "initial_norm": self.initial_norm,
            "final_time": float(self.times[-1]) if len(self.times) else None,
            "final_norm0": float(self.norm0[-1]) if len(self.times) else None,
        }
        if self.blowup_time is not None:
            out["blowup_time"] = self.blowup_time
            out["blowup_bracket"] = list(self.bracket)
        if self.envelope is not None:
            out["envelope_margin"] = self.envelope_margin()
        out.update(self.extra)
        return out

    def rows(self):
        env = self.envelope if self.envelope is not None else [float("nan")] * len(self.times)
        for t, n, d, e in zip(self.times, self.norm0, self.denominator, env):
            yield [float(t), float(n), float(d), float(e), self.status]

    def to_csv(self, path, comment=None):
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["t", "norm0", "denominator", "envelope", "status"])
            for r in self.rows():
                w.writerow([f"{r[0]:.17g}", f"{r[1]:.17g}", f"{r[2]:.17g}", f"{r[3]:.17g}", r[4]])

    def summary_json(self, path, verdict=None):
        doc = self.summary()
        if verdict is not None:
            doc["verdict"] = verdict
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# closed form


def find_blowup(trace, t_end=None, eps_den=EPS_DEN):
    """First time in [0, t_end] where ``D = 1 - g`` drops to ``eps_den``.

    Returns ``(lo, hi)`` bracketing the crossing, or None. Besides the mesh
    edges, interior maxima of ``g`` (sign changes of Phi) are checked.
    """
    level = 1.0 - eps_den
    times, cum, ph = trace.times, trace.cumulative, trace.phi_values
    t_end = trace.horizon if t_end is None else min(t_end, trace.horizon)
    for j in range(len(times) - 1):
        a, b = times[j], times[j + 1]
        if a >= t_end:
            break
        hi = min(b, t_end)
        g_hi = cum[j + 1] if hi == b else trace.integral(hi)
        if g_hi >= level:
            return _bisect_crossing(trace, a, hi, level)
        if ph[j] > 0 > ph[j + 1]:
            t_pk = brentq(trace.phi, a, b, xtol=1e-14)
            if t_pk <= t_end and trace.integral(t_pk) >= level:
                return _bisect_crossing(trace, a, t_pk, level)
    return None


def _bisect_crossing(trace, lo, hi, level):
    while hi - lo > BISECTION_RTOL * hi:
        mid = 0.5 * (lo + hi)
        if trace.integral(mid) >= level:
            hi = mid
        else:
            lo = mid
    return float(lo), float(hi)


def npe_solution_at(omega0, t, q=None, trace=None, eps_den=EPS_DEN):
    """``S(t; omega0) / D(t)``; raises BlowUpError if D reaches ``eps_den`` on [0, t]."""
    if t < 0:
        raise DomainError("npe_solution_at: negative time")
    if t == 0:
        return omega0
    trace = trace or compute_trace(omega0, q)
    bracket = find_blowup(trace, t, eps_den)
    if bracket is not None:
        raise BlowUpError(f"denominator crosses {eps_den:g} near t={0.5 * sum(bracket):.9g}", bracket)
    D = 1.0 - trace.integral(t)
    return heat_propagate(omega0, t) / D


def simulate(omega0, grid, q=None, trace=None, eps_den=EPS_DEN):
    """Trajectory of norms on ``grid`` from the closed-form solution."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ConfigurationError("simulate: grid must be increasing and start at 0")
    trace = trace or compute_trace(omega0, q)
    if grid[-1] > trace.horizon * (1 + 1e-12):
        raise DomainError(f"simulation grid ends at {grid[-1]} beyond quadrature horizon {trace.horizon}")
    bracket = find_blowup(trace, grid[-1], eps_den)
    status, t_star = STATUS_COMPLETED, None
    if bracket is not None:
        status, t_star = STATUS_BLOWUP, 0.5 * (bracket[0] + bracket[1])
        grid = grid[grid < bracket[0]]
    D = 1.0 - trace.integral(grid) if len(grid) else np.empty(0)
    D = np.atleast_1d(D)
    S = heat_norms(omega0, grid)
    n0 = norm0(omega0)
    traj = Trajectory(grid, S / np.abs(D), D, status, t_star, bracket, n0)
    traj.extra["quadrature_error"] = trace.error_estimate
    traj.extra["tail_bound"] = trace.tail_bound
    return traj


# ---------------------------------------------------------------------------
# time-stepping oracle


def _norm2s(c):
    v = c.view(float).reshape(len(c), -1)
    return VOLUME * np.einsum("ij,ij->i", v, v)


def _phi_states(geom, c, n2=None):
    # Phi for a stack of coefficient arrays, zero on zero states
    n2 = _norm2s(c) if n2 is None else n2
    p = _psi_batch(geom, c)
    return np.where(n2 > 0, p / np.where(n2 > 0, n2, 1.0), 0.0)


def timestep_oracle(omega0, dt, T, sample_every=None, scheme="leapfrog", growth_limit=10.0, sample_times=None):
    """Integrate ``dy/dt = Laplacian y + Phi(y) y`` directly.

    The Laplacian is handled by the exact integrating factor ``e^{-|k|^2 dt}``;
    the nonlinearity by the explicit midpoint rule, either in its two-step
    form (``leapfrog``, one fresh Phi per step) or the one-step two-stage form
    (``midpoint``). A step whose norm grows by more than ``growth_limit``
    truncates the trajectory. ``sample_times`` (rounded to whole steps)
    overrides ``sample_every``.
    """
    return timestep_oracle_many([omega0], dt, T, sample_every, scheme, growth_limit, sample_times)[0]


def timestep_oracle_many(data, dt, T, sample_every=None, scheme="leapfrog", growth_limit=10.0, sample_times=None):
    """``timestep_oracle`` for several data on one lattice, stepped together."""
    if dt <= 0 or T <= 0:
        raise ConfigurationError("timestep_oracle: dt and T must be positive")
    if scheme not in ("leapfrog", "midpoint"):
        raise ConfigurationError(f"unknown oracle scheme {scheme!r}")
    data = list(data)
    lattice = data[0].lattice
    if any(d.lattice != lattice for d in data):
        raise ConfigurationError("timestep_oracle: data must share one lattice")
    geom = geometry(lattice)
    n_steps = int(round(T / dt))
    every = sample_every or max(1, n_steps // 1000)
    wanted = None
    if sample_times is not None:
        wanted = {int(round(t / dt)) for t in np.atleast_1d(sample_times) if 0 < t <= T * (1 + 1e-12)}
    E1 = np.exp(-geom.k2 * dt)
    Eh = np.exp(-geom.k2 * 0.5 * dt)
    E2 = E1 * E1

    def scaled(f, c):
        return f[:, None, None, None, None] * c

    def midpoint_step(c, n2):
        ch = Eh * (c + 0.5 * dt * scaled(_phi_states(geom, c, n2), c))
        return E1 * c + dt * Eh * scaled(_phi_states(geom, ch), ch)

    c = np.stack([d.coeffs for d in data])
    live = np.arange(len(data))  # data still being stepped
    c_prev = None
    n2c = _norm2s(c)
    n0 = np.sqrt(n2c)
    times = [[0.0] for _ in data]
    samples = [[x] for x in n0]
    status = [STATUS_COMPLETED] * len(data)
    final = list(c)
    for n in range(n_steps):
        if scheme == "midpoint" or c_prev is None:
            c_next = midpoint_step(c, n2c)
        else:
            c_next = E2 * c_prev + 2.0 * dt * E1 * scaled(_phi_states(geom, c, n2c), c)
        n2n = _norm2s(c_next)
        nn, nc = np.sqrt(n2n), np.sqrt(n2c)
        bad = ~np.isfinite(nn) | ((nc > 0) & (nn > growth_limit * nc))
        if np.any(bad):
            for b in np.flatnonzero(bad):
                status[live[b]] = STATUS_TRUNCATED
                final[live[b]] = c[b]
            keep = ~bad
            live, c, c_next, nn, n2n = live[keep], c[keep], c_next[keep], nn[keep], n2n[keep]
            c_prev = c_prev[keep] if c_prev is not None else None
            if len(live) == 0:
                break
        c_prev, c, n2c = c, c_next, n2n
        due = (n + 1) in wanted if wanted is not None else ((n + 1) % every == 0 or n + 1 == n_steps)
        if due:
            for idx, val in zip(live, nn):
                times[idx].append((n + 1) * dt)
                samples[idx].append(float(val))
    for idx, state in zip(live, c):
        final[idx] = state
    out = []
    for i in range(len(data)):
        t = np.array(times[i])
        traj = Trajectory(t, np.array(samples[i]), np.full(len(t), np.nan), status[i], initial_norm=float(n0[i]))
        traj.extra.update({"oracle_dt": dt, "oracle_scheme": scheme,
                           "final_state": SpectralField(lattice, final[i])})
        out.append(traj)
    return out


def oracle_deviation(formula, oracle):
    """Max relative deviation of the oracle norms from the formula norms on shared times."""
    ft = np.round(formula.times, 12)
    ot = np.round(oracle.times, 12)
    common, i, j = np.intersect1d(ft, ot, return_indices=True)
    if len(common) == 0:
        raise ConfigurationError("formula and oracle trajectories share no sample times")
    f, o = formula.norm0[i], oracle.norm0[j]
    return float(np.max(np.abs(f - o) / np.where(f > 0, f, 1.0)))


# ---------------------------------------------------------------------------
# classification


VERDICTS = ("Stability", "Explosion", "Growing", "Undetermined")


@dataclass(frozen=True)
class Classification:
    verdict: str
    sup_g: float
    argmax_time: float
    attained: bool
    tail_bound: float
    final_g: float
    tolerance: float

    @property
    def margin(self):
        return abs(self.sup_g - 1.0)

    def as_dict(self):
        return {"verdict": self.verdict, "sup_g": self.sup_g, "argmax_time": self.argmax_time,
                "attained": self.attained, "tail_bound": self.tail_bound, "final_g": self.final_g,
                "tolerance": self.tolerance}


def classify(omega0, q=None, tol=1e-3, trace=None):
    """Sort ``omega0`` into stability / explosion / growing sets from its Phi-trace."""
    if norm0(omega0) == 0.0:
        raise DomainError("classify: zero datum")
    trace = trace or compute_trace(omega0, q)
    g_max, t_max, at_horizon = trace_maximum(trace)
    g_end = float(trace.cumulative[-1])
    tail = trace.tail_bound
    if g_max >= 1.0 + tol:
        verdict = "Explosion"
    elif max(g_max, g_end + tail) <= 1.0 - tol:
        verdict = "Stability"
    elif at_horizon and 1.0 - tol < g_max < 1.0 + tol:
        verdict = "Growing"
    else:
        verdict = "Undetermined"
    return Classification(verdict, g_max, t_max, not at_horizon, tail, g_end, tol)


def small_ball_radius(c1):
    if c1 <= 0:
        raise DomainError("small_ball_radius needs a positive constant")
    return 1.0 / (2.0 * c1)


def default_quadrature():
    return QuadratureSpec()
