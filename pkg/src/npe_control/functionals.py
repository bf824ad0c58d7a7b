"""Cubic form Psi, normalizing functional Phi and its integral along heat flow."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft
from scipy.optimize import brentq

from . import spectral
from .errors import ConfigurationError, DomainError, InvariantError, QuadratureFailure
from .spectral import (
    EPS_DIV,
    VOLUME,
    LatticeSpec,
    SpectralField,
    _curl_inv_raw,
    _to_physical,
    _to_spectral,
    curl_inv,
    geometry,
    l2_inner,
    leray_project,
    norm0,
    random_smooth_field,
    sobolev_norm,
)

log = logging.getLogger(__name__)

_BATCH_BYTES = 4e6
_HEAT_BATCH_BYTES = 2e8
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)


class _PsiKernel:
    """Batched Psi(y, y, y) on the smallest fast grid with ``Nq >= 3K + 1``.

    The cubic integrand has modes up to 3K per axis, so any such grid gives
    the exact integral. Only the kz >= 0 half of the spectrum is carried and
    the inverse transform is staged so the zero-padded lines are skipped.
    """

    def __init__(self, N, K):
        self.K = K
        self.Nq = min(N, scipy.fft.next_fast_len(3 * K + 1))
        geom = geometry(LatticeSpec(N, K))
        k = geom.k[..., K:]
        k2 = geom.k2_safe[..., K:]
        # curl^-1: w = i (k x c) / |k|^2 as a 3x3 operator on c
        cross = np.zeros((3, 3) + k.shape[1:], dtype=complex)
        cross[0, 1], cross[0, 2] = -k[2], k[1]
        cross[1, 0], cross[1, 2] = k[2], -k[0]
        cross[2, 0], cross[2, 1] = -k[1], k[0]
        winv = 1j * cross / k2
        # d_j w_i = i k_j w_i; symmetric part in order 11, 22, 33, 12, 13, 23
        pairs = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]
        op = np.zeros((9, 3) + k.shape[1:], dtype=complex)
        for c in range(3):
            op[c, c] = 1.0
        for s, (i, j) in enumerate(pairs):
            op[3 + s] = 0.5j * (k[j] * winv[i] + k[i] * winv[j])
        self.op = op[3:].copy()  # rows 0..2 are the identity
        self.idx = np.arange(-K, K + 1) % self.Nq
        self.weight = (2.0 * np.pi / self.Nq) ** 3

    def _physical(self, half):
        K, Nq, idx = self.K, self.Nq, self.idx
        lead = half.shape[:-3]
        a = np.zeros(lead + (Nq, 2 * K + 1, K + 1), dtype=complex)
        a[..., idx, :, :] = half
        a = scipy.fft.ifft(a, axis=-3, norm="forward", overwrite_x=True, workers=spectral._fft_workers)
        b = np.zeros(lead + (Nq, Nq, K + 1), dtype=complex)
        b[..., :, idx, :] = a
        b = scipy.fft.ifft(b, axis=-2, norm="forward", overwrite_x=True, workers=spectral._fft_workers)
        return scipy.fft.irfft(b, n=Nq, axis=-1, norm="forward", workers=spectral._fft_workers)

    def __call__(self, coeffs):
        """Psi for coefficient stacks of shape ``(n, 3, M, M, M)``."""
        n = coeffs.shape[0]
        per = 9 * self.Nq**3 * 8 * 3.0
        step = max(1, int(_BATCH_BYTES // per))
        out = np.empty(n)
        for s in range(0, n, step):
            c = coeffs[s : s + step, ..., self.K :]
            half = np.empty((c.shape[0], 9) + c.shape[2:], dtype=complex)
            half[:, :3] = c
            np.einsum("fm...,bm...->bf...", self.op, c, out=half[:, 3:])
            f = self._physical(half)
            y0, y1, y2 = f[:, 0], f[:, 1], f[:, 2]
            S = f[:, 3:]
            acc = y0 * (y0 * S[:, 0] + 2.0 * (y1 * S[:, 3] + y2 * S[:, 4]))
            acc += y1 * (y1 * S[:, 1] + 2.0 * y2 * S[:, 5])
            acc += y2 * y2 * S[:, 2]
            out[s : s + step] = acc.sum(axis=(-3, -2, -1))
        return out * self.weight


@lru_cache(maxsize=8)
def _kernel(N, K):
    return _PsiKernel(N, K)


def _psi_batch(geom, coeffs):
    return _kernel(geom.N, geom.K)(coeffs)


def _norm2(coeffs):
    return VOLUME * (np.abs(coeffs) ** 2).sum(axis=(-4, -3, -2, -1))


def psi3(y1, y2, y3):
    """Trilinear form: integral of ((y1 . grad) curl^-1 y2) . y3 over the torus."""
    if not (y1.lattice == y2.lattice == y3.lattice):
        raise ConfigurationError("psi3: lattice mismatch")
    if y2.divergence_defect() > EPS_DIV:
        raise InvariantError("psi3: second argument is not divergence-free")
    w = curl_inv(y2)
    geom = geometry(y1.lattice)
    grad = 1j * geom.k[:, None] * w.coeffs[None, :]  # [j, c] = d_j w_c
    stack = np.concatenate([y1.coeffs, grad.reshape((9,) + grad.shape[2:]), y3.coeffs])
    f = _to_physical(geom, stack)
    a, g, b = f[:3], f[3:12].reshape((3, 3) + f.shape[1:]), f[12:]
    val = np.einsum("j...,jc...,c...->...", a, g, b).sum()
    return float(val * (2.0 * np.pi / geom.N) ** 3)


def psi(y):
    """Cubic functional Psi(y) = psi3(y, y, y)."""
    if y.divergence_defect() > EPS_DIV:
        raise InvariantError("psi: field is not divergence-free")
    return float(_psi_batch(geometry(y.lattice), y.coeffs[None])[0])


def phi(omega):
    """Psi(omega) / ||omega||^2, and 0 for the zero field."""
    n2 = norm0(omega) ** 2
    if n2 == 0.0:
        return 0.0
    return psi(omega) / n2


def _psi_norm2_along_heat(F, taus):
    # stacks of propagated coefficients are built a few times at a time
    geom = geometry(F.lattice)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    step = max(1, int(_HEAT_BATCH_BYTES // (F.coeffs.nbytes + 1)))
    p = np.empty(len(taus))
    n2 = np.empty(len(taus))
    for s in range(0, len(taus), step):
        c = F.coeffs[None] * np.exp(-geom.k2[None] * taus[s : s + step, None, None, None])[:, None]
        p[s : s + step] = _psi_batch(geom, c)
        n2[s : s + step] = _norm2(c)
    return p, n2


def phi_along_heat(F, taus):
    """Phi(S(tau; F)) for every tau, evaluated in memory-bounded batches."""
    p, n2 = _psi_norm2_along_heat(F, taus)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n2 > 0, p / np.where(n2 > 0, n2, 1.0), 0.0)


def psi_along_heat(F, taus):
    p, n2 = _psi_norm2_along_heat(F, taus)
    return p, np.sqrt(n2)


# ---------------------------------------------------------------------------
# quadrature along the heat semigroup


@dataclass(frozen=True)
class QuadratureSpec:
    """Graded mesh ``h_j = initial_step * growth**j`` up to ``horizon``."""

    initial_step: float = 1e-3
    growth: float = 1.05
    horizon: float = 30.0
    tail_tolerance: float = 1e-9
    tail_constant: float = 1.0
    max_refinements: int = 10

    def __post_init__(self):
        if self.initial_step <= 0 or self.tail_tolerance <= 0 or self.horizon <= 0:
            raise ConfigurationError("quadrature step, tolerance and horizon must be positive")
        if self.growth <= 1.0:
            raise ConfigurationError("graded mesh growth factor must exceed 1")

    def mesh(self):
        edges = [0.0]
        h = self.initial_step
        while edges[-1] < self.horizon:
            edges.append(min(edges[-1] + h, self.horizon))
            h *= self.growth
        if len(edges) > 2 and edges[-1] - edges[-2] < 0.25 * (edges[-2] - edges[-3]):
            del edges[-2]
        return np.array(edges)

    def refined(self):
        """Same mesh family with the initial step halved."""
        return QuadratureSpec(self.initial_step / 2, self.growth, self.horizon,
                              self.tail_tolerance, self.tail_constant, self.max_refinements)


def _gl(a, b):
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    half = 0.5 * (b - a)
    return 0.5 * (a + b) + half * _GL_NODES, half * _GL_WEIGHTS


@dataclass
class PhiTrace:
    """Cumulative integral of Phi along the heat flow of one initial field.

    ``times``/``phi_values``/``cumulative`` are sampled at accepted panel
    edges; :meth:`integral` interpolates inside a panel by quadrature.
    """

    field: SpectralField = field(repr=False)
    quadrature: QuadratureSpec
    times: np.ndarray
    phi_values: np.ndarray
    cumulative: np.ndarray
    panel_errors: np.ndarray
    tail_bound: float
    evaluations: int = 0

    @property
    def error_estimate(self):
        return float(self.panel_errors.sum())

    @property
    def horizon(self):
        return float(self.times[-1])

    def _locate(self, t):
        j = np.searchsorted(self.times, t, side="right") - 1
        return np.clip(j, 0, len(self.times) - 2)

    def integral(self, t):
        """Integral of Phi over [0, t] for scalar or array ``t``."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t_arr < 0):
            raise DomainError("negative time")
        if np.any(t_arr > self.horizon * (1 + 1e-12)):
            raise DomainError(f"t beyond quadrature horizon {self.horizon}")
        t_arr = np.minimum(t_arr, self.horizon)
        j = self._locate(t_arr)
        a = self.times[j]
        out = self.cumulative[j].copy()
        inner = t_arr > a
        if np.any(inner):
            nodes, weights = _gl(a[inner], t_arr[inner])
            vals = phi_along_heat(self.field, nodes.ravel()).reshape(nodes.shape)
            self.evaluations += nodes.size
            out[inner] += (vals * weights).sum(axis=-1)
        return out if np.ndim(t) else float(out[0])

    def error_at(self, t):
        j = int(self._locate(t))
        h = self.times[j + 1] - self.times[j]
        frac = (t - self.times[j]) / h if h > 0 else 0.0
        return float(self.panel_errors[:j].sum() + frac * self.panel_errors[j])

    def phi(self, t):
        return float(phi_along_heat(self.field, [t])[0])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "phi", "cumulative_integral", "tail_bound"])
            for t, p, c in zip(self.times, self.phi_values, self.cumulative):
                w.writerow([repr(float(t)), repr(float(p)), repr(float(c)), repr(self.tail_bound)])


_LOBATTO_X = np.array([-np.sqrt(3.0 / 7.0), 0.0, np.sqrt(3.0 / 7.0)])
_LOBATTO_W = np.array([49.0 / 90.0, 32.0 / 45.0, 49.0 / 90.0])
_TRACE_CACHE = {}
_TRACE_CACHE_SIZE = 16


def _cache_key(omega0, q):
    c = omega0.coeffs
    return (omega0.lattice, q, hashlib.sha1(c.tobytes()).hexdigest())


def compute_trace(omega0, q=None, use_cache=True):
    """Adaptive graded-mesh quadrature of tau -> Phi(S(tau; omega0)) on [0, horizon].

    Panels use 5-point Gauss-Lobatto (endpoints shared with neighbours); the
    embedded Simpson rule gives a conservative local error estimate. Panels
    above their share ``tol * h / horizon`` are bisected.
    """
    q = q or QuadratureSpec()
    key = _cache_key(omega0, q) if use_cache else None
    if key is not None and key in _TRACE_CACHE:
        return _TRACE_CACHE[key]
    edges = q.mesh()
    fe = phi_along_heat(omega0, edges)
    evals = edges.size
    a, b, fa, fb = edges[:-1], edges[1:], fe[:-1], fe[1:]
    tol = None
    accepted = []  # (a, b, value, error, phi(a), phi(b))
    for level in range(q.max_refinements + 1):
        if a.size == 0:
            break
        h = 0.5 * (b - a)
        m = 0.5 * (a + b)
        nodes = m[:, None] + h[:, None] * _LOBATTO_X
        v = phi_along_heat(omega0, nodes.ravel()).reshape(nodes.shape)
        evals += nodes.size
        lob = h * (0.1 * (fa + fb) + (v * _LOBATTO_W).sum(axis=1))
        simpson = h * ((fa + fb) / 3.0 + 4.0 / 3.0 * v[:, 1])
        err = np.abs(lob - simpson)
        if tol is None:
            scale = float(np.abs(lob).sum())
            tol = q.tail_tolerance * max(1.0, scale)
            if tol < 16 * np.finfo(float).eps * scale:
                raise QuadratureFailure(f"tolerance {tol:.3e} is below the rounding floor of the integral {scale:.3e}")
        ok = err <= tol * (b - a) / q.horizon
        if level == q.max_refinements:
            ok[:] = True
        for i in np.nonzero(ok)[0]:
            accepted.append((a[i], b[i], lob[i], err[i], fa[i], fb[i]))
        bad = ~ok
        a, b = np.concatenate([a[bad], m[bad]]), np.concatenate([m[bad], b[bad]])
        fa, fb = np.concatenate([fa[bad], v[bad, 1]]), np.concatenate([v[bad, 1], fb[bad]])

    accepted.sort()
    acc = np.array(accepted)
    times = np.concatenate([acc[:, 0], acc[-1:, 1]])
    phis = np.concatenate([acc[:, 4], acc[-1:, 5]])
    cumulative = np.concatenate([[0.0], np.cumsum(acc[:, 2])])
    errors = acc[:, 3]
    geom = geometry(omega0.lattice)
    tail = q.tail_constant * np.sqrt(_norm2(omega0.coeffs * np.exp(-geom.k2 * q.horizon)))
    total_err = float(errors.sum())
    if total_err > tol:
        raise QuadratureFailure(
            f"quadrature error estimate {total_err:.3e} exceeds tolerance {tol:.3e} "
            f"after {q.max_refinements} refinements"
        )
    log.debug("trace: %d panels, %d Phi evaluations, error %.2e", len(errors), evals, total_err)
    trace = PhiTrace(omega0, q, times, phis, cumulative, errors, float(tail), evals)
    if key is not None:
        if len(_TRACE_CACHE) >= _TRACE_CACHE_SIZE:
            _TRACE_CACHE.pop(next(iter(_TRACE_CACHE)))
        _TRACE_CACHE[key] = trace
    return trace


def clear_trace_cache():
    _TRACE_CACHE.clear()


def phi_time_integral(omega0, t, q=None, trace=None):
    """(value, error_estimate) of the integral of Phi(S(tau; omega0)) over [0, t]."""
    if t < 0:
        raise DomainError("phi_time_integral: negative time")
    trace = trace or compute_trace(omega0, q)
    if t > trace.horizon:
        raise DomainError(f"t={t} beyond quadrature horizon {trace.horizon}")
    return trace.integral(t), trace.error_at(t)


# ---------------------------------------------------------------------------
# Helmholtz nonlinearity


@dataclass(frozen=True)
class NonlinearSplit:
    B: SpectralField
    B_n: SpectralField
    B_tau: SpectralField


def nonlinear_term(omega):
    """``B = (v.grad)omega - (omega.grad)v`` with ``v = curl^-1 omega`` and its
    split into the component along ``omega`` and the remainder.

    The normal part is the L2 projection onto ``omega``; it equals
    ``-Phi(omega) omega`` because ``<B, omega> = -Psi(omega)``.
    """
    if omega.divergence_defect() > EPS_DIV:
        raise InvariantError("nonlinear_term: omega is not divergence-free")
    geom = geometry(omega.lattice)
    v = _curl_inv_raw(geom, omega.coeffs)
    k = geom.k
    gw = 1j * k[:, None] * omega.coeffs[None, :]
    gv = 1j * k[:, None] * v[None, :]
    stack = np.concatenate([v, omega.coeffs, gw.reshape((9,) + gw.shape[2:]), gv.reshape((9,) + gv.shape[2:])])
    f = _to_physical(geom, stack)
    vp, wp = f[0:3], f[3:6]
    gwp = f[6:15].reshape((3, 3) + f.shape[1:])
    gvp = f[15:24].reshape((3, 3) + f.shape[1:])
    b = np.einsum("j...,jc...->c...", vp, gwp) - np.einsum("j...,jc...->c...", wp, gvp)
    B = leray_project(SpectralField(omega.lattice, _to_spectral(geom, b)))
    n2 = norm0(omega) ** 2
    coef = l2_inner(B, omega) / n2 if n2 > 0 else 0.0
    B_n = omega * coef
    return NonlinearSplit(B, B_n, B - B_n)


# ---------------------------------------------------------------------------
# functions on the unit sphere


@dataclass(frozen=True)
class SphereValue:
    """Maximum of the cumulative Phi trace of a unit-norm field."""

    value: float
    argmax_time: float
    attained: bool
    tail_bound: float
    trace: PhiTrace = field(repr=False, compare=False)


def trace_maximum(trace):
    """(max, argmax, at_horizon) of the cumulative trace, local maxima refined.

    A maximum is "at the horizon" when the trace is flat or still rising at
    the last mesh point (within the quadrature error); the supremum is then
    not attained at a finite time.
    """
    cum = trace.cumulative
    j = int(np.argmax(cum))
    g_max, t_max = float(cum[j]), float(trace.times[j])
    last = len(cum) - 1
    flat = max(trace.error_estimate, 1e-12 * max(abs(g_max), 1e-300))
    at_horizon = (g_max - cum[-1] <= flat) and trace.phi_values[-1] >= -flat
    if j == 0 or at_horizon:
        return g_max, t_max if not at_horizon else trace.horizon, at_horizon
    # local max between neighbouring edges: Phi changes sign from + to -
    lo = trace.times[j - 1] if trace.phi_values[j] < 0 else trace.times[j]
    hi = trace.times[j] if trace.phi_values[j] < 0 else trace.times[min(j + 1, last)]
    f_lo, f_hi = trace.phi(lo), trace.phi(hi)
    if f_lo > 0 > f_hi:
        t_star = brentq(trace.phi, lo, hi, xtol=1e-14, rtol=1e-12)
        g_star = trace.integral(t_star)
        if g_star > g_max:
            return float(g_star), float(t_star), False
    return g_max, t_max, False


def stability_function_b(v, q=None, trace=None, norm_tol=1e-10):
    """Sup over t of the integral of Phi(S(tau; v)) for ``||v|| = 1``."""
    if abs(norm0(v) - 1.0) > norm_tol:
        raise DomainError(f"stability_function_b needs a unit field, got norm {norm0(v)!r}")
    trace = trace or compute_trace(v, q)
    g, t, at_horizon = trace_maximum(trace)
    if g <= 0:
        return SphereValue(0.0, 0.0, True, trace.tail_bound, trace)
    return SphereValue(g, t, not at_horizon, trace.tail_bound, trace)


def gamma_map(v, q=None, b=None):
    """``v / b(v)`` for ``v`` in the positive part of the sphere."""
    b = b or stability_function_b(v, q)
    if b.value <= 0:
        raise DomainError("gamma_map: b(v) <= 0, field is not in B+")
    return v / b.value


# ---------------------------------------------------------------------------
# empirical inequality constants


@dataclass(frozen=True)
class ConstantEstimate:
    """Largest observed ratio over a seeded random ensemble plus extra fields."""

    value: float
    seed: int
    n_samples: int
    decay: float
    ratios: tuple = ()
    source: str = "sampling maximization"

    def as_dict(self):
        return {"value": self.value, "seed": self.seed, "n_samples": self.n_samples,
                "decay": self.decay, "source": self.source}


def estimate_c1(lattice, q=None, n_samples=8, seed=0, decay=1.0, extra=()):
    """Sup over t of |integral of Phi(S(tau; y))| / ||y||, maximised over samples."""
    rng = np.random.default_rng(seed)
    fields = [random_smooth_field(lattice, None, decay, rng=rng) for _ in range(n_samples)]
    fields += list(extra)
    ratios = []
    for f in fields:
        tr = compute_trace(f, q)
        ratios.append((float(np.abs(tr.cumulative).max()) + tr.tail_bound) / norm0(f))
    return ConstantEstimate(max(ratios), seed, n_samples, decay, tuple(ratios))


def estimate_psi_constant(lattice, n_samples=16, seed=0, decay=1.0, extra=()):
    """Max of |Psi(y1, y2, y3)| / (||y1|| ||y2|| ||y3||) in the 1/2 norm."""
    rng = np.random.default_rng(seed)
    ratios = []
    pool = list(extra)
    for _ in range(n_samples):
        ys = [random_smooth_field(lattice, None, decay, rng=rng) for _ in range(3)]
        den = np.prod([sobolev_norm(y, 0.5) for y in ys])
        ratios.append(abs(psi3(*ys)) / den)
    for a in pool:
        for b in pool:
            for c in pool:
                den = sobolev_norm(a, 0.5) * sobolev_norm(b, 0.5) * sobolev_norm(c, 0.5)
                if den > 0:
                    ratios.append(abs(psi3(a, b, c)) / den)
    return ConstantEstimate(max(ratios), seed, n_samples, decay, tuple(ratios))


def estimate_phi_constant(lattice, n_samples=32, seed=0, decay=1.0, extra=()):
    """Max of |Phi(w)| / ||w||_{3/2}."""
    rng = np.random.default_rng(seed)
    fields = [random_smooth_field(lattice, None, decay, rng=rng) for _ in range(n_samples)]
    fields += list(extra)
    ratios = [abs(phi(f)) / sobolev_norm(f, 1.5) for f in fields]
    return ConstantEstimate(max(ratios), seed, n_samples, decay, tuple(ratios))
