"""Truncated Fourier calculus for divergence-free vector fields on the 3-torus.

Coefficients are stored on the cube of wavevectors ``|k_i| <= K`` as a complex
array of shape ``(3, 2K+1, 2K+1, 2K+1)``; index ``[c, kx+K, ky+K, kz+K]``.
Physical samples live on the uniform ``N**3`` grid ``x_j = 2*pi*j/N``.

All norms carry the (2*pi)**3 volume factor so that the s=0 norm equals the
physical L2 integral.
"""
from __future__ import annotations

import functools
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import ConfigurationError, DomainError, InvariantError

VOLUME = (2.0 * np.pi) ** 3
CONVENTION = "vol2pi3"
EPS_DIV = 1e-10
HERMITIAN_TOL = 1e-12

_fft_workers = 1


def set_fft_workers(n):
    """Number of threads handed to scipy.fft (process-wide)."""
    global _fft_workers
    _fft_workers = max(1, int(n))


@dataclass(frozen=True)
class LatticeSpec:
    """Sampling grid size ``N`` and spectral cutoff ``K``.

    ``N >= 3K + 1`` makes grid quadrature of a product of three band-limited
    fields exact, which is what every cubic functional relies on.
    """

    N: int
    K: int
    product_rule: str = "grid-exact"

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ConfigurationError(f"cutoff K must be a positive integer, got {self.K}")
        if int(self.N) != self.N or self.N <= 0 or self.N % 2:
            raise ConfigurationError(f"N must be a positive even integer, got {self.N}")
        if self.N < 3 * self.K + 1:
            raise ConfigurationError(
                f"N={self.N} < 3K+1={3 * self.K + 1}: triple products would alias"
            )
        if self.product_rule != "grid-exact":
            raise ConfigurationError(f"unknown product rule {self.product_rule!r}")

    @property
    def M(self):
        return 2 * self.K + 1

    @classmethod
    def for_cutoff(cls, K):
        """Smallest admissible even N for cutoff K."""
        n = 3 * K + 1
        return cls(N=n + (n % 2), K=K)


class _Geometry:
    def __init__(self, N, K):
        self.N, self.K = N, K
        M = 2 * K + 1
        r = np.arange(-K, K + 1, dtype=float)
        k = np.stack(np.meshgrid(r, r, r, indexing="ij"))
        self.k = k
        self.k2 = (k**2).sum(axis=0)
        safe = self.k2.copy()
        safe[K, K, K] = 1.0
        self.k2_safe = safe
        self.kabs = np.sqrt(self.k2)
        self.idx = np.arange(-K, K + 1) % N
        self.M = M
        self.half_shape = (N, N, N // 2 + 1)
        for a in (self.k, self.k2, self.k2_safe, self.kabs):
            a.setflags(write=False)


@functools.lru_cache(maxsize=16)
def _geometry(N, K):
    return _Geometry(N, K)


def geometry(lattice):
    return _geometry(lattice.N, lattice.K)


def wavevectors(lattice):
    """Array ``(3, M, M, M)`` of integer wavevector components (as floats)."""
    return geometry(lattice).k


# ---------------------------------------------------------------------------
# raw-array kernels (leading batch dimensions allowed)


def _to_physical(geom, coeffs):
    """Centered coefficients ``(..., M, M, M)`` -> real samples ``(..., N, N, N)``."""
    K, N = geom.K, geom.N
    lead = coeffs.shape[:-3]
    half = np.zeros(lead + geom.half_shape, dtype=complex)
    ix = geom.idx[:, None]
    iy = geom.idx[None, :]
    half[..., ix, iy, : K + 1] = coeffs[..., K:]
    out = scipy.fft.irfftn(half, s=(N, N, N), axes=(-3, -2, -1), workers=_fft_workers)
    out *= N**3
    return out


def _to_spectral(geom, samples):
    """Real samples ``(..., N, N, N)`` -> centered coefficients, modes > K dropped."""
    K, N = geom.K, geom.N
    half = scipy.fft.rfftn(samples, axes=(-3, -2, -1), workers=_fft_workers)
    half /= N**3
    ix = geom.idx[:, None]
    iy = geom.idx[None, :]
    upper = half[..., ix, iy, : K + 1]
    lead = samples.shape[:-3]
    out = np.empty(lead + (geom.M,) * 3, dtype=complex)
    out[..., K:] = upper
    # c(-k) = conj(c(k)) fills kz < 0
    out[..., :K] = np.conj(upper[..., ::-1, ::-1, :0:-1])
    return out


def _mirror(coeffs):
    return np.conj(coeffs[..., ::-1, ::-1, ::-1])


def _cross(a, b):
    """Cross product over axis -4 (component axis)."""
    a0, a1, a2 = a[..., 0, :, :, :], a[..., 1, :, :, :], a[..., 2, :, :, :]
    b0, b1, b2 = b[..., 0, :, :, :], b[..., 1, :, :, :], b[..., 2, :, :, :]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-4)


def _curl_inv_raw(geom, coeffs):
    return 1j * _cross(geom.k, coeffs) / geom.k2_safe


# ---------------------------------------------------------------------------
# field types


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real, mean-zero vector field given by its Fourier coefficients.

    The coefficient array is copied and frozen on construction. Structural
    invariants are checked by :meth:`validate`, not on every arithmetic step.
    """

    lattice: LatticeSpec
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        shape = (3,) + (self.lattice.M,) * 3
        if c.shape != shape:
            raise ConfigurationError(f"coefficient shape {c.shape} does not match lattice {shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    # arithmetic --------------------------------------------------------------
    def _check_same(self, other):
        if not isinstance(other, SpectralField):
            return NotImplemented
        if other.lattice != self.lattice:
            raise ConfigurationError("lattice mismatch")
        return other

    def __add__(self, other):
        other = self._check_same(other)
        if other is NotImplemented:
            return other
        return SpectralField(self.lattice, self.coeffs + other.coeffs)

    def __sub__(self, other):
        other = self._check_same(other)
        if other is NotImplemented:
            return other
        return SpectralField(self.lattice, self.coeffs - other.coeffs)

    def __mul__(self, c):
        if not np.isscalar(c) or np.iscomplexobj(c):
            return NotImplemented
        return SpectralField(self.lattice, self.coeffs * float(c))

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / float(c))

    def __neg__(self):
        return SpectralField(self.lattice, -self.coeffs)

    # accessors ---------------------------------------------------------------
    def coeff(self, k):
        """Coefficient 3-vector at integer wavevector ``k``."""
        K = self.lattice.K
        kx, ky, kz = (int(v) for v in k)
        if max(abs(kx), abs(ky), abs(kz)) > K:
            return np.zeros(3, dtype=complex)
        return self.coeffs[:, kx + K, ky + K, kz + K].copy()

    def hermitian_defect(self):
        scale = np.abs(self.coeffs).max()
        if scale == 0:
            return 0.0
        return float(np.abs(self.coeffs - _mirror(self.coeffs)).max() / scale)

    def mean_mode(self):
        K = self.lattice.K
        return self.coeffs[:, K, K, K].copy()

    def divergence_defect(self):
        """Largest ``|k.c(k)| / |c(k)|`` over modes (absolute floor 1e-14 max|c|)."""
        k = geometry(self.lattice).k
        div = np.abs((k * self.coeffs).sum(axis=0))
        mag = np.sqrt((np.abs(self.coeffs) ** 2).sum(axis=0))
        floor = 1e-14 * max(mag.max(), 1e-300)
        return float((div / np.maximum(mag, floor)).max())

    def validate(self, eps_div=EPS_DIV, tol=HERMITIAN_TOL):
        """Raise :class:`InvariantError` unless real, mean-zero and divergence-free."""
        if self.hermitian_defect() > tol:
            raise InvariantError(f"Hermitian symmetry violated ({self.hermitian_defect():.2e})")
        scale = max(np.abs(self.coeffs).max(), 1e-300)
        if np.abs(self.mean_mode()).max() > tol * scale:
            raise InvariantError("nonzero mean mode")
        if self.divergence_defect() > eps_div:
            raise InvariantError(f"field not divergence-free ({self.divergence_defect():.2e})")
        return self

    @classmethod
    def zeros(cls, lattice):
        return cls(lattice, np.zeros((3,) + (lattice.M,) * 3, dtype=complex))


@dataclass(frozen=True, eq=False)
class PhysicalField:
    lattice: LatticeSpec
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        N = self.lattice.N
        if s.shape != (3, N, N, N):
            raise ConfigurationError(f"sample shape {s.shape} != (3, {N}, {N}, {N})")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)


def grid_coordinates(lattice):
    """Three ``(N, N, N)`` arrays with the sample positions in [0, 2*pi)."""
    x = 2.0 * np.pi * np.arange(lattice.N) / lattice.N
    return np.meshgrid(x, x, x, indexing="ij")


# ---------------------------------------------------------------------------
# operations


def forward_transform(f, lattice=None):
    if lattice is not None and f.lattice != lattice:
        raise ConfigurationError("physical field sampled on a different lattice")
    geom = geometry(f.lattice)
    c = _to_spectral(geom, f.samples)
    K = f.lattice.K
    c[:, K, K, K] = 0.0
    return SpectralField(f.lattice, c)


def inverse_transform(F):
    defect = F.hermitian_defect()
    if defect > HERMITIAN_TOL:
        raise InvariantError(f"Hermitian symmetry violated by {defect:.3e}; samples would be complex")
    return PhysicalField(F.lattice, _to_physical(geometry(F.lattice), F.coeffs))


def imaginary_residue(F):
    """Max imaginary part of the full complex synthesis, relative to max |f|."""
    geom = geometry(F.lattice)
    N = geom.N
    full = np.zeros((3, N, N, N), dtype=complex)
    full[:, geom.idx[:, None, None], geom.idx[None, :, None], geom.idx[None, None, :]] = F.coeffs
    z = np.fft.ifftn(full, axes=(1, 2, 3)) * N**3
    scale = np.abs(z.real).max()
    return float(np.abs(z.imag).max() / scale) if scale > 0 else 0.0


def curl(F):
    k = geometry(F.lattice).k
    return SpectralField(F.lattice, 1j * _cross(k, F.coeffs))


def curl_inv(F):
    scale = np.abs(F.coeffs).max()
    if np.abs(F.mean_mode()).max() > HERMITIAN_TOL * max(scale, 1e-300):
        raise InvariantError("curl_inv: field has a nonzero mean mode")
    return SpectralField(F.lattice, _curl_inv_raw(geometry(F.lattice), F.coeffs))


def leray_project(F):
    geom = geometry(F.lattice)
    k = geom.k
    kc = (k * F.coeffs).sum(axis=0)
    c = F.coeffs - k * kc / geom.k2_safe
    K = F.lattice.K
    c[:, K, K, K] = 0.0
    return SpectralField(F.lattice, c)


def gradient(F):
    """Spectral gradient: array ``(3, 3, M, M, M)``, entry ``[j, c]`` = d_j F_c."""
    k = geometry(F.lattice).k
    return 1j * k[:, None] * F.coeffs[None, :]


def sobolev_norm(F, s):
    if not -2.0 <= s <= 2.0:
        raise DomainError(f"Sobolev index s={s} outside supported range [-2, 2]")
    geom = geometry(F.lattice)
    w = np.where(geom.k2 > 0, geom.k2_safe ** float(s), 0.0)
    return float(np.sqrt(VOLUME * (w * (np.abs(F.coeffs) ** 2).sum(axis=0)).sum()))


def heat_propagate(F, t):
    if t < 0:
        raise DomainError(f"heat_propagate: negative time {t}")
    k2 = geometry(F.lattice).k2
    return SpectralField(F.lattice, F.coeffs * np.exp(-k2 * float(t)))


def shell_energies(F):
    """``(m, E_m)`` with ``E_m`` the squared L2 norm carried by ``|k|^2 = m``."""
    k2 = geometry(F.lattice).k2.astype(np.int64).ravel()
    e = VOLUME * (np.abs(F.coeffs) ** 2).sum(axis=0).ravel()
    m, inv = np.unique(k2, return_inverse=True)
    return m, np.bincount(inv, weights=e)


def heat_norms(F, times, s=0.0):
    """``||S(t; F)||_s`` for every t, summed shell by shell."""
    m, e = shell_energies(F)
    keep = m > 0
    m, e = m[keep].astype(float), e[keep] * m[keep].astype(float) ** s
    t = np.asarray(times, dtype=float)
    return np.sqrt(np.exp(-2.0 * np.multiply.outer(t, m)) @ e)


def l2_inner(F, G):
    if F.lattice != G.lattice:
        raise ConfigurationError("l2_inner: lattice mismatch")
    return float(VOLUME * np.real(np.vdot(G.coeffs, F.coeffs)))


def norm0(F):
    return float(np.sqrt(VOLUME * (np.abs(F.coeffs) ** 2).sum()))


def physical_inner(f, g):
    """Grid quadrature ``(2pi/N)^3 sum f.g`` of two physical fields."""
    N = f.lattice.N
    return float((f.samples * g.samples).sum() * (2.0 * np.pi / N) ** 3)


def resample(F, lattice):
    """Same coefficients on another lattice (zero-padded or truncated)."""
    K0, K1 = F.lattice.K, lattice.K
    out = np.zeros((3,) + (lattice.M,) * 3, dtype=complex)
    m = min(K0, K1)
    src = slice(K0 - m, K0 + m + 1)
    dst = slice(K1 - m, K1 + m + 1)
    out[:, dst, dst, dst] = F.coeffs[:, src, src, src]
    return SpectralField(lattice, out)


def sup_norm(F, refine=2):
    """Max pointwise Euclidean length, sampled on a grid refined ``refine`` times."""
    fine = LatticeSpec(N=F.lattice.N * refine, K=F.lattice.K)
    f = _to_physical(geometry(fine), F.coeffs)
    return float(np.sqrt((f**2).sum(axis=0)).max())


# ---------------------------------------------------------------------------
# generators


def hermitian_symmetrize(coeffs):
    return 0.5 * (coeffs + _mirror(coeffs))


def random_smooth_field(lattice, seed, decay=1.0, rng=None):
    """Gaussian random field with spectrum ``exp(-decay |k|)``, unit L2 norm."""
    rng = np.random.default_rng(seed) if rng is None else rng
    geom = geometry(lattice)
    shape = (3,) + (lattice.M,) * 3
    c = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.exp(-decay * geom.kabs)
    F = leray_project(SpectralField(lattice, hermitian_symmetrize(c)))
    n = norm0(F)
    return F / n


def single_mode_field(lattice, k, component, amplitude=1.0):
    """``amplitude * e_component * cos(k.x)`` (requires ``k_component == 0``)."""
    k = tuple(int(v) for v in k)
    if k == (0, 0, 0):
        raise ConfigurationError("single mode needs a nonzero wavevector")
    if k[component] != 0:
        raise ConfigurationError(f"mode {k} along axis {component} is not divergence-free")
    K = lattice.K
    if max(abs(v) for v in k) > K:
        raise ConfigurationError(f"mode {k} exceeds cutoff K={K}")
    c = np.zeros((3,) + (lattice.M,) * 3, dtype=complex)
    c[component, k[0] + K, k[1] + K, k[2] + K] += 0.5 * amplitude
    c[component, -k[0] + K, -k[1] + K, -k[2] + K] += 0.5 * amplitude
    return SpectralField(lattice, c)


def translate(F, shift):
    """``F(x - shift)``: multiply coefficients by ``exp(-i k.shift)``."""
    k = geometry(F.lattice).k
    phase = np.exp(-1j * np.tensordot(np.asarray(shift, dtype=float), k, axes=(0, 0)))
    return SpectralField(F.lattice, F.coeffs * phase)


# ---------------------------------------------------------------------------
# file formats

_MAGIC = b"NPEFLD01"
_HEADER = struct.Struct("<8sqq8s")


def save_field(F, path):
    """Binary container: header (magic, N, K, convention) then ``<c16`` coefficients.

    Coefficients are written in lexicographic ``(kx, ky, kz)`` order, each a
    3-vector (component fastest).
    """
    lat = F.lattice
    body = np.ascontiguousarray(np.moveaxis(F.coeffs, 0, -1)).astype("<c16")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, lat.N, lat.K, CONVENTION.encode().ljust(8, b"\0")))
        fh.write(body.tobytes())


def load_field(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, N, K, conv = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ConfigurationError(f"{path}: not a field file")
    if conv.rstrip(b"\0").decode() != CONVENTION:
        raise ConfigurationError(f"{path}: unsupported norm convention {conv!r}")
    lat = LatticeSpec(N=int(N), K=int(K))
    M = lat.M
    body = np.frombuffer(raw, dtype="<c16", offset=_HEADER.size)
    if body.size != 3 * M**3:
        raise ConfigurationError(f"{path}: truncated coefficient block")
    return SpectralField(lat, np.moveaxis(body.reshape(M, M, M, 3), -1, 0))


def field_to_json(F, threshold=0.0):
    """Debug dump listing modes whose coefficient magnitude exceeds ``threshold``."""
    K = F.lattice.K
    mag = np.abs(F.coeffs).max(axis=0)
    modes = []
    for i, j, l in zip(*np.nonzero(mag > threshold)):
        c = F.coeffs[:, i, j, l]
        modes.append({"k": [int(i - K), int(j - K), int(l - K)], "re": c.real.tolist(), "im": c.imag.tolist()})
    return {"N": F.lattice.N, "K": K, "convention": CONVENTION, "modes": modes}


def field_from_json(doc):
    if doc.get("convention") != CONVENTION:
        raise ConfigurationError("unsupported norm convention in JSON dump")
    lat = LatticeSpec(N=int(doc["N"]), K=int(doc["K"]))
    K = lat.K
    c = np.zeros((3,) + (lat.M,) * 3, dtype=complex)
    for m in doc["modes"]:
        kx, ky, kz = m["k"]
        c[:, kx + K, ky + K, kz + K] = np.asarray(m["re"]) + 1j * np.asarray(m["im"])
    return SpectralField(lat, c)


def dump_field_json(F, path, threshold=0.0):
    with open(path, "w") as fh:
        json.dump(field_to_json(F, threshold), fh)
