"""Fourier field algebra on the bi-periodic square (-pi, pi)^2.

Fields live on an n x n collocation grid with nodes x_i = -pi + 2*pi*i/n and
are represented either in physical space (real values) or in spectral space
(complex coefficients of exp(i*k.x), indexed in FFT order). The forward
transform divides by n^2 so the (0,0) coefficient equals the field mean and
norms are grid-size independent.

Hot paths elsewhere in the package work on the half-spectrum (rfft) layout of
real fields; the private helpers at the bottom provide that layout with the
same normalization. Public types always carry the full square of coefficients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft as sfft

DOMAIN_LENGTH = 2.0 * np.pi
_AREA = DOMAIN_LENGTH**2

SNAPSHOT_MAGIC = b"SIV2"
_HEADER = struct.Struct("<4sIId")


def _require_power_of_two(n: int) -> None:
    if n < 4 or (n & (n - 1)) != 0:
        raise ValueError(f"grid size must be a power of two >= 4, got {n}")


@lru_cache(maxsize=None)
def _full_grids(n: int):
    """FFT-order wavenumbers, dealias mask, and phase for the full layout."""
    k = np.fft.fftfreq(n, d=1.0 / n)  # 0, 1, ..., n/2-1, -n/2, ..., -1
    kx = k[:, None]
    ky = k[None, :]
    cutoff = n // 3
    dealias = (np.abs(kx) <= cutoff) & (np.abs(ky) <= cutoff)
    # (-1)^(kx+ky) relates raw FFT output on the [-pi,pi) grid to true
    # coefficients of exp(i k.x); n even makes (-1)^k == (-1)^index.
    sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    phase = sign[:, None] * sign[None, :]
    ksq = kx**2 + ky**2
    inv_ksq = np.zeros_like(ksq)
    np.divide(1.0, ksq, out=inv_ksq, where=ksq > 0)
    return kx, ky, dealias, phase, ksq, inv_ksq


@lru_cache(maxsize=None)
def _half_grids(n: int):
    """Wavenumbers, dealias mask, phase, and Parseval weights, rfft layout."""
    kx = np.fft.fftfreq(n, d=1.0 / n)[:, None]
    ky = np.arange(n // 2 + 1, dtype=float)[None, :]
    ky[0, -1] = -(n // 2)  # match the fftfreq sign convention at Nyquist
    cutoff = n // 3
    dealias = (np.abs(kx) <= cutoff) & (np.abs(ky) <= cutoff)
    sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    phase = sign[:, None] * sign[None, : n // 2 + 1]
    ksq = kx**2 + ky**2
    inv_ksq = np.zeros_like(ksq)
    np.divide(1.0, ksq, out=inv_ksq, where=ksq > 0)
    # ky columns 0 and n/2 appear once in the half layout, the rest stand in
    # for a conjugate pair.
    weights = np.full(n // 2 + 1, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    return kx, ky, dealias, phase, ksq, inv_ksq, weights


@dataclass
class SpectralField:
    """Spectral representation of a real scalar field.

    coeffs[r, c] is the coefficient of exp(i*(kx*x + ky*y)) with kx, ky the
    FFT-order frequencies of indices r, c (so wavenumbers run over
    [-n/2, n/2) on each axis). Real fields satisfy coeff(-k) == conj(coeff(k)).
    """

    n: int
    coeffs: np.ndarray
    domain_length: float = DOMAIN_LENGTH

    def __post_init__(self) -> None:
        _require_power_of_two(self.n)
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if self.coeffs.shape != (self.n, self.n):
            raise ValueError(
                f"coeffs shape {self.coeffs.shape} does not match n={self.n}"
            )

    def coeff(self, kx: int, ky: int) -> complex:
        """Coefficient of exp(i*(kx*x + ky*y)) for integer wavenumbers."""
        half = self.n // 2
        if not (-half <= kx < half and -half <= ky < half):
            raise ValueError(f"wavenumber ({kx},{ky}) outside [-{half},{half})")
        return complex(self.coeffs[kx % self.n, ky % self.n])

    def copy(self) -> "SpectralField":
        return SpectralField(self.n, self.coeffs.copy())

    def hermitian_defect(self) -> float:
        """Max-norm deviation from coeff(-k) == conj(coeff(k))."""
        mirrored = np.conj(_mirror(self.coeffs))
        return float(np.max(np.abs(self.coeffs - mirrored)))


@dataclass
class PhysicalField:
    """Collocation values of a real field, values[i, j] = f(x_i, y_j)."""

    n: int
    values: np.ndarray

    def __post_init__(self) -> None:
        _require_power_of_two(self.n)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n, self.n):
            raise ValueError(
                f"values shape {self.values.shape} does not match n={self.n}"
            )


def _mirror(coeffs: np.ndarray) -> np.ndarray:
    """Index map k -> -k (mod n) on both axes."""
    n = coeffs.shape[-1]
    idx = np.r_[0, np.arange(n - 1, 0, -1)]
    return coeffs[..., idx, :][..., :, idx]


def transform(phys: PhysicalField) -> SpectralField:
    """Forward transform; coeff(0,0) equals the field mean."""
    _, _, _, phase, _, _ = _full_grids(phys.n)
    coeffs = sfft.fft2(phys.values) * (phase / phys.n**2)
    return SpectralField(phys.n, coeffs)


def inverse_transform(spec: SpectralField) -> PhysicalField:
    """Inverse of transform; imaginary residue of the ifft is discarded."""
    _, _, _, phase, _, _ = _full_grids(spec.n)
    values = sfft.ifft2(spec.coeffs * phase).real * spec.n**2
    return PhysicalField(spec.n, values)


def grid_nodes(n: int) -> np.ndarray:
    """1D node coordinates x_i = -pi + 2*pi*i/n (same on both axes)."""
    _require_power_of_two(n)
    return -np.pi + DOMAIN_LENGTH * np.arange(n) / n


_AXES = {"x": 0, "y": 1, 0: 0, 1: 1}


def derivative(spec: SpectralField, axis, order: int = 1) -> SpectralField:
    """Spectral derivative d^order/d(axis)^order.

    The Nyquist mode is zeroed for odd orders (its derivative has no
    consistent sign on the real grid).
    """
    if order < 1:
        raise ValueError(f"derivative order must be >= 1, got {order}")
    ax = _AXES.get(axis)
    if ax is None:
        raise ValueError(f"axis must be 'x', 'y', 0 or 1, got {axis!r}")
    kx, ky, _, _, _, _ = _full_grids(spec.n)
    k = kx if ax == 0 else ky
    mult = (1j * k) ** order
    if order % 2 == 1:
        nyq = np.abs(k) == spec.n // 2
        mult = np.where(nyq, 0.0, mult)
    return SpectralField(spec.n, spec.coeffs * mult)


def leray_project(ux: SpectralField, uy: SpectralField):
    """Remove the gradient part: u(k) <- u(k) - k (k.u(k)) / |k|^2, k != 0."""
    if ux.n != uy.n:
        raise ValueError(f"grid mismatch: {ux.n} vs {uy.n}")
    kx, ky, _, _, _, inv_ksq = _full_grids(ux.n)
    div = (kx * ux.coeffs + ky * uy.coeffs) * inv_ksq
    return (
        SpectralField(ux.n, ux.coeffs - kx * div),
        SpectralField(uy.n, uy.coeffs - ky * div),
    )


def dealias(spec: SpectralField) -> SpectralField:
    """Zero all modes with |kx| or |ky| above n/3 (2/3 rule)."""
    _, _, mask, _, _, _ = _full_grids(spec.n)
    return SpectralField(spec.n, spec.coeffs * mask)


def truncate(spec: SpectralField, n_dst: int) -> SpectralField:
    """Spectral truncation to a coarser grid.

    Modes with |kx|, |ky| < n_dst/2 are copied; everything else (including
    the destination Nyquist line) is discarded.
    """
    _require_power_of_two(n_dst)
    if n_dst > spec.n:
        raise ValueError(f"cannot truncate {spec.n} up to {n_dst}")
    if n_dst == spec.n:
        out = spec.coeffs.copy()
        half = n_dst // 2
        out[half, :] = 0.0
        out[:, half] = 0.0
        return SpectralField(n_dst, out)
    half = n_dst // 2
    src, dst = spec.coeffs, np.zeros((n_dst, n_dst), dtype=np.complex128)
    dst[:half, :half] = src[:half, :half]
    dst[:half, half + 1 :] = src[:half, spec.n - half + 1 :]
    dst[half + 1 :, :half] = src[spec.n - half + 1 :, :half]
    dst[half + 1 :, half + 1 :] = src[spec.n - half + 1 :, spec.n - half + 1 :]
    return SpectralField(n_dst, dst)


def inner_product(f: SpectralField, g: SpectralField) -> float:
    """L2 inner product over the domain, via Parseval."""
    if f.n != g.n:
        raise ValueError(f"grid mismatch: {f.n} vs {g.n}")
    return float(_AREA * np.sum(f.coeffs * np.conj(g.coeffs)).real)


def l2_norm(f: SpectralField) -> float:
    return float(np.sqrt(_AREA * np.sum(np.abs(f.coeffs) ** 2)))


# ---------------------------------------------------------------------------
# SIV2 snapshot format
# ---------------------------------------------------------------------------
# magic "SIV2", little-endian u32 grid size, u32 component count, f64 time,
# then each component as n*n row-major f64 physical values.


def write_snapshot(path, time: float, components) -> None:
    """Write physical fields to one SIV2 snapshot file."""
    comps = [c.values if isinstance(c, PhysicalField) else np.asarray(c) for c in components]
    if not comps:
        raise ValueError("snapshot needs at least one component")
    n = comps[0].shape[0]
    _require_power_of_two(n)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, n, len(comps), float(time)))
        for c in comps:
            if c.shape != (n, n):
                raise ValueError(f"component shape {c.shape} does not match n={n}")
            fh.write(np.ascontiguousarray(c, dtype="<f8").tobytes())


def read_snapshot(path):
    """Read one SIV2 file; returns (time, list of PhysicalField)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated SIV2 header")
    magic, n, count, time = _HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    need = _HEADER.size + count * n * n * 8
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    out = []
    off = _HEADER.size
    for _ in range(count):
        vals = np.frombuffer(raw, dtype="<f8", count=n * n, offset=off)
        out.append(PhysicalField(n, vals.reshape(n, n).astype(np.float64)))
        off += n * n * 8
    return time, out


# ---------------------------------------------------------------------------
# Half-spectrum (rfft layout) helpers for the hot paths
# ---------------------------------------------------------------------------
# Layout: complex array (..., n, n//2+1); entry [r, c] is the coefficient of
# exp(i(kx x + ky y)) with kx the FFT-order frequency of row r and ky = c.
# Same mean normalization as SpectralField. Lossless for real fields.


def half_from_values(values: np.ndarray, n: int) -> np.ndarray:
    """rfft of physical values (last two axes), true-coefficient normalized."""
    phase = _half_grids(n)[3]
    return sfft.rfft2(values, axes=(-2, -1)) * (phase / n**2)


def values_from_half(half: np.ndarray, n: int) -> np.ndarray:
    """Inverse of half_from_values."""
    phase = _half_grids(n)[3]
    return sfft.irfft2(half * (phase * n**2), s=(n, n), axes=(-2, -1))


def half_from_spectral(spec: SpectralField) -> np.ndarray:
    return spec.coeffs[:, : spec.n // 2 + 1].copy()


def spectral_from_half(half: np.ndarray, n: int) -> SpectralField:
    full = np.empty((n, n), dtype=np.complex128)
    nh = n // 2 + 1
    full[:, :nh] = half
    full[:, nh:] = np.conj(_mirror_rows(half[:, 1 : n // 2]))[:, ::-1]
    return SpectralField(n, full)


def _mirror_rows(a: np.ndarray) -> np.ndarray:
    n = a.shape[-2]
    idx = np.r_[0, np.arange(n - 1, 0, -1)]
    return a[..., idx, :]


def half_norm_sq(half: np.ndarray, n: int) -> np.ndarray:
    """Squared L2 norm(s) from half-spectrum coefficients.

    Accepts stacked arrays; reduces over the trailing two axes.
    """
    w = _half_grids(n)[6]
    return _AREA * np.sum((half.real**2 + half.imag**2) * w, axis=(-2, -1))


def half_inner(f: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    """L2 inner product(s) from half-spectrum coefficients."""
    w = _half_grids(n)[6]
    return _AREA * np.sum((f * np.conj(g)).real * w, axis=(-2, -1))


def half_truncate(half: np.ndarray, n_src: int, n_dst: int) -> np.ndarray:
    """Spectral truncation in the half layout (stacked arrays allowed)."""
    _require_power_of_two(n_dst)
    if n_dst > n_src:
        raise ValueError(f"cannot truncate {n_src} up to {n_dst}")
    half_n = n_dst // 2
    shape = half.shape[:-2] + (n_dst, n_dst // 2 + 1)
    dst = np.zeros(shape, dtype=np.complex128)
    dst[..., :half_n, :half_n] = half[..., :half_n, :half_n]
    dst[..., half_n + 1 :, :half_n] = half[..., n_src - half_n + 1 :, :half_n]
    return dst


def half_leray(ux: np.ndarray, uy: np.ndarray, n: int):
    """Leray projection in the half layout."""
    kx, ky, _, _, _, inv_ksq, _ = _half_grids(n)
    div = (kx * ux + ky * uy) * inv_ksq
    return ux - kx * div, uy - ky * div
