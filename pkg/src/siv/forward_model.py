"""Forward model: incompressible Navier-Stokes plus a passive scalar.

The state w = (u, phi) evolves on the 2/3-dealiased Fourier grid with
Adams-Bashforth 2 on the advection terms (forward Euler bootstrap on the
first step) and Crank-Nicolson on the diffusion terms. Pressure is
eliminated by Leray projection, so the velocity stays divergence-free by
construction and the gradient component with respect to pressure vanishes
identically.

The stepping kernel works on stacked half-spectrum arrays (see
spectral_core); the public types carry full SpectralFields.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.fft as sfft

from . import spectral_core as sc

logger = logging.getLogger(__name__)

_AREA = 4.0 * np.pi**2
CFL_ADVISORY = 0.5


@dataclass
class FlowState:
    """Velocity and scalar at one instant; fields dealiased, u solenoidal."""

    ux: Optional[sc.SpectralField]
    uy: Optional[sc.SpectralField]
    phi: sc.SpectralField
    time: float

    def divergence_defect(self) -> float:
        """Spectral max-norm of div u (0.0 for scalar-only states)."""
        if self.ux is None or self.uy is None:
            return 0.0
        div = (
            sc.derivative(self.ux, "x", 1).coeffs
            + sc.derivative(self.uy, "y", 1).coeffs
        )
        return float(np.max(np.abs(div)))


@dataclass
class ControlVector:
    """Initial condition triple (u0x, u0y, phi0); the optimization unknown."""

    u0x: sc.SpectralField
    u0y: sc.SpectralField
    phi0: sc.SpectralField


@dataclass(frozen=True)
class SegmentConfig:
    """One segment of the time axis plus the physical and grid parameters."""

    t0: float
    tau: float
    dt: float
    nu: float
    lam: float
    n: int

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.tau <= 0:
            raise ValueError("tau and dt must be positive")
        steps = self.tau / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) < 1:
            raise ValueError(f"tau/dt = {steps} is not a positive integer")
        if self.nu < 0 or self.lam < 0:
            raise ValueError("nu and lambda must be nonnegative")
        if self.n < 4 or (self.n & (self.n - 1)) != 0:
            raise ValueError(f"grid size must be a power of two >= 4, got {self.n}")

    @property
    def n_steps(self) -> int:
        return round(self.tau / self.dt)


@dataclass
class TendencyCache:
    """Holder for the previous step's advection tendencies (AB2 history)."""

    value: Optional[np.ndarray] = None


@dataclass
class Trajectory:
    """Time-ordered states at spacing dt, stored as stacked half spectra.

    phi_half has shape (n_steps+1, n, n//2+1); ux_half/uy_half likewise, or
    None for scalar-only (measurement) trajectories.
    """

    n: int
    t0: float
    dt: float
    phi_half: np.ndarray
    ux_half: Optional[np.ndarray] = None
    uy_half: Optional[np.ndarray] = None

    @property
    def n_steps(self) -> int:
        return self.phi_half.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.phi_half.shape[0])

    @property
    def scalar_only(self) -> bool:
        return self.ux_half is None

    def state_at(self, m: int) -> FlowState:
        ux = uy = None
        if not self.scalar_only:
            ux = sc.spectral_from_half(self.ux_half[m], self.n)
            uy = sc.spectral_from_half(self.uy_half[m], self.n)
        phi = sc.spectral_from_half(self.phi_half[m], self.n)
        return FlowState(ux, uy, phi, float(self.times[m]))

    @property
    def states(self) -> list:
        return [self.state_at(m) for m in range(self.phi_half.shape[0])]

    def truncated_scalar(self, n_dst: int) -> "Trajectory":
        """Scalar-only copy truncated to a coarser grid."""
        return Trajectory(
            n=n_dst,
            t0=self.t0,
            dt=self.dt,
            phi_half=sc.half_truncate(self.phi_half, self.n, n_dst),
        )


# ---------------------------------------------------------------------------
# Stepping kernel
# ---------------------------------------------------------------------------


class _Workspace:
    """Precomputed per-(n, dt, nu, lam) arrays for the stepping kernel.

    Also owns scratch buffers; integrations are sequential per process, so
    buffer reuse across steps is safe.
    """

    def __init__(self, n: int, dt: float, nu: float, lam: float):
        kx, ky, mask, phase, ksq, inv_ksq, _ = sc._half_grids(n)
        self.n = n
        self.dt = dt
        self.kx = kx
        self.ky = ky
        self.inv_ksq = inv_ksq
        # fused multipliers for the batched transforms: the inverse side
        # carries the phase and n^2 scaling, the derivative rows fold in ik
        self.ph_inv = phase * float(n) ** 2
        self.dx_ph = 1j * kx * self.ph_inv
        self.dy_ph = 1j * ky * self.ph_inv
        self.neg_ph_fwd = -(phase / float(n) ** 2) * mask
        # Crank-Nicolson: (1 + a/2) w_new = (1 - a/2) w + dt * explicit
        au = nu * ksq * dt
        ap = lam * ksq * dt
        self.cn_u = (1.0 - 0.5 * au) / (1.0 + 0.5 * au)
        self.cn_phi = (1.0 - 0.5 * ap) / (1.0 + 0.5 * ap)
        self.exp_u = dt / (1.0 + 0.5 * au)
        self.exp_phi = dt / (1.0 + 0.5 * ap)
        self.exp_u15 = 1.5 * self.exp_u
        self.exp_u05 = 0.5 * self.exp_u
        self.exp_phi15 = 1.5 * self.exp_phi
        self.exp_phi05 = 0.5 * self.exp_phi
        self.cfl_factor = dt * n / (2.0 * np.pi)
        nh = n // 2 + 1
        self.spec8 = np.empty((8, n, nh), dtype=np.complex128)
        self.prod3 = np.empty((3, n, n), dtype=np.float64)


@lru_cache(maxsize=16)
def _workspace(n: int, dt: float, nu: float, lam: float) -> _Workspace:
    return _Workspace(n, dt, nu, lam)


def _workspace_for(cfg: SegmentConfig) -> _Workspace:
    return _workspace(cfg.n, cfg.dt, cfg.nu, cfg.lam)


def _advection(w: np.ndarray, ws: _Workspace, out: np.ndarray) -> float:
    """Dealiased advection tendencies (-u.grad u projected, -u.grad phi).

    w is the stacked state (3, n, n//2+1): ux, uy, phi. Tendencies are
    written into out; returns max|u| for the CFL advisory.
    """
    n = ws.n
    spec = ws.spec8
    np.multiply(w[0], ws.ph_inv, out=spec[0])
    np.multiply(w[1], ws.ph_inv, out=spec[1])
    np.multiply(w[0], ws.dx_ph, out=spec[2])
    np.multiply(w[0], ws.dy_ph, out=spec[3])
    np.multiply(w[1], ws.dx_ph, out=spec[4])
    np.multiply(w[1], ws.dy_ph, out=spec[5])
    np.multiply(w[2], ws.dx_ph, out=spec[6])
    np.multiply(w[2], ws.dy_ph, out=spec[7])
    phys = sfft.irfft2(spec, s=(n, n), axes=(-2, -1))
    u, v = phys[0], phys[1]
    prod = ws.prod3
    prod[0] = u * phys[2] + v * phys[3]
    prod[1] = u * phys[4] + v * phys[5]
    prod[2] = u * phys[6] + v * phys[7]
    np.multiply(sfft.rfft2(prod, axes=(-2, -1)), ws.neg_ph_fwd, out=out)
    div = (ws.kx * out[0] + ws.ky * out[1]) * ws.inv_ksq
    out[0] -= ws.kx * div
    out[1] -= ws.ky * div
    return max(float(np.max(np.abs(u))), float(np.max(np.abs(v))))


def _step(w: np.ndarray, prev: Optional[np.ndarray], ws: _Workspace,
          out_w: np.ndarray, out_tend: np.ndarray) -> float:
    """One AB2/CN step into (out_w, out_tend); returns max|u|.

    Overflow is silenced here because the caller checks finiteness and
    aborts (or reports an infinite cost) right after.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        umax = _advection(w, ws, out_tend)
        if prev is None:
            out_w[0] = ws.cn_u * w[0] + ws.exp_u * out_tend[0]
            out_w[1] = ws.cn_u * w[1] + ws.exp_u * out_tend[1]
            out_w[2] = ws.cn_phi * w[2] + ws.exp_phi * out_tend[2]
        else:
            out_w[0] = ws.cn_u * w[0] + ws.exp_u15 * out_tend[0] - ws.exp_u05 * prev[0]
            out_w[1] = ws.cn_u * w[1] + ws.exp_u15 * out_tend[1] - ws.exp_u05 * prev[1]
            out_w[2] = ws.cn_phi * w[2] + ws.exp_phi15 * out_tend[2] - ws.exp_phi05 * prev[2]
    return umax


def _sanitize_half(w: np.ndarray, n: int) -> np.ndarray:
    """Dealias a stacked (3, n, n//2+1) control in place and project u."""
    kx, ky, mask, _, _, inv_ksq, _ = sc._half_grids(n)
    w *= mask
    div = (kx * w[0] + ky * w[1]) * inv_ksq
    w[0] -= kx * div
    w[1] -= ky * div
    return w


def _control_half(control: ControlVector, n: int) -> np.ndarray:
    """Stack a control as dealiased, projected half-spectrum arrays."""
    w = np.empty((3, n, n // 2 + 1), dtype=np.complex128)
    w[0] = sc.half_from_spectral(control.u0x)
    w[1] = sc.half_from_spectral(control.u0y)
    w[2] = sc.half_from_spectral(control.phi0)
    return _sanitize_half(w, n)


class NonFiniteStateError(RuntimeError):
    """The integration produced NaN or inf."""


def step(state: FlowState, prev_advection: TendencyCache, cfg: SegmentConfig) -> FlowState:
    """Advance one dt; prev_advection is read and updated in place."""
    ws = _workspace_for(cfg)
    n = cfg.n
    w = np.empty((3, n, n // 2 + 1), dtype=np.complex128)
    w[0] = sc.half_from_spectral(state.ux)
    w[1] = sc.half_from_spectral(state.uy)
    w[2] = sc.half_from_spectral(state.phi)
    w *= sc._half_grids(n)[2]
    w_new = np.empty_like(w)
    tend = np.empty_like(w)
    umax = _step(w, prev_advection.value, ws, w_new, tend)
    prev_advection.value = tend
    if umax * ws.cfl_factor > CFL_ADVISORY:
        logger.warning(
            "CFL advisory at t=%.6g: max|u| dt n / (2 pi) = %.3g > %.2g",
            state.time, umax * ws.cfl_factor, CFL_ADVISORY,
        )
    return FlowState(
        ux=sc.spectral_from_half(w_new[0], n),
        uy=sc.spectral_from_half(w_new[1], n),
        phi=sc.spectral_from_half(w_new[2], n),
        time=state.time + cfg.dt,
    )


def _integrate(w0: np.ndarray, cfg: SegmentConfig, sink=None):
    """Shared integration loop; sink(m, w) is called at every stored index.

    The state and tendency buffers rotate, so sink must copy what it keeps.
    """
    ws = _workspace_for(cfg)
    steps = cfg.n_steps
    cur = w0
    nxt = np.empty_like(cur)
    tends = (np.empty_like(cur), np.empty_like(cur))
    prev = None
    slot = 0
    cfl_reported = False
    if sink is not None:
        sink(0, cur)
    for m in range(steps):
        umax = _step(cur, prev, ws, nxt, tends[slot])
        prev = tends[slot]
        slot = 1 - slot
        cur, nxt = nxt, cur
        if not np.isfinite(umax) or not np.all(np.isfinite(cur.view(np.float64))):
            raise NonFiniteStateError(
                f"non-finite state at t={cfg.t0 + (m + 1) * cfg.dt:.6g} "
                f"(segment t0={cfg.t0:.6g}); integration aborted"
            )
        if not cfl_reported and umax * ws.cfl_factor > CFL_ADVISORY:
            logger.warning(
                "CFL advisory at t=%.6g: max|u| dt n / (2 pi) = %.3g > %.2g",
                cfg.t0 + m * cfg.dt, umax * ws.cfl_factor, CFL_ADVISORY,
            )
            cfl_reported = True
        if sink is not None:
            sink(m + 1, cur)
    return cur


def run_forward(control: ControlVector, cfg: SegmentConfig) -> Trajectory:
    """Integrate the control over the segment, storing every step."""
    n = cfg.n
    steps = cfg.n_steps
    nh = n // 2 + 1
    traj = Trajectory(
        n=n,
        t0=cfg.t0,
        dt=cfg.dt,
        phi_half=np.empty((steps + 1, n, nh), dtype=np.complex128),
        ux_half=np.empty((steps + 1, n, nh), dtype=np.complex128),
        uy_half=np.empty((steps + 1, n, nh), dtype=np.complex128),
    )

    def sink(m, w):
        traj.ux_half[m] = w[0]
        traj.uy_half[m] = w[1]
        traj.phi_half[m] = w[2]

    _integrate(_control_half(control, n), cfg, sink)
    return traj


def run_forward_cost(control: ControlVector, cfg: SegmentConfig, measurement: Trajectory) -> float:
    """Cost of the control against a measurement without storing states.

    Returns inf when the trajectory leaves the finite range (trial controls
    in a line search may do that); matches cost(run_forward(...), m) else.
    """
    return _run_cost_half(_control_half(control, cfg.n), cfg, measurement)


def _run_cost_half(w: np.ndarray, cfg: SegmentConfig, measurement: Trajectory) -> float:
    """Streamed cost for a sanitized stacked control; w is consumed."""
    _check_measurement(cfg, measurement)
    n = cfg.n
    steps = cfg.n_steps
    meas = measurement.phi_half
    acc = 0.0

    def sink(m, w_):
        nonlocal acc
        weight = 0.25 if m in (0, steps) else 0.5
        acc += weight * float(sc.half_norm_sq(w_[2] - meas[m], n))

    try:
        _integrate(w, cfg, sink)
    except NonFiniteStateError:
        return float("inf")
    return acc * cfg.dt


def _check_measurement(cfg: SegmentConfig, measurement: Trajectory) -> None:
    if measurement.n != cfg.n:
        raise ValueError(f"measurement grid {measurement.n} != config grid {cfg.n}")
    if measurement.n_steps != cfg.n_steps:
        raise ValueError(
            f"measurement has {measurement.n_steps} steps, config wants {cfg.n_steps}"
        )
    if abs(measurement.t0 - cfg.t0) > 1e-9 or abs(measurement.dt - cfg.dt) > 1e-12:
        raise ValueError("measurement time grid does not match the segment")


def cost(traj: Trajectory, measurement: Trajectory) -> float:
    """J = 1/2 integral of ||phi - psi||^2 dt, trapezoidal in time."""
    if traj.n != measurement.n:
        raise ValueError(f"grid mismatch: {traj.n} vs {measurement.n}")
    if traj.phi_half.shape != measurement.phi_half.shape:
        raise ValueError("trajectory lengths differ")
    if abs(traj.t0 - measurement.t0) > 1e-9 or abs(traj.dt - measurement.dt) > 1e-12:
        raise ValueError("time grids differ")
    err = sc.half_norm_sq(traj.phi_half - measurement.phi_half, traj.n)
    weights = np.ones(len(err))
    weights[0] = weights[-1] = 0.5
    return float(0.5 * traj.dt * np.dot(weights, err))


# ---------------------------------------------------------------------------
# Trajectory persistence: one SIV2 snapshot per step plus a manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"


def write_trajectory(directory, traj: Trajectory, nu: float, lam: float) -> None:
    """Write snapshots step_NNNNNN.siv2 plus a key=value manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    count = traj.phi_half.shape[0]
    times = traj.times
    for m in range(count):
        comps = []
        if not traj.scalar_only:
            comps.append(sc.values_from_half(traj.ux_half[m], traj.n))
            comps.append(sc.values_from_half(traj.uy_half[m], traj.n))
        comps.append(sc.values_from_half(traj.phi_half[m], traj.n))
        sc.write_snapshot(d / f"step_{m:06d}.siv2", float(times[m]), comps)
    tau = traj.dt * (count - 1)
    manifest = (
        f"n={traj.n}\n"
        f"dt={traj.dt!r}\n"
        f"t0={traj.t0!r}\n"
        f"tau={tau!r}\n"
        f"nu={nu!r}\n"
        f"lambda={lam!r}\n"
        f"count={count}\n"
    )
    (d / MANIFEST_NAME).write_text(manifest)


def read_manifest(directory) -> dict:
    out = {}
    for line in (Path(directory) / MANIFEST_NAME).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def read_trajectory(directory):
    """Read a trajectory directory; returns (Trajectory, manifest dict)."""
    d = Path(directory)
    man = read_manifest(d)
    n = int(man["n"])
    count = int(man["count"])
    nh = n // 2 + 1
    phi = np.empty((count, n, nh), dtype=np.complex128)
    ux = uy = None
    for m in range(count):
        _, comps = sc.read_snapshot(d / f"step_{m:06d}.siv2")
        if len(comps) == 3:
            if ux is None:
                ux = np.empty((count, n, nh), dtype=np.complex128)
                uy = np.empty((count, n, nh), dtype=np.complex128)
            ux[m] = sc.half_from_values(comps[0].values, n)
            uy[m] = sc.half_from_values(comps[1].values, n)
            phi[m] = sc.half_from_values(comps[2].values, n)
        else:
            phi[m] = sc.half_from_values(comps[0].values, n)
    traj = Trajectory(
        n=n, t0=float(man["t0"]), dt=float(man["dt"]),
        phi_half=phi, ux_half=ux, uy_half=uy,
    )
    return traj, man
