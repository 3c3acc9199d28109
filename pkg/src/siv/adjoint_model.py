"""Adjoint model: backward sweep and cost gradient.

The continuous adjoint system is discretized with the same AB2/CN scheme as
the forward model, integrated in the reversed time s = t1 - t (which turns
the negative diffusion coefficients into ordinary stable diffusion):

    ds a_u   = P[ u . (grad a_u + grad a_u^T) + phi grad a_phi ] + nu lap a_u
    ds a_phi = u . grad a_phi + lam lap a_phi + (psi - phi)

with a_u = a_phi = 0 at s = 0 (i.e. t = t1). The cost gradient with respect
to the control is (-a_u, -a_phi) evaluated at t0. The forward velocity u,
scalar phi, and measurement psi are read from stored trajectories on the
same dt grid, so no interpolation is involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.fft as sfft

from . import forward_model as fm
from . import spectral_core as sc


@dataclass
class AdjointState:
    """Adjoint velocity (solenoidal, dealiased) and adjoint scalar."""

    ahx: sc.SpectralField
    ahy: sc.SpectralField
    aphi: sc.SpectralField
    time: float


@dataclass
class Gradient:
    """Cost gradient with respect to the control (velocity part solenoidal)."""

    gux: sc.SpectralField
    guy: sc.SpectralField
    gphi: sc.SpectralField


class _AdjointWorkspace:
    """Scratch buffers for the adjoint sweep, on top of the forward tables."""

    def __init__(self, fwd_ws: fm._Workspace):
        self.fw = fwd_ws
        n = fwd_ws.n
        nh = n // 2 + 1
        self.pos_ph_fwd = -fwd_ws.neg_ph_fwd
        self.spec6 = np.empty((6, n, nh), dtype=np.complex128)
        self.prod3 = np.empty((3, n, n), dtype=np.float64)


@lru_cache(maxsize=16)
def _adjoint_workspace(n: int, dt: float, nu: float, lam: float) -> _AdjointWorkspace:
    return _AdjointWorkspace(fm._workspace(n, dt, nu, lam))


def _tendencies(a: np.ndarray, fwd_phys: np.ndarray, src: Optional[np.ndarray],
                aws: _AdjointWorkspace, out: np.ndarray) -> None:
    """Non-diffusive adjoint tendencies in reversed time, written into out.

    a: stacked adjoint state (3, n, nh). fwd_phys: physical (u, v, phi) at
    the same instant, shape (3, n, n). src: spectral (psi - phi), or None.
    """
    ws = aws.fw
    n = ws.n
    d = aws.spec6
    np.multiply(a[0], ws.dx_ph, out=d[0])  # d(a_ux)/dx
    np.multiply(a[0], ws.dy_ph, out=d[1])  # d(a_ux)/dy
    np.multiply(a[1], ws.dx_ph, out=d[2])  # d(a_uy)/dx
    np.multiply(a[1], ws.dy_ph, out=d[3])  # d(a_uy)/dy
    np.multiply(a[2], ws.dx_ph, out=d[4])  # d(a_phi)/dx
    np.multiply(a[2], ws.dy_ph, out=d[5])  # d(a_phi)/dy
    ph = sfft.irfft2(d, s=(n, n), axes=(-2, -1))
    u, v, phi = fwd_phys[0], fwd_phys[1], fwd_phys[2]
    prod = aws.prod3
    # u.(grad a_u + grad a_u^T) has components
    #   x: 2 u dx(a_ux) + v (dy(a_ux) + dx(a_uy))
    #   y: u (dy(a_ux) + dx(a_uy)) + 2 v dy(a_uy)
    cross = ph[1] + ph[2]
    prod[0] = 2.0 * (u * ph[0]) + v * cross + phi * ph[4]
    prod[1] = u * cross + 2.0 * (v * ph[3]) + phi * ph[5]
    prod[2] = u * ph[4] + v * ph[5]
    np.multiply(sfft.rfft2(prod, axes=(-2, -1)), aws.pos_ph_fwd, out=out)
    div = (ws.kx * out[0] + ws.ky * out[1]) * ws.inv_ksq
    out[0] -= ws.kx * div
    out[1] -= ws.ky * div
    if src is not None:
        out[2] += src


def _astep(a: np.ndarray, prev: Optional[np.ndarray], fwd_phys: np.ndarray,
           src: np.ndarray, aws: _AdjointWorkspace,
           out_a: np.ndarray, out_tend: np.ndarray) -> None:
    """One AB2/CN step of the adjoint sweep into (out_a, out_tend)."""
    ws = aws.fw
    with np.errstate(over="ignore", invalid="ignore"):
        _tendencies(a, fwd_phys, src, aws, out_tend)
        if prev is None:
            out_a[0] = ws.cn_u * a[0] + ws.exp_u * out_tend[0]
            out_a[1] = ws.cn_u * a[1] + ws.exp_u * out_tend[1]
            out_a[2] = ws.cn_phi * a[2] + ws.exp_phi * out_tend[2]
        else:
            out_a[0] = ws.cn_u * a[0] + ws.exp_u15 * out_tend[0] - ws.exp_u05 * prev[0]
            out_a[1] = ws.cn_u * a[1] + ws.exp_u15 * out_tend[1] - ws.exp_u05 * prev[1]
            out_a[2] = ws.cn_phi * a[2] + ws.exp_phi15 * out_tend[2] - ws.exp_phi05 * prev[2]


def _forward_physical(traj: fm.Trajectory) -> np.ndarray:
    """All forward states in physical space, shape (3, M+1, n, n)."""
    n = traj.n
    stack = np.stack([traj.ux_half, traj.uy_half, traj.phi_half])
    with np.errstate(over="ignore", invalid="ignore"):
        return sc.values_from_half(stack, n)


def _adjoint_sweep(traj: fm.Trajectory, measurement: fm.Trajectory,
                   cfg: fm.SegmentConfig, sink=None) -> np.ndarray:
    """Backward sweep from t1 to t0; returns the stacked adjoint at t0.

    sink(m, a) is called with the adjoint after m backward steps (m=0 is the
    terminal condition at t1); buffers rotate, so sink must copy.
    """
    if traj.scalar_only:
        raise ValueError("adjoint sweep needs a velocity-bearing trajectory")
    fm._check_measurement(cfg, measurement)
    if traj.n != cfg.n or traj.n_steps != cfg.n_steps:
        raise ValueError("trajectory does not match the segment config")
    if abs(traj.t0 - cfg.t0) > 1e-9 or abs(traj.dt - cfg.dt) > 1e-12:
        raise ValueError("trajectory time grid does not match the segment")
    aws = _adjoint_workspace(cfg.n, cfg.dt, cfg.nu, cfg.lam)
    steps = cfg.n_steps
    phys = _forward_physical(traj)
    with np.errstate(invalid="ignore"):
        src_all = (measurement.phi_half - traj.phi_half) * sc._half_grids(cfg.n)[2]
    nh = cfg.n // 2 + 1
    cur = np.zeros((3, cfg.n, nh), dtype=np.complex128)
    nxt = np.empty_like(cur)
    tends = (np.empty_like(cur), np.empty_like(cur))
    prev = None
    slot = 0
    if sink is not None:
        sink(0, cur)
    for m in range(steps):
        idx = steps - m
        _astep(cur, prev, phys[:, idx], src_all[idx], aws, nxt, tends[slot])
        prev = tends[slot]
        slot = 1 - slot
        cur, nxt = nxt, cur
        if not np.all(np.isfinite(cur.view(np.float64))):
            raise fm.NonFiniteStateError(
                f"non-finite adjoint state at backward step {m + 1} "
                f"(segment t0={cfg.t0:.6g}); sweep aborted"
            )
        if sink is not None:
            sink(m + 1, cur)
    return cur


def adjoint_rhs(adj: AdjointState, fwd: fm.FlowState, psi: sc.SpectralField):
    """Non-diffusive backward tendencies at one instant.

    Returns (t_ahx, t_ahy, t_aphi) as SpectralFields: the Leray-projected
    transport and scalar-forcing terms for the adjoint velocity, and the
    transport plus (psi - phi) source for the adjoint scalar.
    """
    if abs(adj.time - fwd.time) > 1e-9:
        raise ValueError(
            f"time stamp mismatch: adjoint at {adj.time}, forward at {fwd.time}"
        )
    n = adj.ahx.n
    aws = _adjoint_workspace(n, 1.0, 0.0, 0.0)  # dt, nu, lam unused by _tendencies
    mask = sc._half_grids(n)[2]
    a = np.stack([
        sc.half_from_spectral(adj.ahx) * mask,
        sc.half_from_spectral(adj.ahy) * mask,
        sc.half_from_spectral(adj.aphi) * mask,
    ])
    fwd_stack = np.stack([
        sc.half_from_spectral(fwd.ux) * mask,
        sc.half_from_spectral(fwd.uy) * mask,
        sc.half_from_spectral(fwd.phi) * mask,
    ])
    phys = sc.values_from_half(fwd_stack, n)
    src = (sc.half_from_spectral(psi) - fwd_stack[2]) * mask
    out = np.empty_like(a)
    _tendencies(a, phys, src, aws, out)
    return (
        sc.spectral_from_half(out[0], n),
        sc.spectral_from_half(out[1], n),
        sc.spectral_from_half(out[2], n),
    )


def run_adjoint(traj: fm.Trajectory, measurement: fm.Trajectory,
                cfg: fm.SegmentConfig) -> AdjointState:
    """Integrate the adjoint system backward; returns the state at t0."""
    a0 = _adjoint_sweep(traj, measurement, cfg)
    n = cfg.n
    return AdjointState(
        ahx=sc.spectral_from_half(a0[0], n),
        ahy=sc.spectral_from_half(a0[1], n),
        aphi=sc.spectral_from_half(a0[2], n),
        time=cfg.t0,
    )


def _gradient_half(control_half: np.ndarray, cfg: fm.SegmentConfig,
                   measurement: fm.Trajectory):
    """(stacked gradient at t0, cost) for a stacked half-spectrum control.

    The control must already be dealiased with a solenoidal velocity part
    (callers sanitize exactly once so repeated projection rounding does not
    perturb trajectories).
    """
    n = cfg.n
    steps = cfg.n_steps
    nh = n // 2 + 1
    traj = fm.Trajectory(
        n=n, t0=cfg.t0, dt=cfg.dt,
        phi_half=np.empty((steps + 1, n, nh), dtype=np.complex128),
        ux_half=np.empty((steps + 1, n, nh), dtype=np.complex128),
        uy_half=np.empty((steps + 1, n, nh), dtype=np.complex128),
    )

    def sink(m, w):
        traj.ux_half[m] = w[0]
        traj.uy_half[m] = w[1]
        traj.phi_half[m] = w[2]

    fm._integrate(control_half.copy(), cfg, sink)
    cost_value = fm.cost(traj, measurement)
    a0 = _adjoint_sweep(traj, measurement, cfg)
    g = fm._sanitize_half(-a0, n)
    return g, cost_value


def gradient(control: fm.ControlVector, cfg: fm.SegmentConfig,
             measurement: fm.Trajectory):
    """Run forward then adjoint; returns (Gradient, cost)."""
    n = cfg.n
    g, cost_value = _gradient_half(fm._control_half(control, n), cfg, measurement)
    grad = Gradient(
        gux=sc.spectral_from_half(g[0], n),
        guy=sc.spectral_from_half(g[1], n),
        gphi=sc.spectral_from_half(g[2], n),
    )
    return grad, cost_value
