"""Constructive local recovery of the stream function and velocity.

From three consecutive scalar snapshots psi the stream function Theta of the
advecting velocity obeys a first-order transport equation in x,

    dTheta/dx + beta dTheta/dy = f,
    beta = -(dpsi/dx) / (dpsi/dy),
    f    = -zeta / (dpsi/dy),      zeta = -dpsi/dt + lam lap(psi),

valid wherever |dpsi/dy| stays above a floor. Given reference Theta values
on a vertical line x = x_sigma, the equation is integrated along backward
characteristics inside a cone of determinacy, the velocity is recovered as
u = (dTheta/dy, -dTheta/dx), and empirical Lipschitz stability ratios are
measured by rerunning the pipeline on perturbed scalars.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from . import spectral_core as sc

CONE_EDGE_TOL = 1e-9
MAX_FLAGGED_FRACTION = 0.01


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle of grid nodes, closed on all sides."""

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    def __post_init__(self):
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi):
            raise ValueError(f"degenerate rectangle {self}")


class RegionRejected(ValueError):
    """The requested region violates the |dpsi/dy| floor.

    Carries the largest admissible sub-rectangle found (or None) in
    .suggestion so callers can retry.
    """

    def __init__(self, message: str, suggestion: Optional[Rect]):
        super().__init__(message)
        self.suggestion = suggestion


@dataclass
class TransportProblem:
    """Sampled transport-equation data on a rectangle at one instant.

    x_nodes[0] is the reference line x_sigma carrying boundary_theta.
    dpsi_dy is kept for admissibility checks; epsilon_floor is the |dpsi/dy|
    bound the rectangle was validated against.
    """

    x_nodes: np.ndarray
    y_nodes: np.ndarray
    beta: np.ndarray
    f: np.ndarray
    boundary_theta: np.ndarray
    dpsi_dy: np.ndarray
    epsilon_floor: float
    time: float = 0.0

    @property
    def line_x(self) -> float:
        return float(self.x_nodes[0])


@dataclass(frozen=True)
class ConeRegion:
    """Cone of determinacy: x in [x_lo, x_lo+delta), |y-y0| < R(delta-(x-x_lo))."""

    x_lo: float
    y0: float
    R: float
    delta: float

    def __post_init__(self):
        if self.R <= 0.0 or self.delta <= 0.0:
            raise ValueError(f"cone needs positive R and delta, got {self}")

    @property
    def x_hi(self) -> float:
        return self.x_lo + self.delta

    def half_width(self, x):
        return self.R * (self.delta - (np.asarray(x) - self.x_lo))

    def contains(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        dx = x - self.x_lo
        return (dx >= 0.0) & (dx < self.delta) & (
            np.abs(y - self.y0) < self.R * (self.delta - dx)
        )


@dataclass
class ThetaField:
    """Theta on the cone's grid points; NaN outside and at flagged points."""

    x_nodes: np.ndarray
    y_nodes: np.ndarray
    theta: np.ndarray
    inside: np.ndarray
    flagged: np.ndarray

    @property
    def n_flagged(self) -> int:
        return int(np.count_nonzero(self.flagged))


@dataclass
class PerpVelocity:
    """The grad(psi)-parallel velocity component, masked where |grad psi| is small."""

    upx: np.ndarray
    upy: np.ndarray
    valid: np.ndarray
    threshold: float

    @property
    def n_masked(self) -> int:
        return int(self.valid.size - np.count_nonzero(self.valid))


@dataclass
class StabilityReport:
    h4_psi_diff: float
    h1_theta_diff: float
    l2_u_diff: float

    @property
    def ratio_lipschitz(self) -> float:
        if self.h4_psi_diff == 0.0:
            return float("nan")
        return self.l2_u_diff / self.h4_psi_diff

    @property
    def ratio_theta(self) -> float:
        if self.h4_psi_diff == 0.0:
            return float("nan")
        return self.h1_theta_diff / self.h4_psi_diff


def _check_snapshots(snaps: Sequence[sc.SpectralField], count: int):
    if len(snaps) != count:
        raise ValueError(f"need exactly {count} consecutive snapshots, got {len(snaps)}")
    n = snaps[0].n
    if any(s.n != n for s in snaps):
        raise ValueError("snapshot grids differ")
    return n


def _zeta_and_gradient(snaps, dt: float, lam: float):
    """Physical-space zeta, dpsi/dx, dpsi/dy at the center snapshot."""
    prev, mid, nxt = snaps
    dpsi_dt = sc.SpectralField(mid.n, (nxt.coeffs - prev.coeffs) / (2.0 * dt))
    lap = sc.SpectralField(
        mid.n,
        sc.derivative(mid, "x", 2).coeffs + sc.derivative(mid, "y", 2).coeffs,
    )
    zeta = sc.SpectralField(mid.n, -dpsi_dt.coeffs + lam * lap.coeffs)
    return (
        sc.inverse_transform(zeta).values,
        sc.inverse_transform(sc.derivative(mid, "x")).values,
        sc.inverse_transform(sc.derivative(mid, "y")).values,
    )


def _node_range(nodes: np.ndarray, lo: float, hi: float):
    idx = np.nonzero((nodes >= lo - CONE_EDGE_TOL) & (nodes <= hi + CONE_EDGE_TOL))[0]
    if len(idx) < 5:
        raise ValueError(f"range [{lo}, {hi}] covers fewer than 5 grid nodes")
    return int(idx[0]), int(idx[-1])


def _largest_true_rect(mask: np.ndarray):
    """Index bounds (i0, i1, j0, j1) of the largest all-True rectangle."""
    ny = mask.shape[1]
    best_area = 0
    best = None
    heights = np.zeros(ny, dtype=int)
    for i in range(mask.shape[0]):
        heights = np.where(mask[i], heights + 1, 0)
        stack = []
        for j, h in enumerate(np.append(heights, 0)):
            start = j
            while stack and stack[-1][1] >= h:
                start, prev_h = stack.pop()
                area = prev_h * (j - start)
                if area > best_area:
                    best_area = area
                    best = (i - prev_h + 1, i, start, j - 1)
            stack.append((start, h))
    return best


def build_transport(psi_snapshots: Sequence[sc.SpectralField], dt: float,
                    lam: float, line_x: float, theta_line: np.ndarray,
                    region: Rect, *, epsilon: Optional[float] = None,
                    time: float = 0.0) -> TransportProblem:
    """Sample beta, f, and boundary data on a validated rectangle.

    theta_line holds reference Theta values on the line x = line_x, given on
    the full periodic y-grid (length n) or on the region's y-nodes. The
    region's left edge must equal line_x, and every node in the region must
    satisfy |dpsi/dy| >= epsilon (default: 10% of the global max).
    """
    n = _check_snapshots(psi_snapshots, 3)
    nodes = sc.grid_nodes(n)
    zeta, dpsi_dx, dpsi_dy = _zeta_and_gradient(psi_snapshots, dt, lam)
    eps = 0.1 * float(np.max(np.abs(dpsi_dy))) if epsilon is None else float(epsilon)

    if abs(region.x_lo - line_x) > CONE_EDGE_TOL:
        raise ValueError(
            f"region x_lo {region.x_lo} must equal the reference line x {line_x}"
        )
    i0, i1 = _node_range(nodes, region.x_lo, region.x_hi)
    j0, j1 = _node_range(nodes, region.y_lo, region.y_hi)
    if abs(nodes[i0] - line_x) > CONE_EDGE_TOL:
        raise ValueError(f"line_x {line_x} does not lie on a grid node")

    py = dpsi_dy[i0 : i1 + 1, j0 : j1 + 1]
    admissible = np.abs(py) >= eps
    if not np.all(admissible):
        found = _largest_true_rect(admissible)
        suggestion = None
        detail = "no admissible sub-rectangle found"
        if found is not None:
            a0, a1, b0, b1 = found
            if a1 > a0 and b1 > b0:
                suggestion = Rect(
                    x_lo=float(nodes[i0 + a0]), x_hi=float(nodes[i0 + a1]),
                    y_lo=float(nodes[j0 + b0]), y_hi=float(nodes[j0 + b1]),
                )
                detail = (
                    f"largest admissible sub-rectangle: x in "
                    f"[{suggestion.x_lo:.6g}, {suggestion.x_hi:.6g}], y in "
                    f"[{suggestion.y_lo:.6g}, {suggestion.y_hi:.6g}]"
                )
        raise RegionRejected(
            f"|dpsi/dy| < {eps:.6g} at {int(np.count_nonzero(~admissible))} "
            f"of {admissible.size} region nodes; {detail}",
            suggestion,
        )

    theta_line = np.asarray(theta_line, dtype=float)
    if theta_line.shape == (n,):
        boundary = theta_line[j0 : j1 + 1].copy()
    elif theta_line.shape == (j1 - j0 + 1,):
        boundary = theta_line.copy()
    else:
        raise ValueError(
            f"theta_line must have length {n} (full grid) or {j1 - j0 + 1} "
            f"(region nodes), got {theta_line.shape}"
        )

    px = dpsi_dx[i0 : i1 + 1, j0 : j1 + 1]
    z = zeta[i0 : i1 + 1, j0 : j1 + 1]
    return TransportProblem(
        x_nodes=nodes[i0 : i1 + 1].copy(),
        y_nodes=nodes[j0 : j1 + 1].copy(),
        beta=-px / py,
        f=-z / py,
        boundary_theta=boundary,
        dpsi_dy=py.copy(),
        epsilon_floor=eps,
        time=time,
    )


def admissible_cone(problem: TransportProblem, y0: float, *,
                    R: Optional[float] = None,
                    epsilon: Optional[float] = None) -> ConeRegion:
    """Largest cone apex-anchored at (line_x, y0) fitting the admissible set.

    R defaults to 1 + sup|beta| over the rectangle. delta is capped so the
    cone stays inside the rectangle and excludes every node where |dpsi/dy|
    drops below epsilon (default: the problem's recorded floor).
    """
    xn, yn = problem.x_nodes, problem.y_nodes
    if not (yn[0] <= y0 <= yn[-1]):
        raise ValueError(f"y0 {y0} outside the rectangle")
    R_val = 1.0 + float(np.max(np.abs(problem.beta))) if R is None else float(R)
    eps = problem.epsilon_floor if epsilon is None else float(epsilon)
    delta = min(
        float(xn[-1] - xn[0]),
        min(float(yn[-1] - y0), float(y0 - yn[0])) / R_val,
    )
    bad = np.abs(problem.dpsi_dy) < eps
    if np.any(bad):
        X, Y = np.meshgrid(xn, yn, indexing="ij")
        # node (x, y) joins the cone once delta exceeds (x - x_lo) + |y - y0|/R
        entry = (X - xn[0]) + np.abs(Y - y0) / R_val
        delta = min(delta, float(np.min(entry[bad])))
    if delta <= 0.0:
        raise ValueError("no admissible cone at this anchor")
    return ConeRegion(x_lo=float(xn[0]), y0=float(y0), R=R_val, delta=float(delta))


def solve_transport(problem: TransportProblem, cone: ConeRegion) -> ThetaField:
    """Integrate Theta along backward characteristics on the cone grid.

    Characteristics dy/dx = beta run from each cone node back to the left
    face with RK4 at one grid spacing per step, accumulating dTheta/dx = f;
    beta and f are interpolated bilinearly, the boundary data by a cubic
    spline (a linear footpoint lookup would leave O(h^2) cell-phase jitter
    that first-order-pollutes the differentiated velocity).
    Points whose characteristic leaves the cone are flagged and left NaN;
    more than MAX_FLAGGED_FRACTION of them fails the solve.
    """
    xn, yn = problem.x_nodes, problem.y_nodes
    hx = float(xn[1] - xn[0])
    if abs(cone.x_lo - xn[0]) > CONE_EDGE_TOL:
        raise ValueError("cone left face must sit on the problem's reference line")
    if cone.x_hi > xn[-1] + hx:
        raise ValueError("cone exceeds the rectangle in x")
    reach = cone.R * cone.delta
    if cone.y0 - reach < yn[0] - CONE_EDGE_TOL or cone.y0 + reach > yn[-1] + CONE_EDGE_TOL:
        raise ValueError("cone exceeds the rectangle in y")

    beta_at = RegularGridInterpolator(
        (xn, yn), problem.beta, method="linear", bounds_error=False, fill_value=None
    )
    f_at = RegularGridInterpolator(
        (xn, yn), problem.f, method="linear", bounds_error=False, fill_value=None
    )
    boundary_spline = CubicSpline(yn, problem.boundary_theta)
    gauge = float(boundary_spline(cone.y0))
    boundary = problem.boundary_theta - gauge

    X, Y = np.meshgrid(xn, yn, indexing="ij")
    inside = cone.contains(X, Y)
    theta = np.full(inside.shape, np.nan)
    flagged = np.zeros(inside.shape, dtype=bool)

    cols = np.nonzero(inside.any(axis=1))[0]
    if len(cols) == 0:
        return ThetaField(xn, yn, theta, inside, flagged)

    # node indices of every target point, marched together column by column
    pi, pj = np.nonzero(inside)
    y_cur = np.full(len(pi), np.nan)
    acc = np.zeros(len(pi))
    dead = np.zeros(len(pi), dtype=bool)
    done_boundary = pi == 0
    theta[0, pj[done_boundary]] = boundary[pj[done_boundary]]

    def rhs(x, ys, active):
        pts = np.column_stack([np.full(np.count_nonzero(active), x), ys[active]])
        return beta_at(pts), f_at(pts)

    for col in range(int(cols[-1]), 0, -1):
        starting = pi == col
        y_cur[starting] = yn[pj[starting]]
        acc[starting] = 0.0
        active = (pi >= col) & ~dead & ~done_boundary
        if not np.any(active):
            continue
        x = xn[col]
        h = -hx
        y0s = y_cur[active]
        k1y, k1t = rhs(x, y_cur, active)
        y_cur[active] = y0s + 0.5 * h * k1y
        k2y, k2t = rhs(x + 0.5 * h, y_cur, active)
        y_cur[active] = y0s + 0.5 * h * k2y
        k3y, k3t = rhs(x + 0.5 * h, y_cur, active)
        y_cur[active] = y0s + h * k3y
        k4y, k4t = rhs(x + h, y_cur, active)
        y_cur[active] = y0s + (h / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        acc[active] += (h / 6.0) * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
        escaped = active.copy()
        escaped[active] = (
            np.abs(y_cur[active] - cone.y0)
            >= cone.half_width(xn[col - 1]) + CONE_EDGE_TOL
        )
        dead |= escaped

    landed = ~dead & ~done_boundary
    theta_landed = boundary_spline(y_cur[landed]) - gauge - acc[landed]
    theta[pi[landed], pj[landed]] = theta_landed
    flagged[pi[dead], pj[dead]] = True

    n_inside = int(np.count_nonzero(inside))
    if np.count_nonzero(flagged) > MAX_FLAGGED_FRACTION * n_inside:
        raise RuntimeError(
            f"{np.count_nonzero(flagged)} of {n_inside} cone points flagged: "
            "characteristics left the cone (slope bound R too small for beta)"
        )
    return ThetaField(xn, yn, theta, inside, flagged)


def _fd_derivative(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """NaN-aware derivative: 4th-order central where the stencil fits,
    2nd-order central, then one-sided 2nd-order near data edges."""
    v = np.moveaxis(values, axis, 0)
    pad = np.full((2,) + v.shape[1:], np.nan)
    a = np.concatenate([pad, v, pad], axis=0)
    m2, m1 = a[:-4], a[1:-3]
    c = a[2:-2]
    p1, p2 = a[3:-1], a[4:]
    fin = np.isfinite
    with np.errstate(invalid="ignore"):
        central4 = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
        central2 = (p1 - m1) / (2.0 * h)
        forward2 = (-3.0 * c + 4.0 * p1 - p2) / (2.0 * h)
        backward2 = (3.0 * c - 4.0 * m1 + m2) / (2.0 * h)
    out = np.full_like(c, np.nan)
    ok4 = fin(m2) & fin(m1) & fin(p1) & fin(p2)
    ok2 = fin(m1) & fin(p1)
    okf = fin(p1) & fin(p2)
    okb = fin(m1) & fin(m2)
    out = np.where(okb, backward2, out)
    out = np.where(okf, forward2, out)
    out = np.where(ok2, central2, out)
    out = np.where(ok4, central4, out)
    out = np.where(fin(c), out, np.nan)
    return np.moveaxis(out, 0, axis)


def recover_velocity(theta: ThetaField):
    """u = (dTheta/dy, -dTheta/dx) by finite differences on the cone points."""
    hx = float(theta.x_nodes[1] - theta.x_nodes[0])
    hy = float(theta.y_nodes[1] - theta.y_nodes[0])
    ux = _fd_derivative(theta.theta, axis=1, h=hy)
    uy = -_fd_derivative(theta.theta, axis=0, h=hx)
    return ux, uy


def perp_velocity(psi_snapshots: Sequence[sc.SpectralField], dt: float,
                  lam: float, threshold: Optional[float] = None) -> PerpVelocity:
    """u_perp = (-dpsi/dt + lam lap psi) grad(psi)/|grad psi|^2, masked.

    Points where |grad psi| falls below threshold (default 10% of its max)
    are NaN with valid=False.
    """
    _check_snapshots(psi_snapshots, 3)
    zeta, gx, gy = _zeta_and_gradient(psi_snapshots, dt, lam)
    gsq = gx**2 + gy**2
    gmag = np.sqrt(gsq)
    thr = 0.1 * float(np.max(gmag)) if threshold is None else float(threshold)
    valid = gmag >= thr
    with np.errstate(divide="ignore", invalid="ignore"):
        upx = np.where(valid, zeta * gx / gsq, np.nan)
        upy = np.where(valid, zeta * gy / gsq, np.nan)
    return PerpVelocity(upx=upx, upy=upy, valid=valid, threshold=thr)


_TIME_STENCILS = (
    (0, (0.0, 0.0, 1.0, 0.0, 0.0)),
    (1, (0.0, -0.5, 0.0, 0.5, 0.0)),
    (2, (0.0, 1.0, -2.0, 1.0, 0.0)),
    (3, (-0.5, 1.0, 0.0, -1.0, 0.5)),
    (4, (1.0, -4.0, 6.0, -4.0, 1.0)),
)


def h4_norm(snapshots: Sequence[sc.SpectralField], dt: float,
            footprint: np.ndarray) -> float:
    """Discrete H4 surrogate on five snapshots over a node footprint.

    Sums the squared L2 quadrature of every mixed derivative of total order
    <= 4: time parts by 2nd-order central stencils, spatial parts spectral.
    """
    n = _check_snapshots(snapshots, 5)
    if footprint.shape != (n, n):
        raise ValueError(f"footprint must be {(n, n)}, got {footprint.shape}")
    cell = (2.0 * np.pi / n) ** 2
    total = 0.0
    for r, weights in _TIME_STENCILS:
        coeffs = sum(
            w * s.coeffs for w, s in zip(weights, snapshots) if w != 0.0
        ) / dt**r
        base = sc.SpectralField(n, coeffs)
        for a in range(0, 5 - r):
            for b in range(0, 5 - r - a):
                field = base
                if a:
                    field = sc.derivative(field, "x", a)
                if b:
                    field = sc.derivative(field, "y", b)
                vals = sc.inverse_transform(field).values
                total += float(np.sum(vals[footprint] ** 2)) * cell
    return math.sqrt(total)


def stability_probe(psi_snapshots: Sequence[sc.SpectralField],
                    psi_perturbed: Sequence[sc.SpectralField], dt: float,
                    lam: float, cone: ConeRegion, line_x: float,
                    theta_line: np.ndarray, region: Rect, *,
                    epsilon: Optional[float] = None) -> StabilityReport:
    """Run the recovery pipeline on both scalars and report difference norms.

    Both inputs are five consecutive snapshots centered on the evaluation
    time; the middle three feed the transport build, all five feed the H4
    surrogate. The same reference boundary data serves both pipelines.
    """
    n = _check_snapshots(psi_snapshots, 5)
    _check_snapshots(psi_perturbed, 5)

    def pipeline(snaps):
        problem = build_transport(
            snaps[1:4], dt, lam, line_x, theta_line, region, epsilon=epsilon
        )
        tf = solve_transport(problem, cone)
        ux, uy = recover_velocity(tf)
        return tf, ux, uy

    tf_a, ux_a, uy_a = pipeline(psi_snapshots)
    tf_b, ux_b, uy_b = pipeline(psi_perturbed)

    hx = float(tf_a.x_nodes[1] - tf_a.x_nodes[0])
    hy = float(tf_a.y_nodes[1] - tf_a.y_nodes[0])
    cell = hx * hy

    du = ux_a - ux_b
    dv = uy_a - uy_b
    ok_u = np.isfinite(du) & np.isfinite(dv)
    l2_u = math.sqrt(float(np.sum(du[ok_u] ** 2 + dv[ok_u] ** 2)) * cell)

    dth = tf_a.theta - tf_b.theta
    dth_y = _fd_derivative(dth, axis=1, h=hy)
    dth_x = _fd_derivative(dth, axis=0, h=hx)
    ok_t = np.isfinite(dth) & np.isfinite(dth_x) & np.isfinite(dth_y)
    h1 = math.sqrt(
        float(np.sum(dth[ok_t] ** 2 + dth_x[ok_t] ** 2 + dth_y[ok_t] ** 2)) * cell
    )

    nodes = sc.grid_nodes(n)
    X, Y = np.meshgrid(nodes, nodes, indexing="ij")
    footprint = cone.contains(X, Y)
    diffs = [
        sc.SpectralField(n, a.coeffs - b.coeffs)
        for a, b in zip(psi_snapshots, psi_perturbed)
    ]
    h4 = h4_norm(diffs, dt, footprint)
    return StabilityReport(h4_psi_diff=h4, h1_theta_diff=h1, l2_u_diff=l2_u)


def write_probe_report(csv_path, manifest_path, cone: ConeRegion, rows) -> None:
    """CSV of (delta, StabilityReport) rows plus a cone-geometry manifest."""
    with open(csv_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["delta", "h4_psi_diff", "h1_theta_diff", "l2_u_diff", "ratio_lipschitz"]
        )
        for delta, report in rows:
            writer.writerow([
                repr(float(delta)),
                repr(report.h4_psi_diff),
                repr(report.h1_theta_diff),
                repr(report.l2_u_diff),
                repr(report.ratio_lipschitz),
            ])
    with open(manifest_path, "w") as handle:
        handle.write(f"x_lo={cone.x_lo!r}\n")
        handle.write(f"y0={cone.y0!r}\n")
        handle.write(f"R={cone.R!r}\n")
        handle.write(f"delta={cone.delta!r}\n")
