"""Segment-wise minimization of the tracking cost.

Polak-Ribiere conjugate gradient (nonnegative beta) over the control space,
a self-contained Brent line minimization along the normalized search
direction, relative-decrease stopping, and warm-started segmentation: each
segment's initial guess is the forward endpoint of the previous optimized
segment.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import adjoint_model as am
from . import forward_model as fm
from . import spectral_core as sc

logger = logging.getLogger(__name__)

GOLDEN_FRACTION = 0.3819660112501051
BRENT_ZEPS = 1e-12
COST_FLOOR = 1e-28
REL_COST_FLOOR = 1e-14


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs for one segment minimization.

    rel_tol stops a segment when the relative cost drop between consecutive
    iterations falls below it; 0 disables that stop. brent_tol is a relative
    step tolerance along the normalized direction; max_line_evals caps
    line-cost calls per search, bracketing included.
    """

    rel_tol: float = 0.01
    max_cg_iters: int = 30
    brent_tol: float = 1e-2
    bracket_step: float = 1.0
    max_line_evals: int = 20

    def __post_init__(self):
        if self.rel_tol < 0.0:
            raise ValueError(f"rel_tol must be >= 0, got {self.rel_tol}")
        if self.max_cg_iters < 1:
            raise ValueError(f"max_cg_iters must be >= 1, got {self.max_cg_iters}")
        if self.brent_tol <= 0.0:
            raise ValueError(f"brent_tol must be positive, got {self.brent_tol}")
        if self.bracket_step <= 0.0:
            raise ValueError(f"bracket_step must be positive, got {self.bracket_step}")
        if self.max_line_evals < 4:
            raise ValueError(
                f"max_line_evals must be >= 4, got {self.max_line_evals}"
            )


@dataclass
class SegmentResult:
    control: fm.ControlVector
    final_cost: float
    iterations: int
    cost_history: List[float]


def _stack_gradient(g: am.Gradient) -> np.ndarray:
    return np.stack([
        sc.half_from_spectral(g.gux),
        sc.half_from_spectral(g.guy),
        sc.half_from_spectral(g.gphi),
    ])


def _stack_control(c: fm.ControlVector) -> np.ndarray:
    return np.stack([
        sc.half_from_spectral(c.u0x),
        sc.half_from_spectral(c.u0y),
        sc.half_from_spectral(c.phi0),
    ])


def _unstack_control(w: np.ndarray, n: int) -> fm.ControlVector:
    return fm.ControlVector(
        u0x=sc.spectral_from_half(w[0], n),
        u0y=sc.spectral_from_half(w[1], n),
        phi0=sc.spectral_from_half(w[2], n),
    )


def _inner(a: np.ndarray, b: np.ndarray, n: int) -> float:
    return float(np.sum(sc.half_inner(a, b, n)))


def _norm(a: np.ndarray, n: int) -> float:
    return math.sqrt(max(_inner(a, a, n), 0.0))


def _pr_beta(g_new: np.ndarray, g_old: np.ndarray, n: int) -> float:
    denom = _inner(g_old, g_old, n)
    if denom <= 0.0:
        return 0.0
    return max(0.0, _inner(g_new, g_new - g_old, n) / denom)


def _pr_half(g_new: np.ndarray, g_old: Optional[np.ndarray],
             h_old: Optional[np.ndarray], n: int) -> np.ndarray:
    if g_old is None or h_old is None:
        return -g_new
    beta = _pr_beta(g_new, g_old, n)
    if beta == 0.0:
        return -g_new
    return beta * h_old - g_new


def pr_direction(g_new: am.Gradient, g_old: Optional[am.Gradient] = None,
                 h_old: Optional[fm.ControlVector] = None) -> fm.ControlVector:
    """Conjugate search direction from the nonnegative Polak-Ribiere rule.

    Without history (or with a zero g_old) this is steepest descent -g_new.
    """
    n = g_new.gux.n
    gn = _stack_gradient(g_new)
    go = None if g_old is None else _stack_gradient(g_old)
    ho = None if h_old is None else _stack_control(h_old)
    return _unstack_control(_pr_half(gn, go, ho, n), n)


def brent_minimize(line_cost: Callable[[float], float],
                   cfg: OptimizerConfig, *, seed: float | None = None) -> float:
    """Step length minimizing line_cost over step >= 0.

    Brackets a minimum by geometric expansion (or shrinkage) from seed
    (default bracket_step), runs Brent parabolic/golden iteration to a
    relative step tolerance of brent_tol, and returns the best sampled step,
    so line_cost(step) <= line_cost(0) always holds. Bracketing failure
    falls back to the best sample with a warning. Seeding with the previously
    accepted step keeps the bracketing phase short, leaving most of the
    evaluation budget for the Brent refinement.
    """
    samples: List[tuple] = []

    def f(x: float) -> float:
        v = float(line_cost(x))
        samples.append((v, x))
        return v

    def best() -> float:
        return min(samples)[1]

    budget = cfg.max_line_evals
    s0 = cfg.bracket_step if seed is None else float(seed)
    if not s0 > 0.0:
        raise ValueError("bracketing seed must be positive")
    f0 = f(0.0)
    if not np.isfinite(f0):
        raise ValueError("line_cost(0) must be finite")
    fs = f(s0)

    if fs < f0:
        a, fa, b, fb = 0.0, f0, s0, fs
        c = None
        while len(samples) < budget:
            t = 2.0 * b
            ft = f(t)
            if ft >= fb:
                c, fc = t, ft
                break
            a, fa, b, fb = b, fb, t, ft
        if c is None:
            logger.warning(
                "line search: no bracket within %d evaluations "
                "(cost still decreasing); taking the best sample", budget,
            )
            return best()
    else:
        a, fa = 0.0, f0
        prev, fprev = s0, fs
        b = None
        while len(samples) < budget:
            t = 0.5 * prev
            ft = f(t)
            if ft < f0:
                b, fb, c, fc = t, ft, prev, fprev
                break
            prev, fprev = t, ft
        if b is None:
            logger.warning(
                "line search: no bracket within %d evaluations "
                "(no descent found); taking the best sample", budget,
            )
            return best()

    # Brent iteration on the bracket [a, c] around b
    lo, hi = a, c
    x = w = v = b
    fx = fw = fv = fb
    d = e = 0.0
    while len(samples) < budget:
        # brent_tol is relative to the current best abscissa
        tol1 = cfg.brent_tol * abs(x) + BRENT_ZEPS
        tol2 = 2.0 * tol1
        xm = 0.5 * (lo + hi)
        if abs(x - xm) <= tol2 - 0.5 * (hi - lo):
            break
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            e_prev, e = e, d
            if abs(p) < abs(0.5 * q * e_prev) and q * (lo - x) < p < q * (hi - x):
                d = p / q
                u = x + d
                if (u - lo) < tol2 or (hi - u) < tol2:
                    d = math.copysign(tol1, xm - x)
                use_golden = False
        if use_golden:
            e = (hi - x) if x < xm else (lo - x)
            d = GOLDEN_FRACTION * e
        u = x + d if abs(d) >= tol1 else x + math.copysign(tol1, d)
        fu = f(u)
        if fu <= fx:
            if u >= x:
                lo = x
            else:
                hi = x
            v, fv, w, fw = w, fw, x, fx
            x, fx = u, fu
        else:
            if u < x:
                lo = u
            else:
                hi = u
            if fu <= fw or w == x:
                v, fv, w, fw = w, fw, u, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return best()


def _minimize_half(w0: np.ndarray, measurement: fm.Trajectory,
                   seg_cfg: fm.SegmentConfig, opt_cfg: OptimizerConfig,
                   segment_index: int = 0, log_row=None):
    """CG loop on a stacked control; returns (final stack, SegmentResult)."""
    n = seg_cfg.n
    w = fm._sanitize_half(w0.copy(), n)
    g, cost = am._gradient_half(w, seg_cfg, measurement)
    if not np.isfinite(cost):
        raise fm.NonFiniteStateError(
            f"segment {segment_index}: cost is not finite at the initial guess"
        )
    history = [cost]
    if log_row is not None:
        log_row(segment_index, 0, cost, _norm(g, n), 0.0)
    g_old = None
    h = None
    seed = None
    if cost > COST_FLOOR:
        for it in range(1, opt_cfg.max_cg_iters + 1):

            def attempt(direction, w=w, cached=cost):
                h_norm = _norm(direction, n)
                if h_norm == 0.0:
                    return None
                unit = direction * (1.0 / h_norm)

                def line_cost(alpha):
                    if alpha == 0.0:
                        return cached
                    return fm._run_cost_half(w + alpha * unit, seg_cfg,
                                             measurement)

                step = brent_minimize(line_cost, opt_cfg, seed=seed)
                if step == 0.0:
                    return None
                trial = fm._sanitize_half(w + step * unit, n)
                g_new, cost_new = am._gradient_half(trial, seg_cfg,
                                                    measurement)
                if not cost_new < cached:
                    return None
                return trial, g_new, cost_new, step

            h = _pr_half(g, g_old, h, n)
            # inexact line minimization can leave the conjugate direction
            # pointing uphill; fall back to steepest descent before giving up
            restarted = _inner(g, h, n) >= 0.0
            if restarted:
                h = -g
            outcome = attempt(h)
            if outcome is None and not restarted:
                h = -g
                outcome = attempt(h)
            if outcome is None:
                break
            w, g_new, cost_new, step = outcome
            # directions are unit-normed, so accepted steps share a scale;
            # the last one seeds the next bracketing
            seed = step
            g_old, g = g, g_new
            history.append(cost_new)
            if log_row is not None:
                log_row(segment_index, it, cost_new, _norm(g, n), step)
            drop = (cost - cost_new) / cost
            cost = cost_new
            # double-precision floor for a quadratic-in-residual cost
            if cost <= max(COST_FLOOR, REL_COST_FLOOR * history[0]):
                break
            if drop < opt_cfg.rel_tol:
                break
    result = SegmentResult(
        control=_unstack_control(w, n),
        final_cost=history[-1],
        iterations=len(history),
        cost_history=history,
    )
    return w, result


def minimize_segment(guess: fm.ControlVector, measurement: fm.Trajectory,
                     seg_cfg: fm.SegmentConfig,
                     opt_cfg: OptimizerConfig = OptimizerConfig(), *,
                     segment_index: int = 0, log_row=None) -> SegmentResult:
    """Minimize J over one segment starting from guess."""
    w0 = _stack_control(guess)
    _, result = _minimize_half(
        w0, measurement, seg_cfg, opt_cfg, segment_index, log_row
    )
    return result


def _check_tiling(measurements: Sequence[fm.Trajectory],
                  base_cfg: fm.SegmentConfig) -> None:
    if not measurements:
        raise ValueError("no measurement segments given")
    for i, meas in enumerate(measurements):
        t0 = base_cfg.t0 + i * base_cfg.tau
        if meas.n != base_cfg.n:
            raise ValueError(f"segment {i}: grid {meas.n} != config grid {base_cfg.n}")
        if meas.n_steps != base_cfg.n_steps:
            raise ValueError(
                f"segment {i}: {meas.n_steps} steps, config wants {base_cfg.n_steps}"
            )
        if abs(meas.t0 - t0) > 1e-9 or abs(meas.dt - base_cfg.dt) > 1e-12:
            raise ValueError(f"segment {i}: does not tile [t0 + i tau, ...) contiguously")


def reconstruct(measurements: Sequence[fm.Trajectory],
                base_cfg: fm.SegmentConfig,
                opt_cfg: OptimizerConfig = OptimizerConfig(), *,
                csv_path=None, continue_on_error: bool = False) -> List[SegmentResult]:
    """Sequentially minimize every segment, warm starting from the last.

    The first segment starts from the zero control; segment i starts from
    the forward endpoint of segment i-1's optimized control. Convergence
    rows (segment, iter, cost, grad_norm, step) go to csv_path when given.
    A failed segment aborts unless continue_on_error, in which case it is
    recorded with infinite cost and the next segment restarts from zero.
    """
    _check_tiling(measurements, base_cfg)
    n = base_cfg.n
    nh = n // 2 + 1

    writer = None
    handle = None
    if csv_path is not None:
        handle = open(csv_path, "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(["segment", "iter", "cost", "grad_norm", "step"])

    def log_row(seg, it, cost, grad_norm, step):
        if writer is not None:
            writer.writerow([seg, it, repr(cost), repr(grad_norm), repr(step)])

    results: List[SegmentResult] = []
    guess = np.zeros((3, n, nh), dtype=np.complex128)
    try:
        for i, meas in enumerate(measurements):
            cfg_i = replace(base_cfg, t0=base_cfg.t0 + i * base_cfg.tau)
            try:
                w_best, result = _minimize_half(
                    guess, meas, cfg_i, opt_cfg, i, log_row
                )
            except fm.NonFiniteStateError as exc:
                if not continue_on_error:
                    raise
                logger.warning("segment %d failed (%s); restarting from zero", i, exc)
                results.append(SegmentResult(
                    control=_unstack_control(guess, n),
                    final_cost=float("inf"),
                    iterations=0,
                    cost_history=[],
                ))
                guess = np.zeros((3, n, nh), dtype=np.complex128)
                continue
            results.append(result)
            logger.info(
                "segment %d: J %.6g -> %.6g in %d iterations",
                i, result.cost_history[0], result.final_cost, result.iterations,
            )
            guess = fm._integrate(w_best.copy(), cfg_i)
    finally:
        if handle is not None:
            handle.close()
    return results
