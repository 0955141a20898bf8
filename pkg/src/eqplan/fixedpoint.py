"""Fixed-point solvers for x = f(x), plus fixed-point/cycle detection for
discrete token sequences.

Three continuous solvers share one outer loop: each iteration evaluates f
once, measures the residual ||f(x) - x||_2, stops when it is within
tolerance, and otherwise proposes the next iterate. `iterations` therefore
counts f evaluations, and a warm start at the solution costs exactly one.

- plain:    damped iteration x <- (1-beta) x + beta f(x)
- anderson: type-II Anderson acceleration over the last `memory` residuals,
            with a small ridge on the normal equations and a plain-step
            fallback when the mixing system cannot be solved
- broyden:  good Broyden rank-one updates to an inverse-Jacobian estimate of
            g(x) = f(x) - x, started at -I; singular updates fall back to a
            plain step and are counted
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import as_f64, require_finite

ANDERSON_RIDGE = 1e-10
BROYDEN_SINGULAR_TOL = 1e-12


@dataclass
class SolveConfig:
    tol: float = 1e-8
    max_iter: int = 200
    memory: int = 5
    damping: float = 1.0
    broyden_dim_cap: int = 4096

    def validate(self) -> None:
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.memory < 1:
            raise ValueError(f"memory must be >= 1, got {self.memory}")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError(f"damping must be in (0, 1], got {self.damping}")


@dataclass
class SolveResult:
    state: np.ndarray
    converged: bool
    iterations: int
    residual: float
    trajectory_norms: List[float] = field(default_factory=list)
    fallback_steps: int = 0


def _solve_loop(f: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                cfg: SolveConfig, propose) -> SolveResult:
    cfg.validate()
    x = as_f64(x0).copy()
    require_finite(x, "x0")
    norms: List[float] = []
    fallbacks = 0
    for k in range(1, cfg.max_iter + 1):
        fx = as_f64(f(x))
        require_finite(fx, "f(x)")
        if fx.shape != x.shape:
            raise ValueError(f"f changed shape: {x.shape} -> {fx.shape}")
        r = float(np.linalg.norm(fx - x))
        norms.append(r)
        if r <= cfg.tol:
            return SolveResult(x, True, k, r, norms, fallbacks)
        x, fell_back = propose(x, fx)
        if fell_back:
            fallbacks += 1
    return SolveResult(x, False, cfg.max_iter, norms[-1], norms, fallbacks)


def solve_plain(f: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                cfg: Optional[SolveConfig] = None) -> SolveResult:
    cfg = cfg or SolveConfig()
    beta = cfg.damping

    def propose(x, fx):
        return (1.0 - beta) * x + beta * fx, False

    return _solve_loop(f, x0, cfg, propose)


def solve_anderson(f: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                   cfg: Optional[SolveConfig] = None) -> SolveResult:
    cfg = cfg or SolveConfig()
    beta = cfg.damping
    xs: List[np.ndarray] = []
    fs: List[np.ndarray] = []

    def propose(x, fx):
        xs.append(x.reshape(-1).copy())
        fs.append(fx.reshape(-1).copy())
        if len(xs) > cfg.memory + 1:
            xs.pop(0)
            fs.pop(0)
        h = len(xs)
        if h == 1:
            return (1.0 - beta) * x + beta * fx, False
        X = np.stack(xs, axis=1)              # d x h
        F = np.stack(fs, axis=1)
        R = F - X                             # residual history
        dR = R[:, 1:] - R[:, :-1]             # d x (h-1)
        dX = X[:, 1:] - X[:, :-1]
        dF = F[:, 1:] - F[:, :-1]
        ncol = dR.shape[1]
        # ridge-regularized least squares min ||r_k - dR g||^2 + ridge ||g||^2
        # on the unit-scaled residual system (so mixing is scale-invariant),
        # solved by QR on the row-augmented form to avoid squaring conditioning
        scale = float(np.linalg.norm(R[:, -1])) or 1.0
        aug = np.vstack([dR / scale, np.sqrt(ANDERSON_RIDGE) * np.eye(ncol)])
        rhs = np.concatenate([R[:, -1] / scale, np.zeros(ncol)])
        try:
            gamma, *_ = np.linalg.lstsq(aug, rhs, rcond=None)
        except np.linalg.LinAlgError:
            return (1.0 - beta) * x + beta * fx, True
        if not np.all(np.isfinite(gamma)):
            return (1.0 - beta) * x + beta * fx, True
        mixed_x = X[:, -1] - dX @ gamma
        mixed_f = F[:, -1] - dF @ gamma
        nxt = beta * mixed_f + (1.0 - beta) * mixed_x
        return nxt.reshape(x.shape), False

    return _solve_loop(f, x0, cfg, propose)


def solve_broyden(f: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                  cfg: Optional[SolveConfig] = None) -> SolveResult:
    cfg = cfg or SolveConfig()
    x0 = as_f64(x0)
    dim = x0.size
    if dim > cfg.broyden_dim_cap:
        raise ValueError(f"broyden: dimension {dim} exceeds cap {cfg.broyden_dim_cap}")
    beta = cfg.damping
    state = {"H": -np.eye(dim), "prev_x": None, "prev_g": None}

    def propose(x, fx):
        xf = x.reshape(-1)
        g = (fx - x).reshape(-1)
        H = state["H"]
        fell_back = False
        if state["prev_x"] is not None:
            s = xf - state["prev_x"]
            y = g - state["prev_g"]
            Hy = H @ y
            sH = s @ H
            denom = float(s @ Hy)
            if abs(denom) < BROYDEN_SINGULAR_TOL:
                fell_back = True
            else:
                H = H + np.outer(s - Hy, sH) / denom
                state["H"] = H
        state["prev_x"] = xf.copy()
        state["prev_g"] = g.copy()
        if fell_back:
            nxt = (1.0 - beta) * x + beta * fx
        else:
            nxt = (xf - beta * (H @ g)).reshape(x.shape)
        return nxt, fell_back

    return _solve_loop(f, x0, cfg, propose)


# ---------------------------------------------------------------------------
# discrete sequences


@dataclass(frozen=True)
class SequenceStatus:
    kind: str                 # "converged" | "cycle" | "continue"
    period: Optional[int] = None

    @property
    def settled(self) -> bool:
        return self.kind in ("converged", "cycle")


CONTINUE = SequenceStatus("continue")
CONVERGED = SequenceStatus("converged")


def detect_sequence_fixed_point(history: Sequence[Sequence[int]],
                                max_cycle: int = 4) -> SequenceStatus:
    """Exact-equality fixed point / smallest-period cycle over a history of
    token sequences (most recent last)."""
    if max_cycle < 1:
        raise ValueError(f"max_cycle must be >= 1, got {max_cycle}")
    n = len(history)
    if n < 2:
        return CONTINUE
    last = tuple(history[-1])
    for p in range(1, max_cycle + 1):
        if n > p and tuple(history[-1 - p]) == last:
            return CONVERGED if p == 1 else SequenceStatus("cycle", p)
    return CONTINUE
