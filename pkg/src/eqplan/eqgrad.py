"""Gradient estimators for equilibrium states x* = f_theta(x*, c).

Given a loss L(x*, y), the exact parameter gradient follows from the implicit
function theorem:

    dL/dtheta = dL/dx* . (I - df/dx*)^(-1) . df/dtheta

`grad_ift` applies the inverse factor as a truncated Neumann series of
iterated vector-Jacobian products. `grad_jacobian_free` drops the factor
entirely (the I approximation), which is the same code path with zero Neumann
terms and coincides with the gradient of the one-step supervised objective
L(f_theta(x*, c), y) holding x* constant. `grad_unrolled` backpropagates
through K explicit forward steps and is kept as a verification oracle: its
gradient approaches the IFT value geometrically in the contraction factor.

None of the estimators differentiate through the forward solve;
`solve_forward` asserts that by checking the numerics vjp counter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Protocol, Sequence, Tuple

import numpy as np

from . import numerics as nm
from .fixedpoint import SolveConfig, SolveResult, solve_anderson, solve_broyden, solve_plain

NEUMANN_TERMS = 30
NEUMANN_EARLY_STOP = 1e-12

Theta = nm.ParameterSet
Grads = Dict[str, np.ndarray]


class DifferentiableMap(Protocol):
    def forward(self, x: np.ndarray, c, theta: Theta) -> np.ndarray: ...
    def vjp_x(self, x: np.ndarray, c, theta: Theta, v: np.ndarray) -> np.ndarray: ...
    def vjp_theta(self, x: np.ndarray, c, theta: Theta, v: np.ndarray) -> Grads: ...


class LossFn(Protocol):
    def value(self, x: np.ndarray, y: np.ndarray) -> float: ...
    def grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


class SquaredErrorLoss:
    """L(x, y) = 0.5 ||x - y||^2."""

    def value(self, x: np.ndarray, y: np.ndarray) -> float:
        d = nm.as_f64(x) - nm.as_f64(y)
        return float(0.5 * np.sum(d * d))

    def grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return nm.as_f64(x) - nm.as_f64(y)


# ---------------------------------------------------------------------------
# graph-backed maps


class GraphMap:
    """DifferentiableMap whose forward pass is a numerics graph.

    builder(g, x_ref, c_ref, param_refs) adds ops to g and returns the output
    ref; it is called once at construction, so forward/vjp reuse one graph.
    """

    def __init__(self, builder: Callable, x_shape: Sequence[int],
                 param_shapes: Dict[str, Tuple[int, ...]],
                 c_shape: Optional[Sequence[int]] = None) -> None:
        self.builder = builder
        self.x_shape = tuple(x_shape)
        self.c_shape = tuple(c_shape) if c_shape is not None else None
        self.param_names = list(param_shapes)
        g = nm.Graph()
        x_ref = g.leaf("x", self.x_shape)
        c_ref = g.leaf("c", self.c_shape) if self.c_shape is not None else None
        p_refs = {name: g.leaf(name, shape) for name, shape in param_shapes.items()}
        out = builder(g, x_ref, c_ref, p_refs)
        if out.shape != self.x_shape:
            raise ValueError(f"map output shape {out.shape} != state shape {self.x_shape}")
        g.output("fx", out)
        self.graph = g

    def _bindings(self, x, c, theta: Theta) -> Dict[str, np.ndarray]:
        b = {"x": nm.as_f64(x)}
        if self.c_shape is not None:
            if c is None:
                raise ValueError("map requires context c")
            b["c"] = nm.as_f64(c)
        for name in self.param_names:
            b[name] = theta[name]
        return b

    def forward(self, x, c, theta: Theta) -> np.ndarray:
        return nm.evaluate(self.graph, self._bindings(x, c, theta))["fx"]

    def vjp_x(self, x, c, theta: Theta, v) -> np.ndarray:
        return nm.vjp(self.graph, self._bindings(x, c, theta), "fx", v, wrt=["x"])["x"]

    def vjp_theta(self, x, c, theta: Theta, v) -> Grads:
        return nm.vjp(self.graph, self._bindings(x, c, theta), "fx", v, wrt=self.param_names)

    def unrolled_graph(self, steps: int) -> nm.Graph:
        """One graph composing `steps` applications of the map (shared params)."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        g = nm.Graph()
        cur = g.leaf("x", self.x_shape)
        c_ref = g.leaf("c", self.c_shape) if self.c_shape is not None else None
        p_refs = {name: g.leaf(name, self.graph.nodes[self.graph.leaves[name]].shape)
                  for name in self.param_names}
        for _ in range(steps):
            cur = self.builder(g, cur, c_ref, p_refs)
        g.output("xk", cur)
        return g


# ---------------------------------------------------------------------------
# forward solving (never differentiated)


SOLVERS = {"plain": solve_plain, "anderson": solve_anderson, "broyden": solve_broyden}


def solve_forward(map_: DifferentiableMap, x0, c, theta: Theta,
                  method: str = "anderson", cfg: Optional[SolveConfig] = None) -> SolveResult:
    """Run the fixed-point solve for x = f(x, c); asserts no vjp happens inside."""
    if method not in SOLVERS:
        raise ValueError(f"unknown solver {method!r} (expected one of {sorted(SOLVERS)})")
    before = nm.op_counters().vjp_calls
    result = SOLVERS[method](lambda x: map_.forward(x, c, theta), x0, cfg)
    after = nm.op_counters().vjp_calls
    if after != before:
        raise AssertionError("fixed-point solve ran with differentiation enabled")
    return result


# ---------------------------------------------------------------------------
# gradient estimators


def grad_ift(map_: DifferentiableMap, loss: LossFn, x_star, c, theta: Theta, y,
             neumann_terms: int = NEUMANN_TERMS,
             early_stop: float = NEUMANN_EARLY_STOP) -> Grads:
    """Implicit-function-theorem gradient via a truncated Neumann series.

    Accumulates v . sum_k J^k with iterated vjp_x calls, then pulls the total
    cotangent through vjp_theta once. neumann_terms = 0 is exactly the
    Jacobian-free estimator.
    """
    if neumann_terms < 0:
        raise ValueError("neumann_terms must be >= 0")
    v = nm.as_f64(loss.grad_x(x_star, y))
    total = v
    w = v
    for _ in range(neumann_terms):
        w = map_.vjp_x(x_star, c, theta, w)
        total = total + w
        if float(np.linalg.norm(w)) < early_stop:
            break
    return map_.vjp_theta(x_star, c, theta, total)


def grad_jacobian_free(map_: DifferentiableMap, loss: LossFn, x_star, c,
                       theta: Theta, y) -> Grads:
    """The I approximation of the inverse factor: one vjp_theta call with
    cotangent dL/dx*. Identical to grad_ift with zero Neumann terms, and to
    the gradient of the one-step objective L(f(x*, c), y) at a fixed point."""
    return grad_ift(map_, loss, x_star, c, theta, y, neumann_terms=0)


def grad_unrolled(map_: DifferentiableMap, loss: LossFn, x0, c, theta: Theta, y,
                  steps: int) -> Grads:
    """Backpropagation through `steps` explicit forward iterations
    (verification oracle; geometric convergence to the IFT gradient)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    xs = [nm.as_f64(x0)]
    for _ in range(steps):
        xs.append(map_.forward(xs[-1], c, theta))
    v = nm.as_f64(loss.grad_x(xs[-1], y))
    grads: Optional[Grads] = None
    for k in range(steps - 1, -1, -1):
        gk = map_.vjp_theta(xs[k], c, theta, v)
        grads = gk if grads is None else {n: grads[n] + gk[n] for n in grads}
        if k > 0:
            v = map_.vjp_x(xs[k], c, theta, v)
    return grads


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float) -> None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr

    def step(self, theta: Theta, grads: Grads) -> None:
        for name, g in grads.items():
            theta.set(name, theta[name] - self.lr * nm.as_f64(g))


class Adam:
    """Adaptive-moment estimation with bias correction (0.9 / 0.999 / 1e-8)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, theta: Theta, grads: Grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            g = nm.as_f64(g)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            theta.set(name, theta[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def equilibrium_training_step(map_: DifferentiableMap, loss: LossFn, x_star, c,
                              theta: Theta, y, optimizer) -> float:
    """One Jacobian-free parameter update at an equilibrium; mutates theta.

    Returns the post-update loss L(f(x*, c), y) so repeated calls expose the
    optimization trajectory.
    """
    grads = grad_jacobian_free(map_, loss, x_star, c, theta, y)
    optimizer.step(theta, grads)
    return loss.value(map_.forward(x_star, c, theta), y)


# ---------------------------------------------------------------------------
# reference map families (used by tests and the gradcheck CLI)


def make_scalar_affine_map(w: float = 0.5, b: float = 1.0) -> Tuple[GraphMap, Theta]:
    """f(x) = w x + b on a length-1 state."""

    def build(g, x, c, p):
        return g.add(g.mul(p["w"], x), p["b"])

    m = GraphMap(build, (1,), {"w": (1,), "b": (1,)})
    theta = nm.ParameterSet({"w": np.array([w]), "b": np.array([b])})
    return m, theta


def make_linear_map(dim: int = 8, seed: int = 0, rho: float = 0.6) -> Tuple[GraphMap, Theta]:
    """f(x) = x A^T + b on a [1, dim] state, spectral radius scaled to rho."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(dim, dim))
    a *= rho / max(abs(np.linalg.eigvals(a)))
    b = rng.normal(size=(1, dim))

    def build(g, x, c, p):
        return g.add(g.matmul(x, p["A"], transpose_b=True), p["b"])

    m = GraphMap(build, (1, dim), {"A": (dim, dim), "b": (1, dim)})
    theta = nm.ParameterSet({"A": a, "b": b})
    return m, theta


def make_attention_map(t: int = 3, d: int = 4, seed: int = 0,
                       out_scale: float = 0.5) -> Tuple[GraphMap, Theta, np.ndarray]:
    """Single attention block over a [t, d] state with additive context.

    The 1/sqrt(d) score scaling and the out_scale contraction factor are
    folded into wk and wo, so the graph uses only the listed primitives.
    Returns (map, theta, context)."""
    rng = np.random.default_rng(seed)
    init = lambda *s: rng.normal(size=s) * (0.5 / np.sqrt(d))
    shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d)}
    theta = nm.ParameterSet({
        "wq": init(d, d),
        "wk": init(d, d) / np.sqrt(d),
        "wv": init(d, d),
        "wo": init(d, d) * out_scale,
    })
    c = rng.normal(size=(t, d))

    def build(g, x, cr, p):
        h = g.layernorm(g.add(x, cr))
        q = g.matmul(h, p["wq"])
        k = g.matmul(h, p["wk"])
        v = g.matmul(h, p["wv"])
        att = g.softmax(g.matmul(q, k, transpose_b=True))
        return g.matmul(g.matmul(att, v), p["wo"])

    m = GraphMap(build, (t, d), shapes, c_shape=(t, d))
    return m, theta, c
