"""Dense float64 computation graphs with reverse-mode gradients.

A small, explicit engine: a Graph is a list of primitive nodes over named
leaves, `evaluate` runs it forward, `vjp` pulls a cotangent back to any float
leaves, and `finite_difference` is the independent oracle used to check every
analytic rule. Seven primitives cover everything built on top (attention
blocks, losses): matmul, add, mul, tanh, softmax, embed, layernorm,
cross_entropy. Broadcasting is limited to what those consumers need — a
leading batch axis for matmul, and scalar / leading-axis alignment for
add/mul.

Module-level op counters expose how many graphs were built and how many
evaluate/vjp calls ran, so callers can assert that inference paths never
differentiate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

Shape = Tuple[int, ...]

_FLOAT = np.float64
_INT = np.int64

LAYERNORM_EPS = 1e-5
FD_STEP = 1e-4
FD_REL_TOL = 1e-4
FD_ABS_FLOOR = 1e-8


class NumericsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# op counters


@dataclass
class OpCounters:
    graphs_built: int = 0
    evaluations: int = 0
    vjp_calls: int = 0

    def snapshot(self) -> "OpCounters":
        return OpCounters(self.graphs_built, self.evaluations, self.vjp_calls)


COUNTERS = OpCounters()


def op_counters() -> OpCounters:
    """Snapshot of the global counters (monotonic; compare before/after)."""
    return COUNTERS.snapshot()


# ---------------------------------------------------------------------------
# array helpers


def as_f64(values) -> np.ndarray:
    arr = np.asarray(values, dtype=_FLOAT)
    return arr


def require_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")
    return arr


def _check_shape(arr: np.ndarray, shape: Shape, what: str) -> None:
    if tuple(arr.shape) != tuple(shape):
        raise NumericsError(f"{what}: expected shape {tuple(shape)}, got {tuple(arr.shape)}")


# ---------------------------------------------------------------------------
# kernels (shared by graph evaluation and the no-graph inference paths)


def k_tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def k_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def k_layernorm(x: np.ndarray, eps: float = LAYERNORM_EPS) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def k_matmul(a: np.ndarray, b: np.ndarray, ta: bool = False, tb: bool = False) -> np.ndarray:
    if ta:
        a = np.swapaxes(a, -1, -2)
    if tb:
        b = np.swapaxes(b, -1, -2)
    return np.matmul(a, b)


def k_embed(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return table[ids]


def k_logsumexp(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    return np.squeeze(m, -1) + np.log(np.sum(np.exp(x - m), axis=-1))


def k_cross_entropy(logits: np.ndarray, targets: np.ndarray, ignore_index: int = -1) -> float:
    """Mean negative log-likelihood over rows whose target is not ignore_index."""
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    valid = flat_targets != ignore_index
    n_valid = int(np.sum(valid))
    if n_valid == 0:
        raise NumericsError("cross_entropy: no valid target positions")
    idx = np.where(valid, flat_targets, 0)
    lse = k_logsumexp(flat_logits)
    picked = flat_logits[np.arange(flat_logits.shape[0]), idx]
    nll = np.where(valid, lse - picked, 0.0)
    return float(np.sum(nll) / n_valid)


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class Ref:
    """Handle to a node (or leaf) in a Graph."""

    graph: "Graph"
    index: int
    shape: Shape
    kind: str  # "float" | "int"


@dataclass
class _Node:
    op: str
    inputs: Tuple[int, ...]
    shape: Shape
    kind: str
    attrs: dict


def _broadcast_shape(sa: Shape, sb: Shape, op: str) -> Shape:
    """Elementwise shapes: equal, or one side is scalar / a suffix of the other."""
    if sa == sb:
        return sa
    if len(sa) < len(sb):
        small, big = sa, sb
    else:
        small, big = sb, sa
    if small == () or small == big[len(big) - len(small):]:
        return big
    raise NumericsError(f"{op}: shapes {sa} and {sb} do not align (equal or leading-axis broadcast only)")


def _reduce_to(grad: np.ndarray, shape: Shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = np.sum(grad, axis=tuple(range(extra)))
    return grad


class Graph:
    """Ordered primitive nodes over named leaves; construction is topological."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self.leaves: Dict[str, int] = {}
        self.outputs: Dict[str, int] = {}
        COUNTERS.graphs_built += 1

    # -- construction ------------------------------------------------------

    def _add(self, op: str, inputs: Sequence[Ref], shape: Shape, kind: str, **attrs) -> Ref:
        for r in inputs:
            if r.graph is not self:
                raise NumericsError(f"{op}: input ref belongs to another graph")
        node = _Node(op, tuple(r.index for r in inputs), tuple(shape), kind, attrs)
        self.nodes.append(node)
        return Ref(self, len(self.nodes) - 1, tuple(shape), kind)

    def leaf(self, name: str, shape: Sequence[int], kind: str = "float") -> Ref:
        if name in self.leaves:
            raise NumericsError(f"duplicate leaf name {name!r}")
        if kind not in ("float", "int"):
            raise NumericsError(f"leaf kind must be float or int, got {kind!r}")
        dims = tuple(int(d) for d in shape)
        if any(d < 1 for d in dims):
            raise NumericsError(f"leaf {name!r}: dimensions must be positive, got {dims}")
        ref = self._add("leaf", (), dims, kind, name=name)
        self.leaves[name] = ref.index
        return ref

    def output(self, name: str, ref: Ref) -> Ref:
        if ref.graph is not self:
            raise NumericsError("output ref belongs to another graph")
        self.outputs[name] = ref.index
        return ref

    def _need_float(self, op: str, *refs: Ref) -> None:
        for r in refs:
            if r.kind != "float":
                raise NumericsError(f"{op}: requires float input")

    def matmul(self, a: Ref, b: Ref, transpose_a: bool = False, transpose_b: bool = False) -> Ref:
        self._need_float("matmul", a, b)
        sa = a.shape[:-2] + (a.shape[-1], a.shape[-2]) if transpose_a else a.shape
        sb = b.shape[:-2] + (b.shape[-1], b.shape[-2]) if transpose_b else b.shape
        if len(sa) < 2 or len(sb) < 2:
            raise NumericsError("matmul: operands must have rank >= 2")
        if sa[-1] != sb[-2]:
            raise NumericsError(f"matmul: inner dims {sa[-1]} vs {sb[-2]} differ")
        la, lb = sa[:-2], sb[:-2]
        if la and lb and la != lb:
            raise NumericsError(f"matmul: batch dims {la} vs {lb} differ")
        lead = la or lb
        shape = lead + (sa[-2], sb[-1])
        return self._add("matmul", (a, b), shape, "float", ta=transpose_a, tb=transpose_b)

    def add(self, a: Ref, b: Ref) -> Ref:
        self._need_float("add", a, b)
        return self._add("add", (a, b), _broadcast_shape(a.shape, b.shape, "add"), "float")

    def mul(self, a: Ref, b: Ref) -> Ref:
        self._need_float("mul", a, b)
        return self._add("mul", (a, b), _broadcast_shape(a.shape, b.shape, "mul"), "float")

    def tanh(self, x: Ref) -> Ref:
        self._need_float("tanh", x)
        return self._add("tanh", (x,), x.shape, "float")

    def softmax(self, x: Ref) -> Ref:
        self._need_float("softmax", x)
        if len(x.shape) < 1:
            raise NumericsError("softmax: needs at least one axis")
        return self._add("softmax", (x,), x.shape, "float")

    def embed(self, table: Ref, ids: Ref) -> Ref:
        self._need_float("embed", table)
        if ids.kind != "int":
            raise NumericsError("embed: ids must be an int leaf")
        if len(table.shape) != 2:
            raise NumericsError("embed: table must be [vocab, dim]")
        return self._add("embed", (table, ids), ids.shape + (table.shape[1],), "float")

    def layernorm(self, x: Ref, eps: float = LAYERNORM_EPS) -> Ref:
        self._need_float("layernorm", x)
        if len(x.shape) < 1 or x.shape[-1] < 2:
            raise NumericsError("layernorm: last axis must have size >= 2")
        return self._add("layernorm", (x,), x.shape, "float", eps=float(eps))

    def cross_entropy(self, logits: Ref, targets: Ref, ignore_index: int = -1) -> Ref:
        self._need_float("cross_entropy", logits)
        if targets.kind != "int":
            raise NumericsError("cross_entropy: targets must be an int leaf")
        if len(logits.shape) < 1 or logits.shape[:-1] != targets.shape:
            raise NumericsError(
                f"cross_entropy: logits {logits.shape} do not match targets {targets.shape}")
        return self._add("cross_entropy", (logits, targets), (), "float",
                         ignore_index=int(ignore_index))


# ---------------------------------------------------------------------------
# forward evaluation


def _bind(graph: Graph, bindings: Dict[str, np.ndarray]) -> List[Optional[np.ndarray]]:
    values: List[Optional[np.ndarray]] = [None] * len(graph.nodes)
    for name, idx in graph.leaves.items():
        node = graph.nodes[idx]
        if name not in bindings:
            raise NumericsError(f"missing binding for leaf {name!r}")
        if node.kind == "int":
            raw = np.asarray(bindings[name])
            if raw.dtype.kind == "f" and not np.all(raw == np.floor(raw)):
                raise NumericsError(f"leaf {name!r}: expected integral values")
            arr = raw.astype(_INT)
        else:
            arr = as_f64(bindings[name])
            require_finite(arr, f"leaf {name!r}")
        _check_shape(arr, node.shape, f"leaf {name!r}")
        values[idx] = arr
    unknown = set(bindings) - set(graph.leaves)
    if unknown:
        raise NumericsError(f"bindings for unknown leaves: {sorted(unknown)}")
    return values


def _forward(graph: Graph, values: List[Optional[np.ndarray]]) -> None:
    for i, node in enumerate(graph.nodes):
        if node.op == "leaf":
            if values[i] is None:
                raise NumericsError(f"leaf {node.attrs['name']!r} not bound")
            continue
        ins = [values[j] for j in node.inputs]
        if node.op == "matmul":
            out = k_matmul(ins[0], ins[1], node.attrs["ta"], node.attrs["tb"])
        elif node.op == "add":
            out = ins[0] + ins[1]
        elif node.op == "mul":
            out = ins[0] * ins[1]
        elif node.op == "tanh":
            out = k_tanh(ins[0])
        elif node.op == "softmax":
            out = k_softmax(ins[0])
        elif node.op == "embed":
            ids = ins[1]
            vocab = ins[0].shape[0]
            if ids.size and (ids.min() < 0 or ids.max() >= vocab):
                raise NumericsError(f"embed: id out of range [0, {vocab})")
            out = k_embed(ins[0], ids)
        elif node.op == "layernorm":
            out = k_layernorm(ins[0], node.attrs["eps"])
        elif node.op == "cross_entropy":
            ig = node.attrs["ignore_index"]
            tg = ins[1]
            vocab = ins[0].shape[-1]
            ok = (tg == ig) | ((tg >= 0) & (tg < vocab))
            if not np.all(ok):
                raise NumericsError(f"cross_entropy: target id out of range [0, {vocab})")
            out = np.asarray(k_cross_entropy(ins[0], tg, ig))
        else:
            raise NumericsError(f"unknown op {node.op!r}")
        out = np.asarray(out, dtype=_FLOAT)
        require_finite(out, f"{node.op} output")
        values[i] = out


def evaluate(graph: Graph, bindings: Dict[str, np.ndarray],
             outputs: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
    """Run the graph forward; returns the requested (default: all) named outputs."""
    COUNTERS.evaluations += 1
    values = _bind(graph, bindings)
    _forward(graph, values)
    names = list(outputs) if outputs is not None else list(graph.outputs)
    result = {}
    for name in names:
        if name not in graph.outputs:
            raise NumericsError(f"unknown output {name!r}")
        result[name] = values[graph.outputs[name]]
    return result


# ---------------------------------------------------------------------------
# reverse mode


def vjp(graph: Graph, bindings: Dict[str, np.ndarray], output: str,
        cotangent: np.ndarray, wrt: Sequence[str]) -> Dict[str, np.ndarray]:
    """Pull `cotangent` at `output` back to the float leaves named in `wrt`."""
    COUNTERS.vjp_calls += 1
    if output not in graph.outputs:
        raise NumericsError(f"unknown output {output!r}")
    for name in wrt:
        if name not in graph.leaves:
            raise NumericsError(f"unknown leaf {name!r} in wrt")
        if graph.nodes[graph.leaves[name]].kind != "float":
            raise NumericsError(f"leaf {name!r} is not differentiable (int kind)")

    values = _bind(graph, bindings)
    _forward(graph, values)

    out_idx = graph.outputs[output]
    ct = as_f64(cotangent)
    _check_shape(ct, graph.nodes[out_idx].shape, "cotangent")
    require_finite(ct, "cotangent")

    grads: List[Optional[np.ndarray]] = [None] * len(graph.nodes)
    grads[out_idx] = ct

    def accum(idx: int, g: np.ndarray) -> None:
        if graph.nodes[idx].kind != "float":
            return
        if grads[idx] is None:
            grads[idx] = g
        else:
            grads[idx] = grads[idx] + g

    for i in range(len(graph.nodes) - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = graph.nodes[i]
        if node.op == "leaf":
            continue
        ins = [values[j] for j in node.inputs]
        if node.op == "matmul":
            ta, tb = node.attrs["ta"], node.attrs["tb"]
            a, b = ins
            ae = np.swapaxes(a, -1, -2) if ta else a
            be = np.swapaxes(b, -1, -2) if tb else b
            da_e = k_matmul(g, be, tb=True)
            db_e = k_matmul(ae, g, ta=True)
            da = np.swapaxes(da_e, -1, -2) if ta else da_e
            db = np.swapaxes(db_e, -1, -2) if tb else db_e
            accum(node.inputs[0], _reduce_to(da, a.shape))
            accum(node.inputs[1], _reduce_to(db, b.shape))
        elif node.op == "add":
            accum(node.inputs[0], _reduce_to(g, ins[0].shape))
            accum(node.inputs[1], _reduce_to(g, ins[1].shape))
        elif node.op == "mul":
            accum(node.inputs[0], _reduce_to(g * ins[1], ins[0].shape))
            accum(node.inputs[1], _reduce_to(g * ins[0], ins[1].shape))
        elif node.op == "tanh":
            y = values[i]
            accum(node.inputs[0], g * (1.0 - y * y))
        elif node.op == "softmax":
            y = values[i]
            dot = np.sum(g * y, axis=-1, keepdims=True)
            accum(node.inputs[0], y * (g - dot))
        elif node.op == "embed":
            table, ids = ins
            dt = np.zeros_like(table)
            np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            accum(node.inputs[0], dt)
        elif node.op == "layernorm":
            x = ins[0]
            eps = node.attrs["eps"]
            mu = np.mean(x, axis=-1, keepdims=True)
            var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(var + eps)
            y = (x - mu) * inv
            gm = np.mean(g, axis=-1, keepdims=True)
            gym = np.mean(g * y, axis=-1, keepdims=True)
            accum(node.inputs[0], inv * (g - gm - y * gym))
        elif node.op == "cross_entropy":
            logits, targets = ins
            ig = node.attrs["ignore_index"]
            flat_l = logits.reshape(-1, logits.shape[-1])
            flat_t = targets.reshape(-1)
            valid = flat_t != ig
            n_valid = int(np.sum(valid))
            probs = k_softmax(flat_l)
            onehot = np.zeros_like(flat_l)
            rows = np.arange(flat_l.shape[0])
            safe_t = np.where(valid, flat_t, 0)
            onehot[rows, safe_t] = 1.0
            dl = (probs - onehot) * valid[:, None] / n_valid
            accum(node.inputs[0], float(g) * dl.reshape(logits.shape))
        else:
            raise NumericsError(f"unknown op {node.op!r}")

    result = {}
    for name in wrt:
        idx = graph.leaves[name]
        g = grads[idx]
        if g is None:
            g = np.zeros(graph.nodes[idx].shape, dtype=_FLOAT)
        result[name] = require_finite(np.asarray(g, dtype=_FLOAT), f"grad of {name!r}")
    return result


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference(fn: Callable[[Dict[str, np.ndarray]], float],
                      at: Dict[str, np.ndarray], h: float = FD_STEP) -> Dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named arrays."""
    base = {k: as_f64(v).copy() for k, v in at.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(base))
            flat[i] = orig - h
            fm = float(fn(base))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: Dict[str, np.ndarray], numeric: Dict[str, np.ndarray],
                       floor: float = FD_ABS_FLOOR) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor) across all named arrays."""
    worst = 0.0
    for name in analytic:
        a = as_f64(analytic[name]).reshape(-1)
        n = as_f64(numeric[name]).reshape(-1)
        if a.shape != n.shape:
            raise NumericsError(f"gradient shape mismatch for {name!r}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = np.abs(a - n) / denom
        if err.size:
            worst = max(worst, float(np.max(err)))
    return worst


# ---------------------------------------------------------------------------
# parameter sets and checkpoints


class ParameterSet:
    """Named float64 arrays with immutable shapes; values update in place."""

    def __init__(self, arrays: Dict[str, np.ndarray]) -> None:
        self._arrays: Dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            a = as_f64(arr).copy()
            require_finite(a, f"parameter {name!r}")
            self._arrays[name] = a

    def names(self) -> List[str]:
        return list(self._arrays)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def set(self, name: str, value: np.ndarray) -> None:
        if name not in self._arrays:
            raise NumericsError(f"unknown parameter {name!r}")
        v = as_f64(value)
        _check_shape(v, self._arrays[name].shape, f"parameter {name!r}")
        require_finite(v, f"parameter {name!r}")
        self._arrays[name] = v.copy()

    def items(self):
        return self._arrays.items()

    def as_dict(self) -> Dict[str, np.ndarray]:
        return dict(self._arrays)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self._arrays)

    def total_size(self) -> int:
        return sum(a.size for a in self._arrays.values())


CHECKPOINT_MAGIC = b"EQPM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: ParameterSet) -> bytes:
    """Serialize: magic, u32 version, u32 count, then per entry
    u16 name length + UTF-8 name, u8 rank, u32 dims, little-endian f32 values."""
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.names()))]
    for name, arr in params.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"parameter rank too large: {name!r}")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


def checkpoint_from_bytes(blob: bytes) -> ParameterSet:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a parameter checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n_vals = 1
        for d in dims:
            n_vals *= d
        data = np.frombuffer(take(4 * n_vals, f"values of {name!r}"), dtype="<f4")
        if name in arrays:
            raise CheckpointError(f"duplicate parameter {name!r}")
        arrays[name] = data.astype(_FLOAT).reshape(dims)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return ParameterSet(arrays)


def save_checkpoint(params: ParameterSet, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path: str) -> ParameterSet:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
