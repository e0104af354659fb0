"""Dense-tensor reverse-mode autodiff over a fixed op set, plus Adam.

Tensors are plain float64 numpy arrays in N x C x H x W layout (rank <= 4;
reductions produce rank-0 scalars). A :class:`Graph` records op nodes as they
are built (define-by-run), so it can be replayed by :func:`evaluate` with new
bindings and differentiated by :func:`backprop`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_CLAMP = 1e-12
LEAKY_SLOPE = 0.1
MAX_FD_PARAMS = 10_000

OP_KINDS = frozenset({
    "input", "param", "const",
    "conv2d", "add", "mul", "scale", "div", "leaky_relu", "sigmoid", "log",
    "mean", "sum", "concat",
})


class GraphError(ValueError):
    """Raised for malformed graphs; carries the offending node index."""

    def __init__(self, message: str, node: int | None = None):
        self.node = node
        where = f"node {node}: " if node is not None else ""
        super().__init__(where + message)


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


class ConfigError(ValueError):
    pass


def as_tensor(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim > 4:
        raise ShapeError(f"rank {arr.ndim} exceeds 4")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# kernels (shared by graph evaluation and no-grad forward passes)

def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w))
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, k] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, c * 9, h * w)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 convolution, stride 1, zero padding 1. Returns (out, im2col cache)."""
    n, _, h, wd = x.shape
    cols = _im2col(x)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    out += b[None, :, None]
    return out.reshape(n, w.shape[0], h, wd), cols


def conv2d_backward(g: np.ndarray, x_shape, w: np.ndarray, cols: np.ndarray):
    n, c, h, wd = x_shape
    g2 = g.reshape(n, w.shape[0], h * wd)
    dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = g2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(w.shape[0], -1).T, g2).reshape(n, c, 9, h, wd)
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for k in range(9):
        dy, dx = divmod(k, 3)
        dxp[:, :, dy:dy + h, dx:dx + wd] += dcols[:, :, k]
    return dxp[:, :, 1:-1, 1:-1], dw, db


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


# ---------------------------------------------------------------------------
# graph

@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)


class Var:
    """Handle to a node of a graph."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.graph.values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var({self.graph.nodes[self.index].op}#{self.index}, shape={self.shape})"


class Graph:
    """Define-by-run computation graph.

    Every builder method evaluates its node immediately and appends it to
    ``nodes``; the node order is therefore a valid topological order.
    """

    def __init__(self, params: "ParamSet | None" = None, debug: bool = False):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.caches: list = []
        self.params = params
        self.debug = debug

    def __len__(self):
        return len(self.nodes)

    def _push(self, op: str, inputs: tuple[int, ...] = (), leaf=None, **attrs) -> Var:
        node = Node(op, inputs, attrs)
        idx = len(self.nodes)
        self.nodes.append(node)
        try:
            value, cache = _forward_node(node, [self.values[i] for i in inputs], idx, leaf_value=leaf)
        except Exception:
            self.nodes.pop()
            raise
        if self.debug and not np.all(np.isfinite(value)):
            self.nodes.pop()
            raise NonFiniteError(f"non-finite output of {op}", idx)
        self.values.append(value)
        self.caches.append(cache)
        return Var(self, idx)

    def _idx(self, v: Var) -> int:
        if v.graph is not self:
            raise GraphError("variable belongs to another graph")
        return v.index

    # leaves
    def input(self, name: str, value) -> Var:
        return self._push("input", leaf=as_tensor(value), name=name)

    def const(self, value) -> Var:
        return self._push("const", leaf=as_tensor(value))

    def param(self, name: str) -> Var:
        if self.params is None:
            raise GraphError("graph has no ParamSet bound")
        return self._push("param", leaf=self.params[name], name=name)

    def detach(self, v: Var) -> Var:
        """Constant copy of ``v``'s current value; gradient stops here."""
        return self.const(v.value.copy())

    # ops
    def conv2d(self, x: Var, w: Var, b: Var) -> Var:
        return self._push("conv2d", (self._idx(x), self._idx(w), self._idx(b)))

    def add(self, a: Var, b: Var) -> Var:
        return self._push("add", (self._idx(a), self._idx(b)))

    def mul(self, a: Var, b: Var) -> Var:
        return self._push("mul", (self._idx(a), self._idx(b)))

    def div(self, a: Var, b: Var) -> Var:
        return self._push("div", (self._idx(a), self._idx(b)))

    def scale(self, a: Var, c: float) -> Var:
        return self._push("scale", (self._idx(a),), c=float(c))

    def leaky_relu(self, a: Var) -> Var:
        return self._push("leaky_relu", (self._idx(a),))

    def sigmoid(self, a: Var) -> Var:
        return self._push("sigmoid", (self._idx(a),))

    def log(self, a: Var) -> Var:
        return self._push("log", (self._idx(a),))

    def mean(self, a: Var) -> Var:
        return self._push("mean", (self._idx(a),))

    def sum(self, a: Var) -> Var:
        return self._push("sum", (self._idx(a),))

    def concat(self, a: Var, b: Var) -> Var:
        return self._push("concat", (self._idx(a), self._idx(b)))

    # convenience compositions (still expressed in the fixed op set)
    def sub(self, a: Var, b: Var) -> Var:
        return self.add(a, self.scale(b, -1.0))

    def one_minus(self, a: Var) -> Var:
        return self.add(self.const(np.ones(a.shape)), self.scale(a, -1.0))


def _check_same(op, vals, idx):
    if vals[0].shape != vals[1].shape:
        raise ShapeError(f"{op} operands differ in shape: {vals[0].shape} vs {vals[1].shape}", idx)


def _forward_node(node: Node, vals: list[np.ndarray], idx: int, leaf_value=None):
    op = node.op
    if op in ("input", "param", "const"):
        return leaf_value, None
    if op == "conv2d":
        x, w, b = vals
        if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1] \
                or b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d got x{x.shape}, w{w.shape}, b{b.shape}", idx)
        return conv2d_forward(x, w, b)
    if op in ("add", "mul", "div"):
        _check_same(op, vals, idx)
        a, b = vals
        if op == "add":
            return a + b, None
        if op == "mul":
            return a * b, None
        if np.any(b == 0):
            raise GraphError("division by zero", idx)
        return a / b, None
    if op == "scale":
        return vals[0] * node.attrs["c"], None
    if op == "leaky_relu":
        return leaky_relu(vals[0]), None
    if op == "sigmoid":
        return sigmoid(vals[0]), None
    if op == "log":
        return np.log(np.maximum(vals[0], LOG_CLAMP)), None
    if op == "mean":
        return np.array(vals[0].mean()), None
    if op == "sum":
        return np.array(vals[0].sum()), None
    if op == "concat":
        a, b = vals
        if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ShapeError(f"concat got {a.shape} and {b.shape}", idx)
        return np.concatenate([a, b], axis=1), None
    raise GraphError(f"unknown op {op!r}", idx)


def _backward_node(node: Node, g: np.ndarray, vals, out, cache):
    op = node.op
    if op == "conv2d":
        x, w, _ = vals
        return conv2d_backward(g, x.shape, w, cache)
    if op == "add":
        return g, g
    if op == "mul":
        return g * vals[1], g * vals[0]
    if op == "div":
        a, b = vals
        return g / b, -g * a / (b * b)
    if op == "scale":
        return (g * node.attrs["c"],)
    if op == "leaky_relu":
        return (np.where(vals[0] > 0, g, LEAKY_SLOPE * g),)
    if op == "sigmoid":
        return (g * out * (1.0 - out),)
    if op == "log":
        x = vals[0]
        return (np.where(x > LOG_CLAMP, g / np.maximum(x, LOG_CLAMP), 0.0),)
    if op == "mean":
        return (np.full(vals[0].shape, g / vals[0].size),)
    if op == "sum":
        return (np.full(vals[0].shape, g),)
    if op == "concat":
        c = vals[0].shape[1]
        return g[:, :c], g[:, c:]
    raise GraphError(f"cannot differentiate {op!r}")


# ---------------------------------------------------------------------------
# parameters

class ParamSet:
    """Named float64 tensors with gradient accumulators and Adam state."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self.tensors: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        arr = as_tensor(value)
        self.tensors[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name in self.tensors:
            out.tensors[name] = self.tensors[name].copy()
            out.grads[name] = self.grads[name].copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.step = self.step
        return out

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        return h.hexdigest()

    def max_abs_diff(self, other: "ParamSet") -> float:
        return max(float(np.max(np.abs(self[n] - other[n]))) for n in self.tensors)


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")


def adam_step(params: ParamSet, config: AdamConfig) -> ParamSet:
    """Bias-corrected Adam update in place; zeroes gradients afterwards."""
    if not config.lr > 0:
        raise ConfigError(f"lr must be positive, got {config.lr}")
    params.step += 1
    t = params.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name, p in params.tensors.items():
        g = params.grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        p -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        g.fill(0.0)
    return params


# ---------------------------------------------------------------------------
# evaluation / differentiation

def _run(graph: Graph, inputs: dict | None, params: ParamSet | None):
    if inputs is None and params is None:
        return graph.values, graph.caches
    inputs = inputs or {}
    values: list[np.ndarray] = []
    caches: list = []
    for idx, node in enumerate(graph.nodes):
        if node.op == "input":
            name = node.attrs["name"]
            leaf = as_tensor(inputs[name]) if name in inputs else graph.values[idx]
        elif node.op == "param":
            name = node.attrs["name"]
            src = params if params is not None else graph.params
            if name not in src:
                raise GraphError(f"param {name!r} not bound", idx)
            leaf = src[name]
        else:
            leaf = graph.values[idx] if node.op == "const" else None
        value, cache = _forward_node(node, [values[i] for i in node.inputs], idx, leaf_value=leaf)
        if node.op in ("input", "param") and value.shape != graph.values[idx].shape:
            raise ShapeError(f"{node.op} {node.attrs['name']!r} rebound with shape {value.shape}, "
                             f"graph built with {graph.values[idx].shape}", idx)
        if graph.debug and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite output of {node.op}", idx)
        values.append(value)
        caches.append(cache)
    return values, caches


def evaluate(graph: Graph, inputs: dict | None = None, params: ParamSet | None = None,
             outputs: list[Var] | None = None) -> list[np.ndarray]:
    """Re-run ``graph`` with new input/param bindings; returns requested node values.

    Unbound inputs keep the values they were recorded with. Parameters are
    read, never written.
    """
    values, _ = _run(graph, inputs, params)
    if outputs is None:
        return [values[-1]]
    return [values[graph._idx(v)] for v in outputs]


def backprop(graph: Graph, loss: Var, params: ParamSet | None = None,
             inputs: dict | None = None, scale: float = 1.0) -> ParamSet:
    """Accumulate ``scale * d loss / d param`` into ``params.grads``.

    Gradients are added to whatever the accumulators already hold; call
    ``ParamSet.zero_grad`` (or ``adam_step``) to reset them.
    """
    params = params if params is not None else graph.params
    if params is None:
        raise GraphError("no ParamSet to accumulate into")
    li = graph._idx(loss)
    if graph.values[li].shape != ():
        raise GraphError(f"loss must be scalar, got shape {graph.values[li].shape}", li)
    rebind = inputs is not None or params is not graph.params
    values, caches = _run(graph, inputs, params) if rebind else (graph.values, graph.caches)
    grads: list[np.ndarray | None] = [None] * (li + 1)
    grads[li] = np.array(float(scale))
    for idx in range(li, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = graph.nodes[idx]
        if node.op == "param":
            name = node.attrs["name"]
            params.grads[name] += g
            continue
        if node.op in ("input", "const"):
            continue
        in_grads = _backward_node(node, g, [values[i] for i in node.inputs], values[idx], caches[idx])
        for i, gi in zip(node.inputs, in_grads):
            grads[i] = gi if grads[i] is None else grads[i] + gi
    return params


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float]

    @property
    def flagged(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over components of |a - n| / max(|a|, |n|, floor)."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(graph: Graph, loss: Var, params: ParamSet, name: str,
                 inputs: dict | None = None, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``loss`` w.r.t. one parameter tensor."""
    li = graph._idx(loss)
    probe = params.copy()
    flat = probe.tensors[name].reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = float(_run(graph, inputs or {}, probe)[0][li])
        flat[i] = orig - h
        minus = float(_run(graph, inputs or {}, probe)[0][li])
        flat[i] = orig
        out[i] = (plus - minus) / (2 * h)
    return out.reshape(params[name].shape)


def finite_diff_check(graph: Graph, loss: Var, params: ParamSet, inputs: dict | None = None,
                      tolerance: float = 1e-6, h: float = 1e-5,
                      analytic: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences, per parameter block.

    ``analytic`` may supply precomputed gradients (e.g. to audit a gradient
    source other than :func:`backprop`). Blocks whose error exceeds
    ``tolerance`` are listed in ``report.flagged``; nothing is raised.

    A difference quotient cannot resolve changes below roughly
    eps * |loss| / h, so the relative-error denominator is floored at ten
    times that resolution divided by ``tolerance`` (and never below 1e-6).
    Components smaller than the floor are effectively compared absolutely.
    """
    if params.num_params() > MAX_FD_PARAMS:
        raise ConfigError(f"finite_diff_check limited to {MAX_FD_PARAMS} params, "
                          f"got {params.num_params()}")
    if analytic is None:
        probe = params.copy()
        probe.zero_grad()
        backprop(graph, loss, probe, inputs=inputs or {})
        analytic = probe.grads
    value = float(_run(graph, inputs or {}, params)[0][graph._idx(loss)])
    floor = max(1e-6, 10 * np.finfo(np.float64).eps * abs(value) / (h * tolerance))
    errors = {}
    for name in params:
        num = numeric_grad(graph, loss, params, name, inputs=inputs, h=h)
        errors[name] = relative_error(np.asarray(analytic[name]), num, floor)
    return GradCheckReport(tolerance, errors)


# ---------------------------------------------------------------------------
# serialization

PARAM_MAGIC = b"SCLRPS01"


class FormatError(ValueError):
    pass


def dumps_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [PARAM_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads_tensors(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if buf[:8] != PARAM_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:8]!r}")
    try:
        pos = 8
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if rank > 4:
                raise FormatError(f"{source}: tensor {name!r} has rank {rank}")
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 8 * n > len(buf):
                raise FormatError(f"{source}: truncated data for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise FormatError(f"{source}: truncated file") from exc
    if pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - pos} trailing bytes")
    return out


def save_params(params: ParamSet, path: str | Path, optimizer_state: bool = False) -> None:
    """Write tensors (and, optionally, Adam moments + step) atomically."""
    path = Path(path)
    tensors = dict(params.tensors)
    if optimizer_state:
        tensors = {}
        for name in params:
            tensors[f"m/{name}"] = params.m[name]
            tensors[f"v/{name}"] = params.v[name]
        tensors["step"] = np.array(float(params.step))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_tensors(tensors))
    tmp.replace(path)


def load_params(path: str | Path, optimizer_path: str | Path | None = None) -> ParamSet:
    path = Path(path)
    params = ParamSet(loads_tensors(path.read_bytes(), str(path)))
    if optimizer_path is not None:
        opt = loads_tensors(Path(optimizer_path).read_bytes(), str(optimizer_path))
        for name in params:
            params.m[name] = opt[f"m/{name}"].copy()
            params.v[name] = opt[f"v/{name}"].copy()
        params.step = int(opt["step"])
    return params
