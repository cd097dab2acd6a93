"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tape records every operation eagerly as an expression is built, so a
finished graph doubles as a forward cache. ``Tape.backward`` walks the
records in reverse and accumulates gradients into every trainable leaf;
``Tape.evaluate`` recomputes the whole graph from leaf bindings, which is
the surface the purity and gradient-checking tests drive.

Also home to the versioned binary tensor container used for checkpoints
(``save_arrays`` / ``load_arrays``), since it stores exactly the named
float64 arrays this module produces.
"""

from __future__ import annotations

import struct
from typing import Callable

import numpy as np

MAGIC = b"NMTB"
FORMAT_VERSION = 1


class GraphError(ValueError):
    """Raised for malformed graphs: shape mismatches, non-finite values,
    non-scalar backward seeds, bad bindings."""


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcast to produce it."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Per-op forward / backward rules. Forward functions are the single source
# of truth: eager construction and Tape.evaluate both call them.
# ---------------------------------------------------------------------------


def _fw_add(vals, at):
    return vals[0] + vals[1]


def _bw_add(g, vals, out, at):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]


def _fw_mul(vals, at):
    return vals[0] * vals[1]


def _bw_mul(g, vals, out, at):
    return [
        _unbroadcast(g * vals[1], vals[0].shape),
        _unbroadcast(g * vals[0], vals[1].shape),
    ]


def _fw_matmul(vals, at):
    return np.matmul(vals[0], vals[1])


def _bw_matmul(g, vals, out, at):
    a, b = vals
    if a.ndim == 1 and b.ndim == 1:  # dot product -> scalar
        return [g * b, g * a]
    if a.ndim == 1:  # (k,) @ (k,m) -> (m,)
        return [b @ g, np.outer(a, g)]
    if b.ndim == 1:  # (n,k) @ (k,) -> (n,)
        return [np.outer(g, b), a.T @ g]
    return [g @ b.T, a.T @ g]


def _fw_tanh(vals, at):
    return np.tanh(vals[0])


def _bw_tanh(g, vals, out, at):
    return [g * (1.0 - out * out)]


def _fw_sigmoid(vals, at):
    return 1.0 / (1.0 + np.exp(-vals[0]))


def _bw_sigmoid(g, vals, out, at):
    return [g * out * (1.0 - out)]


def _fw_log(vals, at):
    return np.log(vals[0])


def _bw_log(g, vals, out, at):
    return [g / vals[0]]


def _fw_softmax(vals, at):
    x = vals[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _bw_softmax(g, vals, out, at):
    inner = (g * out).sum(axis=-1, keepdims=True)
    return [out * (g - inner)]


def _fw_concat(vals, at):
    return np.concatenate(vals, axis=at["axis"])


def _bw_concat(g, vals, out, at):
    axis = at["axis"]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=axis))


def _fw_slice(vals, at):
    sl = [slice(None)] * vals[0].ndim
    sl[at["axis"]] = slice(at["start"], at["stop"])
    return vals[0][tuple(sl)]


def _bw_slice(g, vals, out, at):
    full = np.zeros_like(vals[0])
    sl = [slice(None)] * full.ndim
    sl[at["axis"]] = slice(at["start"], at["stop"])
    full[tuple(sl)] = g
    return [full]


def _fw_gather(vals, at):
    return vals[0][at["ids"]]


def _bw_gather(g, vals, out, at):
    full = np.zeros_like(vals[0])
    np.add.at(full, at["ids"], g)
    return [full]


def _fw_reshape(vals, at):
    return vals[0].reshape(at["shape"])


def _bw_reshape(g, vals, out, at):
    return [g.reshape(vals[0].shape)]


def _fw_sum(vals, at):
    return np.asarray(vals[0].sum())


def _bw_sum(g, vals, out, at):
    return [np.full_like(vals[0], float(g))]


def _fw_cross_entropy(vals, at):
    logits = vals[0]
    ids, weights = at["ids"], at["weights"]
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[:, 0]
    nll = lse - logits[np.arange(len(ids)), ids]
    return np.asarray((weights * nll).sum())


def _bw_cross_entropy(g, vals, out, at):
    logits = vals[0]
    ids, weights = at["ids"], at["weights"]
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    p[np.arange(len(ids)), ids] -= 1.0
    return [float(g) * weights[:, None] * p]


def _fw_attention_bias(vals, at):
    # att (k*B, T) against a per-sentence constant table (B, T, V).
    att = vals[0]
    table = at["table"]
    b, t, v = table.shape
    out = np.einsum("kbt,btv->kbv", att.reshape(-1, b, t), table)
    return out.reshape(att.shape[0], v)


def _bw_attention_bias(g, vals, out, at):
    table = at["table"]
    b, t, v = table.shape
    datt = np.einsum("kbv,btv->kbt", g.reshape(-1, b, v), table)
    return [datt.reshape(vals[0].shape[0], t)]


_FORWARD: dict[str, Callable] = {
    "add": _fw_add,
    "mul": _fw_mul,
    "matmul": _fw_matmul,
    "tanh": _fw_tanh,
    "sigmoid": _fw_sigmoid,
    "log": _fw_log,
    "softmax": _fw_softmax,
    "concat": _fw_concat,
    "slice": _fw_slice,
    "gather": _fw_gather,
    "reshape": _fw_reshape,
    "sum": _fw_sum,
    "cross_entropy": _fw_cross_entropy,
    "attention_bias": _fw_attention_bias,
}

_BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "mul": _bw_mul,
    "matmul": _bw_matmul,
    "tanh": _bw_tanh,
    "sigmoid": _bw_sigmoid,
    "log": _bw_log,
    "softmax": _bw_softmax,
    "concat": _bw_concat,
    "slice": _bw_slice,
    "gather": _bw_gather,
    "reshape": _bw_reshape,
    "sum": _bw_sum,
    "cross_entropy": _bw_cross_entropy,
    "attention_bias": _bw_attention_bias,
}


class Node:
    __slots__ = ("op", "inputs", "value", "attrs", "trainable", "name")

    def __init__(self, op, inputs, value, attrs=None, trainable=False, name=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs or {}
        self.trainable = trainable
        self.name = name

    @property
    def is_leaf(self):
        return self.op == "leaf"


class Var:
    """Handle to one tape node. Supports +, * and @ against other Vars."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other: "Var") -> "Var":
        return self.tape.add(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return self.tape.mul(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return self.tape.matmul(self, other)

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var(#{self.index} {node.op} shape={self.value.shape})"


class Tape:
    """Append-only record of ops over float64 arrays, built eagerly."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- construction -------------------------------------------------------

    def leaf(self, value, trainable: bool = False, name: str | None = None) -> Var:
        value = _as_f64(value)
        self.nodes.append(Node("leaf", (), value, trainable=trainable, name=name))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        return self.leaf(value, trainable=False)

    def _record(self, op: str, inputs: tuple[Var, ...], **attrs) -> Var:
        vals = [v.value for v in inputs]
        try:
            out = _FORWARD[op](vals, attrs)
        except ValueError as exc:
            raise GraphError(
                f"shape mismatch at node {len(self.nodes)} ({op}): {exc}"
            ) from exc
        self.nodes.append(Node(op, tuple(v.index for v in inputs), out, attrs))
        return Var(self, len(self.nodes) - 1)

    # -- ops ----------------------------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        return self._record("add", (a, b))

    def mul(self, a: Var, b: Var) -> Var:
        return self._record("mul", (a, b))

    def matmul(self, a: Var, b: Var) -> Var:
        return self._record("matmul", (a, b))

    def tanh(self, a: Var) -> Var:
        return self._record("tanh", (a,))

    def sigmoid(self, a: Var) -> Var:
        return self._record("sigmoid", (a,))

    def log(self, a: Var) -> Var:
        return self._record("log", (a,))

    def softmax(self, a: Var) -> Var:
        """Numerically stable softmax over the last axis."""
        return self._record("softmax", (a,))

    def concat(self, parts: list[Var], axis: int = 0) -> Var:
        return self._record("concat", tuple(parts), axis=axis)

    def slice(self, a: Var, axis: int, start: int, stop: int) -> Var:
        return self._record("slice", (a,), axis=axis, start=start, stop=stop)

    def gather(self, a: Var, ids) -> Var:
        """Row lookup a[ids]; backward scatter-adds, so repeated ids accumulate."""
        return self._record("gather", (a,), ids=np.asarray(ids, dtype=np.intp))

    def reshape(self, a: Var, shape: tuple[int, ...]) -> Var:
        return self._record("reshape", (a,), shape=shape)

    def sum(self, a: Var) -> Var:
        return self._record("sum", (a,))

    def cross_entropy(self, logits: Var, ids, weights=None) -> Var:
        """Scalar sum_i weights_i * (-log softmax(logits_i)[ids_i]), fused for stability."""
        ids = np.asarray(ids, dtype=np.intp)
        if weights is None:
            weights = np.ones(len(ids))
        return self._record(
            "cross_entropy", (logits,), ids=ids, weights=_as_f64(weights)
        )

    def attention_bias(self, att: Var, table: np.ndarray) -> Var:
        """Per-row matmul of att (k*B, T) against a constant table (B, T, V).

        Row r of the output is att[r] @ table[r mod B]; the table carries no
        gradient, attention weights do.
        """
        return self._record("attention_bias", (att,), table=_as_f64(table))

    # -- evaluation and differentiation --------------------------------------

    def _binding_index(self, key) -> int:
        if isinstance(key, Var):
            return key.index
        if isinstance(key, int):
            return key
        for idx, node in enumerate(self.nodes):
            if node.name == key:
                return idx
        raise GraphError(f"no leaf named {key!r}")

    def evaluate(self, bindings: dict | None = None) -> dict[int, np.ndarray]:
        """Recompute every node from leaf values, with optional leaf overrides.

        Keys of `bindings` may be Vars, node indices, or leaf names. Rejects
        bindings of non-leaf nodes, shape mismatches (reporting the offending
        node id) and non-finite intermediates.
        """
        bound: dict[int, np.ndarray] = {}
        for key, value in (bindings or {}).items():
            idx = self._binding_index(key)
            if not self.nodes[idx].is_leaf:
                raise GraphError(f"node {idx} is not a leaf and cannot be bound")
            bound[idx] = _as_f64(value)

        values: dict[int, np.ndarray] = {}
        for idx, node in enumerate(self.nodes):
            if node.is_leaf:
                out = bound.get(idx, node.value)
            else:
                vals = [values[i] for i in node.inputs]
                try:
                    out = _FORWARD[node.op](vals, node.attrs)
                except ValueError as exc:
                    raise GraphError(
                        f"shape mismatch at node {idx} ({node.op}): {exc}"
                    ) from exc
            if not np.all(np.isfinite(out)):
                raise GraphError(f"non-finite value at node {idx} ({node.op})")
            values[idx] = out
        return values

    def backward(self, seed: Var) -> dict:
        """Gradients of the scalar `seed` w.r.t. every trainable leaf.

        Returns {name-or-index: array}; leaves the seed does not depend on get
        exact zeros. Gradients accumulate over every use of a leaf.
        """
        seed_node = self.nodes[seed.index]
        if seed_node.value.size != 1:
            raise GraphError(
                f"backward seed must be scalar, node {seed.index} has shape "
                f"{seed_node.value.shape}"
            )

        partial: list[np.ndarray | None] = [None] * len(self.nodes)
        partial[seed.index] = np.ones_like(seed_node.value)
        for idx in range(seed.index, -1, -1):
            g = partial[idx]
            node = self.nodes[idx]
            if g is None or node.is_leaf:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            input_grads = _BACKWARD[node.op](g, vals, node.value, node.attrs)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None:
                    continue
                if partial[inp] is None:
                    partial[inp] = np.zeros_like(self.nodes[inp].value)
                partial[inp] += gi

        grads = {}
        for idx, node in enumerate(self.nodes):
            if node.trainable:
                key = node.name if node.name is not None else idx
                g = partial[idx]
                grads[key] = g if g is not None else np.zeros_like(node.value)
        return grads


def finite_difference_grad(fn, point, epsilon: float = 1e-4) -> np.ndarray:
    """Central-difference gradient (f(x+eps*e_i) - f(x-eps*e_i)) / 2eps.

    Independent of the tape machinery on purpose: this is the oracle the
    backward pass is checked against.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    point = _as_f64(point).copy()
    grad = np.zeros_like(point)
    flat, gflat = point.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = float(fn(point))
        flat[i] = orig - epsilon
        lo = float(fn(point))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * epsilon)
    return grad


# ---------------------------------------------------------------------------
# Versioned binary container for named float64 tensors.
# Layout: magic "NMTB", u32 version, then per tensor (sorted by name):
# u32 name length, UTF-8 name, u32 rank, u32 dims, raw little-endian float64.
# ---------------------------------------------------------------------------


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(_as_f64(arrays[name]))
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter container (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    arrays: dict[str, np.ndarray] = {}
    offset = 8
    while offset < len(data):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        arrays[name] = arr.reshape(dims).astype(np.float64)
    return arrays
