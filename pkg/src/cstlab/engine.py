"""Minimal dense-tensor engine with reverse-mode autodiff and selective
activation retention.

Values live on a ``Tape`` that records every forward operation together
with the exact set of buffers its backward pass will read.  A value is
retained (kept materialized until backward) only when some operation on a
trainable-to-loss path needs it; everything else can be dropped after its
last forward use without changing any gradient.  This makes the training
memory footprint of a model an inspectable, testable artifact rather than
an allocator accident.

Conventions:
  * activations are N,C,H,W; parameters are arbitrary rank
  * float32 storage and compute by default; pass ``dtype=np.float64`` to
    ``Tape`` for the high-precision verification mode used by gradient
    checks
  * no broadcasting except scalar-with-tensor (``smul``/``scale_shift``)
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

__all__ = [
    "ShapeError",
    "NoTrainablePathError",
    "Parameter",
    "Tensor",
    "Node",
    "Tape",
    "conv2d",
    "relu",
    "sigmoid",
    "eabs",
    "add",
    "sub",
    "mul",
    "smul",
    "emax",
    "mtc_gate",
    "packed_mask_elems",
    "scale_shift",
    "concat_channels",
    "global_avg_pool",
    "linear",
    "channel_affine",
    "channel_shift",
    "sum_all",
    "mean_all",
    "cross_entropy",
    "l1_loss",
    "mse_loss",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NoTrainablePathError(RuntimeError):
    """Raised when a loss is disconnected from every trainable parameter."""


class Parameter:
    """A named, persistent weight with a trainability flag.

    Parameters live outside any tape; each training step reads them onto
    a fresh tape via ``Tape.read``.  A gradient is produced for a
    parameter iff it is trainable and reachable from the loss.
    """

    __slots__ = ("name", "data", "trainable")

    def __init__(self, name: str, data: np.ndarray, trainable: bool = True):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.trainable = bool(trainable)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self):
        flag = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={tuple(self.shape)}, {flag})"


class Tensor:
    """A value recorded on a tape: leaf input, parameter leaf, or op output."""

    __slots__ = ("tape", "vid", "data", "requires_grad", "param", "_numel")

    def __init__(self, tape: "Tape", vid: int, data, requires_grad: bool,
                 param: Optional[Parameter] = None):
        self.tape = tape
        self.vid = vid
        self.data = data
        self.requires_grad = requires_grad
        self.param = param
        self._numel = int(data.size)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        # survives drop_unretained; accounting needs sizes of freed buffers
        return self._numel

    @property
    def is_param(self) -> bool:
        return self.param is not None

    def __repr__(self):
        shape = "dropped" if self.data is None else tuple(self.data.shape)
        return f"Tensor(vid={self.vid}, shape={shape}, rg={self.requires_grad})"


class Node:
    """One recorded operation: op kind, operand vids, saved buffers.

    ``saved`` maps slot names to the values backward will read.  Entries
    are ``Tensor`` references or raw ndarrays (op-internal buffers such as
    softmax probabilities).  ``saved`` is empty when the node's output
    does not require grad: such nodes are off every trainable-to-loss
    path and their inputs need not outlive the forward pass.

    ``scope`` is a free-form label (e.g. "backbone", "side") stamped from
    ``Tape.scope``; memory reports and tests use it to attribute values
    to the submodule that produced them.
    """

    __slots__ = ("op", "inputs", "out", "attrs", "saved", "scope")

    def __init__(self, op: str, inputs: tuple, out: int, attrs: dict,
                 saved: dict, scope: str = ""):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.attrs = attrs
        self.saved = saved
        self.scope = scope


class Tape:
    """Recorded forward computation; drives backward and memory accounting."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.values: list[Tensor] = []
        self.nodes: list[Node] = []
        self._param_leaves: dict[int, Tensor] = {}
        self._scopes: list[str] = []

    def scope(self, label: str):
        """Context manager labeling ops recorded inside it."""
        return _Scope(self, label)

    # ------------------------------------------------------------------
    # leaves
    # ------------------------------------------------------------------

    def leaf(self, array) -> Tensor:
        """Record a data input (no gradient is ever produced for it)."""
        data = np.ascontiguousarray(array, dtype=self.dtype)
        return self._new_value(data, requires_grad=False)

    def read(self, param: Parameter) -> Tensor:
        """Read a parameter onto the tape (cached: one leaf per parameter)."""
        key = id(param)
        cached = self._param_leaves.get(key)
        if cached is not None:
            return cached
        data = param.data if param.data.dtype == self.dtype \
            else param.data.astype(self.dtype)
        t = self._new_value(data, requires_grad=param.trainable, param=param)
        self._param_leaves[key] = t
        return t

    def _new_value(self, data, requires_grad, param=None) -> Tensor:
        t = Tensor(self, len(self.values), data, requires_grad, param)
        self.values.append(t)
        return t

    def record(self, op: str, inputs: tuple, out_data, attrs: dict,
               saved: dict) -> Tensor:
        rg = any(v.requires_grad for v in inputs)
        out = self._new_value(out_data, requires_grad=rg)
        if not rg:
            saved = {}
        scope = self._scopes[-1] if self._scopes else ""
        self.nodes.append(Node(op, tuple(v.vid for v in inputs), out.vid,
                               attrs, saved, scope))
        return out

    # ------------------------------------------------------------------
    # retention
    # ------------------------------------------------------------------

    def retained_vids(self, loss: Optional[Tensor] = None) -> set[int]:
        """Value ids that must stay materialized until backward.

        The union of all saved buffers of active-path nodes, plus the
        loss value itself when given.  Parameter leaves are excluded:
        they are weights, not activations.
        """
        keep: set[int] = set()
        for node in self.nodes:
            for val in node.saved.values():
                if isinstance(val, Tensor) and not val.is_param:
                    keep.add(val.vid)
        if loss is not None:
            keep.add(loss.vid)
        return keep

    def drop_unretained(self, keep: Iterable[Tensor] = ()) -> int:
        """Free every buffer backward will not read; returns elements freed.

        After this, ``backward`` still produces bit-identical gradients:
        backward kernels read only ``Node.saved`` and parameter data.
        """
        protected = self.retained_vids()
        for t in keep:
            protected.add(t.vid)
        freed = 0
        for value in self.values:
            if value.is_param or value.vid in protected:
                continue
            if value.data is not None:
                freed += value.data.size
                value.data = None
        return freed

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns gradients keyed by parameter name, for exactly the
        trainable parameters reachable from the loss.  Raises
        ``NoTrainablePathError`` when there are none.
        """
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.data is None or loss.data.size != 1:
            raise ValueError("loss must be a materialized scalar")
        if not loss.requires_grad:
            raise NoTrainablePathError(
                "loss is disconnected from all trainable parameters")

        producer = {node.out: node for node in self.nodes}
        grads: dict[int, np.ndarray] = {
            loss.vid: np.ones_like(loss.data)
        }
        result: dict[str, np.ndarray] = {}
        # nodes are recorded in topological order; walk them in reverse
        for node in reversed(self.nodes):
            g = grads.pop(node.out, None)
            if g is None:
                continue
            for pos, partial in _backward_kernel(self, node, g):
                vid = node.inputs[pos]
                tgt = self.values[vid]
                if not tgt.requires_grad:
                    continue
                acc = grads.get(vid)
                grads[vid] = partial if acc is None else acc + partial
        for value in self.values:
            if value.is_param and value.param.trainable and value.vid in grads:
                result[value.param.name] = grads[value.vid]
        return result


class _Scope:
    def __init__(self, tape: Tape, label: str):
        self.tape = tape
        self.label = label

    def __enter__(self):
        self.tape._scopes.append(self.label)
        return self

    def __exit__(self, *exc):
        self.tape._scopes.pop()
        return False


# ----------------------------------------------------------------------
# forward kernels (shared by the eager ops and the replay executor)
# ----------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unfold x (N,C,H,W) into (N, C, kh, kw, Ho, Wo) sliding windows."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride,
                                 j:j + stride * wo:stride]
    return cols, ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int,
            padding: int) -> np.ndarray:
    """Scatter-add sliding windows back; adjoint of ``_im2col``."""
    n, c, h, w = x_shape
    ho, wo = cols.shape[4], cols.shape[5]
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride,
               j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        return np.ascontiguousarray(
            xp[:, :, padding:padding + h, padding:padding + w])
    return xp


def _conv2d_forward(x, w, b, stride, padding):
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    mat = cols.reshape(n, cin * kh * kw, ho * wo)
    out = np.matmul(w.reshape(cout, cin * kh * kw), mat)
    out = out.reshape(n, cout, ho, wo)
    if b is not None:
        out = out + b.reshape(1, cout, 1, 1)
    return np.ascontiguousarray(out)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_kernel(op: str, inputs: list[np.ndarray], attrs: dict) -> np.ndarray:
    """Execute one recorded op on plain arrays (used by tape replay)."""
    if op == "conv2d":
        b = inputs[2] if len(inputs) == 3 else None
        return _conv2d_forward(inputs[0], inputs[1], b,
                               attrs["stride"], attrs["padding"])
    if op == "relu":
        x = inputs[0]
        return np.where(x > 0, x, x.dtype.type(0))
    if op == "sigmoid":
        return _sigmoid(inputs[0])
    if op == "eabs":
        return np.abs(inputs[0])
    if op == "add":
        return inputs[0] + inputs[1]
    if op == "sub":
        return inputs[0] - inputs[1]
    if op == "mul":
        return inputs[0] * inputs[1]
    if op == "smul":
        return inputs[0].reshape(()) * inputs[1]
    if op == "emax":
        a, b = inputs
        return np.where(a >= b, a, b)
    if op == "mtc_gate":
        L, S = inputs
        p = L * S
        return np.where(p >= L, p, L)
    if op == "scale_shift":
        x = inputs[0]
        return (attrs["scale"] * x + attrs["shift"]).astype(x.dtype)
    if op == "concat_channels":
        return np.concatenate([inputs[0], inputs[1]], axis=1)
    if op == "global_avg_pool":
        return inputs[0].mean(axis=(2, 3))
    if op == "linear":
        return inputs[0] @ inputs[1].T + inputs[2]
    if op == "channel_affine":
        x, scale, shift = inputs
        c = scale.shape[0]
        return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)
    if op == "channel_shift":
        x, shift = inputs
        return x + shift.reshape(1, shift.shape[0], 1, 1)
    if op == "sum_all":
        return np.asarray(inputs[0].sum(), dtype=inputs[0].dtype)
    if op == "mean_all":
        return np.asarray(inputs[0].mean(), dtype=inputs[0].dtype)
    if op == "cross_entropy":
        probs = _softmax_rows(inputs[0])
        labels = attrs["labels"]
        n = inputs[0].shape[0]
        picked = probs[np.arange(n), labels]
        eps = np.finfo(inputs[0].dtype).tiny
        return np.asarray(-np.log(np.maximum(picked, eps)).mean(),
                          dtype=inputs[0].dtype)
    raise KeyError(f"unknown op {op!r}")


# ----------------------------------------------------------------------
# backward kernels
# ----------------------------------------------------------------------


def _backward_kernel(tape: Tape, node: Node, g: np.ndarray):
    """Yield (input position, gradient) pairs for inputs requiring grad."""
    op = node.op
    vals = tape.values
    needs = [vals[vid].requires_grad for vid in node.inputs]
    saved = node.saved

    if op == "conv2d":
        stride, padding = node.attrs["stride"], node.attrs["padding"]
        out = []
        if needs[0]:
            w = saved["w"].data
            cout, cin, kh, kw = w.shape
            n, _, ho, wo = g.shape
            gm = g.reshape(n, cout, ho * wo)
            cols = np.matmul(w.reshape(cout, -1).T, gm)
            cols = cols.reshape(n, cin, kh, kw, ho, wo)
            out.append((0, _col2im(cols, node.attrs["x_shape"],
                                   kh, kw, stride, padding)))
        if needs[1]:
            x = saved["x"].data
            kh, kw = node.attrs["ksize"]
            cols, ho, wo = _im2col(x, kh, kw, stride, padding)
            n = x.shape[0]
            cout = g.shape[1]
            gm = g.reshape(n, cout, ho * wo)
            mat = cols.reshape(n, -1, ho * wo)
            dw = np.einsum("nop,ncp->oc", gm, mat, optimize=True)
            out.append((1, dw.reshape(cout, x.shape[1], kh, kw)))
        if len(needs) == 3 and needs[2]:
            out.append((2, g.sum(axis=(0, 2, 3))))
        return out
    if op == "relu":
        x = saved["x"].data
        return [(0, g * (x > 0))]
    if op == "sigmoid":
        y = saved["out"].data
        return [(0, g * y * (1.0 - y))]
    if op == "eabs":
        x = saved["x"].data
        return [(0, g * np.sign(x))]
    if op == "add":
        return [(i, g) for i in range(2) if needs[i]]
    if op == "sub":
        out = []
        if needs[0]:
            out.append((0, g))
        if needs[1]:
            out.append((1, -g))
        return out
    if op == "mul":
        out = []
        if needs[0]:
            out.append((0, g * saved["b"].data))
        if needs[1]:
            out.append((1, g * saved["a"].data))
        return out
    if op == "smul":
        out = []
        if needs[0]:
            t = saved["t"].data
            out.append((0, np.asarray([(g * t).sum()], dtype=g.dtype)))
        if needs[1]:
            out.append((1, saved["s"].data.reshape(()) * g))
        return out
    if op == "emax":
        # out equals a bitwise iff a >= b, so the routing mask is exact
        # and ties send the full subgradient to the first argument
        a = saved["a"].data
        y = saved["out"].data
        mask = a == y
        out = []
        if needs[0]:
            out.append((0, g * mask))
        if needs[1]:
            out.append((1, g * (~mask)))
        return out
    if op == "mtc_gate":
        m = np.unpackbits(saved["mask"], count=g.size).reshape(g.shape)
        m = m.astype(bool)
        out = []
        if needs[0]:
            s = saved["S"].data
            out.append((0, g * np.where(m, s, g.dtype.type(1))))
        if needs[1]:
            x = saved["L"].data
            out.append((1, g * (m * x)))
        return out
    if op == "scale_shift":
        return [(0, (node.attrs["scale"] * g).astype(g.dtype))]
    if op == "concat_channels":
        ca = node.attrs["ca"]
        out = []
        if needs[0]:
            out.append((0, np.ascontiguousarray(g[:, :ca])))
        if needs[1]:
            out.append((1, np.ascontiguousarray(g[:, ca:])))
        return out
    if op == "global_avg_pool":
        h, w = node.attrs["hw"]
        scale = g.dtype.type(1.0 / (h * w))
        gx = np.broadcast_to((g * scale)[:, :, None, None],
                             node.attrs["x_shape"])
        return [(0, np.ascontiguousarray(gx))]
    if op == "linear":
        out = []
        if needs[0]:
            out.append((0, g @ saved["w"].data))
        if needs[1]:
            out.append((1, g.T @ saved["x"].data))
        if needs[2]:
            out.append((2, g.sum(axis=0)))
        return out
    if op == "channel_affine":
        out = []
        if needs[0]:
            scale = saved["scale"].data
            out.append((0, g * scale.reshape(1, -1, 1, 1)))
        if needs[1]:
            x = saved["x"].data
            out.append((1, (g * x).sum(axis=(0, 2, 3))))
        if needs[2]:
            out.append((2, g.sum(axis=(0, 2, 3))))
        return out
    if op == "channel_shift":
        out = []
        if needs[0]:
            out.append((0, g))
        if needs[1]:
            out.append((1, g.sum(axis=(0, 2, 3))))
        return out
    if op == "sum_all":
        gx = np.broadcast_to(g, node.attrs["x_shape"])
        return [(0, np.ascontiguousarray(gx))]
    if op == "mean_all":
        n = node.attrs["n"]
        gx = np.broadcast_to(g / g.dtype.type(n), node.attrs["x_shape"])
        return [(0, np.ascontiguousarray(gx))]
    if op == "cross_entropy":
        probs = saved["probs"]
        labels = node.attrs["labels"]
        n = probs.shape[0]
        delta = probs.copy()
        delta[np.arange(n), labels] -= 1.0
        return [(0, (g / g.dtype.type(n)) * delta)]
    raise KeyError(f"no backward kernel for op {op!r}")


# ----------------------------------------------------------------------
# ops (eager, recorded)
# ----------------------------------------------------------------------


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over N,C,H,W input with odd square-ish kernels."""
    tape = _same_tape(x, weight) if bias is None \
        else _same_tape(x, weight, bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d: input must be N,C,H,W and weight "
                         "Cout,Cin,kh,kw")
    cout, cin, kh, kw = weight.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    if x.data.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input has {x.data.shape[1]} channels but weight "
            f"expects {cin}")
    h, w = x.data.shape[2], x.data.shape[3]
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: {h}x{w} input too small for kernel {kh}x{kw} "
            f"stride {stride} padding {padding}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},)")

    b_arr = None if bias is None else bias.data
    out = _conv2d_forward(x.data, weight.data, b_arr, stride, padding)
    saved = {}
    if weight.requires_grad:
        saved["x"] = x
    if x.requires_grad:
        saved["w"] = weight
    attrs = {"stride": stride, "padding": padding, "ksize": (kh, kw),
             "x_shape": x.data.shape}
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return tape.record("conv2d", inputs, out, attrs, saved)


def relu(x: Tensor) -> Tensor:
    out = np.where(x.data > 0, x.data, x.data.dtype.type(0))
    saved = {"x": x} if x.requires_grad else {}
    return x.tape.record("relu", (x,), out, {}, saved)


def sigmoid(x: Tensor) -> Tensor:
    out_t = x.tape.record("sigmoid", (x,), _sigmoid(x.data), {}, {})
    if x.requires_grad:
        # gradient is y*(1-y); keep the output, not the input
        x.tape.nodes[-1].saved = {"out": out_t}
    return out_t


def eabs(x: Tensor) -> Tensor:
    saved = {"x": x} if x.requires_grad else {}
    return x.tape.record("eabs", (x,), np.abs(x.data), {}, saved)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _same_tape(a, b).record("add", (a, b), a.data + b.data, {}, {})


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _same_tape(a, b).record("sub", (a, b), a.data - b.data, {}, {})


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    saved = {}
    if a.requires_grad:
        saved["b"] = b
    if b.requires_grad:
        saved["a"] = a
    return _same_tape(a, b).record("mul", (a, b), a.data * b.data, {}, saved)


def smul(s: Tensor, t: Tensor) -> Tensor:
    """Scalar-with-tensor product; ``s`` is a one-element tensor."""
    if s.data.size != 1:
        raise ShapeError(f"smul: scalar operand has {s.data.size} elements")
    saved = {}
    if s.requires_grad:
        saved["t"] = t
    if t.requires_grad:
        saved["s"] = s
    out = s.data.reshape(()) * t.data
    return _same_tape(s, t).record("smul", (s, t), out, {}, saved)


def emax(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the full subgradient to ``a``."""
    _check_same_shape("emax", a, b)
    out = np.where(a.data >= b.data, a.data, b.data)
    out_t = _same_tape(a, b).record("emax", (a, b), out, {}, {})
    if out_t.requires_grad:
        a.tape.nodes[-1].saved = {"a": a, "out": out_t}
    return out_t


def packed_mask_elems(numel: int) -> int:
    """Float32-equivalent element count of a packed boolean mask."""
    return ((numel + 7) // 8 + 3) // 4


def mtc_gate(L: Tensor, S: Tensor) -> Tensor:
    """Fused calibration gate: elementwise ``max(L, L*S)``.

    Identical values to ``emax(L, mul(L, S))``, but backward keeps only
    a packed routing bitmask plus the operand the other side's gradient
    needs — never the product itself.  Exact ties route the subgradient
    to the calibrated-product branch, so a side network initialized at
    S = 1 (the neutral point) still receives gradient and can train;
    the raw ``emax`` op keeps its first-argument tie rule.
    """
    _check_same_shape("mtc_gate", L, S)
    p = L.data * S.data
    m = p >= L.data
    out = np.where(m, p, L.data)
    saved = {}
    if L.requires_grad or S.requires_grad:
        saved["mask"] = np.packbits(m.reshape(-1))
        if S.requires_grad:
            saved["L"] = L
        if L.requires_grad:
            saved["S"] = S
    return _same_tape(L, S).record("mtc_gate", (L, S), out, {}, saved)


def scale_shift(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """Affine map by python-float constants: ``scale * x + shift``."""
    out = (scale * x.data + shift).astype(x.data.dtype)
    return x.tape.record("scale_shift", (x,), out,
                         {"scale": float(scale), "shift": float(shift)}, {})


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels: operands must be N,C,H,W")
    sa, sb = a.data.shape, b.data.shape
    if (sa[0], sa[2], sa[3]) != (sb[0], sb[2], sb[3]):
        raise ShapeError(
            f"concat_channels: N,H,W mismatch between {sa} and {sb}")
    out = np.concatenate([a.data, b.data], axis=1)
    return _same_tape(a, b).record("concat_channels", (a, b), out,
                                   {"ca": sa[1]}, {})


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool: input must be N,C,H,W")
    out = x.data.mean(axis=(2, 3))
    attrs = {"hw": (x.data.shape[2], x.data.shape[3]), "x_shape": x.data.shape}
    return x.tape.record("global_avg_pool", (x,), out, attrs, {})


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear: x must be N,F and weight K,F")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: x has {x.data.shape[1]} features but weight expects "
            f"{weight.data.shape[1]}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError("linear: bias shape must match output features")
    out = x.data @ weight.data.T + bias.data
    saved = {}
    if weight.requires_grad:
        saved["x"] = x
    if x.requires_grad:
        saved["w"] = weight
    return _same_tape(x, weight, bias).record("linear", (x, weight, bias),
                                              out, {}, saved)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``scale_c * x + shift_c`` (the lab's batch-norm stand-in)."""
    if x.data.ndim != 4:
        raise ShapeError("channel_affine: input must be N,C,H,W")
    c = x.data.shape[1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(
            f"channel_affine: scale/shift must have shape ({c},)")
    out = x.data * scale.data.reshape(1, c, 1, 1) \
        + shift.data.reshape(1, c, 1, 1)
    saved = {}
    if x.requires_grad:
        saved["scale"] = scale
    if scale.requires_grad:
        saved["x"] = x
    return _same_tape(x, scale, shift).record(
        "channel_affine", (x, scale, shift), out, {}, saved)


def channel_shift(x: Tensor, shift: Tensor) -> Tensor:
    """Add a per-channel bias; backward needs no saved buffers."""
    if x.data.ndim != 4:
        raise ShapeError("channel_shift: input must be N,C,H,W")
    c = x.data.shape[1]
    if shift.data.shape != (c,):
        raise ShapeError(f"channel_shift: shift must have shape ({c},)")
    out = x.data + shift.data.reshape(1, c, 1, 1)
    return _same_tape(x, shift).record("channel_shift", (x, shift), out, {}, {})


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return x.tape.record("sum_all", (x,), out, {"x_shape": x.data.shape}, {})


def mean_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return x.tape.record("mean_all", (x,), out,
                         {"x_shape": x.data.shape, "n": x.data.size}, {})


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class indices."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy: logits must be N,K")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.data.shape[0],):
        raise ShapeError("cross_entropy: one label per row required")
    if labels.min() < 0 or labels.max() >= logits.data.shape[1]:
        raise ShapeError("cross_entropy: label outside class range")
    probs = _softmax_rows(logits.data)
    n = logits.data.shape[0]
    eps = np.finfo(logits.data.dtype).tiny
    picked = np.maximum(probs[np.arange(n), labels], eps)
    out = np.asarray(-np.log(picked).mean(), dtype=logits.data.dtype)
    saved = {"probs": probs} if logits.requires_grad else {}
    return logits.tape.record("cross_entropy", (logits,), out,
                              {"labels": labels}, saved)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error, composed from primitive ops."""
    return mean_all(eabs(sub(pred, target)))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error, composed from primitive ops."""
    d = sub(pred, target)
    return mean_all(mul(d, d))


# ----------------------------------------------------------------------
# finite differences
# ----------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], at: np.ndarray,
                     eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar-valued closure.

    ``f`` receives a plain array and returns a float; it is evaluated
    2*size times.  Computed in the dtype of ``at`` (use float64 inputs
    for verification-mode checks).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    at = np.ascontiguousarray(at)
    grad = np.zeros(at.shape, dtype=np.float64)
    flat = at.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(at))
        flat[i] = orig - eps
        lo = float(f(at))
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2.0 * eps)
    return grad.astype(at.dtype)
