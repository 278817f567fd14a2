"""Differentiable building blocks: a reverse-mode tape over numpy arrays.

Every value is a Tensor (an ndarray plus gradient plumbing). Primitives are
coarse-grained on purpose — a whole recurrent layer or attention block is one
tape node with a hand-written backward — so the tape stays short and numpy
does the heavy lifting. Each primitive is checked against central finite
differences in the test suite; ``finite_difference`` below is the shared
oracle driver.

Default training precision is float32; building parameters as float64 turns
the same code into the gradient-check configuration.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import lattice as _lattice


# ---------------------------------------------------------------------------
# Tape core
# ---------------------------------------------------------------------------


class Tensor:
    """A node in the computation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed: float = 1.0) -> None:
        """Reverse sweep from a scalar node; accumulates into .grad fields."""
        if self.data.ndim != 0:
            raise ValueError("backward() starts from a scalar loss")
        order = _topo_order(self)
        _accum(self, np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros(t.data.shape, dtype=t.data.dtype)
    t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# ---------------------------------------------------------------------------
# Elementwise and shape primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add expects matching shapes, got {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(a.data + b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _make(a.data * c, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul expects matching shapes, got {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - y * y))

    return _make(y, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", under="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sum_tensors(ts: list[Tensor]) -> Tensor:
    if not ts:
        raise ValueError("empty tensor list")
    acc = ts[0]
    for t in ts[1:]:
        acc = add(acc, t)
    return acc


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"cannot concat {a.shape} and {b.shape} column-wise")
    na = a.shape[1]

    def backward(g):
        if a.requires_grad:
            _accum(a, g[:, :na])
        if b.requires_grad:
            _accum(b, g[:, na:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def pairwise_sum(a: Tensor, b: Tensor) -> Tensor:
    """out[i, j, :] = a[i, :] + b[j, :] — the joint-lattice broadcast."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise_sum expects (N,D),(M,D); got {a.shape},{b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g.sum(axis=1))
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(a.data[:, None, :] + b.data[None, :, :], (a, b), backward)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; leading axes are batch-like."""
    din, dout = w.shape
    if x.shape[-1] != din:
        raise ValueError(f"dense input dim {x.shape[-1]} != weight dim {din}")
    x2 = x.data.reshape(-1, din)
    y2 = x2 @ w.data
    if b is not None:
        y2 = y2 + b.data
    out_shape = x.shape[:-1] + (dout,)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, dout)
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _make(y2.reshape(out_shape), parents, backward)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    """Row lookup; ids is a plain int array, not a differentiable input."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("embedding expects a 1-D id array")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding id out of range")

    def backward(g):
        if table.requires_grad:
            dt = np.zeros(table.shape, dtype=table.dtype)
            np.add.at(dt, ids, g)
            _accum(table, dt)

    return _make(table.data[ids], (table,), backward)


def _lstm_forward_arrays(x, wx, wh, b, h0, c0):
    """Kernel shared by the tape op and the stepwise decode path."""
    T = x.shape[0]
    H = wh.shape[0]
    pre_x = x @ wx + b
    hs = np.empty((T, H), dtype=x.dtype)
    cs = np.empty((T, H), dtype=x.dtype)
    gates = np.empty((T, 4 * H), dtype=x.dtype)
    h, c = h0, c0
    for t in range(T):
        pre = pre_x[t] + h @ wh
        i = _sigmoid(pre[:H])
        f = _sigmoid(pre[H : 2 * H])
        g = np.tanh(pre[2 * H : 3 * H])
        o = _sigmoid(pre[3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[t, :H] = i
        gates[t, H : 2 * H] = f
        gates[t, 2 * H : 3 * H] = g
        gates[t, 3 * H :] = o
        hs[t] = h
        cs[t] = c
    return hs, cs, gates


def lstm_step(x_t, h, c, wx, wh, b):
    """One recurrent step on raw arrays (used by incremental decoding)."""
    H = wh.shape[0]
    pre = x_t @ wx + h @ wh + b
    i = _sigmoid(pre[:H])
    f = _sigmoid(pre[H : 2 * H])
    g = np.tanh(pre[2 * H : 3 * H])
    o = _sigmoid(pre[3 * H :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def recurrent_forward(
    params: tuple[Tensor, Tensor, Tensor],
    inputs: Tensor,
    state0: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Unidirectional gated recurrent layer over a (T, d_in) sequence.

    Strictly left-to-right: outputs[t] depends only on inputs[:t+1]. Returns
    the (T, H) output tensor and the detached final (h, c) state pair.
    """
    wx, wh, b = params
    if inputs.data.ndim != 2 or inputs.shape[1] != wx.shape[0]:
        raise ValueError(
            f"recurrent input {inputs.shape} incompatible with weights {wx.shape}"
        )
    H = wh.shape[0]
    dtype = inputs.dtype
    if state0 is None:
        h0 = np.zeros(H, dtype=dtype)
        c0 = np.zeros(H, dtype=dtype)
    else:
        h0, c0 = state0
    x = inputs.data
    hs, cs, gates = _lstm_forward_arrays(x, wx.data, wh.data, b.data, h0, c0)
    T = x.shape[0]

    def backward(dhs):
        dx = np.zeros_like(x) if inputs.requires_grad else None
        dwx = np.zeros_like(wx.data)
        dwh = np.zeros_like(wh.data)
        db = np.zeros_like(b.data)
        dh = np.zeros(H, dtype=dtype)
        dc = np.zeros(H, dtype=dtype)
        for t in range(T - 1, -1, -1):
            dh = dh + dhs[t]
            i = gates[t, :H]
            f = gates[t, H : 2 * H]
            g = gates[t, 2 * H : 3 * H]
            o = gates[t, 3 * H :]
            tc = np.tanh(cs[t])
            dc = dc + dh * o * (1.0 - tc * tc)
            c_prev = cs[t - 1] if t > 0 else c0
            h_prev = hs[t - 1] if t > 0 else h0
            dpre = np.empty(4 * H, dtype=dtype)
            dpre[:H] = dc * g * i * (1.0 - i)
            dpre[H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dpre[2 * H : 3 * H] = dc * i * (1.0 - g * g)
            dpre[3 * H :] = dh * tc * o * (1.0 - o)
            if dx is not None:
                dx[t] = dpre @ wx.data.T
            dwx += np.outer(x[t], dpre)
            dwh += np.outer(h_prev, dpre)
            db += dpre
            dh = dpre @ wh.data.T
            dc = dc * f
        if inputs.requires_grad:
            _accum(inputs, dx)
        if wx.requires_grad:
            _accum(wx, dwx)
        if wh.requires_grad:
            _accum(wh, dwh)
        if b.requires_grad:
            _accum(b, db)

    out = _make(hs, (inputs, wx, wh, b), backward)
    final = (hs[-1].copy(), cs[-1].copy()) if T > 0 else (h0.copy(), c0.copy())
    return out, final


def maxpool_time(x: Tensor, factor: int = 2) -> Tensor:
    """Max over adjacent frame pairs; an odd tail frame passes through."""
    if factor != 2:
        raise ValueError("only the published pooling factor of 2 is supported")
    T = x.shape[0]
    npairs = T // 2
    a = x.data[0 : 2 * npairs : 2]
    bb = x.data[1 : 2 * npairs : 2]
    first_wins = a >= bb  # ties take the earlier frame
    pooled = np.where(first_wins, a, bb)
    odd = T % 2 == 1
    out = np.concatenate([pooled, x.data[-1:]], axis=0) if odd else pooled

    def backward(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        gp = g[:npairs]
        dx[0 : 2 * npairs : 2] = np.where(first_wins, gp, 0.0)
        dx[1 : 2 * npairs : 2] = np.where(first_wins, 0.0, gp)
        if odd:
            dx[-1] += g[-1]
        _accum(x, dx)

    return _make(out, (x,), backward)


def dropout(
    x: Tensor, rate: float, rng: np.random.Generator | None = None, training: bool = False
) -> Tensor:
    """Inverted dropout: identity in evaluation mode, E[out] = in when training."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(
        1.0 - rate, dtype=x.dtype
    )

    def backward(g):
        if x.requires_grad:
            _accum(x, g * mask)

    return _make(x.data * mask, (x,), backward)


def dot_attention(query: Tensor, keys: Tensor, values: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot attention; heads split the feature axis.

    query (S, D) attends over keys/values (T, D); per-head weights softmax
    over the T key positions; head outputs are concatenated back to (S, D).
    """
    S, D = query.shape
    T, Dk = keys.shape
    if keys.shape != values.shape:
        raise ValueError("keys and values must have identical shapes")
    if D != Dk:
        raise ValueError(f"query dim {D} != key dim {Dk}")
    if D % heads != 0:
        raise ValueError(f"feature dim {D} not divisible by {heads} heads")
    dh = D // heads
    scl = 1.0 / math.sqrt(dh)
    qh = query.data.reshape(S, heads, dh)
    kh = keys.data.reshape(T, heads, dh)
    vh = values.data.reshape(T, heads, dh)
    scores = np.einsum("shd,thd->sht", qh, kh) * scl
    w = np.exp(scores - scores.max(axis=2, keepdims=True))
    w /= w.sum(axis=2, keepdims=True)  # (S, heads, T)
    ctx = np.einsum("sht,thd->shd", w, vh)

    def backward(g):
        dctx = g.reshape(S, heads, dh)
        dw = np.einsum("shd,thd->sht", dctx, vh)
        dscores = w * (dw - np.sum(dw * w, axis=2, keepdims=True))
        if values.requires_grad:
            dvh = np.einsum("sht,shd->thd", w, dctx)
            _accum(values, dvh.reshape(T, D))
        if query.requires_grad:
            dqh = np.einsum("sht,thd->shd", dscores, kh) * scl
            _accum(query, dqh.reshape(S, D))
        if keys.requires_grad:
            dkh = np.einsum("sht,shd->thd", dscores, qh) * scl
            _accum(keys, dkh.reshape(T, D))

    return _make(ctx.reshape(S, D), (query, keys, values), backward)


def attention_weights(query: np.ndarray, keys: np.ndarray, heads: int) -> np.ndarray:
    """Per-head attention weights only (raw arrays); used by tests/inspection."""
    S, D = query.shape
    dh = D // heads
    qh = query.reshape(S, heads, dh)
    kh = keys.reshape(-1, heads, dh)
    scores = np.einsum("shd,thd->sht", qh, kh) / math.sqrt(dh)
    w = np.exp(scores - scores.max(axis=2, keepdims=True))
    return w / w.sum(axis=2, keepdims=True)


# ---------------------------------------------------------------------------
# Loss heads
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray, reduction: str = "sum") -> Tensor:
    """Softmax cross-entropy of integer targets against (S, V) logits."""
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    targets = np.asarray(targets, dtype=np.int64)
    S, V = logits.shape
    if targets.shape != (S,):
        raise ValueError(f"targets shape {targets.shape} != ({S},)")
    lp = _lattice.log_softmax(logits.data.astype(np.float64), axis=-1)
    rows = np.arange(S)
    nll = -lp[rows, targets]
    denom = S if reduction == "mean" else 1
    value = nll.sum() / denom

    def backward(g):
        if not logits.requires_grad:
            return
        soft = np.exp(lp)
        soft[rows, targets] -= 1.0
        _accum(logits, (float(g) / denom) * soft.astype(logits.dtype))

    return _make(np.asarray(value, dtype=logits.dtype), (logits,), backward)


def kl_to_reference(logits: Tensor, ref_logp: np.ndarray, floor: float = 1e-8) -> Tensor:
    """Sum over rows of KL(reference || softmax(logits)), reference fixed.

    The student side is floored at ``floor`` inside the log so a confident
    reference against a zeroed student stays finite.
    """
    S, V = logits.shape
    ref_logp = np.asarray(ref_logp, dtype=np.float64)
    if ref_logp.shape != (S, V):
        raise ValueError(f"reference shape {ref_logp.shape} != {(S, V)}")
    with np.errstate(under="ignore"):
        tp = np.exp(ref_logp)
    sp_log = _lattice.log_softmax(logits.data.astype(np.float64), axis=-1)
    with np.errstate(under="ignore"):
        sp = np.exp(sp_log)
    active = tp > 0.0
    log_ratio = np.zeros_like(tp)
    log_ratio[active] = ref_logp[active] - np.log(np.maximum(sp[active], floor))
    value = float(np.sum(tp * log_ratio))

    def backward(g):
        if not logits.requires_grad:
            return
        live = (sp > floor) & active
        contrib = np.where(live, tp, 0.0)
        row_tot = contrib.sum(axis=1, keepdims=True)
        dz = sp * row_tot - contrib
        _accum(logits, float(g) * dz.astype(logits.dtype))

    return _make(np.asarray(value, dtype=logits.dtype), (logits,), backward)


def rnnt_nll(logits: Tensor, target: _lattice.LabelSequence) -> Tensor:
    """Sequence negative log-likelihood over the transducer lattice.

    ``logits`` is the (T, U+1, K+1) joint output; normalization happens
    inside, and the backward pass is the exact lattice gradient.
    """
    lp = _lattice.log_softmax(logits.data.astype(np.float64), axis=-1)
    dist = _lattice.LatticeDist(lp)
    loss, grad = _lattice.rnnt_loss_with_grad(dist, target)

    def backward(g):
        if logits.requires_grad:
            _accum(logits, float(g) * grad.astype(logits.dtype))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def coarse_distill_loss(
    logits: Tensor,
    targets3: np.ndarray,
    target: _lattice.LabelSequence,
    floor: float = 1e-8,
    normalize: bool = True,
) -> Tensor:
    """Three-way (next-token, blank, remainder) KL against fixed coarse targets.

    ``targets3`` is the (T, U+1, 3) teacher summary — deliberately the only
    teacher-sized buffer this loss ever touches. When ``normalize`` is set the
    node sum is divided by the node count so the value is a per-node average.
    """
    T, U1, K1 = logits.shape
    targets3 = np.asarray(targets3, dtype=np.float64)
    if targets3.shape != (T, U1, 3):
        raise ValueError(f"coarse targets shape {targets3.shape} != {(T, U1, 3)}")
    if target.U != U1 - 1:
        raise ValueError("token sequence length inconsistent with lattice rows")

    sp_log = _lattice.log_softmax(logits.data.astype(np.float64), axis=-1)
    with np.errstate(under="ignore"):
        sp = np.exp(sp_log)
    s_b = sp[:, :, _lattice.BLANK_ID]
    s_y = np.zeros((T, U1))
    for u in range(U1 - 1):
        s_y[:, u] = sp[:, u, target.tokens[u]]
    s_r = np.maximum(1.0 - s_y - s_b, 0.0)
    student3 = np.stack([s_y, s_b, s_r], axis=-1)

    tmask = targets3 > 0.0
    ratio = np.zeros_like(targets3)
    ratio[tmask] = np.log(targets3[tmask]) - np.log(
        np.maximum(student3[tmask], floor)
    )
    total = float(np.sum(targets3 * ratio))
    denom = float(T * U1) if normalize else 1.0
    value = total / denom

    def backward(g):
        if not logits.requires_grad:
            return
        # dKL/d(component) = -t/s where the floor is inactive, else 0.
        live = (student3 > floor) & tmask
        a = np.where(live, -targets3 / np.maximum(student3, floor), 0.0)
        a_y, a_b, a_r = a[:, :, 0], a[:, :, 1], a[:, :, 2]
        # Expand to the full vocabulary: y_{u+1} and blank get their own
        # coefficients, every other label shares the remainder coefficient.
        coeff = np.repeat(a_r[:, :, None], K1, axis=2)
        coeff[:, :, _lattice.BLANK_ID] = a_b
        for u in range(U1 - 1):
            coeff[:, u, target.tokens[u]] = a_y[:, u]
        inner = np.sum(sp * coeff, axis=2, keepdims=True)
        dz = sp * (coeff - inner)
        _accum(logits, (float(g) / denom) * dz.astype(logits.dtype))

    return _make(np.asarray(value, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# Parameters, freezing, optimizer
# ---------------------------------------------------------------------------


class ParamGroup:
    """Named parameter tensors with per-tensor freeze flags.

    Freezing clears ``requires_grad`` so frozen subtrees drop out of the tape
    entirely; the optimizer additionally skips them, so a frozen tensor is
    bitwise untouched by training.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(array), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def set_frozen(self, names, frozen: bool) -> None:
        for name in names:
            self._params[name].requires_grad = not frozen

    def frozen_names(self) -> list[str]:
        return [n for n, t in self._params.items() if not t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            if n not in self._params:
                raise KeyError(f"unknown parameter {n!r}")
            t = self._params[n]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {n!r}")
            t.data = np.array(arr, dtype=t.data.dtype)

    def hash(self, prefixes: tuple[str, ...] | None = None) -> str:
        """Content hash of (a prefix-filtered subset of) the parameters."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            if prefixes is not None and not name.startswith(prefixes):
                continue
            t = self._params[name]
            h.update(name.encode())
            h.update(str(t.data.dtype).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def count_params(group: ParamGroup) -> int:
    """Total scalar parameter count."""
    return sum(t.size for _, t in group.items())


def reduction_exact(a: float, b: float) -> float:
    """Exact percentage size reduction between two parameter counts."""
    small, large = sorted((float(a), float(b)))
    if large == 0:
        return 0.0
    return (1.0 - small / large) * 100.0


def reduction(a: float, b: float) -> int:
    """Size reduction as a whole percentage (nearest integer, half up)."""
    return int(math.floor(reduction_exact(a, b) + 0.5))


class AdamState:
    """First/second moment buffers for adam_step."""

    def __init__(self, group: ParamGroup):
        self.m = {n: np.zeros_like(t.data) for n, t in group.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in group.items()}


def adam_step(
    group: ParamGroup,
    grads: dict[str, np.ndarray] | None,
    lr: float,
    step_index: int,
    state: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamGroup:
    """One Adam update (1-based bias correction); frozen tensors untouched.

    ``grads`` may be None, in which case each tensor's accumulated ``.grad``
    is consumed.
    """
    if step_index < 1:
        raise ValueError("step_index is 1-based")
    bc1 = 1.0 - beta1**step_index
    bc2 = 1.0 - beta2**step_index
    for name, t in group.items():
        if not t.requires_grad:
            continue
        g = grads.get(name) if grads is not None else t.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        t.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(t.data.dtype)
    return group


def lr_at(step: int, base: float = 5e-4, decay: float = 0.9, interval: int = 20000) -> float:
    """Stepwise exponential schedule: base * decay ** floor(step / interval)."""
    if interval < 1:
        raise ValueError("decay interval must be >= 1")
    return base * decay ** (step // interval)


# ---------------------------------------------------------------------------
# Finite-difference oracle driver
# ---------------------------------------------------------------------------


def finite_difference(f, arrays: list[np.ndarray], eps: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradients of scalar f(list-of-arrays) per element."""
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for j in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] += eps
            hi = f(bumped)
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] -= eps
            lo = f(bumped)
            flat[j] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    """Uniform init in [-s, s] with s = 1/sqrt(fan_in)."""
    s = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-s, s, size=shape).astype(dtype)
