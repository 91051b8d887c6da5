"""Reverse-mode differentiation over whole numpy arrays.

Every operation works on :class:`Var` objects. When at least one input lives
on a :class:`GradientTape` the result is appended to that tape together with
a vector-Jacobian closure; otherwise the op is a plain numpy computation. The
same model code therefore serves inference (no tape) and training.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class Var:
    __slots__ = ("data", "tape", "parents", "vjp", "name", "index")

    def __init__(self, data, tape=None, parents=(), vjp=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.index = -1

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        where = "taped" if self.tape is not None else "const"
        return f"Var({where}, shape={self.data.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return scale(self, 1.0 / c)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class GradientTape:
    """Records operations in execution order for one backward pass.

    ``relu_masks`` keeps the activation pattern of every recorded relu so
    that gradient checks can tell when a perturbation crossed a kink.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}
        self.relu_masks: list[np.ndarray] = []

    def watch(self, name: str, array) -> Var:
        if name in self.leaves:
            raise ValueError(f"leaf {name!r} already watched on this tape")
        v = Var(array, self, name=name)
        self._append(v)
        self.leaves[name] = v
        return v

    def _append(self, v: Var) -> None:
        v.index = len(self.nodes)
        self.nodes.append(v)

    def activation_pattern(self) -> np.ndarray:
        if not self.relu_masks:
            return np.zeros(0, dtype=bool)
        return np.concatenate([m.ravel() for m in self.relu_masks])


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _record(data, parents: Sequence[Var], vjp: Callable) -> Var:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = p.tape
    if tape is None:
        return Var(data)
    out = Var(data, tape, tuple(parents), vjp)
    tape._append(out)
    return out


def backward(tape: GradientTape, output: Var, loss_grad=1.0) -> dict[str, np.ndarray]:
    """Accumulate gradients of ``output`` into every watched leaf.

    Returns a mapping from leaf name to gradient; leaves the output does not
    depend on receive zeros so the result always mirrors the parameter set.
    """
    if output.tape is not tape or output.index < 0 or tape.nodes[output.index] is not output:
        raise ValueError("output was not recorded on this tape")
    seed = np.asarray(loss_grad, dtype=np.float64)
    if seed.shape != output.data.shape:
        if seed.ndim == 0:
            seed = np.full(output.data.shape, float(seed))
        else:
            raise ValueError(f"loss_grad shape {seed.shape} does not match output {output.data.shape}")
    grads: dict[int, np.ndarray] = {output.index: seed}
    for node in reversed(tape.nodes[: output.index + 1]):
        g = grads.get(node.index)
        if g is None or node.vjp is None:
            continue
        del grads[node.index]
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or parent.tape is not tape:
                continue
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg
    return {
        name: grads.get(leaf.index, np.zeros_like(leaf.data))
        for name, leaf in tape.leaves.items()
    }


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Var:
    a = as_var(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b: Optional[Var] = None) -> Var:
    """``x @ w.T + b`` with ``w`` stored as (d_out, d_in)."""
    x, w = as_var(x), as_var(w)
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"input dim {xd.shape[-1]} does not match layer d_in {wd.shape[1]}")
    out = xd @ wd.T
    if b is None:
        return _record(out, (x, w), lambda g: (g @ wd, g.T @ xd))
    b = as_var(b)
    return _record(out + b.data, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def relu(x) -> Var:
    x = as_var(x)
    mask = x.data > 0
    out = _record(x.data * mask, (x,), lambda g: (g * mask,))
    if out.tape is not None:
        out.tape.relu_masks.append(mask)
    return out


def take_rows(a, idx) -> Var:
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), vjp)


def scatter_rows(parts: Sequence[Var], indices: Sequence[np.ndarray], n_rows: int) -> Var:
    """Place each part's rows at the given row indices of a zero matrix."""
    parts = [as_var(p) for p in parts]
    if not parts:
        raise ValueError("scatter_rows needs at least one part")
    width = parts[0].shape[1]
    out = np.zeros((n_rows, width))
    idx_list = [np.asarray(i, dtype=np.int64) for i in indices]
    for p, idx in zip(parts, idx_list):
        out[idx] = p.data
    return _record(out, tuple(parts), lambda g: tuple(g[idx] for idx in idx_list))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, key) -> Var:
    a = as_var(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _record(a.data[key], (a,), vjp)


def rowdot(a, b) -> Var:
    """Per-row dot products: ``a`` (B, d) against each of ``b`` (B, K, d) -> (B, K)."""
    a, b = as_var(a), as_var(b)
    ad, bd = a.data, b.data
    out = np.einsum("bd,bkd->bk", ad, bd)
    return _record(
        out,
        (a, b),
        lambda g: (np.einsum("bk,bkd->bd", g, bd), g[:, :, None] * ad[:, None, :]),
    )


def softplus(x) -> Var:
    x = as_var(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)
    # sigmoid written to stay finite for large |x|
    sig = np.exp(xd - out)
    return _record(out, (x,), lambda g: (g * sig,))


def logsumexp(x, axis: int = -1) -> Var:
    x = as_var(x)
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    shifted = np.exp(xd - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(total) + m).squeeze(axis)
    soft = shifted / total
    return _record(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,))


def sum_all(x) -> Var:
    x = as_var(x)
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
