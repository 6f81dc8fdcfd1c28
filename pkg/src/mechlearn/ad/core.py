"""Reverse-mode automatic differentiation on numpy values, with a forward
mode that nests in both directions.

Two carriers:

* ``Var`` — a node on a ``Tape``.  Holds a value (scalar or ndarray; in
  nested use the value may itself be a ``Dual``) and the id of the node
  that produced it.  Arithmetic on ``Var`` records the computation so a
  single backward sweep yields exact reverse-mode gradients.

* ``Dual`` — a forward-mode value carrying a pack of directional
  derivatives in a leading "direction" axis: ``dot.shape == (ndir,) +
  shape(val)``.  Components may be ndarrays or ``Var``s, so pushing duals
  through a parameterized function leaves the directional derivatives on
  the tape, where they stay differentiable (Jacobian entries can appear
  inside a training loss).

All math goes through the generic functions in this module, which dispatch
on carrier type and fall back to numpy.  Structural operations use
negative / trailing axes throughout so the leading direction axis of a
``Dual`` never needs special-casing.

Convention: gradients/tangents are exact chain-rule values in float64.
A tape is single-threaded; values are never mutated after creation.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError

__all__ = [
    "Tape", "Var", "Dual", "grad", "jacobian",
    "sin", "cos", "tanh", "exp", "log", "sqrt", "softplus", "sigmoid",
    "relu", "gsum", "gmean", "matmul", "concat", "stack", "reshape",
    "swapaxes", "moveaxis_first_last", "posdef_solve", "value_of",
    "shape_of", "primal_of",
]


# ---------------------------------------------------------------------------
# helpers

def value_of(x):
    """Underlying value of a Var, else x itself."""
    return x.value if isinstance(x, Var) else x


def primal_of(x):
    """Strip all Var/Dual layers down to the plain numeric payload."""
    while True:
        if isinstance(x, Var):
            x = x.value
        elif isinstance(x, Dual):
            x = x.val
        else:
            return x


def shape_of(x):
    if isinstance(x, Var):
        return shape_of(x.value)
    if isinstance(x, Dual):
        return shape_of(x.val)
    return np.shape(x)


def _neg_axes(axis, ndim):
    """Normalize axis spec to a tuple of negative ints."""
    if axis is None:
        return tuple(range(-ndim, 0))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if a >= 0:
            a -= ndim
        if not -ndim <= a < 0:
            raise ValueError(f"axis {a} out of range for ndim {ndim}")
        out.append(a)
    return tuple(out)


def _unbroadcast(g, shape):
    """Reduce adjoint g (which followed numpy broadcasting) back to `shape`.

    Uses negative axes only, so it works when g is a Dual.
    """
    gshape = shape_of(g)
    if gshape == tuple(shape):
        return g
    extra = len(gshape) - len(shape)
    if extra > 0:
        g = gsum(g, axis=tuple(range(-len(gshape), -len(shape))))
        gshape = shape_of(g)
    axes = tuple(
        d - len(shape)
        for d in range(len(shape))
        if shape[d] == 1 and gshape[d] != 1
    )
    if axes:
        g = gsum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# tape

class Tape:
    """Record of a computation: list of (parents, backward, name, value).

    Backward closures take the adjoint of the node's output and return a
    tuple of adjoint contributions aligned with ``parents``.  They are
    written with the generic math in this module, so a tape whose values
    are Duals back-propagates dual adjoints (second-order nesting).
    """

    __slots__ = ("_parents", "_backs", "_names", "_values")

    def __init__(self):
        self._parents = []
        self._backs = []
        self._names = []
        self._values = []

    def __len__(self):
        return len(self._parents)

    def var(self, value, name="leaf"):
        """Register a leaf (input or parameter) and return its Var."""
        return self._push(value, (), None, name)

    def _push(self, value, parents, back, name):
        idx = len(self._parents)
        self._parents.append(parents)
        self._backs.append(back)
        self._names.append(name)
        self._values.append(value)
        return Var(self, idx, value)

    def backward(self, out, seed=None):
        """Single reverse sweep from ``out``; returns {leaf idx: adjoint}.

        ``seed`` defaults to ones with the shape of ``out``.
        """
        if not isinstance(out, Var) or out.tape is not self:
            raise ValueError("backward target must be a Var of this tape")
        if seed is None:
            seed = np.ones(shape_of(out.value))
        adj = {out.idx: seed}
        leaf_adj = {}
        for i in range(out.idx, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            back = self._backs[i]
            if back is None:
                leaf_adj[i] = g
                continue
            contribs = back(g)
            for p, gp in zip(self._parents[i], contribs):
                if gp is None:
                    continue
                prev = adj.get(p)
                adj[p] = gp if prev is None else prev + gp
        return leaf_adj

    def gradients(self, out, leaves, seed=None):
        """Adjoints for a list of leaf Vars, zeros where untouched."""
        adj = self.backward(out, seed=seed)
        out_list = []
        for v in leaves:
            g = adj.get(v.idx)
            if g is None:
                g = np.zeros(shape_of(v.value))
            out_list.append(g)
        return out_list

    def first_nonfinite(self):
        """(index, name) of the first node with a non-finite value, or None."""
        for i, v in enumerate(self._values):
            p = np.asarray(primal_of(v), dtype=float)
            if not np.all(np.isfinite(p)):
                return i, self._names[i]
        return None


class Var:
    """Value plus the id of the tape node that produced it."""

    __slots__ = ("tape", "idx", "value")
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return shape_of(self.value)

    def __repr__(self):
        return f"Var(#{self.idx}, {self.value!r})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _div(self, other)

    def __rtruediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _div(other, self)

    def __neg__(self):
        v = self.value

        def back(g):
            return (-g,)

        return self.tape._push(_gneg(v), (self.idx,), back, "neg")

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            return NotImplemented
        v = self.value

        def back(g, v=v, p=p):
            return (g * (p * v ** (p - 1)),)

        return self.tape._push(v ** p, (self.idx,), back, "pow")

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return matmul(self, other)

    def __rmatmul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return matmul(other, self)

    def __getitem__(self, key):
        v = self.value
        out = v[key]
        vshape = shape_of(v)

        def back(g, key=key, vshape=vshape):
            z = np.zeros(vshape)
            z[key] = g
            return (z,)

        return self.tape._push(out, (self.idx,), back, "getitem")


def _gneg(v):
    return -v


def _lift2(a, b):
    """Tape and (value, idx-or-None) pairs for a binary op."""
    ta = a.tape if isinstance(a, Var) else None
    tb = b.tape if isinstance(b, Var) else None
    if ta is not None and tb is not None and ta is not tb:
        raise ValueError("cannot combine Vars from different tapes")
    tape = ta or tb
    av = a.value if isinstance(a, Var) else a
    bv = b.value if isinstance(b, Var) else b
    ai = a.idx if isinstance(a, Var) else None
    bi = b.idx if isinstance(b, Var) else None
    return tape, av, bv, ai, bi


def _binary(tape, out, ai, bi, back_a, back_b, name):
    parents, backs = [], []
    if ai is not None:
        parents.append(ai)
        backs.append(back_a)
    if bi is not None:
        parents.append(bi)
        backs.append(back_b)

    def back(g, backs=tuple(backs)):
        return tuple(fn(g) for fn in backs)

    return tape._push(out, tuple(parents), back, name)


def _add(a, b):
    tape, av, bv, ai, bi = _lift2(a, b)
    sa, sb = shape_of(av), shape_of(bv)
    return _binary(
        tape, av + bv, ai, bi,
        lambda g: _unbroadcast(g, sa),
        lambda g: _unbroadcast(g, sb),
        "add",
    )


def _sub(a, b):
    tape, av, bv, ai, bi = _lift2(a, b)
    sa, sb = shape_of(av), shape_of(bv)
    return _binary(
        tape, av - bv, ai, bi,
        lambda g: _unbroadcast(g, sa),
        lambda g: _unbroadcast(-g, sb),
        "sub",
    )


def _mul(a, b):
    tape, av, bv, ai, bi = _lift2(a, b)
    sa, sb = shape_of(av), shape_of(bv)
    return _binary(
        tape, av * bv, ai, bi,
        lambda g: _unbroadcast(g * bv, sa),
        lambda g: _unbroadcast(g * av, sb),
        "mul",
    )


def _div(a, b):
    tape, av, bv, ai, bi = _lift2(a, b)
    sa, sb = shape_of(av), shape_of(bv)
    out = av / bv
    return _binary(
        tape, out, ai, bi,
        lambda g: _unbroadcast(g / bv, sa),
        lambda g: _unbroadcast(-g * out / bv, sb),
        "div",
    )


# ---------------------------------------------------------------------------
# forward-mode dual with a leading direction axis

class Dual:
    """Forward-mode value: ``dot[d]`` is the derivative of ``val`` along
    seed direction d.  Components may be ndarrays or Vars."""

    __slots__ = ("val", "dot")
    __array_ufunc__ = None
    __array_priority__ = 1001

    def __init__(self, val, dot):
        self.val = val
        self.dot = dot

    @property
    def ndir(self):
        return shape_of(self.dot)[0]

    def __repr__(self):
        return f"Dual({self.val!r}, ndir={self.ndir})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.dot + other.dot)
        return Dual(self.val + other, self.dot)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.dot - other.dot)
        return Dual(self.val - other, self.dot)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.dot)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.dot * other.val + other.dot * self.val)
        return Dual(self.val * other, self.dot * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            out = self.val / other.val
            return Dual(out, (self.dot - out * other.dot) / other.val)
        return Dual(self.val / other, self.dot / other)

    def __rtruediv__(self, other):
        out = other / self.val
        return Dual(out, -out * self.dot / self.val)

    def __neg__(self):
        return Dual(-self.val, -self.dot)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            return NotImplemented
        return Dual(self.val ** p, (p * self.val ** (p - 1)) * self.dot)

    def __matmul__(self, other):
        return _dual_matmul(self, other)

    def __rmatmul__(self, other):
        return _dual_matmul(other, self)

    def __getitem__(self, key):
        # Keys must be trailing-oriented (start with Ellipsis) so the
        # leading direction axis of `dot` is untouched.
        if not (isinstance(key, tuple) and key and key[0] is Ellipsis):
            raise IndexError("Dual indexing requires an (..., ...) key")
        return Dual(self.val[key], self.dot[key])


def _dual_const(x, ndir):
    """Promote a non-dual to a Dual with zero tangents (plain ndarray)."""
    return Dual(x, np.zeros((ndir,) + shape_of(x)))


# ---------------------------------------------------------------------------
# generic elementwise math

def _unary(x, np_fn, back_fn, dual_fn, name):
    if isinstance(x, Var):
        v = x.value
        yv = dual_fn(v) if isinstance(v, Dual) else np_fn(v)

        def back(g, v=v, yv=yv):
            return (back_fn(g, v, yv),)

        return x.tape._push(yv, (x.idx,), back, name)
    if isinstance(x, Dual):
        return dual_fn(x)
    return np_fn(x)


def sin(x):
    return _unary(x, np.sin, lambda g, v, y: g * cos(v),
                  lambda d: Dual(sin(d.val), cos(d.val) * d.dot), "sin")


def cos(x):
    return _unary(x, np.cos, lambda g, v, y: -g * sin(v),
                  lambda d: Dual(cos(d.val), -sin(d.val) * d.dot), "cos")


def tanh(x):
    return _unary(x, np.tanh, lambda g, v, y: g * (1.0 - y * y),
                  lambda d: _dual_tanh(d), "tanh")


def _dual_tanh(d):
    y = tanh(d.val)
    return Dual(y, (1.0 - y * y) * d.dot)


def exp(x):
    return _unary(x, np.exp, lambda g, v, y: g * y,
                  lambda d: _dual_exp(d), "exp")


def _dual_exp(d):
    y = exp(d.val)
    return Dual(y, y * d.dot)


def log(x):
    return _unary(x, np.log, lambda g, v, y: g / v,
                  lambda d: Dual(log(d.val), d.dot / d.val), "log")


def sqrt(x):
    return _unary(x, np.sqrt, lambda g, v, y: g / (2.0 * y),
                  lambda d: _dual_sqrt(d), "sqrt")


def _dual_sqrt(d):
    y = sqrt(d.val)
    return Dual(y, d.dot / (2.0 * y))


def _np_softplus(x):
    return np.logaddexp(0.0, x)


def _np_sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return _unary(x, _np_softplus, lambda g, v, y: g * sigmoid(v),
                  lambda d: Dual(softplus(d.val), sigmoid(d.val) * d.dot),
                  "softplus")


def sigmoid(x):
    return _unary(x, _np_sigmoid, lambda g, v, y: g * (y * (1.0 - y)),
                  lambda d: _dual_sigmoid(d), "sigmoid")


def _dual_sigmoid(d):
    y = sigmoid(d.val)
    return Dual(y, (y * (1.0 - y)) * d.dot)


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0.0),
                  lambda g, v, y: g * (primal_of(v) > 0),
                  lambda d: Dual(relu(d.val), (primal_of(d.val) > 0) * d.dot),
                  "relu")


# ---------------------------------------------------------------------------
# reductions and structure

def gsum(x, axis=None, keepdims=False):
    """Sum over value axes (negative or None).  Generic over carriers."""
    if isinstance(x, Var):
        v = x.value
        ndim = len(shape_of(v))
        axes = _neg_axes(axis, ndim)
        vshape = shape_of(v)
        kept = gsum(v, axis=axes, keepdims=True)

        def back(g, vshape=vshape):
            return (g * np.ones(vshape),)

        out = x.tape._push(kept, (x.idx,), back, "sum")
        if not keepdims:
            out = reshape(out, _squeeze_shape(vshape, axes))
        return out
    if isinstance(x, Dual):
        ndim = len(shape_of(x.val))
        axes = _neg_axes(axis, ndim)
        return Dual(gsum(x.val, axis=axes, keepdims=keepdims),
                    gsum(x.dot, axis=axes, keepdims=keepdims))
    return np.sum(x, axis=axis, keepdims=keepdims)


def _squeeze_shape(shape, neg_axes):
    ndim = len(shape)
    drop = {a + ndim for a in neg_axes}
    return tuple(s for d, s in enumerate(shape) if d not in drop)


def gmean(x, axis=None, keepdims=False):
    shape = shape_of(x)
    axes = _neg_axes(axis, len(shape))
    count = 1
    for a in axes:
        count *= shape[a]
    return gsum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape):
    """Reshape the value axes; a Dual keeps its leading direction axis."""
    shape = tuple(shape)
    if isinstance(x, Var):
        v = x.value
        old = shape_of(v)
        out = reshape(v, shape)

        def back(g, old=old):
            return (reshape(g, old),)

        return x.tape._push(out, (x.idx,), back, "reshape")
    if isinstance(x, Dual):
        ndir = shape_of(x.dot)[0]
        return Dual(reshape(x.val, shape),
                    reshape(x.dot, (ndir,) + shape))
    return np.reshape(x, shape)


def expand_dims(x, axis):
    """Insert a singleton value axis at negative position `axis`."""
    if axis >= 0:
        raise ValueError("expand_dims requires a negative axis")
    if isinstance(x, Var):
        s = list(shape_of(x.value))
        s.insert(len(s) + axis + 1, 1)
        return reshape(x, tuple(s))
    if isinstance(x, Dual):
        return Dual(expand_dims(x.val, axis), expand_dims(x.dot, axis))
    return np.expand_dims(x, axis)


def swapaxes(x, a, b):
    if a >= 0 or b >= 0:
        raise ValueError("swapaxes requires negative axes")
    if isinstance(x, Var):
        v = x.value
        out = swapaxes(v, a, b)

        def back(g):
            return (swapaxes(g, a, b),)

        return x.tape._push(out, (x.idx,), back, "swapaxes")
    if isinstance(x, Dual):
        return Dual(swapaxes(x.val, a, b), swapaxes(x.dot, a, b))
    return np.swapaxes(x, a, b)


def moveaxis_first_last(x):
    """Move the leading axis to the end (used to expose a direction axis
    as a trailing coordinate axis).  Not dual-generic."""
    if isinstance(x, Var):
        v = x.value
        out = np.moveaxis(v, 0, -1)

        def back(g):
            return (np.moveaxis(g, -1, 0),)

        return x.tape._push(out, (x.idx,), back, "moveaxis")
    return np.moveaxis(x, 0, -1)


def _last0(x):
    return x[(Ellipsis, 0)]


def _dual_matmul(a, b):
    """Product rule for matmul.  Tangent packs of 1-D values need lifting
    to columns so the leading direction axis survives numpy's promotion
    rules for 1-D matmul operands."""
    a_dual = isinstance(a, Dual)
    b_dual = isinstance(b, Dual)
    aval = a.val if a_dual else a
    bval = b.val if b_dual else b
    a_vec = len(shape_of(aval)) == 1
    b_vec = len(shape_of(bval)) == 1
    if b_dual and b_vec and not a_vec:
        col = Dual(_expand_last(b.val), _expand_last(b.dot))
        out = _dual_matmul(a, col)
        return Dual(_last0(out.val), _last0(out.dot))
    val = matmul(aval, bval)
    dot = None
    if a_dual:
        dot = matmul(a.dot, bval)
    if b_dual:
        if a_vec and b_vec:
            db = matmul(b.dot, aval)
        else:
            db = matmul(aval, b.dot)
        dot = db if dot is None else dot + db
    return Dual(val, dot)


def matmul(a, b):
    """Matrix product with numpy batched-matmul semantics."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        return _dual_matmul(a, b)
    if isinstance(a, Var) or isinstance(b, Var):
        tape, av, bv, ai, bi = _lift2(a, b)
        sa, sb = shape_of(av), shape_of(bv)
        out = _g_matmul(av, bv)
        return _binary(
            tape, out, ai, bi,
            lambda g: _unbroadcast(_matmul_back_a(g, bv, sa), sa),
            lambda g: _unbroadcast(_matmul_back_b(g, av, sb), sb),
            "matmul",
        )
    return np.matmul(a, b)


def _g_matmul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        return matmul(a, b)
    return np.matmul(a, b)


def _matmul_back_a(g, b, sa):
    if len(sa) == 1:
        if len(shape_of(b)) == 1:
            return g * b
        # a (k,), b (..., k, m), g (..., m): sum_m g * b
        return gsum(swapaxes_b_times(g, b), axis=-1)
    if len(shape_of(b)) == 1:
        # a (..., n, k), b (k,), g (..., n): outer product rows
        return _outer_last(g, b)
    return matmul(g, swapaxes(b, -1, -2))


def swapaxes_b_times(g, b):
    # g (..., m) with b (..., k, m): product summed over m below
    return b * _expand_second_last(g)


def _expand_second_last(g):
    if isinstance(g, Dual):
        return Dual(_expand_second_last(g.val), _expand_second_last(g.dot))
    return np.expand_dims(g, -2)


def _outer_last(g, b):
    # g (..., n) and b (k,) -> (..., n, k)
    return _expand_last(g) * b


def _expand_last(g):
    if isinstance(g, Dual):
        return Dual(_expand_last(g.val), _expand_last(g.dot))
    return np.expand_dims(g, -1)


def _matmul_back_b(g, a, sb):
    if len(sb) == 1:
        if len(shape_of(a)) == 1:
            return g * a
        # b (k,), a (..., n, k), g (..., n): sum over n
        ashape = shape_of(a)
        prod = a * _expand_last(g)
        return gsum(prod, axis=tuple(range(-len(ashape), -1)))
    if len(shape_of(a)) == 1:
        # a (k,), b (k, m), g (m,) -> outer(a, g)
        return _expand_last(a) * g
    return matmul(swapaxes(a, -1, -2), g)


def concat(parts, axis=-1):
    """Concatenate along a negative value axis; mixes Vars and constants."""
    if axis >= 0:
        raise ValueError("concat requires a negative axis")
    if any(isinstance(p, Dual) for p in parts):
        ndir = next(p.ndir for p in parts if isinstance(p, Dual))
        duals = [p if isinstance(p, Dual) else _dual_const(p, ndir) for p in parts]
        return Dual(concat([d.val for d in duals], axis=axis),
                    concat([d.dot for d in duals], axis=axis))
    tapes = {p.tape for p in parts if isinstance(p, Var)}
    if not tapes:
        return np.concatenate(parts, axis=axis)
    if len(tapes) > 1:
        raise ValueError("cannot combine Vars from different tapes")
    tape = tapes.pop()
    values = [value_of(p) for p in parts]
    sizes = [shape_of(v)[axis] for v in values]
    out = np.concatenate(values, axis=axis)
    offsets = np.cumsum([0] + sizes)
    parents, slots = [], []
    for k, p in enumerate(parts):
        if isinstance(p, Var):
            parents.append(p.idx)
            slots.append(k)

    def back(g, offsets=offsets, axis=axis, slots=tuple(slots)):
        outs = []
        for k in slots:
            key = (Ellipsis, slice(offsets[k], offsets[k + 1])) + \
                (slice(None),) * (-axis - 1)
            outs.append(g[key])
        return tuple(outs)

    return tape._push(out, tuple(parents), back, "concat")


def stack(parts, axis=-1):
    """Stack equal-shaped values along a new negative axis."""
    if axis >= 0:
        raise ValueError("stack requires a negative axis")
    if any(isinstance(p, Dual) for p in parts):
        ndir = next(p.ndir for p in parts if isinstance(p, Dual))
        duals = [p if isinstance(p, Dual) else _dual_const(p, ndir) for p in parts]
        return Dual(stack([d.val for d in duals], axis=axis),
                    stack([d.dot for d in duals], axis=axis))
    tapes = {p.tape for p in parts if isinstance(p, Var)}
    if not tapes:
        shape = np.broadcast_shapes(*[shape_of(p) for p in parts])
        return np.stack([np.broadcast_to(p, shape) for p in parts], axis=axis)
    if len(tapes) > 1:
        raise ValueError("cannot combine Vars from different tapes")
    tape = tapes.pop()
    values = [value_of(p) for p in parts]
    shape = np.broadcast_shapes(*[shape_of(v) for v in values])
    shapes = [shape_of(v) for v in values]
    out = np.stack([np.broadcast_to(v, shape) for v in values], axis=axis)
    parents, slots = [], []
    for k, p in enumerate(parts):
        if isinstance(p, Var):
            parents.append(p.idx)
            slots.append(k)

    def back(g, axis=axis, slots=tuple(slots), shapes=shapes):
        outs = []
        for k in slots:
            key = (Ellipsis, k) + (slice(None),) * (-axis - 1)
            outs.append(_unbroadcast(g[key], shapes[k]))
        return tuple(outs)

    return tape._push(out, tuple(parents), back, "stack")


# ---------------------------------------------------------------------------
# positive-definite linear solve (Cholesky, never an explicit inverse)

def _chol_lower_solve(L, b):
    """Solve L y = b by forward substitution; L (..., n, n), b (..., n)."""
    n = L.shape[-1]
    ys = []
    for i in range(n):
        acc = b[..., i]
        for j in range(i):
            acc = acc - L[..., i, j] * ys[j]
        ys.append(acc / L[..., i, i])
    return np.stack(np.broadcast_arrays(*ys), axis=-1) if n > 1 else ys[0][..., None]


def _chol_upper_solve(L, y):
    """Solve L^T x = y by back substitution."""
    n = L.shape[-1]
    xs = [None] * n
    for i in range(n - 1, -1, -1):
        acc = y[..., i]
        for j in range(i + 1, n):
            acc = acc - L[..., j, i] * xs[j]
        xs[i] = acc / L[..., i, i]
    return np.stack(np.broadcast_arrays(*xs), axis=-1) if n > 1 else xs[0][..., None]


def chol_solve_np(L, b):
    return _chol_upper_solve(L, _chol_lower_solve(L, b))


def cholesky_np(m):
    """Batched Cholesky; raises NumericError naming the failing batch index."""
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        flat = m.reshape((-1,) + m.shape[-2:])
        for k in range(flat.shape[0]):
            try:
                np.linalg.cholesky(flat[k])
            except np.linalg.LinAlgError:
                raise NumericError(
                    f"matrix not positive definite at batch index {k}: "
                    f"{flat[k].tolist()}"
                ) from None
        raise


def posdef_solve(m, b):
    """x solving M x = b for symmetric positive-definite M.

    Differentiable in both arguments; M (..., n, n), b (..., n) with
    broadcasting between leading dims.
    """
    if isinstance(m, Dual) or isinstance(b, Dual):
        ndir = m.ndir if isinstance(m, Dual) else b.ndir
        md = m if isinstance(m, Dual) else _dual_const(m, ndir)
        bd = b if isinstance(b, Dual) else _dual_const(b, ndir)
        x = posdef_solve(md.val, bd.val)
        rhs = bd.dot - _last0(matmul(md.dot, _expand_last(x)))
        return Dual(x, posdef_solve(md.val, rhs))
    if isinstance(m, Var) or isinstance(b, Var):
        tape, mv, bv, mi, bi = _lift2(m, b)
        sm, sb = shape_of(mv), shape_of(bv)
        L = cholesky_np(np.asarray(mv, dtype=float))
        x = chol_solve_np(L, np.asarray(bv, dtype=float))

        def back_m(g, L=L, x=x, sm=sm):
            w = chol_solve_np(L, g)
            return _unbroadcast(-_expand_last(w) * _expand_second_last(x), sm)

        def back_b(g, L=L, sb=sb):
            return _unbroadcast(chol_solve_np(L, g), sb)

        return _binary(tape, x, mi, bi, back_m, back_b, "posdef_solve")
    L = cholesky_np(np.asarray(m, dtype=float))
    return chol_solve_np(L, np.asarray(b, dtype=float))


# ---------------------------------------------------------------------------
# user-facing derivative drivers

def grad(f, at):
    """Reverse-mode gradient of scalar-valued ``f`` at vector ``at``.

    One forward evaluation, one backward sweep.  Raises NumericError with
    node provenance if a non-finite value appears.
    """
    at_arr = _as_input(at)
    tape = Tape()
    x = tape.var(at_arr, name="grad_input")
    out = f(x)
    out_primal = np.asarray(primal_of(out), dtype=float)
    if out_primal.size != 1:
        raise ValueError("grad target must be scalar-valued")
    if not np.all(np.isfinite(out_primal)):
        where = tape.first_nonfinite()
        detail = f" (first at node #{where[0]} '{where[1]}')" if where else ""
        raise NumericError(f"non-finite value while evaluating grad{detail}")
    if not isinstance(out, Var):
        return np.zeros(shape_of(at_arr))
    adj = tape.backward(out)
    g = adj.get(x.idx)
    if g is None:
        return np.zeros(shape_of(at_arr))
    return g


def _as_input(at):
    if isinstance(at, Dual):
        return at
    return np.asarray(at, dtype=float)


def jacobian(f, at):
    """Jacobian of vector-valued ``f`` via forward-mode duals: one pass per
    input dimension, batched into a single direction pack.

    When ``f`` closes over Vars of an enclosing tape, the returned entries
    are Vars and stay differentiable (second-order contract).
    """
    at_arr = np.asarray(at, dtype=float)
    if at_arr.ndim != 1:
        raise ValueError("jacobian input must be a vector")
    n = at_arr.shape[0]
    out = f(Dual(at_arr, np.eye(n)))
    if isinstance(out, Dual):
        out_primal = np.asarray(primal_of(out.val), dtype=float)
        if not np.all(np.isfinite(out_primal)):
            raise NumericError("non-finite value while evaluating jacobian")
        # dot is (n_in, ...out shape); expose input axis last
        return _jac_layout(out.dot)
    m = np.asarray(primal_of(out), dtype=float).shape
    return np.zeros(m + (n,))


def _jac_layout(dot):
    if isinstance(dot, Var):
        return moveaxis_first_last(dot)
    return np.moveaxis(np.asarray(dot) if not isinstance(dot, Dual) else dot, 0, -1)
