"""Minimal reverse-mode autodiff on real numpy arrays.

Operations are eager: each call computes its value and appends a node to the
tape. Complex values are carried as a pair of real tensors (`Complex`), so
every complex operation is a composition of the real primitives below.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2 * np.pi)


class NumericalError(RuntimeError):
    """Non-finite loss, failed factorization or similar numeric breakdown."""


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _swap(x):
    return np.swapaxes(x, -1, -2)


# op table: kind -> (forward(*vals, **attrs), vjp(g, out, *vals, **attrs))
OPS: dict[str, tuple[Callable, Callable]] = {}


def defop(kind):
    def register(pair):
        OPS[kind] = pair
        return pair
    return register


defop("add")((lambda a, b: a + b,
              lambda g, o, a, b: (_unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b)))))
defop("sub")((lambda a, b: a - b,
              lambda g, o, a, b: (_unbroadcast(g, np.shape(a)), _unbroadcast(-g, np.shape(b)))))
defop("hadamard")((lambda a, b: a * b,
                   lambda g, o, a, b: (_unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b)))))
defop("div")((lambda a, b: a / b,
              lambda g, o, a, b: (_unbroadcast(g / b, np.shape(a)), _unbroadcast(-g * o / b, np.shape(b)))))
defop("neg")((lambda a: -a, lambda g, o, a: (-g,)))
defop("scale")((lambda a, c: a * c, lambda g, o, a, c: (g * c,)))
defop("matmul")((lambda a, b: a @ b,
                 lambda g, o, a, b: (_unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape))))
defop("exp")((np.exp, lambda g, o, a: (g * o,)))
defop("log")((np.log, lambda g, o, a: (g / a,)))
defop("sqrt")((np.sqrt, lambda g, o, a: (g / (2 * o),)))
defop("cos")((np.cos, lambda g, o, a: (-g * np.sin(a),)))
defop("sin")((np.sin, lambda g, o, a: (g * np.cos(a),)))


def _sigmoid(a):
    return 0.5 * (1 + np.tanh(0.5 * a))


defop("sigmoid")((_sigmoid, lambda g, o, a: (g * o * (1 - o),)))


def _softmax(a, axis=-1):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


defop("softmax")((_softmax,
                  lambda g, o, a, axis=-1: (o * (g - (g * o).sum(axis=axis, keepdims=True)),)))


def _gelu(a):
    return 0.5 * a * (1 + erf(a / _SQRT2))


def _gelu_vjp(g, o, a):
    cdf = 0.5 * (1 + erf(a / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
    return (g * (cdf + a * pdf),)


defop("gelu")((_gelu, _gelu_vjp))
defop("sum")((lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
              lambda g, o, a, axis=None, keepdims=False: (_expand_reduced(g, a.shape, axis, keepdims),)))


def _mean_vjp(g, o, a, axis=None, keepdims=False):
    n = a.size // max(np.size(o), 1)
    return (_expand_reduced(g, a.shape, axis, keepdims) / n,)


defop("mean_pool")((lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims), _mean_vjp))


def _fro(a, axis=None, keepdims=False):
    return np.sqrt(np.sum(a * a, axis=axis, keepdims=keepdims))


def _fro_vjp(g, o, a, axis=None, keepdims=False):
    g = _expand_reduced(g, a.shape, axis, keepdims)
    o = _expand_reduced(o, a.shape, axis, keepdims)
    return (g * a / o,)


defop("frobenius_norm")((_fro, _fro_vjp))
defop("reshape")((lambda a, shape: np.reshape(a, shape), lambda g, o, a, shape: (np.reshape(g, a.shape),)))
defop("transpose")((lambda a, axes: np.transpose(a, axes),
                    lambda g, o, a, axes: (np.transpose(g, np.argsort(axes)),)))


def _slice_vjp(g, o, a, index):
    out = np.zeros_like(a)
    np.add.at(out, index, g)
    return (out,)


defop("slice")((lambda a, index: a[index], _slice_vjp))


def _concat_vjp(g, o, *arrs, axis=0):
    cuts = np.cumsum([x.shape[axis] for x in arrs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


defop("concat")((lambda *arrs, axis=0: np.concatenate(arrs, axis=axis), _concat_vjp))


def _hermitian_part(re, im):
    h = re + 1j * im
    return 0.5 * (h + np.conj(_swap(h)))


def _logdet_fwd(re, im):
    try:
        L = np.linalg.cholesky(_hermitian_part(re, im))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("logdet_hpd: matrix not Hermitian positive definite") from exc
    return 2 * np.sum(np.log(np.real(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1)


def _logdet_vjp(g, o, re, im):
    h = _hermitian_part(re, im)
    L = np.linalg.cholesky(h)
    eye = np.broadcast_to(np.eye(h.shape[-1]), h.shape)
    Linv = np.linalg.solve(L, eye)
    X = np.conj(_swap(Linv)) @ Linv  # h^{-1}
    g = np.asarray(g)[..., None, None]
    return (g * X.real, g * X.imag)


# log|det| of the Hermitian part of (re + j im), batched over leading axes
defop("logdet_hpd")((_logdet_fwd, _logdet_vjp))


def _dft2_fwd(a):
    z = np.fft.rfft2(a)
    return np.stack([z.real, z.imag])


def _dft2_vjp(g, o, a):
    n1, n2 = a.shape[-2:]
    gz = g[0] + 1j * g[1]
    pad = np.zeros(gz.shape[:-1] + (n2,), complex)
    pad[..., : gz.shape[-1]] = gz
    return (np.real(np.fft.ifft2(pad)) * (n1 * n2),)


def _idft2_fwd(a, n=None):
    return np.fft.irfft2(a[0] + 1j * a[1], s=(a.shape[-2], n))


def _idft2_vjp(g, o, a, n=None):
    n1 = a.shape[-2]
    z = np.fft.rfft2(g)
    w = np.full(z.shape[-1], 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    z = z * w / (n1 * n)
    return (np.stack([z.real, z.imag]),)


# real 2-D DFT over the last two axes, half spectrum; output stacked (re, im) on axis 0
defop("dft2")((_dft2_fwd, _dft2_vjp))
defop("idft2")((_idft2_fwd, _idft2_vjp))


# tape -------------------------------------------------------------------------

@dataclass
class Node:
    kind: str
    inputs: tuple
    out: int
    attrs: dict


class Tensor:
    __slots__ = ("tape", "id", "value", "requires_grad")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape, id_, value, requires_grad):
        self.tape = tape
        self.id = id_
        self.value = value
        self.requires_grad = requires_grad

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

    def _op(self, kind, *others, **attrs):
        return self.tape.record_op(kind, self, *others, **attrs)

    def __add__(self, o):
        if isinstance(o, Complex):
            return NotImplemented
        return self._op("add", o)
    def __radd__(self, o): return self.tape.record_op("add", o, self)
    def __sub__(self, o):
        if isinstance(o, Complex):
            return NotImplemented
        return self._op("sub", o)
    def __rsub__(self, o): return self.tape.record_op("sub", o, self)
    def __mul__(self, o):
        if isinstance(o, Complex):
            return NotImplemented
        if np.isscalar(o):
            return self._op("scale", c=float(o))
        return self._op("hadamard", o)
    def __rmul__(self, o): return self.__mul__(o)
    def __truediv__(self, o):
        if np.isscalar(o):
            return self._op("scale", c=1.0 / float(o))
        return self._op("div", o)
    def __rtruediv__(self, o): return self.tape.record_op("div", o, self)
    def __neg__(self): return self._op("neg")
    def __matmul__(self, o):
        if isinstance(o, Complex):
            return NotImplemented
        return self._op("matmul", o)
    def __rmatmul__(self, o): return self.tape.record_op("matmul", o, self)
    def __getitem__(self, index): return self._op("slice", index=index)

    def sum(self, axis=None, keepdims=False): return self._op("sum", axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims=False): return self._op("mean_pool", axis=axis, keepdims=keepdims)
    def reshape(self, *shape):
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        return self._op("reshape", shape=tuple(shape))
    def transpose(self, *axes):
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        return self._op("transpose", axes=tuple(axes))
    @property
    def mT(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)


class ParamTape:
    """Parameter registry plus the eagerly recorded operation list."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list = []
        self.params: dict[str, Tensor] = {}

    def _new(self, value, requires_grad):
        t = Tensor(self, len(self.values), value, requires_grad)
        self.values.append(value)
        return t

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = self._new(np.array(value, dtype=float), True)
        self.params[name] = t
        return t

    def const(self, value) -> Tensor:
        return self._new(np.asarray(value, dtype=float), False)

    def record_op(self, kind: str, *inputs, **attrs) -> Tensor:
        fwd, _ = OPS[kind]
        ts = []
        for x in inputs:
            if isinstance(x, Tensor):
                if x.tape is not self:
                    raise ValueError("tensor belongs to another tape")
                ts.append(x)
            else:
                ts.append(self.const(x))
        vals = [t.value for t in ts]
        try:
            out = fwd(*vals, **attrs)
        except ValueError as exc:
            raise ValueError(f"{kind}: {exc}") from exc
        out = np.asarray(out, dtype=float)
        needs = any(t.requires_grad for t in ts)
        res = self._new(out, needs)
        if needs:
            self.nodes.append(Node(kind, tuple(t.id for t in ts), res.id, attrs))
        return res

    def backward(self, output: Tensor) -> dict[str, np.ndarray]:
        if output is None or output.tape is not self:
            raise ValueError("backward needs an output tensor recorded on this tape")
        if output.value.size != 1:
            raise ValueError("backward needs a scalar output")
        grads: dict[int, np.ndarray] = {output.id: np.ones_like(output.value)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out, None)
            if g is None:
                continue
            _, vjp = OPS[node.kind]
            vals = [self.values[i] for i in node.inputs]
            parts = vjp(g, self.values[node.out], *vals, **node.attrs)
            for i, gi in zip(node.inputs, parts):
                if gi is None:
                    continue
                grads[i] = grads[i] + gi if i in grads else np.array(gi, dtype=float)
        out = {}
        for name, t in self.params.items():
            g = grads.get(t.id)
            out[name] = np.zeros_like(t.value) if g is None else np.broadcast_to(g, t.shape).copy()
        return out


def record_op(tape: ParamTape, kind: str, *inputs, **attrs) -> Tensor:
    return tape.record_op(kind, *inputs, **attrs)


def backward(tape: ParamTape, output: Tensor) -> dict[str, np.ndarray]:
    return tape.backward(output)


# functional helpers -------------------------------------------------------------

def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
        if isinstance(x, Complex):
            return x.re.tape if isinstance(x.re, Tensor) else x.im.tape
    raise ValueError("no tensor argument")


def exp(x): return x._op("exp")
def log(x): return x._op("log")
def sqrt(x): return x._op("sqrt")
def cos(x): return x._op("cos")
def sin(x): return x._op("sin")
def sigmoid(x): return x._op("sigmoid")
def softmax(x, axis=-1): return x._op("softmax", axis=axis)
def gelu(x): return x._op("gelu")
def frobenius_norm(x, axis=None, keepdims=False): return x._op("frobenius_norm", axis=axis, keepdims=keepdims)
def matmul(a, b): return _tape_of(a, b).record_op("matmul", a, b)
def concat(xs, axis=0): return _tape_of(*xs).record_op("concat", *xs, axis=axis)
def dft2(x): return x._op("dft2")
def idft2(x, n): return x._op("idft2", n=n)
def logdet_hpd(gram: "Complex"): return _tape_of(gram).record_op("logdet_hpd", gram.re, gram.im)


class Complex:
    """A complex tensor as a (re, im) pair of real Tensors (or plain arrays)."""

    __slots__ = ("re", "im")
    __array_ufunc__ = None

    def __init__(self, re, im):
        self.re = re
        self.im = im

    @staticmethod
    def split(x):
        if isinstance(x, Complex):
            return x.re, x.im
        if isinstance(x, np.ndarray) and np.iscomplexobj(x):
            return x.real, x.imag
        if isinstance(x, complex):
            return x.real, x.imag
        return x, None

    @property
    def value(self) -> np.ndarray:
        return _val(self.re) + 1j * _val(self.im)

    @property
    def shape(self):
        return np.shape(_val(self.re))

    def __add__(self, o):
        r, i = Complex.split(o)
        return Complex(self.re + r, self.im if i is None else self.im + i)
    __radd__ = __add__

    def __sub__(self, o):
        r, i = Complex.split(o)
        return Complex(self.re - r, self.im if i is None else self.im - i)

    def __rsub__(self, o):
        r, i = Complex.split(o)
        return Complex(r - self.re, -self.im if i is None else i - self.im)

    def __neg__(self):
        return Complex(-self.re, -self.im)

    def __mul__(self, o):
        r, i = Complex.split(o)
        if i is None:
            return Complex(self.re * r, self.im * r)
        return cmul(self, Complex(r, i))
    __rmul__ = __mul__

    def __truediv__(self, o):
        # real divisor only
        return Complex(self.re / o, self.im / o)

    def __matmul__(self, o):
        r, i = Complex.split(o)
        if i is None:
            return Complex(self.re @ r, self.im @ r)
        return Complex(self.re @ r - self.im @ i, self.re @ i + self.im @ r)

    def __rmatmul__(self, o):
        r, i = Complex.split(o)
        if i is None:
            return Complex(r @ self.re, r @ self.im)
        return Complex(r @ self.re - i @ self.im, r @ self.im + i @ self.re)

    def __getitem__(self, idx):
        return Complex(self.re[idx], self.im[idx])

    def conj(self):
        return Complex(self.re, -self.im)

    @property
    def mT(self):
        return Complex(_mT(self.re), _mT(self.im))

    @property
    def H(self):
        return Complex(_mT(self.re), -_mT(self.im))

    def reshape(self, *shape):
        return Complex(self.re.reshape(*shape), self.im.reshape(*shape))

    def transpose(self, *axes):
        return Complex(self.re.transpose(*axes), self.im.transpose(*axes))

    def sum(self, axis=None, keepdims=False):
        return Complex(self.re.sum(axis=axis, keepdims=keepdims), self.im.sum(axis=axis, keepdims=keepdims))

    def abs2(self):
        return self.re * self.re + self.im * self.im


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _mT(x):
    return x.mT if isinstance(x, Tensor) else np.swapaxes(x, -1, -2)


def cmul(a: Complex, b: Complex) -> Complex:
    """Paired-real complex product."""
    return Complex(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)


def expj(x) -> Complex:
    """exp(j x) as the (cos, sin) pair."""
    return Complex(cos(x), sin(x))


# oracle -------------------------------------------------------------------------

def finite_diff_grad(loss_fn: Callable[[dict], float], params: dict[str, np.ndarray],
                     eps: float = 1e-6, names=None) -> dict[str, np.ndarray]:
    """Central differences, one coordinate at a time; `params` is not modified."""
    work = {k: np.array(v, dtype=float) for k, v in params.items()}
    out = {}
    for name in names or list(work):
        x = work[name]
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn(work)
            flat[i] = orig - eps
            lo = loss_fn(work)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        out[name] = g
    return out


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs deviation scaled by the group's largest gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


# Adam ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1, beta2 must lie in [0, 1)")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """One Adam update; returns new parameter arrays and advances `state` in place."""
    state.t += 1
    t = state.t
    alpha_t = state.lr * np.sqrt(1 - state.beta2 ** t) / (1 - state.beta1 ** t)
    new = {}
    for k, w in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = np.zeros_like(w)
            state.v[k] = np.zeros_like(w)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        new[k] = w - alpha_t * m / (np.sqrt(v) + state.eps)
    return new
