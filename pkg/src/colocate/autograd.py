"""A small reverse-mode autodiff engine over numpy arrays.

Only the layers the locator network needs are provided.  Feature maps are
``(batch, channels, length)`` arrays; a 2-D input to :func:`conv1d` or
:func:`batchnorm1d` is treated as a batch of one.  Every op checks that its
forward output is finite and raises :class:`NonFiniteError` otherwise.

Convolutions are evaluated through real FFTs of length
``next_fast_len(N + K - 1)``, which for the long kernels used here is far
cheaper than the direct sum; zero padding is ``(K - 1) // 2`` on the left and
the remainder on the right, so the output length equals the input length.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.fft as sfft

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LOG_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = (),
                 _backward: Optional[Callable[[np.ndarray], None]] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray, owned: bool = False):
        # ``owned`` marks a freshly computed array that may be adopted without copying
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.flags.writeable and g.flags.c_contiguous:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate ``grad`` (default: ones, for a scalar) to every input that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            # ops may consume the gradient they receive; the root keeps its own
            if node is self:
                g = node.grad.copy()
            else:
                g, node.grad = node.grad, None
            node._backward(g)


def _result(data: np.ndarray, parents, backward) -> Tensor:
    # NaN and Inf both propagate into the sum
    if not np.isfinite(np.sum(data)):
        raise NonFiniteError("non-finite values in forward pass")
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, parents if needs else (), backward if needs else None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- convolution ------------------------------------------------------------------


def conv_padding(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Same-length 1-D cross-correlation: ``out[o, t] = b[o] + sum_{c,k} w[o,c,k] * xpad[c, t+k]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    bsz, c_in, n = xd.shape
    c_out, c_in_w, k = w.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv1d: input has {c_in} channels, kernel expects {c_in_w}")
    if k == 1:
        return _pointwise_conv(x, w, b, squeeze)
    left, right = conv_padding(k)
    nfft = sfft.next_fast_len(n + k - 1, real=True)
    xf = sfft.rfft(xd, nfft, axis=-1)                       # (B, Ci, F)
    wf = sfft.rfft(w.data[:, :, ::-1], nfft, axis=-1)       # (Co, Ci, F)
    xf_t = np.ascontiguousarray(xf.transpose(2, 0, 1))      # (F, B, Ci)
    wf_t = np.ascontiguousarray(wf.transpose(2, 1, 0))      # (F, Ci, Co)
    yf = np.matmul(xf_t, wf_t)                              # (F, B, Co)
    y = sfft.irfft(yf.transpose(1, 2, 0), nfft, axis=-1)[..., right:right + n]
    if y.dtype != xd.dtype:
        y = y.astype(xd.dtype)
    if b is not None:
        y += _as_tensor(b).data[None, :, None]
    if squeeze:
        y = y[0]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gd = g[None] if squeeze else g
        # the gradient sits at offset ``right`` of the full convolution: a phase ramp
        shift = np.exp(-2j * np.pi * right * np.arange(nfft // 2 + 1) / nfft).astype(xf.dtype)
        gf = sfft.rfft(gd, nfft, axis=-1)                   # (B, Co, F)
        gf_t = np.ascontiguousarray(gf.transpose(2, 0, 1))  # (F, B, Co)
        gf_t *= shift[:, None, None]
        if x.requires_grad:
            gx_f = np.matmul(gf_t, np.conj(wf_t).transpose(0, 2, 1))   # (F, B, Ci)
            gx = sfft.irfft(gx_f.transpose(1, 2, 0), nfft, axis=-1)[..., :n]
            x._accumulate(gx[0] if squeeze else gx)
        if w.requires_grad:
            gw_f = np.matmul(gf_t.transpose(0, 2, 1), np.conj(xf_t))   # (F, Co, Ci)
            gw_rev = sfft.irfft(gw_f.transpose(1, 2, 0), nfft, axis=-1)[..., :k]
            w._accumulate(gw_rev[..., ::-1])
        if b is not None and b.requires_grad:
            b._accumulate(gd.sum(axis=(0, 2)))

    return _result(y, parents, backward)


def _pointwise_conv(x: Tensor, w: Tensor, b: Optional[Tensor], squeeze: bool) -> Tensor:
    xd = x.data[None] if squeeze else x.data
    w2 = w.data[:, :, 0]
    y = np.matmul(w2, xd)                                   # (B, Co, N)
    if b is not None:
        y = y + _as_tensor(b).data[None, :, None]
    if squeeze:
        y = y[0]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gd = g[None] if squeeze else g
        if x.requires_grad:
            gx = np.matmul(w2.T, gd)
            x._accumulate(gx[0] if squeeze else gx)
        if w.requires_grad:
            w._accumulate(np.einsum("bon,bcn->oc", gd, xd)[:, :, None])
        if b is not None and b.requires_grad:
            b._accumulate(gd.sum(axis=(0, 2)))

    return _result(y, parents, backward)


# -- normalisation and activations --------------------------------------------------


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation.

    In training mode statistics are taken over (batch, length) and the running
    buffers are updated in place (the running variance uses the unbiased
    estimate); in eval mode the running buffers are used unchanged.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    g3 = gamma.data[None, :, None]
    if training:
        if xd.shape[0] < 2:
            raise ValueError("batch normalisation in training mode needs a batch of at least 2")
        count = xd.shape[0] * xd.shape[2]
        mean = xd.mean(axis=(0, 2))
        centered = xd - mean[None, :, None]
        var = np.einsum("bcn,bcn->c", centered, centered) / count
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    if training:
        xhat = centered
        xhat *= inv[None, :, None]
        y = xhat * g3
        y += beta.data[None, :, None]
    else:
        # a single per-channel affine map
        scale = gamma.data * inv
        y = xd * scale[None, :, None]
        y += (beta.data - mean.astype(xd.dtype) * scale)[None, :, None]
        xhat = None
    if squeeze:
        y = y[0]

    def backward(g):
        gd = g[None] if squeeze else g
        gsum = gd.sum(axis=(0, 2))
        xh = xhat if xhat is not None else (xd - mean.astype(xd.dtype)[None, :, None]) * inv[None, :, None]
        gxs = np.einsum("bcn,bcn->c", gd, xh)
        if gamma.requires_grad:
            gamma._accumulate(gxs)
        if beta.requires_grad:
            beta._accumulate(gsum)
        if x.requires_grad:
            scale = (gamma.data * inv)[None, :, None]
            if training:
                m = xd.shape[0] * xd.shape[2]
                gd -= (gsum / m)[None, :, None]
                gd -= xh * (gxs / m)[None, :, None]
            gd *= scale
            x._accumulate(gd[0] if squeeze else gd, owned=True)

    return _result(y, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.maximum(x.data, 0)

    def backward(g):
        g *= y > 0
        x._accumulate(g, owned=True)

    return _result(y, (x,), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.data.shape != y.data.shape:
        raise ValueError(f"add: shapes {x.data.shape} and {y.data.shape} differ")

    def backward(g):
        if y.requires_grad:
            y._accumulate(g)
        if x.requires_grad:
            x._accumulate(g, owned=True)

    return _result(x.data + y.data, (x, y), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the last (temporal) axis: ``[.., C, N] -> [.., C]``."""
    x = _as_tensor(x)
    n = x.data.shape[-1]

    def backward(g):
        x._accumulate(np.broadcast_to(g[..., None] / n, x.data.shape))

    return _result(x.data.mean(axis=-1), (x,), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ W.T + b`` with ``W`` of shape (D_out, D_in); ``x`` is (D_in,) or (B, D_in)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.shape[-1] != w.data.shape[1]:
        raise ValueError(f"affine: input width {x.data.shape[-1]} != {w.data.shape[1]}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(np.atleast_2d(g).T @ np.atleast_2d(x.data))
        if b.requires_grad:
            b._accumulate(g.sum(axis=0) if g.ndim == 2 else g)

    return _result(x.data @ w.data.T + b.data, (x, w, b), backward)


def softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (x,), backward)


def cross_entropy(y: Tensor, c) -> Tensor:
    """``-sum_j c_j log y_j`` averaged over a leading batch axis, if any; ``y`` is clamped at 1e-12."""
    y = _as_tensor(y)
    c = np.asarray(c, dtype=y.data.dtype)
    clamped = np.maximum(y.data, LOG_EPS)
    per = -(c * np.log(clamped)).sum(axis=-1)
    batch = per.size if per.ndim else 1

    def backward(g):
        y._accumulate(g * -(c / clamped) * (y.data > LOG_EPS) / batch)

    return _result(np.asarray(per.mean()), (y,), backward)


def softmax_cross_entropy(logits: Tensor, c) -> Tensor:
    """Fused, numerically stable ``cross_entropy(softmax(logits), c)``."""
    logits = _as_tensor(logits)
    c = np.asarray(c, dtype=logits.data.dtype)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    per = -(c * logp).sum(axis=-1)
    batch = per.size if per.ndim else 1

    def backward(g):
        logits._accumulate(g * (np.exp(logp) - c) / batch)

    return _result(np.asarray(per.mean()), (logits,), backward)


# -- parameters and Adam -------------------------------------------------------------


class ParamStore:
    """Named trainable tensors, their Adam moments, and non-trainable buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer {name}")
        self.buffers[name] = np.array(value)
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params) + list(self.buffers)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.buffers)
        return out

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays().items()}

    def restore(self, arrays: dict[str, np.ndarray]):
        for k, v in arrays.items():
            target = self.params[k].data if k in self.params else self.buffers[k]
            if target.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {target.shape} vs {v.shape}")
            target[...] = v


def adam_step(params: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    params.step += 1
    t = params.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m, v = params.m[name], params.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
        p.grad = None


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
