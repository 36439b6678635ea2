"""Layers with hand-written forward and backward passes.

Every layer caches what its backward pass needs during ``forward`` and, on
``backward(grad_out)``, returns the gradient with respect to its input while
storing parameter gradients in ``self.grads`` (overwritten, not accumulated).
Inputs follow the NCHW layout for images and NC for vectors.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class DegenerateError(ValueError):
    """Raised when an input makes a layer's math undefined."""


class Layer:
    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        return self.forward(x, train)

    def astype(self, dtype) -> "Layer":
        for store in (self.params, self.buffers):
            for k, v in store.items():
                store[k] = v.astype(dtype)
        return self


class Dense(Layer):
    """``y = x @ W + b`` with He-normal initialisation."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 dtype=np.float64) -> None:
        super().__init__()
        if rng is None:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
        self.params = {"W": w.astype(dtype), "b": np.zeros(d_out, dtype=dtype)}

    @property
    def d_in(self) -> int:
        return self.params["W"].shape[0]

    @property
    def d_out(self) -> int:
        return self.params["W"].shape[1]

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"dense expects [n, {self.d_in}], got {list(x.shape)}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad_out):
        self.grads = {"W": self._x.T @ grad_out, "b": grad_out.sum(axis=0)}
        return grad_out @ self.params["W"].T


def _check_layout(layout: str) -> int:
    if layout not in ("NCHW", "CNHW"):
        raise ValueError(f"unknown layout {layout!r}")
    return 1 if layout == "NCHW" else 0


class Conv2d(Layer):
    """3x3 convolution, stride 1, zero 'same' padding, via im2col.

    ``layout="CNHW"`` keeps channels on axis 0, which lets im2col and the
    output reshape run without transposes; encoders use it internally.
    ``input_grad=False`` skips the input gradient (first layer of a network).
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator | None = None,
                 dtype=np.float64, input_grad: bool = True, layout: str = "NCHW") -> None:
        super().__init__()
        if rng is None:
            w = np.zeros((c_out, c_in, 3, 3))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (c_in * 9)), size=(c_out, c_in, 3, 3))
        self.params = {"W": w.astype(dtype), "b": np.zeros(c_out, dtype=dtype)}
        self.input_grad = input_grad
        self.layout = layout
        self._caxis = _check_layout(layout)

    @property
    def c_in(self) -> int:
        return self.params["W"].shape[1]

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[self._caxis] != self.c_in:
            raise ValueError(f"conv2d expects {self.c_in} input channels in {self.layout}, got {list(x.shape)}")
        if self._caxis == 1:
            x = x.transpose(1, 0, 2, 3)
        c, n, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.stack([xp[:, :, i:i + h, j:j + w] for i in range(3) for j in range(3)], axis=1)
        cols = cols.reshape(c * 9, n * h * w)
        w_ = self.params["W"]
        out = w_.reshape(w_.shape[0], -1) @ cols
        out += self.params["b"][:, None]
        self._cache = (cols, (c, n, h, w))
        out = out.reshape(-1, n, h, w)
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3)) if self._caxis == 1 else out

    def backward(self, grad_out):
        cols, (c, n, h, w) = self._cache
        if self._caxis == 1:
            grad_out = grad_out.transpose(1, 0, 2, 3)
        w_ = self.params["W"]
        o = w_.shape[0]
        g2 = grad_out.reshape(o, -1)
        self.grads = {"W": (g2 @ cols.T).reshape(w_.shape), "b": g2.sum(axis=1)}
        if not self.input_grad:
            return None
        dcols = (w_.reshape(o, -1).T @ g2).reshape(c, 9, n, h, w)
        dxp = np.zeros((c, n, h + 2, w + 2), dtype=grad_out.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            dxp[:, :, i:i + h, j:j + w] += dcols[:, k]
        dx = dxp[:, :, 1:-1, 1:-1]
        return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)) if self._caxis == 1 else dx


class BatchNorm2d(Layer):
    """Per-channel batch normalisation over batch and spatial axes."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
                 dtype=np.float64, layout: str = "NCHW") -> None:
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.momentum = momentum
        self.eps = eps
        self.layout = layout
        c = _check_layout(layout)
        self._axes = (0, 2, 3) if c == 1 else (1, 2, 3)
        self._bshape = (1, -1, 1, 1) if c == 1 else (-1, 1, 1, 1)
        self._caxis = c
        self.params = {"gamma": np.ones(channels, dtype=dtype),
                       "beta": np.zeros(channels, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype=dtype),
                        "running_var": np.ones(channels, dtype=dtype)}

    def forward(self, x, train=True):
        channels = self.params["gamma"].shape[0]
        if x.ndim != 4 or x.shape[self._caxis] != channels:
            raise ValueError(f"batchnorm expects {channels} channels in {self.layout}, got {list(x.shape)}")
        shape, axes = self._bshape, self._axes
        if train:
            if x.shape[1 - self._caxis] < 2:
                raise DegenerateError("degenerate batch statistics")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        self._cache = (xhat, inv_std, train)
        return xhat * self.params["gamma"].reshape(shape) + self.params["beta"].reshape(shape)

    def backward(self, grad_out):
        xhat, inv_std, train = self._cache
        shape, axes = self._bshape, self._axes
        self.grads = {"gamma": (grad_out * xhat).sum(axis=axes), "beta": grad_out.sum(axis=axes)}
        dxhat = grad_out * self.params["gamma"].reshape(shape)
        if not train:
            return dxhat * inv_std.reshape(shape)
        m = grad_out.size // grad_out.shape[self._caxis]
        s1 = dxhat.sum(axis=axes).reshape(shape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(shape)
        return inv_std.reshape(shape) / m * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def forward(self, x, train=True):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        return grad_out * self._mask


class Sigmoid(Layer):
    def forward(self, x, train=True):
        # tanh form never overflows
        self._y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._y

    def backward(self, grad_out):
        return grad_out * self._y * (1.0 - self._y)


class AvgPool2d(Layer):
    """Non-overlapping 2x2 average pooling (downsamples by 2)."""

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"avgpool2d needs even spatial dims, got {h}x{w}")
        return (x[:, :, 0::2, 0::2] + x[:, :, 1::2, 0::2] + x[:, :, 0::2, 1::2] + x[:, :, 1::2, 1::2]) * 0.25

    def backward(self, grad_out):
        g = grad_out * 0.25
        return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


class BoxSmooth2d(Layer):
    """3x3 average pooling at stride 1 with zero padding; keeps spatial dims.

    The zero-padded box filter is self-adjoint, so backward reuses forward.
    """

    @staticmethod
    def _box(x):
        h, w = x.shape[2], x.shape[3]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros_like(x)
        for i in range(3):
            for j in range(3):
                out += xp[:, :, i:i + h, j:j + w]
        return out / 9.0

    def forward(self, x, train=True):
        return self._box(x)

    def backward(self, grad_out):
        return self._box(grad_out)


class GlobalAvgPool(Layer):
    """Spatial mean: [n, c, h, w] (or [c, n, h, w] with CNHW) -> [n, c]."""

    def __init__(self, layout: str = "NCHW") -> None:
        super().__init__()
        self.layout = layout
        self._caxis = _check_layout(layout)

    def forward(self, x, train=True):
        self._shape = x.shape
        out = x.mean(axis=(2, 3))
        return out if self._caxis == 1 else np.ascontiguousarray(out.T)

    def backward(self, grad_out):
        h, w = self._shape[2], self._shape[3]
        g = grad_out if self._caxis == 1 else grad_out.T
        return np.broadcast_to(g[:, :, None, None] / (h * w), self._shape).copy()


class L2Normalize(Layer):
    """Row-wise projection onto the unit sphere."""

    def forward(self, x, train=True):
        norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
        if np.any(norms == 0):
            raise DegenerateError("degenerate embedding")
        self._norms = norms
        self._y = x / norms
        return self._y

    def backward(self, grad_out):
        y = self._y
        return (grad_out - y * (y * grad_out).sum(axis=1, keepdims=True)) / self._norms


class Sequential(Layer):
    def __init__(self, *layers: Layer) -> None:
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


def iter_layers(root) -> Iterator[tuple[str, Layer]]:
    """Yield ``(dotted_name, layer)`` for every parameterised leaf below ``root``.

    ``root`` may be a Sequential, a Layer, or any object exposing a
    ``children()`` method returning ``(name, child)`` pairs.
    """
    if isinstance(root, Sequential):
        for i, layer in enumerate(root.layers):
            for name, leaf in iter_layers(layer):
                yield (f"{i}.{name}" if name else str(i)), leaf
    elif hasattr(root, "children"):
        for cname, child in root.children():
            for name, leaf in iter_layers(child):
                yield (f"{cname}.{name}" if name else cname), leaf
    elif isinstance(root, Layer):
        if root.params or root.buffers:
            yield "", root
