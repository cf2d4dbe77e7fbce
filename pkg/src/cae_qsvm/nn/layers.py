"""Stateful layer wrappers around :mod:`cae_qsvm.nn.functional`.

A layer holds its parameters in ``params`` and, after ``backward``, the
matching gradients in ``grads``. Batch-norm running statistics live in
``state`` and only change on a train-mode forward pass.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import functional as F


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.state = {}
        self._cache = None

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x, training=False):
        return self.forward(x, training=training)

    def output_shape(self, input_shape):
        """Shape (C, H, W) produced for a single (C, H, W) input."""
        out = self.forward(np.zeros((2, *input_shape)), training=False)
        return out.shape[1:]

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


def kaiming_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng=None, bias=True):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.stride = stride
        self.padding = padding
        k = kernel_size
        self.params["weight"] = kaiming_normal(
            rng, (out_channels, in_channels, k, k), in_channels * k * k
        )
        if bias:
            self.params["bias"] = np.zeros(out_channels)

    def forward(self, x, training=False):
        out, self._cache = F.conv2d_forward(
            x, self.params["weight"], self.params.get("bias"), self.stride, self.padding
        )
        return out

    def backward(self, dout):
        dx, dw, db = F.conv2d_backward(dout, self._cache)
        self.grads = {"weight": dw}
        if db is not None:
            self.grads["bias"] = db
        return dx

    def output_shape(self, input_shape):
        c, h, w = input_shape
        co, _, k, _ = self.params["weight"].shape
        return (co, F.conv_output_size(h, k, self.stride, self.padding),
                F.conv_output_size(w, k, self.stride, self.padding))


class ConvTranspose2d(Layer):
    kind = "conv_transpose"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 output_padding=0, rng=None, bias=True):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        k = kernel_size
        self.params["weight"] = kaiming_normal(
            rng, (in_channels, out_channels, k, k), in_channels * k * k
        )
        if bias:
            self.params["bias"] = np.zeros(out_channels)

    def forward(self, x, training=False):
        out, self._cache = F.conv_transpose2d_forward(
            x, self.params["weight"], self.params.get("bias"),
            self.stride, self.padding, self.output_padding,
        )
        return out

    def backward(self, dout):
        dx, dw, db = F.conv_transpose2d_backward(dout, self._cache)
        self.grads = {"weight": dw}
        if db is not None:
            self.grads["bias"] = db
        return dx

    def output_shape(self, input_shape):
        c, h, w = input_shape
        _, co, k, _ = self.params["weight"].shape
        size = lambda s: F.conv_transpose_output_size(s, k, self.stride, self.padding,
                                                      self.output_padding)
        return (co, size(h), size(w))


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.state["running_mean"] = np.zeros(channels)
        self.state["running_var"] = np.ones(channels)

    def forward(self, x, training=False):
        out, self._cache, mean, var = F.batchnorm2d_forward(
            x, self.params["gamma"], self.params["beta"],
            self.state["running_mean"], self.state["running_var"],
            training, self.momentum, self.eps,
        )
        if training:
            self.state = {"running_mean": mean, "running_var": var}
        return out

    def backward(self, dout):
        dx, dgamma, dbeta = F.batchnorm2d_backward(dout, self._cache)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        return dx

    def output_shape(self, input_shape):
        return tuple(input_shape)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, size=2, stride=None):
        super().__init__()
        self.size = size
        self.stride = size if stride is None else stride

    def forward(self, x, training=False):
        out, self._cache = F.maxpool2d_forward(x, self.size, self.stride)
        return out

    def backward(self, dout):
        return F.maxpool2d_backward(dout, self._cache)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (c, (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1)


class AdaptiveAvgPool2d(Layer):
    kind = "adaptive_avgpool"

    def __init__(self, output_size=(1, 1)):
        super().__init__()
        self.output_size = tuple(output_size)

    def forward(self, x, training=False):
        out, self._cache = F.adaptive_avgpool2d_forward(x, self.output_size)
        return out

    def backward(self, dout):
        return F.adaptive_avgpool2d_backward(dout, self._cache)

    def output_shape(self, input_shape):
        return (input_shape[0], *self.output_size)


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn="relu"):
        super().__init__()
        self.fn = fn

    def forward(self, x, training=False):
        out, self._cache = F.activation_forward(x, self.fn)
        return out

    def backward(self, dout):
        return F.activation_backward(dout, self._cache)

    def output_shape(self, input_shape):
        return tuple(input_shape)


class Sequential(Layer):
    """Runs layers in order; parameters are addressed as ``"<index>.<name>"``."""

    kind = "sequential"

    def __init__(self, layers):
        self.layers = list(layers)
        self.state = {}
        self._cache = None

    @property
    def params(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    @property
    def grads(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = tuple(layer.output_shape(shape))
        return shape

    def set_params(self, named):
        """Replace parameters from a ``{"<index>.<name>": array}`` mapping."""
        for key, value in named.items():
            idx, name = key.split(".", 1)
            layer = self.layers[int(idx)]
            if layer.params[name].shape != value.shape:
                raise ShapeError(
                    f"parameter {key} expects shape {layer.params[name].shape}, got {value.shape}"
                )
            layer.params[name] = np.asarray(value, dtype=float)
