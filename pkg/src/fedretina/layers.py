"""Layer implementations with hand-written forward and backward passes.

Activations are NHWC for images and (batch, features) after flattening.
Every layer works on whatever float dtype it is given, so the same code
serves 32-bit training and 64-bit gradient verification.
"""
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fedretina.config import BATCHNORM_EPS, BATCHNORM_MOMENTUM
from fedretina.errors import ShapeError, UsageError

Shape = Tuple[int, ...]
Params = Dict[str, np.ndarray]


class Layer:
    """Base class. Subclasses set `kind` and override what they need."""
    kind = "layer"
    param_roles: Tuple[str, ...] = ()
    buffer_roles: Tuple[str, ...] = ()

    def __init__(self, index: int, in_shape: Shape):
        self.index = index
        self.in_shape = in_shape
        self.out_shape = self.infer_shape(in_shape)

    def infer_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def init_params(self, rng: np.random.Generator) -> List[Tuple[str, np.ndarray]]:
        return []

    def init_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return []

    def forward(self, x: np.ndarray, params: Params, buffers: Params,
                training: bool, rng: Optional[np.random.Generator]):
        return x, None

    def backward(self, dy: np.ndarray, params: Params, cache) -> Tuple[np.ndarray, Params]:
        return dy, {}

    def updated_buffers(self, buffers: Params, cache) -> Params:
        return buffers

    def describe(self) -> str:
        return f"layer {self.index} ({self.kind})"


def _he_uniform(rng: np.random.Generator, shape: Shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero 'same' padding. Weight is (3, 3, C_in, C_out)."""
    kind = "conv3x3"
    param_roles = ("weight", "bias")

    def __init__(self, index: int, in_shape: Shape, channels: int):
        self.channels = channels
        super().__init__(index, in_shape)

    def infer_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3:
            raise ShapeError(f"expects an (H, W, C) input, got {in_shape}")
        if self.channels < 1:
            raise ShapeError(f"needs at least one output channel, got {self.channels}")
        return (in_shape[0], in_shape[1], self.channels)

    def init_params(self, rng):
        c_in = self.in_shape[2]
        weight = _he_uniform(rng, (3, 3, c_in, self.channels), 9 * c_in)
        return [("weight", weight), ("bias", np.zeros(self.channels))]

    def forward(self, x, params, buffers, training, rng):
        batch, height, width, c_in = x.shape
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch * height * width, 9 * c_in)
        kernel = params["weight"].reshape(9 * c_in, self.channels)
        y = cols @ kernel + params["bias"]
        return y.reshape(batch, height, width, self.channels), (x.shape, cols)

    def backward(self, dy, params, cache):
        (batch, height, width, c_in), cols = cache
        dy_flat = dy.reshape(-1, self.channels)
        kernel = params["weight"].reshape(9 * c_in, self.channels)
        grads = {
            "weight": (cols.T @ dy_flat).reshape(3, 3, c_in, self.channels),
            "bias": dy_flat.sum(axis=0),
        }
        dcols = (dy_flat @ kernel.T).reshape(batch, height, width, 3, 3, c_in)
        dpadded = np.zeros((batch, height + 2, width + 2, c_in), dtype=dy.dtype)
        for i in range(3):
            for j in range(3):
                dpadded[:, i:i + height, j:j + width, :] += dcols[:, :, :, i, j, :]
        return dpadded[:, 1:-1, 1:-1, :], grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, params, buffers, training, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, params, cache):
        return dy * cache, {}


class MaxPool2x2(Layer):
    """Non-overlapping 2x2 max pooling. Gradient goes to the first maximum of each window."""
    kind = "maxpool2x2"

    def infer_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"expects an (H, W, C) input, got {in_shape}")
        height, width, channels = in_shape
        if height % 2 or width % 2 or height < 2 or width < 2:
            raise ShapeError(f"needs even spatial dimensions, got {height}x{width}")
        return (height // 2, width // 2, channels)

    def forward(self, x, params, buffers, training, rng):
        batch, height, width, channels = x.shape
        windows = x.reshape(batch, height // 2, 2, width // 2, 2, channels)
        windows = windows.transpose(0, 1, 3, 5, 2, 4).reshape(batch, height // 2, width // 2, channels, 4)
        winner = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]
        return y, (x.shape, winner)

    def backward(self, dy, params, cache):
        (batch, height, width, channels), winner = cache
        routed = np.zeros(dy.shape + (4,), dtype=dy.dtype)
        np.put_along_axis(routed, winner[..., None], dy[..., None], axis=-1)
        routed = routed.reshape(batch, height // 2, width // 2, channels, 2, 2)
        dx = routed.transpose(0, 1, 4, 2, 5, 3).reshape(batch, height, width, channels)
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def infer_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params, buffers, training, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, params, cache):
        return dy.reshape(cache), {}


class BatchNorm(Layer):
    """Normalizes over every axis but the last (features or channels)."""
    kind = "batchnorm"
    param_roles = ("gamma", "beta")
    buffer_roles = ("running_mean", "running_var")

    def __init__(self, index: int, in_shape: Shape, eps: float = BATCHNORM_EPS,
                 momentum: float = BATCHNORM_MOMENTUM):
        self.eps = eps
        self.momentum = momentum
        super().__init__(index, in_shape)

    def init_params(self, rng):
        features = self.in_shape[-1]
        return [("gamma", np.ones(features)), ("beta", np.zeros(features))]

    def init_buffers(self):
        features = self.in_shape[-1]
        return [("running_mean", np.zeros(features)), ("running_var", np.ones(features))]

    def forward(self, x, params, buffers, training, rng):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean = buffers["running_mean"]
            var = buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        x_hat = (x - mean) * inv_std
        y = params["gamma"] * x_hat + params["beta"]
        return y, (x_hat, inv_std, mean, var, training)

    def backward(self, dy, params, cache):
        x_hat, inv_std, _, _, training = cache
        axes = tuple(range(dy.ndim - 1))
        grads = {"gamma": (dy * x_hat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        dx_hat = dy * params["gamma"]
        if not training:
            return dx_hat * inv_std, grads
        count = dy.size // dy.shape[-1]
        dx = (inv_std / count) * (
            count * dx_hat - dx_hat.sum(axis=axes) - x_hat * (dx_hat * x_hat).sum(axis=axes)
        )
        return dx, grads

    def updated_buffers(self, buffers, cache):
        _, _, mean, var, training = cache
        if not training:
            return buffers
        m = self.momentum
        running_var = m * buffers["running_var"] + (1 - m) * var
        # keeps running variance strictly positive even for constant features
        running_var = np.maximum(running_var, np.finfo(running_var.dtype).tiny)
        return {
            "running_mean": (m * buffers["running_mean"] + (1 - m) * mean).astype(mean.dtype),
            "running_var": running_var.astype(var.dtype),
        }


class Dense(Layer):
    """Fully connected layer. Weight is (in, out)."""
    kind = "dense"
    param_roles = ("weight", "bias")

    def __init__(self, index: int, in_shape: Shape, units: int):
        self.units = units
        super().__init__(index, in_shape)

    def infer_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"expects a flat input, got {in_shape}")
        if self.units < 1:
            raise ShapeError(f"needs at least one unit, got {self.units}")
        return (self.units,)

    def init_params(self, rng):
        fan_in = self.in_shape[0]
        return [("weight", _he_uniform(rng, (fan_in, self.units), fan_in)),
                ("bias", np.zeros(self.units))]

    def forward(self, x, params, buffers, training, rng):
        return x @ params["weight"] + params["bias"], x

    def backward(self, dy, params, cache):
        grads = {"weight": cache.T @ dy, "bias": dy.sum(axis=0)}
        return dy @ params["weight"].T, grads


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    kind = "dropout"

    def __init__(self, index: int, in_shape: Shape, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        super().__init__(index, in_shape)

    def forward(self, x, params, buffers, training, rng):
        if not training or self.rate == 0.0:
            return x, None
        if rng is None:
            raise UsageError("train-mode dropout needs a random stream")
        keep = rng.random(x.shape) >= self.rate
        mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.rate)
        return x * mask, mask

    def backward(self, dy, params, cache):
        if cache is None:
            return dy, {}
        return dy * cache, {}


class Softmax(Layer):
    kind = "softmax"

    def infer_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"expects a flat input, got {in_shape}")
        return in_shape

    def forward(self, x, params, buffers, training, rng):
        probs = softmax(x)
        return probs, probs

    def backward(self, dy, params, cache):
        probs = cache
        return probs * (dy - (dy * probs).sum(axis=1, keepdims=True)), {}


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)
