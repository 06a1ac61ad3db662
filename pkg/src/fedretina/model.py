"""Model construction, forward/backward passes and the SGD update."""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fedretina.config import (
    DEFAULT_TRUNK_DEPTH,
    DROPOUT_RATE,
    HEAD_UNITS,
    INPUT_SHAPE,
    NUM_CLASSES,
    TRUNK_WIDTHS,
)
from fedretina.errors import ConfigError, NumericError, ShapeError, UsageError
from fedretina.layers import (
    BatchNorm,
    Conv3x3,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2x2,
    ReLU,
    Softmax,
    softmax,
)
from fedretina.tensor_utils import ParameterSet

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv3x3", "relu", "maxpool2x2", "flatten", "batchnorm", "dense", "dropout", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the architecture. `size` is channels (conv) or units (dense)."""
    kind: str
    size: int = 0
    rate: float = 0.0

    def __str__(self) -> str:
        if self.kind in ("conv3x3", "dense"):
            return f"{self.kind}({self.size})"
        if self.kind == "dropout":
            return f"dropout({self.rate})"
        return self.kind


def conv3x3(channels: int) -> LayerSpec:
    return LayerSpec("conv3x3", size=channels)


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", size=units)


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


RELU = LayerSpec("relu")
MAXPOOL = LayerSpec("maxpool2x2")
FLATTEN = LayerSpec("flatten")
BATCHNORM = LayerSpec("batchnorm")
SOFTMAX = LayerSpec("softmax")


def trunk_specs(depth: int, widths: Sequence[int] = TRUNK_WIDTHS) -> List[LayerSpec]:
    """Small CNN trunk: `depth` blocks of conv3x3 -> relu -> maxpool, then flatten."""
    if depth < 0 or depth > len(widths):
        raise ConfigError(f"trunk depth must be in [0, {len(widths)}], got {depth}")
    specs: List[LayerSpec] = []
    for width in widths[:depth]:
        specs += [conv3x3(width), RELU, MAXPOOL]
    return specs + [FLATTEN]


def head_specs(units: int = HEAD_UNITS, rate: float = DROPOUT_RATE,
               num_classes: int = NUM_CLASSES) -> List[LayerSpec]:
    """Classifier head: batchnorm -> dense -> dropout -> dense -> softmax."""
    return [BATCHNORM, dense(units), dropout(rate), dense(num_classes), SOFTMAX]


def default_specs(depth: int = DEFAULT_TRUNK_DEPTH) -> List[LayerSpec]:
    return trunk_specs(depth) + head_specs()


def _make_layer(spec: LayerSpec, index: int, in_shape: Tuple[int, ...]) -> Layer:
    if spec.kind == "conv3x3":
        return Conv3x3(index, in_shape, spec.size)
    if spec.kind == "relu":
        return ReLU(index, in_shape)
    if spec.kind == "maxpool2x2":
        return MaxPool2x2(index, in_shape)
    if spec.kind == "flatten":
        return Flatten(index, in_shape)
    if spec.kind == "batchnorm":
        return BatchNorm(index, in_shape)
    if spec.kind == "dense":
        return Dense(index, in_shape, spec.size)
    if spec.kind == "dropout":
        return Dropout(index, in_shape, spec.rate)
    if spec.kind == "softmax":
        return Softmax(index, in_shape)
    raise ConfigError(f"layer {index}: unknown kind {spec.kind!r} (expected one of {LAYER_KINDS})")


def _build_layers(specs: Sequence[LayerSpec], input_shape: Tuple[int, ...],
                  num_classes: int) -> List[Layer]:
    layers: List[Layer] = []
    shape = tuple(input_shape)
    for index, spec in enumerate(specs):
        try:
            layer = _make_layer(spec, index, shape)
        except ShapeError as exc:
            previous = f"layer {index - 1} ({specs[index - 1]})" if index else "the input"
            raise ShapeError(
                f"layer {index} ({spec}) cannot follow {previous} with shape {shape}: {exc}"
            ) from exc
        layers.append(layer)
        shape = layer.out_shape
    if not specs:
        return layers
    softmax_positions = [i for i, spec in enumerate(specs) if spec.kind == "softmax"]
    if softmax_positions != [len(specs) - 1]:
        raise ShapeError(f"exactly one terminal softmax required, found at positions {softmax_positions}")
    if shape != (num_classes,):
        raise ShapeError(
            f"layer {len(specs) - 2} ({specs[-2] if len(specs) > 1 else specs[-1]}) "
            f"-> layer {len(specs) - 1} (softmax) outputs {shape}, expected ({num_classes},)"
        )
    return layers


def architecture_hash(specs: Sequence[LayerSpec], input_shape: Tuple[int, ...],
                      num_classes: int) -> bytes:
    """SHA-256 of the canonical architecture description (32 bytes)."""
    description = {
        "specs": [asdict(spec) for spec in specs],
        "input_shape": list(input_shape),
        "num_classes": num_classes,
    }
    return hashlib.sha256(json.dumps(description, sort_keys=True).encode("utf-8")).digest()


class Model:
    """Layers plus their parameters, batchnorm running statistics and a mode flag.

    A Model is not thread-safe; institutions train on independent instances.
    """

    def __init__(self, specs: Sequence[LayerSpec], layers: List[Layer], params: ParameterSet,
                 buffers: ParameterSet, input_shape: Tuple[int, ...], num_classes: int,
                 dtype, seed: int):
        self.specs = list(specs)
        self.layers = layers
        self.params = params
        self.buffers = buffers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.training = False
        # fallback stream for dropout when the caller does not supply one
        self.rng = np.random.default_rng([seed, 1])

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    @staticmethod
    def param_name(layer: Layer, role: str) -> str:
        return f"{layer.index:02d}.{layer.kind}.{role}"

    def state_dict(self) -> ParameterSet:
        """Trainable params followed by batchnorm running statistics."""
        return self.params.concat(self.buffers)

    def load_state(self, state: ParameterSet) -> None:
        params, buffers = state.split(len(self.params))
        self.params.check_aligned(params, "load_state params")
        self.buffers.check_aligned(buffers, "load_state buffers")
        self.params = params.astype(self.dtype)
        self.buffers = buffers.astype(self.dtype)

    def architecture_hash(self) -> bytes:
        return architecture_hash(self.specs, self.input_shape, self.num_classes)

    def _layer_tensors(self, tensors: Dict[str, np.ndarray], layer: Layer,
                       roles: Sequence[str]) -> Dict[str, np.ndarray]:
        return {role: tensors[self.param_name(layer, role)] for role in roles}


def build_model(specs: Sequence[LayerSpec], seed: int, input_shape: Tuple[int, ...] = INPUT_SHAPE,
                num_classes: int = NUM_CLASSES, dtype=np.float32) -> Model:
    """Build a model with He-uniform weights, zero biases and unit batchnorm scale.

    Initial values are drawn in float64 and then cast, so a 32-bit and a
    64-bit model built from the same seed agree up to rounding.
    """
    layers = _build_layers(specs, input_shape, num_classes)
    rng = np.random.default_rng(seed)
    params, buffers = [], []
    for layer in layers:
        for role, value in layer.init_params(rng):
            params.append((Model.param_name(layer, role), value.astype(dtype)))
        for role, value in layer.init_buffers():
            buffers.append((Model.param_name(layer, role), value.astype(dtype)))
    model = Model(specs, layers, ParameterSet(params), ParameterSet(buffers),
                  input_shape, num_classes, dtype, seed)
    logger.debug("built model with %d parameters across %d layers", model.params.num_elements(), len(layers))
    return model


def _check_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != len(model.input_shape) + 1 or tuple(batch.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match input shape {model.input_shape}")
    return batch.astype(model.dtype, copy=False)


def _check_finite(value: np.ndarray, layer: Layer, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {what}", layer=layer.index, kind=layer.kind)


def _run_layers(model: Model, x: np.ndarray, layers: Sequence[Layer], training: bool,
                rng: Optional[np.random.Generator]):
    params = model.params.as_dict()
    buffers = model.buffers.as_dict()
    caches = []
    for layer in layers:
        x, cache = layer.forward(
            x,
            model._layer_tensors(params, layer, layer.param_roles),
            model._layer_tensors(buffers, layer, layer.buffer_roles),
            training,
            rng,
        )
        _check_finite(x, layer, "activation")
        caches.append(cache)
    return x, caches


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Class probabilities for a (B, H, W, C) batch. Does not touch running statistics."""
    if not model.layers:
        raise ConfigError("model has no layers")
    x = _check_batch(model, batch)
    probs, _ = _run_layers(model, x, model.layers, model.training, model.rng)
    return probs


def loss_and_grad(model: Model, batch: np.ndarray, labels: Sequence[int],
                  rng: Optional[np.random.Generator] = None,
                  update_stats: bool = True) -> Tuple[float, ParameterSet]:
    """Mean categorical cross-entropy over the batch and its gradient w.r.t. model.params.

    In train mode the batchnorm running statistics are updated unless
    `update_stats` is False. Dropout masks come from `rng` (or the model's stream).
    """
    if not model.layers:
        raise ConfigError("model has no layers")
    x = _check_batch(model, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise UsageError("loss_and_grad needs a nonempty batch")
    if labels.shape != (x.shape[0],):
        raise UsageError(f"expected {x.shape[0]} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise UsageError(f"labels must be in [0, {model.num_classes - 1}]")

    rng = rng if rng is not None else model.rng
    body = model.layers[:-1]  # terminal softmax is fused with the loss
    logits, caches = _run_layers(model, x, body, model.training, rng)
    probs = softmax(logits)
    count = x.shape[0]
    picked = np.maximum(probs[np.arange(count), labels], np.finfo(probs.dtype).tiny)
    loss = float(-np.mean(np.log(picked.astype(np.float64))))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", layer=model.layers[-1].index, kind="softmax")

    grad = probs.copy()
    grad[np.arange(count), labels] -= 1
    grad /= count

    params = model.params.as_dict()
    collected: Dict[str, np.ndarray] = {}
    for layer, cache in zip(reversed(body), reversed(caches)):
        grad, layer_grads = layer.backward(grad, model._layer_tensors(params, layer, layer.param_roles), cache)
        for role, value in layer_grads.items():
            _check_finite(value, layer, f"gradient for {role}")
            collected[Model.param_name(layer, role)] = value.astype(model.dtype, copy=False)

    if model.training and update_stats:
        buffers = model.buffers.as_dict()
        for layer, cache in zip(body, caches):
            if layer.buffer_roles:
                updated = layer.updated_buffers(model._layer_tensors(buffers, layer, layer.buffer_roles), cache)
                for role, value in updated.items():
                    buffers[Model.param_name(layer, role)] = value
        model.buffers = ParameterSet([(name, buffers[name]) for name in model.buffers.names])

    grads = ParameterSet([(name, collected[name]) for name in model.params.names])
    return loss, grads


def sgd_step(params: ParameterSet, grads: ParameterSet, lr: float) -> ParameterSet:
    """Plain SGD: params - lr * grads, element-wise, dtype preserved."""
    if not lr > 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    params.check_aligned(grads, "sgd_step")
    return ParameterSet([
        (name, (p - p.dtype.type(lr) * g.astype(p.dtype, copy=False)).astype(p.dtype, copy=False))
        for (name, p), (_, g) in zip(params, grads)
    ])


def model_size_bytes(model: Model) -> int:
    """Exact byte length of the model's serialized checkpoint."""
    from fedretina.checkpoint import encode_checkpoint

    return len(encode_checkpoint(model, 0))
