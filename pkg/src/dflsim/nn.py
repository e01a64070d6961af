"""Minimal dense network with manual backpropagation and momentum SGD.

Models are plain dataclasses holding float64 numpy arrays. Every operation
here is a pure function: inputs are never mutated, updated models and
optimizer states are returned as new values. A model carries a split index
separating the feature extractor (the first ``split_index`` layers) from
the classifier (the rest), and the two blocks can be taken apart and
recombined without losing a bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ACTIVATIONS = ("relu", "identity")


@dataclass(eq=False)
class DenseLayer:
    """One fully connected layer: y = act(x @ weights.T + bias)."""

    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-d and bias 1-d")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match "
                f"weight rows {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass(eq=False)
class LayeredModel:
    """Ordered dense layers with a feature-extractor/classifier boundary.

    Layers ``[0, split_index)`` form the feature extractor, the remainder
    the classifier.
    """

    layers: list[DenseLayer]
    split_index: int

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ValueError("model needs at least two layers")
        if not 1 <= self.split_index < len(self.layers):
            raise ValueError(
                f"split_index {self.split_index} outside [1, {len(self.layers) - 1}]"
            )
        for k in range(len(self.layers) - 1):
            if self.layers[k].out_dim != self.layers[k + 1].in_dim:
                raise ValueError(
                    f"layer {k} out_dim {self.layers[k].out_dim} does not chain "
                    f"into layer {k + 1} in_dim {self.layers[k + 1].in_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def feature_dim(self) -> int:
        """Width of the feature-extractor output."""
        return self.layers[self.split_index - 1].out_dim

    def copy(self) -> "LayeredModel":
        return LayeredModel([l.copy() for l in self.layers], self.split_index)


def param_count(layers: list[DenseLayer]) -> int:
    """Number of scalar parameters in a block of layers."""
    return sum(l.weights.size + l.bias.size for l in layers)


def g_param_count(model: LayeredModel) -> int:
    return param_count(model.layers[: model.split_index])


def h_param_count(model: LayeredModel) -> int:
    return param_count(model.layers[model.split_index :])


def model_equal(a: LayeredModel, b: LayeredModel) -> bool:
    """Bit-exact equality of two models."""
    if a.split_index != b.split_index or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.activation != lb.activation:
            return False
        if not (np.array_equal(la.weights, lb.weights) and np.array_equal(la.bias, lb.bias)):
            return False
    return True


def init_model(layer_dims: list[int], split_index: int, seed) -> LayeredModel:
    """Build a model with seeded symmetric-uniform init.

    ``layer_dims`` lists the widths including input, e.g. [16, 64, 32, 4].
    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    Hidden layers use relu, the final layer is identity (logits).
    """
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(layer_dims) - 1):
        fan_in, fan_out = layer_dims[k], layer_dims[k + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = "identity" if k == len(layer_dims) - 2 else "relu"
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return LayeredModel(layers, split_index)


def default_model(input_dim: int, num_classes: int, seed) -> LayeredModel:
    """Standard desk-scale architecture: two relu feature layers, linear head."""
    return init_model([input_dim, 64, 32, num_classes], split_index=2, seed=seed)


def _apply_activation(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _run_layers(layers: list[DenseLayer], inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("inputs must be a 2-d batch (n, dim)")
    if layers and x.shape[1] != layers[0].in_dim:
        raise ValueError(
            f"input width {x.shape[1]} does not match layer in_dim {layers[0].in_dim}"
        )
    for layer in layers:
        x = _apply_activation(x @ layer.weights.T + layer.bias, layer.activation)
    return x


def forward(model: LayeredModel, inputs: np.ndarray) -> np.ndarray:
    """Run the full network on a batch, returning logits (n, output_dim)."""
    return _run_layers(model.layers, inputs)


def feature_forward(model: LayeredModel, inputs: np.ndarray) -> np.ndarray:
    """Run only the feature extractor, returning (n, feature_dim)."""
    return _run_layers(model.layers[: model.split_index], inputs)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("softmax input must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2:
        raise ValueError("probs must be a 2-d batch")
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise IndexError(f"label out of range for {p.shape[1]} classes")
    return float(-np.mean(np.log(p[np.arange(len(y)), y])))


@dataclass
class GradientBundle:
    """Per-layer parameter gradients plus the objective value they came from."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    loss: float


def backward(
    model: LayeredModel,
    inputs: np.ndarray,
    labels: np.ndarray,
    unit_tensor: np.ndarray | None = None,
    aux_target: np.ndarray | None = None,
    mu: float = 0.0,
) -> GradientBundle:
    """Gradients of cross-entropy plus an optional feature-anchor penalty.

    The objective is CE(softmax(f(inputs)), labels) when ``aux_target`` is
    absent or ``mu`` is zero. Otherwise the penalty
    mu * ||g(unit_tensor) - aux_target||^2 is added, with its gradient
    flowing through the feature extractor's own forward pass on the unit
    tensor. ``aux_target`` is treated as a constant.
    """
    if mu < 0:
        raise ValueError("mu must be >= 0")
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels)

    # Forward pass, keeping pre- and post-activation values per layer.
    acts = [x]
    zs = []
    a = x
    for layer in model.layers:
        if a.shape[1] != layer.in_dim:
            raise ValueError("input width does not match model")
        z = a @ layer.weights.T + layer.bias
        zs.append(z)
        a = _apply_activation(z, layer.activation)
        acts.append(a)
    probs = softmax(acts[-1])
    loss = cross_entropy(probs, y)

    n = x.shape[0]
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    delta = (probs - onehot) / n  # dJ/d a_last, identity head

    weight_grads = [np.zeros_like(l.weights) for l in model.layers]
    bias_grads = [np.zeros_like(l.bias) for l in model.layers]
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.activation == "relu":
            delta = delta * (zs[k] > 0)
        weight_grads[k] += delta.T @ acts[k]
        bias_grads[k] += delta.sum(axis=0)
        if k > 0:
            delta = delta @ layer.weights

    if aux_target is not None and mu > 0.0:
        u = np.asarray(unit_tensor, dtype=np.float64).reshape(1, -1)
        t = np.asarray(aux_target, dtype=np.float64)
        g_layers = model.layers[: model.split_index]
        u_acts = [u]
        u_zs = []
        a = u
        for layer in g_layers:
            z = a @ layer.weights.T + layer.bias
            u_zs.append(z)
            a = _apply_activation(z, layer.activation)
            u_acts.append(a)
        phi = u_acts[-1][0]
        if phi.shape != t.shape:
            raise ValueError(
                f"aux target length {t.shape} does not match feature dim {phi.shape}"
            )
        diff = phi - t
        loss += mu * float(diff @ diff)
        delta = (2.0 * mu * diff).reshape(1, -1)
        for k in range(len(g_layers) - 1, -1, -1):
            layer = g_layers[k]
            if layer.activation == "relu":
                delta = delta * (u_zs[k] > 0)
            weight_grads[k] += delta.T @ u_acts[k]
            bias_grads[k] += delta.sum(axis=0)
            if k > 0:
                delta = delta @ layer.weights

    return GradientBundle(weight_grads, bias_grads, loss)


@dataclass(eq=False)
class OptimizerState:
    """Momentum SGD state. ``decay`` is the per-round learning-rate factor."""

    learning_rate: float = 0.05
    momentum: float = 0.5
    decay: float = 0.95
    weight_buffers: list[np.ndarray] = field(default_factory=list)
    bias_buffers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.learning_rate,
            self.momentum,
            self.decay,
            [b.copy() for b in self.weight_buffers],
            [b.copy() for b in self.bias_buffers],
        )


def init_optimizer(
    model: LayeredModel,
    learning_rate: float = 0.05,
    momentum: float = 0.5,
    decay: float = 0.95,
) -> OptimizerState:
    """Fresh optimizer with zero momentum buffers shaped like the model."""
    return OptimizerState(
        learning_rate,
        momentum,
        decay,
        [np.zeros_like(l.weights) for l in model.layers],
        [np.zeros_like(l.bias) for l in model.layers],
    )


def sgd_step(
    model: LayeredModel, grads: GradientBundle, opt: OptimizerState
) -> tuple[LayeredModel, OptimizerState]:
    """One momentum step: buf <- m*buf + grad, param <- param - lr*buf."""
    if len(grads.weight_grads) != len(model.layers):
        raise ValueError("gradient bundle does not match model layout")
    new_layers = []
    new_wbuf = []
    new_bbuf = []
    for k, layer in enumerate(model.layers):
        if grads.weight_grads[k].shape != layer.weights.shape:
            raise ValueError(f"gradient shape mismatch at layer {k}")
        wb = opt.momentum * opt.weight_buffers[k] + grads.weight_grads[k]
        bb = opt.momentum * opt.bias_buffers[k] + grads.bias_grads[k]
        new_layers.append(
            DenseLayer(
                layer.weights - opt.learning_rate * wb,
                layer.bias - opt.learning_rate * bb,
                layer.activation,
            )
        )
        new_wbuf.append(wb)
        new_bbuf.append(bb)
    new_opt = replace(opt, weight_buffers=new_wbuf, bias_buffers=new_bbuf)
    return LayeredModel(new_layers, model.split_index), new_opt


def split(model: LayeredModel) -> tuple[list[DenseLayer], list[DenseLayer]]:
    """Copy out the (feature extractor, classifier) layer blocks."""
    g = [l.copy() for l in model.layers[: model.split_index]]
    h = [l.copy() for l in model.layers[model.split_index :]]
    return g, h


def combine(g_layers: list[DenseLayer], h_layers: list[DenseLayer]) -> LayeredModel:
    """Recombine feature-extractor and classifier blocks into one model."""
    if not g_layers or not h_layers:
        raise ValueError("both blocks must be non-empty")
    if g_layers[-1].out_dim != h_layers[0].in_dim:
        raise ValueError(
            f"boundary mismatch: extractor out {g_layers[-1].out_dim}, "
            f"classifier in {h_layers[0].in_dim}"
        )
    layers = [l.copy() for l in g_layers] + [l.copy() for l in h_layers]
    return LayeredModel(layers, split_index=len(g_layers))
