"""Simulated client model: identity conv stack, optional normalization,
attack linear layer with ReLU and a linear classifier head.

Gradients are computed analytically for one FedSGD step, i.e. averaged
over the batch, with softmax cross-entropy on the head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import RngStream, as_matrix

__all__ = [
    "BatchNormState",
    "ConvIdentitySpec",
    "ForwardTrace",
    "GradientReport",
    "LayerNormConfig",
    "LinearLayer",
    "MaliciousModel",
    "batchnorm_forward",
    "compute_gradients",
    "conv2d",
    "cross_entropy_loss",
    "forward",
    "identity_conv_weights",
    "layernorm_forward",
]


@dataclass
class LinearLayer:
    """Attack layer with ``weights`` of shape (N, M) and ``bias`` of length N."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2:
            raise ValueError("weights must be 2-D")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weights.shape[0]}"
            )

    @classmethod
    def zeros(cls, n_out: int, n_in: int) -> LinearLayer:
        return cls(np.zeros((n_out, n_in)), np.zeros(n_out))

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> LinearLayer:
        return LinearLayer(self.weights.copy(), self.bias.copy())


@dataclass(frozen=True)
class ConvIdentitySpec:
    channels: int = 3
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    extra_random_filters: int = 0


def identity_conv_weights(spec: ConvIdentitySpec, rng: RngStream | None = None) -> np.ndarray:
    """Filters of shape (out, in, k, k) whose first ``channels`` outputs copy the input.

    Filter ``i`` is zero except a one at the kernel centre of channel ``i``.
    Extra filters, if requested, are random and appended after the identity ones.
    """
    if spec.kernel % 2 != 1 or spec.padding != spec.kernel // 2 or spec.stride != 1:
        raise ValueError("identity needs an odd kernel, same padding and stride 1")
    c, k = spec.channels, spec.kernel
    w = np.zeros((c + spec.extra_random_filters, c, k, k))
    for i in range(c):
        w[i, i, k // 2, k // 2] = 1.0
    if spec.extra_random_filters:
        if rng is None:
            raise ValueError("extra_random_filters needs an rng")
        w[c:] = rng.normal((spec.extra_random_filters, c, k, k))
    return w


def conv2d(images: np.ndarray, weights: np.ndarray, padding: int = 1) -> np.ndarray:
    """Stride-1 2-D convolution (cross-correlation) of (B, C, H, W) images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != weights.shape[1]:
        raise ValueError(f"images {images.shape} incompatible with filters {weights.shape}")
    b, _, h, w = images.shape
    k = weights.shape[-1]
    padded = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h, out_w = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    out = np.zeros((b, weights.shape[0], out_h, out_w))
    for di in range(k):
        for dj in range(k):
            patch = padded[:, :, di:di + out_h, dj:dj + out_w]
            out += np.einsum("oc,bchw->bohw", weights[:, :, di, dj], patch)
    return out


@dataclass
class BatchNormState:
    """Per-feature batch normalization parameters and running statistics.

    ``running_var`` is updated with the unbiased batch variance while the
    forward normalization uses the biased one, as common frameworks do.
    ``last_batch_size`` records the batch size of the latest update so the
    server side can undo the Bessel correction.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = 0
    last_batch_size: int | None = None

    @classmethod
    def fresh(cls, width: int, momentum: float = 0.1, eps: float = 1e-5) -> BatchNormState:
        return cls(
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            gamma=np.ones(width),
            beta=np.zeros(width),
            momentum=momentum,
            eps=eps,
        )

    def copy(self) -> BatchNormState:
        return replace(
            self,
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
        )


@dataclass(frozen=True)
class LayerNormConfig:
    normalized_shape: int
    eps: float = 1e-5


def batchnorm_forward(state: BatchNormState, batch) -> tuple[np.ndarray, BatchNormState]:
    """Training-mode batch normalization; returns the output and the updated state."""
    x = as_matrix(batch, "batch")
    b, m = x.shape
    if b < 2:
        raise ValueError("batch normalization needs at least 2 samples per batch")
    if m != state.running_mean.shape[0]:
        raise ValueError(f"batch width {m} != normalized width {state.running_mean.shape[0]}")
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    y = (x - mean) / np.sqrt(var + state.eps) * state.gamma + state.beta
    mom = state.momentum
    new = state.copy()
    new.running_mean = (1.0 - mom) * state.running_mean + mom * mean
    new.running_var = (1.0 - mom) * state.running_var + mom * var * (b / (b - 1))
    new.num_batches_tracked = state.num_batches_tracked + 1
    new.last_batch_size = b
    return y, new


def layernorm_forward(config: LayerNormConfig, batch) -> np.ndarray:
    """Standardize every row over its own features."""
    x = as_matrix(batch, "batch")
    if x.shape[1] != config.normalized_shape:
        raise ValueError(f"batch width {x.shape[1]} != normalized_shape {config.normalized_shape}")
    if config.normalized_shape < 2:
        raise ValueError("layer normalization needs at least 2 features")
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + config.eps)


@dataclass
class ForwardTrace:
    layer_input: np.ndarray
    pre_activations: np.ndarray
    post_relu: np.ndarray
    activation_mask: np.ndarray
    head_logits: np.ndarray
    norm_state: BatchNormState | None = None


@dataclass
class GradientReport:
    grad_w: np.ndarray
    grad_b: np.ndarray
    activation_counts: np.ndarray
    head_grad_w: np.ndarray | None = None
    head_grad_b: np.ndarray | None = None
    loss: float = float("nan")

    def copy(self) -> GradientReport:
        return replace(
            self,
            grad_w=self.grad_w.copy(),
            grad_b=self.grad_b.copy(),
            activation_counts=self.activation_counts.copy(),
        )


@dataclass
class MaliciousModel:
    """Identity conv stack -> [norm] -> attack layer + ReLU -> linear head.

    By default the conv stack is treated as the exact identity map it is
    initialized to. ``image_shape`` with ``literal_conv=True`` runs the
    actual 3x3 convolution instead.
    """

    layer: LinearLayer
    head_weights: np.ndarray
    head_bias: np.ndarray
    norm: BatchNormState | LayerNormConfig | None = None
    conv: ConvIdentitySpec = field(default_factory=ConvIdentitySpec)
    image_shape: tuple[int, int, int] | None = None
    literal_conv: bool = False
    conv_weights: np.ndarray | None = None

    @classmethod
    def build(
        cls,
        layer: LinearLayer,
        rng: RngStream,
        num_classes: int = 10,
        head_std: float = 0.01,
        norm: str | None = None,
        **kwargs,
    ) -> MaliciousModel:
        """Wrap ``layer`` with a random head and an optional ``"batch_norm"``/``"layer_norm"``."""
        head_w = rng.normal((num_classes, layer.n_out), scale=head_std)
        norm_obj: BatchNormState | LayerNormConfig | None
        if norm in (None, "data_norm", "none"):
            norm_obj = None
        elif norm == "batch_norm":
            norm_obj = BatchNormState.fresh(layer.n_in)
        elif norm == "layer_norm":
            norm_obj = LayerNormConfig(layer.n_in)
        else:
            raise ValueError(f"unknown normalization {norm!r}")
        model = cls(layer, head_w, np.zeros(num_classes), norm=norm_obj, **kwargs)
        if model.literal_conv and model.conv_weights is None:
            model.conv_weights = identity_conv_weights(model.conv, rng)
        return model

    @property
    def input_width(self) -> int:
        return self.layer.n_in

    @property
    def num_classes(self) -> int:
        return self.head_weights.shape[0]

    def with_layer(self, layer: LinearLayer) -> MaliciousModel:
        return replace(self, layer=layer)


def _conv_stage(model: MaliciousModel, x: np.ndarray) -> np.ndarray:
    if not model.literal_conv:
        return x
    if model.image_shape is None:
        raise ValueError("literal_conv needs image_shape")
    c, h, w = model.image_shape
    weights = model.conv_weights
    if weights is None:
        weights = identity_conv_weights(model.conv)
    out = conv2d(x.reshape(-1, c, h, w), weights, padding=model.conv.padding)
    # only the identity channels feed the attack layer
    return out[:, :c].reshape(x.shape[0], -1)


def forward(model: MaliciousModel, batch) -> ForwardTrace:
    x = as_matrix(batch, "batch")
    if x.shape[1] != model.input_width:
        raise ValueError(f"batch width {x.shape[1]} != model input width {model.input_width}")
    x = _conv_stage(model, x)
    state = None
    if isinstance(model.norm, BatchNormState):
        x, state = batchnorm_forward(model.norm, x)
    elif isinstance(model.norm, LayerNormConfig):
        x = layernorm_forward(model.norm, x)
    pre = x @ model.layer.weights.T + model.layer.bias
    mask = pre > 0
    post = np.where(mask, pre, 0.0)
    logits = post @ model.head_weights.T + model.head_bias
    return ForwardTrace(x, pre, post, mask, logits, state)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, batch_size: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch_size:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {batch_size}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label out of range")
    return labels


def cross_entropy_loss(model: MaliciousModel, batch, labels) -> float:
    """Mean softmax cross-entropy of the head output."""
    trace = forward(model, batch)
    labels = _check_labels(labels, trace.head_logits.shape[0], model.num_classes)
    z = trace.head_logits - trace.head_logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(labels.shape[0]), labels].mean())


def compute_gradients(
    model: MaliciousModel, batch, labels, trace: ForwardTrace | None = None
) -> GradientReport:
    """Batch-averaged gradients of the attack layer and the head.

    Raises ``ValueError`` if the head weights are all zero, since every
    pre-activation gradient would vanish and nothing could be extracted.
    """
    if not np.any(model.head_weights):
        raise ValueError("all-zero head weights null every pre-activation gradient")
    if trace is None:
        trace = forward(model, batch)
    b = trace.layer_input.shape[0]
    labels = _check_labels(labels, b, model.num_classes)

    probs = _softmax(trace.head_logits)
    logp = np.log(np.maximum(probs[np.arange(b), labels], np.finfo(float).tiny))
    d_logits = probs
    d_logits[np.arange(b), labels] -= 1.0
    d_logits /= b

    head_gw = d_logits.T @ trace.post_relu
    head_gb = d_logits.sum(axis=0)
    delta = (d_logits @ model.head_weights) * trace.activation_mask
    grad_w = delta.T @ trace.layer_input
    grad_b = delta.sum(axis=0)
    counts = trace.activation_mask.sum(axis=0).astype(np.int64)
    return GradientReport(
        grad_w=grad_w,
        grad_b=grad_b,
        activation_counts=counts,
        head_grad_w=head_gw,
        head_grad_b=head_gb,
        loss=float(-logp.mean()),
    )
