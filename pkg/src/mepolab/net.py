"""Small MLP with manual forward/backward passes.

The model is a stack of affine+activation backbone layers producing a
feature vector, plus a linear head over the class logits. An optional
additive adapter perturbs the final backbone layer's weight and bias; during
streaming training only the adapter and head receive gradients while the
backbone stays frozen.

Weights use the ``(in_dim, out_dim)`` convention with row-vector inputs
(``z = x @ W + b``). All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .errors import (
    ArtifactIoError,
    DimensionMismatchError,
    EmptyMaskError,
    EtaOutOfRangeError,
    StaleCacheError,
    TargetNotInMaskError,
)
from .linalg import read_matrix, write_matrix

ACTIVATIONS = ("tanh", "identity")


@dataclass
class Layer:
    """A weight/bias pair; also reused as a gradient container."""

    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy())

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpModel:
    layers: list[Layer]
    head: Layer
    adapter: Layer | None = None
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.out_dim != cur.in_dim:
                raise DimensionMismatchError(
                    f"layer chain breaks: {prev.out_dim} -> {cur.in_dim}"
                )
        if self.head.in_dim != self.layers[-1].out_dim:
            raise DimensionMismatchError(
                f"head in-dim {self.head.in_dim} != feature dim {self.layers[-1].out_dim}"
            )
        if self.adapter is not None:
            last = self.layers[-1]
            if self.adapter.weight.shape != last.weight.shape or (
                self.adapter.bias.shape != last.bias.shape
            ):
                raise DimensionMismatchError("adapter shapes do not match final layer")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def class_count(self) -> int:
        return self.head.out_dim

    def copy(self) -> "MlpModel":
        return MlpModel(
            layers=[layer.copy() for layer in self.layers],
            head=self.head.copy(),
            adapter=self.adapter.copy() if self.adapter is not None else None,
            activation=self.activation,
        )


@dataclass
class ForwardCache:
    activations: list[np.ndarray]  # a_0 = input, ..., a_L = feature (all 2-D)
    used_adapter: bool


@dataclass
class Gradients:
    head: Layer
    backbone: list[Layer]
    adapter: Layer | None = None


def _uniform_layer(rng: np.random.Generator, in_dim: int, out_dim: int) -> Layer:
    bound = 1.0 / np.sqrt(in_dim)
    return Layer(
        weight=rng.uniform(-bound, bound, size=(in_dim, out_dim)),
        bias=rng.uniform(-bound, bound, size=out_dim),
    )


def init_model(
    dims: Sequence[int],
    class_count: int,
    seed: int,
    activation: str = "tanh",
    with_adapter: bool = False,
) -> MlpModel:
    """Build a model with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init.

    ``dims`` lists the backbone sizes ``(input, hidden..., feature)``; the
    head maps the feature dimension onto ``class_count`` logits. The adapter,
    when requested, starts at exactly zero so the adapted model initially
    equals the frozen one.
    """
    if len(dims) < 2:
        raise ValueError("dims needs at least (input, feature)")
    rng = np.random.default_rng(seed)
    layers = [_uniform_layer(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    head = _uniform_layer(rng, dims[-1], class_count)
    model = MlpModel(layers=layers, head=head, activation=activation)
    if with_adapter:
        model = add_adapter(model)
    return model


def fresh_head(feature_dim: int, class_count: int, seed: int) -> Layer:
    return _uniform_layer(np.random.default_rng(seed), feature_dim, class_count)


def add_adapter(model: MlpModel) -> MlpModel:
    """Return a copy with a zero-initialized adapter on the final layer."""
    out = model.copy()
    last = out.layers[-1]
    out.adapter = Layer(np.zeros_like(last.weight), np.zeros_like(last.bias))
    return out


def _activate(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(tag: str, a: np.ndarray) -> np.ndarray:
    # Derivative expressed through the activation output.
    if tag == "tanh":
        return 1.0 - a * a
    return np.ones_like(a)


def forward(
    model: MlpModel, x, use_adapter: bool = False
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run the model on a sample or a batch of row vectors.

    Returns ``(feature, logits, cache)``; outputs are 1-D for a 1-D input.
    The cache holds every layer activation and suffices for an exact
    backward pass.
    """
    xa = np.asarray(x, dtype=np.float64)
    single = xa.ndim == 1
    xa = np.atleast_2d(xa)
    if xa.shape[1] != model.input_dim:
        raise DimensionMismatchError(
            f"input dim {xa.shape[1]} != model input dim {model.input_dim}"
        )
    if use_adapter and model.adapter is None:
        raise ValueError("use_adapter=True but model has no adapter")
    acts = [xa]
    a = xa
    last = len(model.layers) - 1
    for idx, layer in enumerate(model.layers):
        w, b = layer.weight, layer.bias
        if use_adapter and idx == last:
            w = w + model.adapter.weight
            b = b + model.adapter.bias
        a = _activate(model.activation, a @ w + b)
        acts.append(a)
    feature = a
    logits = feature @ model.head.weight + model.head.bias
    cache = ForwardCache(activations=acts, used_adapter=use_adapter)
    if single:
        return feature[0], logits[0], cache
    return feature, logits, cache


def _check_cache(model: MlpModel, cache: ForwardCache, use_adapter: bool) -> None:
    if use_adapter != cache.used_adapter:
        raise StaleCacheError("cache was built with a different adapter flag")
    if len(cache.activations) != len(model.layers) + 1:
        raise StaleCacheError("cache depth does not match model")
    if cache.activations[0].shape[1] != model.input_dim:
        raise StaleCacheError("cached input dim does not match model")
    for idx, layer in enumerate(model.layers):
        if cache.activations[idx + 1].shape[1] != layer.out_dim:
            raise StaleCacheError(f"cached activation {idx} does not match model")


def backbone_backward(
    model: MlpModel, cache: ForwardCache, grad_feature, use_adapter: bool = False
) -> tuple[list[Layer], Layer | None]:
    """Backpropagate a feature gradient through the backbone.

    Returns per-layer gradients plus the adapter gradient. When
    ``use_adapter`` is set the backbone block is all zeros (frozen) and only
    the adapter, which enters the final layer additively, carries gradient.
    """
    _check_cache(model, cache, use_adapter)
    g = np.atleast_2d(np.asarray(grad_feature, dtype=np.float64))
    if g.shape != cache.activations[-1].shape:
        raise StaleCacheError("feature gradient shape does not match cache")
    n_layers = len(model.layers)
    grads: list[Layer] = [
        Layer(np.zeros_like(layer.weight), np.zeros_like(layer.bias))
        for layer in model.layers
    ]
    adapter_grad: Layer | None = None
    for idx in range(n_layers - 1, -1, -1):
        layer = model.layers[idx]
        a_out = cache.activations[idx + 1]
        a_in = cache.activations[idx]
        gz = g * _activation_grad(model.activation, a_out)
        dw = a_in.T @ gz
        db = gz.sum(axis=0)
        if use_adapter:
            # Frozen backbone: only the (additive) adapter on the last layer
            # receives gradient; nothing below it is needed.
            adapter_grad = Layer(dw, db)
            break
        grads[idx] = Layer(dw, db)
        if idx > 0:
            g = gz @ layer.weight.T
    return grads, adapter_grad


def backward(
    model: MlpModel, cache: ForwardCache, grad_logits, use_adapter: bool = False
) -> Gradients:
    """Full backward pass from a logit gradient."""
    _check_cache(model, cache, use_adapter)
    gl = np.atleast_2d(np.asarray(grad_logits, dtype=np.float64))
    feature = cache.activations[-1]
    if gl.shape != (feature.shape[0], model.class_count):
        raise StaleCacheError("logit gradient shape does not match cache/model")
    head_grad = Layer(feature.T @ gl, gl.sum(axis=0))
    g_feature = gl @ model.head.weight.T
    backbone, adapter_grad = backbone_backward(model, cache, g_feature, use_adapter)
    return Gradients(head=head_grad, backbone=backbone, adapter=adapter_grad)


def _mask_array(mask, class_count: int) -> np.ndarray:
    m = np.unique(np.asarray(list(mask) if isinstance(mask, (set, frozenset)) else mask))
    if m.size == 0:
        raise EmptyMaskError("mask must contain at least one class")
    if m.dtype.kind not in "iu":
        raise ValueError("mask must contain integer class ids")
    if m.min() < 0 or m.max() >= class_count:
        raise DimensionMismatchError(
            f"mask ids must lie in [0, {class_count}), got [{m.min()}, {m.max()}]"
        )
    return m


def masked_ce_loss(logits, target: int, mask) -> tuple[float, np.ndarray]:
    """Cross-entropy with softmax restricted to the masked classes.

    Uses a max-shift for stability. The gradient is exactly zero outside the
    mask.
    """
    lg = np.asarray(logits, dtype=np.float64)
    if lg.ndim != 1:
        raise DimensionMismatchError("logits must be 1-D; use masked_ce_batch for batches")
    m = _mask_array(mask, lg.shape[0])
    if target not in m:
        raise TargetNotInMaskError(f"target {target} not in mask")
    sub = lg[m]
    shift = sub.max()
    exps = np.exp(sub - shift)
    total = exps.sum()
    loss = float(shift + np.log(total) - lg[target])
    grad = np.zeros_like(lg)
    grad[m] = exps / total
    grad[target] -= 1.0
    return loss, grad


def masked_ce_batch(logits, targets, mask) -> tuple[float, np.ndarray]:
    """Mean masked cross-entropy over a batch; gradient of the mean."""
    lg = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    ys = np.asarray(targets)
    n, k = lg.shape
    if ys.shape != (n,):
        raise DimensionMismatchError(f"{n} logit rows but targets shape {ys.shape}")
    m = _mask_array(mask, k)
    if not np.isin(ys, m).all():
        raise TargetNotInMaskError("some targets are outside the mask")
    sub = lg[:, m]
    shift = sub.max(axis=1, keepdims=True)
    exps = np.exp(sub - shift)
    total = exps.sum(axis=1, keepdims=True)
    losses = shift[:, 0] + np.log(total[:, 0]) - lg[np.arange(n), ys]
    grad = np.zeros_like(lg)
    grad[:, m] = exps / total
    grad[np.arange(n), ys] -= 1.0
    return float(losses.mean()), grad / n


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def make_optimizer(kind: str, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    return OptimizerState(kind=kind, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(
    state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]
) -> list[np.ndarray]:
    """One SGD or bias-corrected Adam step; returns new parameter arrays."""
    if len(params) != len(grads):
        raise DimensionMismatchError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionMismatchError(f"param {p.shape} vs grad {g.shape}")
    if state.kind == "sgd":
        return [p - state.lr * g for p, g in zip(params, grads)]
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise DimensionMismatchError("optimizer state tracks a different parameter list")
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / (1.0 - state.beta1**t)
        v_hat = state.v[i] / (1.0 - state.beta2**t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def flatten_backbone(model: MlpModel) -> np.ndarray:
    """Concatenate backbone parameters: per layer, weight row-major then bias."""
    parts = []
    for layer in model.layers:
        parts.append(layer.weight.ravel())
        parts.append(layer.bias.ravel())
    return np.concatenate(parts)


def flatten_backbone_grads(backbone: Sequence[Layer]) -> np.ndarray:
    parts = []
    for g in backbone:
        parts.append(g.weight.ravel())
        parts.append(g.bias.ravel())
    return np.concatenate(parts)


def unflatten_backbone(model: MlpModel, flat: np.ndarray) -> MlpModel:
    """Rebuild a model with backbone parameters taken from ``flat``."""
    flat = np.asarray(flat, dtype=np.float64)
    layers = []
    pos = 0
    for layer in model.layers:
        wn = layer.weight.size
        w = flat[pos : pos + wn].reshape(layer.weight.shape).copy()
        pos += wn
        bn = layer.bias.size
        b = flat[pos : pos + bn].copy()
        pos += bn
        layers.append(Layer(w, b))
    if pos != flat.size:
        raise DimensionMismatchError(f"flat vector length {flat.size}, expected {pos}")
    return MlpModel(
        layers=layers,
        head=model.head.copy(),
        adapter=model.adapter.copy() if model.adapter is not None else None,
        activation=model.activation,
    )


def reptile_blend(theta_old, theta_new, eta_meta: float) -> np.ndarray:
    """Interpolate flat parameter vectors: old + eta * (new - old)."""
    a = np.asarray(theta_old, dtype=np.float64)
    b = np.asarray(theta_new, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shapes {a.shape} vs {b.shape}")
    if not 0.0 <= eta_meta <= 1.0:
        raise EtaOutOfRangeError(f"eta_meta must be in [0, 1], got {eta_meta}")
    if eta_meta == 0.0:
        return a.copy()
    if eta_meta == 1.0:
        return b.copy()
    return a + eta_meta * (b - a)


CHECKPOINT_MAGIC = "mlp-checkpoint 1"


def write_model(fh: IO[str], model: MlpModel) -> None:
    fh.write(CHECKPOINT_MAGIC + "\n")
    dims = [model.input_dim] + [layer.out_dim for layer in model.layers]
    fh.write("backbone " + " ".join(str(d) for d in dims) + "\n")
    fh.write(f"head {model.class_count}\n")
    fh.write(f"activation {model.activation}\n")
    fh.write(f"adapter {1 if model.adapter is not None else 0}\n")
    for layer in model.layers:
        write_matrix(fh, layer.weight)
        write_matrix(fh, layer.bias)
    write_matrix(fh, model.head.weight)
    write_matrix(fh, model.head.bias)
    if model.adapter is not None:
        write_matrix(fh, model.adapter.weight)
        write_matrix(fh, model.adapter.bias)


def read_model(fh: IO[str]) -> MlpModel:
    magic = fh.readline().strip()
    if magic != CHECKPOINT_MAGIC:
        raise ArtifactIoError(f"bad checkpoint magic: {magic!r}")
    try:
        dims = [int(v) for v in fh.readline().split()[1:]]
        class_count = int(fh.readline().split()[1])
        activation = fh.readline().split()[1]
        has_adapter = bool(int(fh.readline().split()[1]))
        layers = []
        for _ in range(len(dims) - 1):
            w = read_matrix(fh)
            b = read_matrix(fh)[0]
            layers.append(Layer(w, b))
        head = Layer(read_matrix(fh), read_matrix(fh)[0])
        adapter = None
        if has_adapter:
            adapter = Layer(read_matrix(fh), read_matrix(fh)[0])
    except (ValueError, IndexError) as exc:
        raise ArtifactIoError(f"malformed checkpoint: {exc}") from exc
    return MlpModel(layers=layers, head=head, adapter=adapter, activation=activation)


def save_model(model: MlpModel, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        write_model(fh, model)


def load_model(path) -> MlpModel:
    with open(path, "r", encoding="ascii") as fh:
        return read_model(fh)
