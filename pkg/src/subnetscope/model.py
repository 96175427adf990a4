"""Reference CNN description, gated forward pass, base training and the SSNM file format."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from ._container import LayoutError, pack_arrays, read_container, unpack_arrays, write_container

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"SSNM"
LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "dense")


class GateLengthError(ValueError):
    """A gate array does not match its layer's channel count."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    gated: bool = False

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    num_classes: int
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if not self.layers or self.layers[-1].kind != "dense" or self.layers[-1].out_channels != self.num_classes:
            raise ValueError("final layer must be a dense layer with num_classes outputs")
        if self.layers[-1].gated:
            raise ValueError("the classifier layer cannot be gated")
        if not self.gated_layers:
            raise ValueError("model needs at least one gated layer")
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            if layer.gated and not layer.has_params:
                raise ValueError(f"layer {layer.name} of kind {layer.kind} cannot be gated")

    @property
    def gated_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.gated]

    @property
    def gate_sizes(self) -> dict[str, int]:
        return {layer.name: layer.out_channels for layer in self.gated_layers}

    @property
    def num_gates(self) -> int:
        return int(np.sum(list(self.gate_sizes.values())))

    @property
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            if layer.kind == "conv":
                shapes[f"{layer.name}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                shapes[f"{layer.name}.bias"] = (layer.out_channels,)
            elif layer.kind == "dense":
                shapes[f"{layer.name}.weight"] = (layer.in_channels, layer.out_channels)
                shapes[f"{layer.name}.bias"] = (layer.out_channels,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(layer) for layer in self.layers],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelSpec:
        return cls(
            layers=tuple(LayerSpec(**layer) for layer in d["layers"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
        )


def build_reference_cnn(input_shape=(1, 32, 32), num_classes: int = 10) -> ModelSpec:
    """Three conv/relu/pool blocks (16, 32, 64 channels), dense(128), dense(K).

    The three convs and the hidden dense layer carry gates (240 channels).
    """
    if num_classes < 2:
        raise ValueError(f"need at least two classes, got {num_classes}")
    c, h, w = input_shape
    if h % 8 or w % 8:
        raise ValueError(f"spatial size must be divisible by 8, got {h}x{w}")
    layers = []
    in_ch = c
    for i, out_ch in enumerate((16, 32, 64)):
        layers += [
            LayerSpec("conv", f"conv{i}", in_ch, out_ch, kernel=3, stride=1, padding=1, gated=True),
            LayerSpec("relu", f"relu{i}"),
            LayerSpec("maxpool", f"pool{i}"),
        ]
        in_ch = out_ch
    flat = 64 * (h // 8) * (w // 8)
    layers += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "dense0", flat, 128, gated=True),
        LayerSpec("relu", "relu3"),
        LayerSpec("dense", "dense1", 128, num_classes),
    ]
    return ModelSpec(tuple(layers), num_classes, (c, h, w))


def init_weights(spec: ModelSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in spec.param_shapes.items():
        if name.endswith(".bias"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            weights[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return weights


# ------------------------------------------------------------------ gates


class GateVector:
    """Per-gated-layer nonnegative channel gates, in layer order."""

    def __init__(self, layers: Mapping[str, np.ndarray]):
        self.layers = {name: np.asarray(v, dtype=np.float64) for name, v in layers.items()}

    @classmethod
    def ones(cls, spec: ModelSpec) -> GateVector:
        return cls({name: np.ones(n) for name, n in spec.gate_sizes.items()})

    @classmethod
    def from_flat(cls, spec: ModelSpec, flat) -> GateVector:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.num_gates,):
            raise GateLengthError(f"expected {spec.num_gates} gates, got shape {flat.shape}")
        out, i = {}, 0
        for name, n in spec.gate_sizes.items():
            out[name] = flat[i:i + n].copy()
            i += n
        return cls(out)

    def flat(self) -> np.ndarray:
        return np.concatenate(list(self.layers.values()))

    def __len__(self) -> int:
        return int(np.sum([v.size for v in self.layers.values()]))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, GateVector)
            and self.layers.keys() == other.layers.keys()
            and all(np.array_equal(v, other.layers[k]) for k, v in self.layers.items())
        )

    def to_dict(self) -> dict[str, list[float]]:
        return {name: [float(x) for x in v] for name, v in self.layers.items()}


def _gate_for(layer: LayerSpec, gates) -> T.Tensor | np.ndarray | None:
    if gates is None:
        return None
    table = gates.layers if isinstance(gates, GateVector) else gates
    if layer.name not in table:
        raise GateLengthError(f"no gates supplied for gated layer {layer.name}")
    g = table[layer.name]
    size = g.shape[0] if g.ndim == 1 else -1
    if size != layer.out_channels:
        raise GateLengthError(
            f"layer {layer.name}: expected {layer.out_channels} gates, got shape {tuple(g.shape)}"
        )
    return g


def forward(spec: ModelSpec, weights: Mapping, x, gates=None, taps: bool = False):
    """Logits for a batch ``x`` of shape N×C×H×W.

    ``gates`` is a :class:`GateVector` or a mapping from gated layer name to a
    1-D array/Tensor.  Each gated layer's output channels are multiplied by
    their gates after the rectifier that follows the layer.  With ``taps``
    the per-layer outputs (post-gate for gated layers) are returned too.
    """
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise T.ShapeError(f"forward: input shape {x.shape} does not match model input N×{spec.input_shape}")
    recorded = {}
    pending = None
    h = x
    layers = spec.layers
    for i, layer in enumerate(layers):
        if layer.kind == "conv":
            h = T.bias_add(
                T.conv2d(h, weights[f"{layer.name}.weight"], stride=layer.stride, padding=layer.padding),
                weights[f"{layer.name}.bias"],
            )
        elif layer.kind == "dense":
            h = T.bias_add(T.matmul(h, weights[f"{layer.name}.weight"]), weights[f"{layer.name}.bias"])
        elif layer.kind == "relu":
            h = T.relu(h)
        elif layer.kind == "maxpool":
            h = T.maxpool2x2(h)
        elif layer.kind == "flatten":
            h = T.reshape(h, (h.shape[0], -1))
        if layer.gated:
            pending = layer
        if pending is not None and (layer.kind == "relu" or (layer is pending and _next_kind(layers, i) != "relu")):
            g = _gate_for(pending, gates)
            if g is not None:
                h = T.channel_mul(h, g)
            recorded[pending.name] = h
            pending = None
        recorded[layer.name] = h
    return (h, recorded) if taps else h


def _next_kind(layers, i):
    return layers[i + 1].kind if i + 1 < len(layers) else None


def predict(spec: ModelSpec, weights: Mapping, images: np.ndarray, gates=None, batch_size: int = 256) -> np.ndarray:
    """Logits for a large array of images, computed in batches without a tape."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(spec, weights, images[start:start + batch_size], gates).data)
    if not out:
        return np.zeros((0, spec.num_classes))
    return np.concatenate(out)


# ----------------------------------------------------------------- training


def cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    return T.scale(T.mean(T.pick(T.log_softmax(logits), labels)), -1.0)


def one_vs_rest_bce(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean over samples and classes of sigmoid BCE against one-hot targets.

    Uses softplus(z) - y·z, with softplus(z) = relu(z) - log σ(|z|).
    """
    onehot = np.eye(logits.shape[1])[labels]
    softplus = T.sub(T.relu(logits), T.log(T.sigmoid(T.absolute(logits))))
    return T.mean(T.sub(softplus, T.mul(logits, onehot)))


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    initial_loss: float = float("nan")


def train_base(
    spec: ModelSpec,
    train,
    val=None,
    epochs: int = 10,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    ovr_weight: float = 1.0,
) -> tuple[dict[str, np.ndarray], TrainLog]:
    """Fit the full model with softmax cross-entropy and Adam.

    ``ovr_weight`` adds a one-vs-rest sigmoid BCE term so that each logit on
    its own separates its class from the rest (σ(logit) is then usable as a
    per-class probability).  Zero gives plain cross-entropy.

    The learning rate follows a per-epoch cosine decay from ``lr``.

    ``train``/``val`` are objects with ``images`` and ``labels`` arrays.
    """
    images, labels = np.asarray(train.images), np.asarray(train.labels)
    if len(images) == 0:
        raise ValueError("train_base: empty dataset")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValueError(f"train_base: labels must lie in [0, {spec.num_classes})")
    rng = np.random.default_rng(seed)
    weights = init_weights(spec, seed)
    log = TrainLog()
    log.initial_loss = float(cross_entropy(T.Tensor(predict(spec, weights, images[:512])), labels[:512]).data)
    params = {name: T.Tensor(w, requires_grad=True) for name, w in weights.items()}
    state = T.AdamState()
    for epoch in range(epochs):
        epoch_lr = lr * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))
        order = rng.permutation(len(images))
        total, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            with T.Tape():
                logits = forward(spec, params, images[idx])
                loss = cross_entropy(logits, labels[idx])
                objective = loss if not ovr_weight else T.add(loss, T.scale(one_vs_rest_bce(logits, labels[idx]), ovr_weight))
                grads = T.backward(objective)
            T.adam_step(params, grads, state, epoch_lr)
            total += float(loss.data) * len(idx)
            seen += len(idx)
        current = {name: p.data for name, p in params.items()}
        record = {
            "epoch": epoch + 1,
            "train_loss": total / seen,
            "train_acc": accuracy(spec, current, images, labels),
        }
        if val is not None:
            record["val_acc"] = accuracy(spec, current, val.images, val.labels)
        logger.info("epoch %d: %s", epoch + 1, record)
        log.epochs.append(record)
    return {name: p.data.copy() for name, p in params.items()}, log


def accuracy(spec, weights, images, labels, gates=None) -> float:
    pred = predict(spec, weights, images, gates).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# ------------------------------------------------------------ serialization


def save_model(path, spec: ModelSpec, weights: Mapping[str, np.ndarray]) -> None:
    ordered = {name: np.asarray(weights[name]) for name in spec.param_shapes}
    directory, payload = pack_arrays(ordered, "f4")
    write_container(path, MODEL_MAGIC, {"spec": spec.to_dict(), "tensors": directory}, payload)


def load_model(path) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    header, payload = read_container(path, MODEL_MAGIC)
    try:
        spec = ModelSpec.from_dict(header["spec"])
        directory = header["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise LayoutError(f"{path}: invalid model header ({exc})") from None
    arrays = unpack_arrays(directory, payload, path)
    weights = {}
    for name, shape in spec.param_shapes.items():
        if name not in arrays:
            raise LayoutError(f"{path}: missing tensor {name!r}")
        if arrays[name].shape != shape:
            raise LayoutError(f"{path}: tensor {name!r} has shape {arrays[name].shape}, spec expects {shape}")
        weights[name] = arrays[name].astype(np.float64)
    return spec, weights
