"""Small MLP classifier with a frozen linear head and per-layer LoRA adapters.

Batches are ``d_in x n`` matrices (one sample per column) throughout, so the
activations recorded in a trace can be fed straight into subspace
decomposition.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    AlreadyAttached,
    CorruptCheckpoint,
    DimensionMismatch,
    InvalidConfig,
    NoAdapters,
    UnknownClass,
    VersionMismatch,
)
from .subspace import Subspace

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    hidden_dim: int = 64
    num_hidden_layers: int = 3
    num_classes: int = 20
    activation: str = "relu"
    lora_rank: int = 8

    def validate(self) -> None:
        if self.num_hidden_layers < 1:
            raise InvalidConfig("num_hidden_layers must be >= 1")
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise InvalidConfig("input_dim and hidden_dim must be positive")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfig(f"activation must be one of {ACTIVATIONS}")
        if self.lora_rank < 1:
            raise InvalidConfig("lora_rank must be >= 1")
        if self.lora_rank > min(self.input_dim, self.hidden_dim):
            raise InvalidConfig(
                f"lora_rank {self.lora_rank} exceeds min(fan_in, fan_out) of the first layer"
            )

    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(fan_out, fan_in)`` of each backbone layer."""
        dims = [self.input_dim] + [self.hidden_dim] * self.num_hidden_layers
        return [(dims[i + 1], dims[i]) for i in range(self.num_hidden_layers)]


@dataclass
class Linear:
    weight: np.ndarray  # fan_out x fan_in
    bias: np.ndarray

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class LoraAdapter:
    down: np.ndarray  # r x fan_in
    up: np.ndarray  # fan_out x r

    @property
    def delta(self) -> np.ndarray:
        return self.up @ self.down


@dataclass
class Model:
    config: ModelConfig
    layers: list[Linear]
    head: Linear
    adapters: list[LoraAdapter] | None = None
    subspaces: dict | None = None

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> Model:
        return copy.deepcopy(self)

    def parameter_count(self) -> int:
        n = sum(l.weight.size + l.bias.size for l in self.layers)
        return n + self.head.weight.size + self.head.bias.size

    def effective_weight(self, l: int) -> np.ndarray:
        w = self.layers[l].weight
        if self.adapters is not None:
            w = w + self.adapters[l].delta
        return w


@dataclass
class ActivationTrace:
    """Per-layer inputs ``X^l`` and post-activation outputs ``H^l`` (``d x n`` each)."""

    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    pre_activations: list[np.ndarray] = field(repr=False)
    logits: np.ndarray = field(repr=False)

    @property
    def raw_input(self) -> np.ndarray:
        return self.inputs[0]

    @property
    def features(self) -> np.ndarray:
        return self.outputs[-1]


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        # subgradient 0 at the kink
        return (z > 0).astype(float)
    return 1.0 - h * h


def init_model(cfg: ModelConfig, seed: int) -> Model:
    """Gaussian fan-in scaled weights (He for relu, LeCun for tanh), zero biases."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    gain = 2.0 if cfg.activation == "relu" else 1.0
    layers = []
    for fan_out, fan_in in cfg.layer_shapes():
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(gain / fan_in)
        layers.append(Linear(w, np.zeros(fan_out)))
    head_w = rng.standard_normal((cfg.num_classes, cfg.hidden_dim)) * np.sqrt(1.0 / cfg.hidden_dim)
    return Model(cfg, layers, Linear(head_w, np.zeros(cfg.num_classes)))


def forward(model: Model, batch) -> tuple[np.ndarray, ActivationTrace]:
    x = np.asarray(batch, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != model.config.input_dim:
        raise DimensionMismatch(
            f"batch has {x.shape[0]} rows, model expects input_dim={model.config.input_dim}"
        )
    inputs, outputs, pre = [], [], []
    h = x
    for l, layer in enumerate(model.layers):
        inputs.append(h)
        z = model.effective_weight(l) @ h + layer.bias[:, None]
        h = _act(model.config.activation, z)
        pre.append(z)
        outputs.append(h)
    logits = model.head.weight @ h + model.head.bias[:, None]
    return logits, ActivationTrace(inputs, outputs, pre, logits)


def predict(model: Model, batch) -> np.ndarray:
    """Argmax class per column; ties go to the lowest class index."""
    logits, _ = forward(model, batch)
    return np.argmax(logits, axis=0)


@dataclass
class Gradients:
    """Gradients matching the model's parameter layout; ``None`` where not requested."""

    weights: list[np.ndarray] | None = None
    biases: list[np.ndarray] | None = None
    head_weight: np.ndarray | None = None
    head_bias: np.ndarray | None = None
    down: list[np.ndarray] | None = None
    up: list[np.ndarray] | None = None

    def __add__(self, other: Gradients) -> Gradients:
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            if isinstance(a, list):
                return [x + y for x, y in zip(a, b)]
            return a + b

        return Gradients(**{k: add(getattr(self, k), getattr(other, k)) for k in self.__dataclass_fields__})


def backward(
    model: Model,
    trace: ActivationTrace,
    grad_logits: np.ndarray | None,
    grad_outputs: list[np.ndarray | None] | None = None,
    wrt: str = "adapters",
) -> Gradients:
    """Reverse-mode pass through one traced forward.

    ``grad_logits`` is dL/dlogits and ``grad_outputs[l]`` an extra dL/dH^l injected
    at layer ``l`` (used by feature losses). ``wrt`` selects ``"adapters"`` (down
    and up factors) or ``"all"`` (backbone and head, for pretraining).
    """
    m = model.num_layers
    act = model.config.activation
    n_out = [None] * m if grad_outputs is None else grad_outputs
    grads = Gradients()
    if grad_logits is None:
        dh = np.zeros_like(trace.outputs[-1])
    else:
        dh = model.head.weight.T @ grad_logits
        if wrt == "all":
            grads.head_weight = grad_logits @ trace.outputs[-1].T
            grads.head_bias = grad_logits.sum(axis=1)
    dws, dbs, ddowns, dups = [None] * m, [None] * m, [None] * m, [None] * m
    for l in reversed(range(m)):
        if n_out[l] is not None:
            dh = dh + n_out[l]
        dz = dh * _act_grad(act, trace.pre_activations[l], trace.outputs[l])
        dw = dz @ trace.inputs[l].T
        if wrt == "all":
            dws[l] = dw
            dbs[l] = dz.sum(axis=1)
        elif model.adapters is not None:
            ad = model.adapters[l]
            ddowns[l] = ad.up.T @ dw
            dups[l] = dw @ ad.down.T
        if l > 0:
            dh = model.effective_weight(l).T @ dz
    if wrt == "all":
        grads.weights, grads.biases = dws, dbs
    else:
        if model.adapters is None:
            raise NoAdapters("adapter gradients requested on a model without adapters")
        grads.down, grads.up = ddowns, dups
    return grads


def attach_lora(model: Model, rank: int | None = None, seed: int = 0) -> Model:
    """Return a copy with ``down = 0`` and ``up ~ N(0, 1/r)`` adapters on every backbone layer."""
    if model.adapters is not None:
        raise AlreadyAttached("model already carries adapters")
    rank = model.config.lora_rank if rank is None else rank
    if rank < 1:
        raise InvalidConfig("rank must be >= 1")
    for layer in model.layers:
        if rank > min(layer.fan_in, layer.fan_out):
            raise InvalidConfig(
                f"rank {rank} exceeds min(fan_in, fan_out)={min(layer.fan_in, layer.fan_out)}"
            )
    rng = np.random.default_rng(seed)
    out = model.copy()
    out.adapters = [
        LoraAdapter(
            down=np.zeros((rank, layer.fan_in)),
            up=rng.standard_normal((layer.fan_out, rank)) * np.sqrt(1.0 / rank),
        )
        for layer in model.layers
    ]
    return out


def merge_lora(model: Model) -> Model:
    if model.adapters is None:
        raise NoAdapters("nothing to merge")
    out = model.copy()
    for layer, ad in zip(out.layers, out.adapters):
        layer.weight = layer.weight + ad.up @ ad.down
    out.adapters = None
    return out


def mask_head(model: Model, classes) -> Model:
    """Zero the head rows (weight and bias) of ``classes``; the backbone is untouched."""
    classes = sorted(set(int(c) for c in classes))
    bad = [c for c in classes if not 0 <= c < model.config.num_classes]
    if bad:
        raise UnknownClass(f"classes {bad} outside 0..{model.config.num_classes - 1}")
    out = model.copy()
    out.head.weight[classes, :] = 0.0
    out.head.bias[classes] = 0.0
    return out


def head_digest(model: Model) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(model.head.weight).tobytes())
    h.update(np.ascontiguousarray(model.head.bias).tobytes())
    return h.hexdigest()


def backbone_digest(model: Model) -> str:
    h = hashlib.sha256()
    for layer in model.layers:
        h.update(np.ascontiguousarray(layer.weight).tobytes())
        h.update(np.ascontiguousarray(layer.bias).tobytes())
    return h.hexdigest()


# -- checkpoints ---------------------------------------------------------------


def _flat(a: np.ndarray) -> list[float]:
    return a.ravel().tolist()


def _unflat(data, rows: int | None, cols: int | None) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 1:
        raise ValueError("expected a flat row-major array")
    if rows is None:
        rows = arr.size // cols
    if cols is None:
        cols = arr.size // rows
    if rows * cols != arr.size or arr.size == 0:
        raise ValueError(f"array of {arr.size} numbers does not fit {rows}x{cols}")
    return arr.reshape(rows, cols)


def checkpoint_dict(model: Model) -> dict:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "layers": [{"w": _flat(l.weight), "b": l.bias.tolist()} for l in model.layers],
        "head": {"w": _flat(model.head.weight), "b": model.head.bias.tolist()},
    }
    if model.adapters is not None:
        doc["adapters"] = [{"down": _flat(a.down), "up": _flat(a.up)} for a in model.adapters]
    if model.subspaces is not None:
        doc["subspaces"] = {
            family: [s.to_dict() for s in subs] for family, subs in sorted(model.subspaces.items())
        }
    return doc


def save_checkpoint(model: Model) -> str:
    return json.dumps(checkpoint_dict(model), sort_keys=True, separators=(",", ":"))


def load_checkpoint(document: str | bytes | dict) -> Model:
    try:
        doc = document if isinstance(document, dict) else json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise CorruptCheckpoint("checkpoint lacks a version field")
    if doc["version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {doc['version']}, expected {CHECKPOINT_VERSION}")
    try:
        cfg = ModelConfig(**doc["config"])
        cfg.validate()
        shapes = cfg.layer_shapes()
        if len(doc["layers"]) != len(shapes):
            raise ValueError(f"{len(doc['layers'])} layers stored, config declares {len(shapes)}")
        layers = [
            Linear(_unflat(l["w"], fo, fi), np.asarray(l["b"], dtype=float))
            for l, (fo, fi) in zip(doc["layers"], shapes)
        ]
        head = Linear(
            _unflat(doc["head"]["w"], cfg.num_classes, cfg.hidden_dim),
            np.asarray(doc["head"]["b"], dtype=float),
        )
        adapters = None
        if "adapters" in doc:
            adapters = [
                LoraAdapter(_unflat(a["down"], None, fi), _unflat(a["up"], fo, None))
                for a, (fo, fi) in zip(doc["adapters"], shapes)
            ]
        subspaces = None
        if "subspaces" in doc:
            subspaces = {
                family: [Subspace.from_dict(s) for s in subs] for family, subs in doc["subspaces"].items()
            }
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from exc
    if any(l.bias.shape != (l.fan_out,) for l in layers + [head]):
        raise CorruptCheckpoint("bias length disagrees with layer shape")
    if adapters is not None and (
        len(adapters) != len(layers) or any(a.down.shape[0] != a.up.shape[1] for a in adapters)
    ):
        raise CorruptCheckpoint("adapter factors are inconsistent")
    return Model(cfg, layers, head, adapters, subspaces)
