"""The two architectures: a tanh MLP for the 2-D toys and a small tanh CNN for images."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "CnnConfig",
    "MlpConfig",
    "Model",
    "ModelError",
    "build_cnn",
    "build_mlp",
    "extract_activations",
    "load_model",
    "predict",
    "save_model",
]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 2
    hidden_layers: int = 2
    hidden_width: int = 100
    num_classes: int = 2

    def validate(self) -> None:
        for key in ("input_dim", "hidden_layers", "hidden_width"):
            if getattr(self, key) < 1:
                raise ModelError(f"MlpConfig.{key} must be positive, got {getattr(self, key)}")
        if self.num_classes < 2:
            raise ModelError(f"MlpConfig.num_classes must be >= 2, got {self.num_classes}")


@dataclass(frozen=True)
class CnnConfig:
    in_channels: int = 3
    conv1_out: int = 32
    conv1_kernel: int = 5
    pool_kernel: int = 2
    conv2_out: int = 64
    conv2_kernel: int = 5
    fc_hidden: int = 120
    num_classes: int = 2
    input_side: int = 32

    def shapes(self) -> dict[str, int]:
        """Intermediate spatial sides; raises if any stage is not a positive integer."""
        conv1 = self.input_side - self.conv1_kernel + 1
        shapes = {"input": self.input_side, "conv1": conv1}
        if conv1 < 1 or conv1 % self.pool_kernel:
            raise ModelError(
                f"conv1 output side {conv1} is not a positive multiple of pool kernel "
                f"{self.pool_kernel} (shapes so far: {shapes})"
            )
        pooled = conv1 // self.pool_kernel
        conv2 = pooled - self.conv2_kernel + 1
        shapes.update(pool=pooled, conv2=conv2)
        if conv2 < 1:
            raise ModelError(f"conv2 output side {conv2} is not positive (shapes: {shapes})")
        return shapes

    @property
    def flatten_size(self) -> int:
        return self.conv2_out * self.shapes()["conv2"] ** 2

    def validate(self) -> None:
        for key, value in asdict(self).items():
            if value < 1:
                raise ModelError(f"CnnConfig.{key} must be positive, got {value}")
        if self.num_classes < 2:
            raise ModelError(f"CnnConfig.num_classes must be >= 2, got {self.num_classes}")
        self.shapes()


class Model:
    """Named parameters plus an ordered layer list.

    Each layer is ``(name, fn)`` where ``fn(x, params) -> Tensor``; running the
    list in order is the forward pass, and any prefix gives a tapped activation.
    """

    def __init__(self, arch: str, config, params: dict[str, Tensor], layers):
        self.arch = arch
        self.config = config
        self.params = params
        self.layers = layers

    @property
    def layer_names(self) -> list[str]:
        return [name for name, _ in self.layers]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def input_shape(self) -> tuple[int, ...]:
        if self.arch == "mlp":
            return (self.config.input_dim,)
        c = self.config
        return (c.in_channels, c.input_side, c.input_side)

    def _check_input(self, batch: Tensor) -> None:
        if batch.shape[1:] != self.input_shape() or batch.data.ndim != len(self.input_shape()) + 1:
            raise ModelError(
                f"{self.arch}: batch shape {batch.shape} does not match expected (N, *{self.input_shape()})"
            )

    def run(self, batch, until: str | None = None) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        self._check_input(x)
        for name, fn in self.layers:
            x = fn(x, self.params)
            if name == until:
                break
        return x

    __call__ = run

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ModelError(f"state dict keys differ from model parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ModelError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear_layer(w: str, b: str):
    return lambda x, p: ad.linear(x, p[w], p[b])


def build_mlp(config: MlpConfig, seed: int = 0) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    layers = []
    widths = [config.input_dim] + [config.hidden_width] * config.hidden_layers + [config.num_classes]
    n_linear = len(widths) - 1
    for i in range(n_linear):
        fan_in, fan_out = widths[i], widths[i + 1]
        w, b = f"fc{i + 1}.weight", f"fc{i + 1}.bias"
        params[w] = Tensor(_uniform(rng, (fan_out, fan_in), fan_in), requires_grad=True, name=w)
        params[b] = Tensor(np.zeros(fan_out), requires_grad=True, name=b)
        layers.append((f"fc{i + 1}", _linear_layer(w, b)))
        if i < n_linear - 1:
            layers.append((f"act{i + 1}", lambda x, p: ad.tanh(x)))
    layers.append(("log_softmax", lambda x, p: ad.log_softmax(x)))
    return Model("mlp", config, params, layers)


def build_cnn(config: CnnConfig, seed: int = 0) -> Model:
    config.validate()
    c = config
    rng = np.random.default_rng(seed)
    k1, k2 = c.conv1_kernel, c.conv2_kernel
    fan1 = c.in_channels * k1 * k1
    fan2 = c.conv1_out * k2 * k2
    shapes = {
        "conv1.weight": ((c.conv1_out, c.in_channels, k1, k1), fan1),
        "conv1.bias": ((c.conv1_out,), None),
        "conv2.weight": ((c.conv2_out, c.conv1_out, k2, k2), fan2),
        "conv2.bias": ((c.conv2_out,), None),
        "fc1.weight": ((c.fc_hidden, c.flatten_size), c.flatten_size),
        "fc1.bias": ((c.fc_hidden,), None),
        "fc2.weight": ((c.num_classes, c.fc_hidden), c.fc_hidden),
        "fc2.bias": ((c.num_classes,), None),
    }
    params = {}
    for name, (shape, fan_in) in shapes.items():
        data = np.zeros(shape) if fan_in is None else _uniform(rng, shape, fan_in)
        params[name] = Tensor(data, requires_grad=True, name=name)
    pool = c.pool_kernel
    layers = [
        ("conv1", lambda x, p: ad.conv2d(x, p["conv1.weight"], p["conv1.bias"])),
        ("act1", lambda x, p: ad.tanh(x)),
        ("pool", lambda x, p: ad.avg_pool2d(x, pool)),
        ("conv2", lambda x, p: ad.conv2d(x, p["conv2.weight"], p["conv2.bias"])),
        ("act2", lambda x, p: ad.tanh(x)),
        ("flatten", lambda x, p: ad.flatten(x)),
        ("fc1", _linear_layer("fc1.weight", "fc1.bias")),
        ("act3", lambda x, p: ad.tanh(x)),
        ("fc2", _linear_layer("fc2.weight", "fc2.bias")),
        ("log_softmax", lambda x, p: ad.log_softmax(x)),
    ]
    return Model("cnn", config, params, layers)


def predict(model: Model, batch) -> Tensor:
    """Log-probabilities, one row per input."""
    return model.run(batch)


def extract_activations(model: Model, batch, layer_name: str) -> np.ndarray:
    """Output of ``layer_name`` flattened to one row per input."""
    if layer_name not in model.layer_names:
        raise ModelError(f"unknown layer {layer_name!r}; valid layers: {', '.join(model.layer_names)}")
    out = model.run(batch, until=layer_name).data
    return out.reshape(out.shape[0], -1)


def save_model(model: Model, path: str | Path) -> Path:
    """Write ``<path>`` (OODF checkpoint) and ``<path>.json`` (architecture + config)."""
    path = Path(path)
    ad.save_checkpoint(path, model.params)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"arch": model.arch, "config": asdict(model.config)}, indent=2, sort_keys=True))
    return sidecar


def load_model(path: str | Path) -> Model:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    if meta["arch"] == "mlp":
        model = build_mlp(MlpConfig(**meta["config"]))
    elif meta["arch"] == "cnn":
        model = build_cnn(CnnConfig(**meta["config"]))
    else:
        raise ModelError(f"unknown architecture {meta['arch']!r}")
    model.load_state_dict(ad.load_checkpoint(path))
    return model
