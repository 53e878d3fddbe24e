"""Network layers built on the autograd tape.

Every module takes an explicit ``Mode``; nothing switches behaviour
implicitly. Parameters are discovered by walking module attributes in
definition order, which keeps checkpoint names stable.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from core import autograd as ag
from core.autograd import Tensor
from core.exceptions import ContractError, InvalidArgumentError
from utils.validators import require_in_range, require_positive, require_positive_int

logger = logging.getLogger(__name__)


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


class LayerKind(enum.Enum):
    FC = "FC"
    BATCH_NORM = "BatchNorm"
    LEAKY_RELU = "LeakyReLU"
    TANH = "Tanh"
    SIGMOID = "Sigmoid"
    LSTM = "LSTM"


@dataclass(frozen=True)
class LayerSpec:
    """Hyperparameters shared by the layer set"""
    kind: LayerKind
    fan_in: int = 0
    fan_out: int = 0
    leaky_alpha: float = 0.2
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5
    lstm_hidden: int = 0
    lstm_layers: int = 1

    def __post_init__(self):
        if not 0.0 < self.leaky_alpha < 1.0:
            raise InvalidArgumentError(f"leaky_alpha must lie in (0, 1), got {self.leaky_alpha}")
        require_positive("bn_epsilon", self.bn_epsilon)
        require_in_range("bn_momentum", self.bn_momentum, 0.0, 1.0)
        require_positive_int("lstm_layers", self.lstm_layers)


def glorot_uniform(fan_in: int, fan_out: int, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(ag.get_default_dtype())


def parameter(values: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(values, dtype=ag.get_default_dtype()), requires_grad=True, name=name)


class Module:
    """Base class: parameters are Tensor attributes with ``requires_grad``"""

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        if not isinstance(mode, Mode):
            raise InvalidArgumentError(f"mode must be a Mode, got {mode!r}")
        return self.forward(x, mode)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith('_'):
                continue
            if isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    yield f"{name}.{index}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        """Trainable tensors by dotted name; a tied tensor is listed once"""
        seen = set()
        result = []
        self._collect_parameters(prefix, seen, result)
        return result

    def _collect_parameters(self, prefix: str, seen: set, result: list) -> None:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                if id(value) not in seen:
                    seen.add(id(value))
                    result.append((full, value))
            elif isinstance(value, Module):
                value._collect_parameters(f"{full}.", seen, result)

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        result = []
        seen = set()
        self._collect_buffers(prefix, seen, result)
        return result

    def _collect_buffers(self, prefix: str, seen: set, result: list) -> None:
        if id(self) in seen:
            return
        seen.add(id(self))
        for name, value in getattr(self, '_buffers', {}).items():
            result.append((f"{prefix}{name}", value))
        for name, value in self._children():
            if isinstance(value, Module):
                value._collect_buffers(f"{prefix}{name}.", seen, result)

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        targets: Dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        if missing:
            raise ContractError(f"state is missing entries: {', '.join(missing[:5])}")
        for name, target in targets.items():
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise ContractError(f"{name}: shape {source.shape} != expected {target.shape}")
            target[...] = source


class Dense(Module):
    """Fully connected layer ``y = x W + b`` with W of shape (fan_in, fan_out)"""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.fan_in = require_positive_int("fan_in", fan_in)
        self.fan_out = require_positive_int("fan_out", fan_out)
        self.weight = parameter(glorot_uniform(fan_in, fan_out, (fan_in, fan_out), rng), "weight")
        self.bias = parameter(np.zeros(fan_out), "bias")

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, features: int, momentum: float = 0.9, epsilon: float = 1e-5):
        self.features = require_positive_int("features", features)
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = parameter(np.ones(features), "gamma")
        self.beta = parameter(np.zeros(features), "beta")
        dtype = ag.get_default_dtype()
        self._buffers = {
            'running_mean': np.zeros(features, dtype=dtype),
            'running_var': np.ones(features, dtype=dtype),
        }

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers['running_mean']

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers['running_var']

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.features:
            raise InvalidArgumentError(f"batch norm expects (batch, {self.features}), got {x.shape}")
        if mode is Mode.TRAIN:
            if x.shape[0] < 2:
                raise InvalidArgumentError("batch norm in train mode needs batch >= 2 (variance is degenerate)")
            out, mean, var = ag.batch_norm(x, self.gamma, self.beta, self.epsilon)
            # in-place so views held by state snapshots stay consistent
            self.running_mean[...] = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            self.running_var[...] = self.momentum * self.running_var + (1.0 - self.momentum) * var
            return out
        inv_std = (1.0 / np.sqrt(self.running_var + self.epsilon)).astype(x.dtype)
        x_hat = ag.mul(ag.sub(x, self.running_mean.astype(x.dtype)), inv_std)
        return ag.add(ag.mul(x_hat, self.gamma), self.beta)


class LeakyReLU(Module):
    def __init__(self, alpha: float = 0.2):
        if not 0.0 < alpha < 1.0:
            raise InvalidArgumentError(f"leaky_alpha must lie in (0, 1), got {alpha}")
        self.alpha = alpha

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return ag.leaky_relu(x, self.alpha)


class Tanh(Module):
    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return ag.tanh(x)


class Sigmoid(Module):
    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return ag.sigmoid(x)


class Affine(Module):
    """Fixed ``x * factor + offset`` mapping between activation ranges"""

    def __init__(self, factor: float, offset: float = 0.0):
        self.factor = float(factor)
        self.offset = float(offset)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        y = ag.mul(x, self.factor)
        return ag.add(y, self.offset) if self.offset else y


class Reshape(Module):
    """Reshape keeping the batch axis"""

    def __init__(self, *shape: int):
        self.shape = tuple(shape)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return ag.reshape(x, (x.shape[0],) + self.shape)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        for layer in self.layers:
            x = layer(x, mode)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, index: int) -> Module:
        return self.layers[index]


class LSTMCell(Module):
    """One LSTM layer; gate blocks are ordered input, forget, candidate, output"""

    def __init__(self, features: int, hidden: int, rng: np.random.Generator):
        self.features = require_positive_int("features", features)
        self.hidden = require_positive_int("hidden", hidden)
        gates = 4 * hidden
        self.input_weight = parameter(glorot_uniform(features, gates, (features, gates), rng), "input_weight")
        self.recurrent_weight = parameter(glorot_uniform(hidden, gates, (hidden, gates), rng), "recurrent_weight")
        bias = np.zeros(gates)
        bias[hidden:2 * hidden] = 1.0
        self.bias = parameter(bias, "bias")

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        batch, steps, features = x.shape
        h = self.hidden
        projected = ag.linear(ag.reshape(x, (batch * steps, features)), self.input_weight, self.bias)
        projected = ag.reshape(projected, (batch, steps, 4 * h))

        dtype = x.dtype
        hidden_state = Tensor(np.zeros((batch, h), dtype=dtype))
        cell_state = Tensor(np.zeros((batch, h), dtype=dtype))
        outputs = []
        for t in range(steps):
            z = ag.add(ag.take(projected, (slice(None), t)), ag.matmul(hidden_state, self.recurrent_weight))
            input_gate = ag.sigmoid(ag.take(z, (slice(None), slice(0, h))))
            forget_gate = ag.sigmoid(ag.take(z, (slice(None), slice(h, 2 * h))))
            candidate = ag.tanh(ag.take(z, (slice(None), slice(2 * h, 3 * h))))
            output_gate = ag.sigmoid(ag.take(z, (slice(None), slice(3 * h, 4 * h))))
            cell_state = ag.add(ag.mul(forget_gate, cell_state), ag.mul(input_gate, candidate))
            hidden_state = ag.mul(output_gate, ag.tanh(cell_state))
            outputs.append(hidden_state)
        return ag.stack(outputs, axis=1)


class LSTM(Module):
    """Stacked LSTM over (batch, steps, features); returns the top layer's sequence"""

    def __init__(self, features: int, hidden: int, layers: int, rng: np.random.Generator):
        require_positive_int("lstm_layers", layers)
        self.hidden = hidden
        self.cells = [LSTMCell(features if i == 0 else hidden, hidden, rng) for i in range(layers)]

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if x.ndim != 3:
            raise InvalidArgumentError(f"lstm expects (batch, steps, features), got {x.shape}")
        if x.shape[1] == 0:
            raise InvalidArgumentError("lstm input has zero steps")
        for cell in self.cells:
            x = cell(x, mode)
        return x


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Module:
    """Instantiate one layer from its LayerSpec"""
    if spec.kind is LayerKind.FC:
        return Dense(spec.fan_in, spec.fan_out, rng)
    if spec.kind is LayerKind.BATCH_NORM:
        return BatchNorm(spec.fan_out or spec.fan_in, spec.bn_momentum, spec.bn_epsilon)
    if spec.kind is LayerKind.LEAKY_RELU:
        return LeakyReLU(spec.leaky_alpha)
    if spec.kind is LayerKind.TANH:
        return Tanh()
    if spec.kind is LayerKind.SIGMOID:
        return Sigmoid()
    if spec.kind is LayerKind.LSTM:
        return LSTM(spec.fan_in, spec.lstm_hidden, spec.lstm_layers, rng)
    raise InvalidArgumentError(f"unknown layer kind {spec.kind!r}")


@dataclass
class ParamSet:
    """Named trainable tensors plus non-trainable buffers of a model"""
    params: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: Module, prefix: str = "") -> "ParamSet":
        params: Dict[str, Tensor] = {}
        for name, tensor in module.named_parameters(prefix):
            if name in params:
                raise ContractError(f"duplicate parameter name {name!r}")
            params[name] = tensor
        return cls(params=params, buffers=dict(module.named_buffers(prefix)))

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None
