"""Encoder/decoder networks and the complete feedback systems.

A feedback model turns each user's CSI planes into a fixed number of
feedback bits (one encoder per user) and rebuilds them at the base station.
``forward`` is the differentiable training path through straight-through bit
nodes; ``emit_bits``/``decode_bits`` are the inference path on real bits.
"""

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from core import autograd as ag
from core.autograd import Tensor
from core.bitstream import BitMode, bit_node, bits_to_codeword, codeword_to_bits
from core.exceptions import ConfigError, ContractError, InvalidArgumentError
from core.layers import (Affine, BatchNorm, Dense, LeakyReLU, LSTM, Mode, Module, Reshape,
                         Sequential, Sigmoid, Tanh)
from core.losses import loss_coop, loss_mse, loss_phase_weighted

logger = logging.getLogger(__name__)

LSTM_LAYERS = 3


class OutputKind(enum.Enum):
    MAGNITUDE = "magnitude"
    PHASE = "phase"


class Variant(enum.Enum):
    COCSINET = "cocsinet"
    ALONE = "alone"
    BENCHMARK1 = "benchmark1"
    BENCHMARK2 = "benchmark2"
    BENCHMARK3 = "benchmark3"
    NAIVE = "naive"
    MDPF1 = "mdpf1"
    MDPF2 = "mdpf2"

    @property
    def is_phase(self) -> bool:
        return self in (Variant.NAIVE, Variant.MDPF1, Variant.MDPF2)


@dataclass(frozen=True)
class EncoderConfig:
    n_rx: int
    n_tx: int
    feedback_bits: int
    bit_mode: BitMode = BitMode.BINARIZE
    bits_per_value: int = 4
    input_planes: int = 1
    leaky_alpha: float = 0.2

    def __post_init__(self):
        if self.feedback_bits < 1:
            raise ConfigError(f"must be >= 1, got {self.feedback_bits}", key="model.feedback_bits")
        if self.bit_mode is BitMode.QUANTIZE and self.feedback_bits % self.bits_per_value:
            raise ConfigError(f"{self.feedback_bits} feedback bits are not divisible by B={self.bits_per_value}",
                              key="model.feedback_bits")

    @property
    def n_dims(self) -> int:
        return self.n_rx * self.n_tx

    @property
    def fan_in(self) -> int:
        return self.input_planes * self.n_dims

    @property
    def hidden_width(self) -> int:
        return 2 * self.n_dims

    @property
    def code_width(self) -> int:
        if self.bit_mode is BitMode.QUANTIZE:
            return self.feedback_bits // self.bits_per_value
        return self.feedback_bits


@dataclass(frozen=True)
class DecoderConfig:
    n_rx: int
    n_tx: int
    input_width: int
    output: OutputKind = OutputKind.MAGNITUDE
    lstm_refine: bool = False
    width_multiplier: int = 1
    leaky_alpha: float = 0.2

    def __post_init__(self):
        if self.lstm_refine and self.n_rx < 2:
            raise ConfigError("LSTM refinement needs n_rx >= 2 (it consumes the N_r rows)",
                              key="model.lstm_refine")
        if self.input_width < 1:
            raise ConfigError(f"decoder input width must be >= 1, got {self.input_width}")

    @property
    def n_dims(self) -> int:
        return self.n_rx * self.n_tx

    @property
    def hidden_width(self) -> int:
        return 4 * self.n_dims * self.width_multiplier


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.COCSINET
    n_rx: int = 1
    n_tx: int = 32
    feedback_bits: int = 3
    bit_mode: BitMode = BitMode.BINARIZE
    bits_per_value: int = 4
    lstm_refine: bool = False
    leaky_alpha: float = 0.2
    n_users: int = 2
    tied: bool = False

    def __post_init__(self):
        if self.n_users < 1:
            raise ConfigError(f"must be >= 1, got {self.n_users}", key="dataset.users_per_group")
        if self.variant in (Variant.COCSINET, Variant.BENCHMARK3) and self.n_users < 2:
            raise ConfigError(f"{self.variant.value} needs at least 2 users", key="dataset.users_per_group")

    def encoder_config(self, input_planes: int = 1) -> EncoderConfig:
        return EncoderConfig(self.n_rx, self.n_tx, self.feedback_bits, self.bit_mode,
                             self.bits_per_value, input_planes, self.leaky_alpha)

    def decoder_config(self, input_width: int, output: OutputKind = OutputKind.MAGNITUDE,
                       width_multiplier: int = 1) -> DecoderConfig:
        return DecoderConfig(self.n_rx, self.n_tx, input_width, output, self.lstm_refine,
                             width_multiplier, self.leaky_alpha)

    def to_json(self) -> str:
        data = asdict(self)
        data['variant'] = self.variant.value
        data['bit_mode'] = self.bit_mode.value
        return json.dumps(data, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        data = json.loads(text)
        data['variant'] = Variant(data['variant'])
        data['bit_mode'] = BitMode(data['bit_mode'])
        return cls(**data)


@dataclass
class FeedbackBatch:
    """CSI planes for a batch of groups, each of shape (B, K, N_r, N_t)"""
    magnitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape or self.magnitude.ndim != 4:
            raise InvalidArgumentError(f"batch planes must share a (B, K, N_r, N_t) shape, "
                                       f"got {self.magnitude.shape} and {self.phase.shape}")

    @property
    def size(self) -> int:
        return self.magnitude.shape[0]

    @property
    def n_users(self) -> int:
        return self.magnitude.shape[1]

    def take(self, rows: np.ndarray) -> "FeedbackBatch":
        return FeedbackBatch(self.magnitude[rows], self.phase[rows])


@dataclass
class ModelOutputs:
    """Per-user reconstructions (B, N_r, N_t) on the tape"""
    magnitude: Optional[List[Tensor]] = None
    phase: Optional[List[Tensor]] = None


@dataclass
class Reconstruction:
    """Per-user reconstructions as arrays of shape (B, K, N_r, N_t)"""
    magnitude: Optional[np.ndarray] = None
    phase: Optional[np.ndarray] = None


# Networks
class Encoder(Module):
    """FC1+BN+LeakyReLU, FC2+BN+LeakyReLU, FC3+BN+tanh, then the bit node"""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.config = cfg
        alpha = cfg.leaky_alpha
        self.body = Sequential(
            Dense(cfg.fan_in, cfg.hidden_width, rng), BatchNorm(cfg.hidden_width), LeakyReLU(alpha),
            Dense(cfg.hidden_width, cfg.hidden_width, rng), BatchNorm(cfg.hidden_width), LeakyReLU(alpha),
            Dense(cfg.hidden_width, cfg.code_width, rng), BatchNorm(cfg.code_width), Tanh(),
        )

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        """Pre-bit codeword in [-1, 1]"""
        return self.body(x, mode)

    def encode(self, x: Tensor, mode: Mode, rng: np.random.Generator) -> Tensor:
        """Dequantized codeword through the straight-through bit node"""
        cfg = self.config
        return bit_node(self.forward(x, mode), cfg.bit_mode, cfg.bits_per_value, rng)

    def emit(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Feedback bits (B, feedback_bits) in inference mode"""
        cfg = self.config
        codeword = self.forward(Tensor(x), Mode.INFER).data
        return codeword_to_bits(codeword, cfg.bit_mode, cfg.bits_per_value, rng)

    def dense_layers(self) -> List[Dense]:
        return [layer for layer in self.body if isinstance(layer, Dense)]


class Decoder(Module):
    """FC4/FC5 (+BN, LeakyReLU), FC6+BN with sigmoid or tanh*pi, optional LSTM refinement"""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.config = cfg
        alpha = cfg.leaky_alpha
        width = cfg.hidden_width
        if cfg.output is OutputKind.MAGNITUDE:
            head = [Sigmoid()]
            # sigmoid range (0, 1) from the LSTM's (-1, 1)
            refine_map = Affine(0.5, 0.5)
        else:
            head = [Tanh(), Affine(math.pi)]
            refine_map = Affine(math.pi)
        layers: List[Module] = [
            Dense(cfg.input_width, width, rng), BatchNorm(width), LeakyReLU(alpha),
            Dense(width, width, rng), BatchNorm(width), LeakyReLU(alpha),
            Dense(width, cfg.n_dims, rng), BatchNorm(cfg.n_dims), *head,
        ]
        if cfg.lstm_refine:
            layers += [Reshape(cfg.n_rx, cfg.n_tx), LSTM(cfg.n_tx, cfg.n_tx, LSTM_LAYERS, rng),
                       Reshape(cfg.n_dims), refine_map]
        self.body = Sequential(*layers)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return self.body(x, mode)

    def dense_layers(self) -> List[Dense]:
        return [layer for layer in self.body if isinstance(layer, Dense)]


class CombinationNet(Module):
    """One FC layer with sigmoid over (individual ⊕ shared)"""

    def __init__(self, n_dims: int, rng: np.random.Generator):
        self.dense = Dense(2 * n_dims, n_dims, rng)
        self.activation = Sigmoid()

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return self.activation(self.dense(x, mode), mode)

    def combine(self, individual: Tensor, shared: Tensor, mode: Mode) -> Tensor:
        return self.forward(ag.concat([individual, shared], axis=1), mode)


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> Encoder:
    return Encoder(cfg, rng)


def build_decoder(cfg: DecoderConfig, rng: np.random.Generator) -> Decoder:
    return Decoder(cfg, rng)


def combine_complex(magnitude: np.ndarray, phase: np.ndarray, mag_scale: float) -> np.ndarray:
    """Complex CSI ``mag_scale * |H| * exp(j angle(H))``"""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if magnitude.shape != phase.shape:
        raise InvalidArgumentError(f"magnitude shape {magnitude.shape} != phase shape {phase.shape}")
    return mag_scale * magnitude * np.exp(1j * phase)


# Feedback systems
class FeedbackModel(Module):
    """Common plumbing: K per-user encoders and a base-station decoding stage"""

    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        self._encoders: List[Encoder] = []

    @property
    def n_users(self) -> int:
        return self.config.n_users

    @property
    def n_dims(self) -> int:
        return self.config.n_rx * self.config.n_tx

    @property
    def feedback_bits(self) -> int:
        """Bits emitted per user"""
        return self.config.feedback_bits

    @property
    def encoder_list(self) -> List[Encoder]:
        return self._encoders

    def _check_batch(self, batch: FeedbackBatch) -> None:
        if batch.n_users < self.n_users:
            raise ContractError(f"model expects {self.n_users} users per group, batch has {batch.n_users}")
        if batch.magnitude.shape[2:] != (self.config.n_rx, self.config.n_tx):
            raise ContractError(f"batch planes {batch.magnitude.shape[2:]} do not match model "
                                f"({self.config.n_rx}, {self.config.n_tx})")

    def encoder_inputs(self, batch: FeedbackBatch) -> List[np.ndarray]:
        size = batch.size
        return [batch.magnitude[:, k].reshape(size, -1) for k in range(self.n_users)]

    def decode(self, codes: Sequence[Tensor], mode: Mode) -> ModelOutputs:
        raise NotImplementedError

    def forward(self, batch: FeedbackBatch, mode: Mode, rng: np.random.Generator = None) -> ModelOutputs:
        if not isinstance(mode, Mode):
            raise InvalidArgumentError(f"mode must be a Mode, got {mode!r}")
        self._check_batch(batch)
        return self.decode(self.encode_users(self.encoder_inputs(batch), mode, rng), mode)

    def encode_users(self, inputs: Sequence[np.ndarray], mode: Mode, rng: np.random.Generator) -> List[Tensor]:
        dtype = ag.get_default_dtype()
        return [encoder.encode(Tensor(x.astype(dtype)), mode, rng) for encoder, x in zip(self._encoders, inputs)]

    def __call__(self, batch: FeedbackBatch, mode: Mode, rng: np.random.Generator = None) -> ModelOutputs:
        return self.forward(batch, mode, rng)

    def loss(self, batch: FeedbackBatch, outputs: ModelOutputs) -> Tensor:
        targets = [batch.magnitude[:, k] for k in range(self.n_users)]
        return loss_coop(targets, outputs.magnitude)

    def emit_bits(self, batch: FeedbackBatch, rng: np.random.Generator = None) -> np.ndarray:
        """Feedback bits of every user, shape (B, n_users, feedback_bits)"""
        self._check_batch(batch)
        dtype = ag.get_default_dtype()
        bits = [encoder.emit(x.astype(dtype), rng)
                for encoder, x in zip(self._encoders, self.encoder_inputs(batch))]
        return np.stack(bits, axis=1)

    def decode_bits(self, bits: np.ndarray) -> Reconstruction:
        if bits.ndim != 3 or bits.shape[1] != self.n_users or bits.shape[2] != self.feedback_bits:
            raise ContractError(f"expected bits of shape (B, {self.n_users}, {self.feedback_bits}), got {bits.shape}")
        dtype = ag.get_default_dtype()
        cfg = self.config
        codes = [Tensor(bits_to_codeword(bits[:, k], cfg.bit_mode, cfg.bits_per_value).astype(dtype))
                 for k in range(self.n_users)]
        outputs = self.decode(codes, Mode.INFER)
        return Reconstruction(
            magnitude=None if outputs.magnitude is None else np.stack([t.data for t in outputs.magnitude], axis=1),
            phase=None if outputs.phase is None else np.stack([t.data for t in outputs.phase], axis=1),
        )

    def _to_planes(self, flat: Tensor) -> Tensor:
        return ag.reshape(flat, (flat.shape[0], self.config.n_rx, self.config.n_tx))

    def topology(self) -> str:
        """JSON description of the config and layer widths (checkpoint metadata)"""
        blocks: Dict[str, List[List[int]]] = {}
        for name, value in vars(self).items():
            if name.startswith('_'):
                continue
            modules = value if isinstance(value, list) else [value]
            for index, module in enumerate(modules):
                if isinstance(module, (Encoder, Decoder)):
                    blocks[f"{name}.{index}"] = [[d.fan_in, d.fan_out] for d in module.dense_layers()]
                elif isinstance(module, CombinationNet):
                    blocks[f"{name}.{index}"] = [[module.dense.fan_in, module.dense.fan_out]]
        return json.dumps({'config': json.loads(self.config.to_json()), 'dense': blocks,
                           'params': self.param_count()}, sort_keys=True)


class CooperativeModel(FeedbackModel):
    """K encoders, K individual decoders, a shared co-decoder and K combination nets.

    With ``own_feedback_only`` every user gets its own co-decoder fed only by
    its own codeword (no cross-user information).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, own_feedback_only: bool = False):
        super().__init__(cfg)
        enc_cfg = cfg.encoder_config()
        code = enc_cfg.code_width
        k = cfg.n_users
        self.own_feedback_only = own_feedback_only
        if cfg.tied:
            encoder = Encoder(enc_cfg, rng)
            decoder = Decoder(cfg.decoder_config(code), rng)
            combiner = CombinationNet(self.n_dims, rng)
            self.encoders, self.decoders, self.combiners = [encoder] * k, [decoder] * k, [combiner] * k
        else:
            self.encoders = [Encoder(enc_cfg, rng) for _ in range(k)]
            self.decoders = [Decoder(cfg.decoder_config(code), rng) for _ in range(k)]
            self.combiners = [CombinationNet(self.n_dims, rng) for _ in range(k)]
        if own_feedback_only:
            self.shared_decoders = [Decoder(cfg.decoder_config(code), rng) for _ in range(k)]
        else:
            self.shared_decoders = [Decoder(cfg.decoder_config(k * code), rng)]
        self._encoders = self.encoders

    def _check_batch(self, batch: FeedbackBatch) -> None:
        if batch.n_users != self.n_users:
            raise ContractError(f"cooperative model was built for K={self.n_users}, batch has K={batch.n_users}")
        super()._check_batch(batch)

    def _per_user(self, stacked: Tensor, size: int) -> List[Tensor]:
        return [ag.take(stacked, slice(k * size, (k + 1) * size)) for k in range(self.n_users)]

    def encode_users(self, inputs: Sequence[np.ndarray], mode: Mode, rng: np.random.Generator) -> List[Tensor]:
        """Tied encoders see the users' rows as one batch so shared batch norms update once per step"""
        if not self.config.tied:
            return super().encode_users(inputs, mode, rng)
        stacked = Tensor(np.concatenate(inputs, axis=0).astype(ag.get_default_dtype()))
        return self._per_user(self.encoders[0].encode(stacked, mode, rng), inputs[0].shape[0])

    def decode(self, codes: Sequence[Tensor], mode: Mode) -> ModelOutputs:
        if len(codes) != self.n_users:
            raise ContractError(f"expected {self.n_users} codewords, got {len(codes)}")
        if self.own_feedback_only:
            shared = [dec(code, mode) for dec, code in zip(self.shared_decoders, codes)]
        else:
            joint = self.shared_decoders[0](ag.concat(list(codes), axis=1), mode)
            shared = [joint] * self.n_users
        if self.config.tied:
            individual = self.decoders[0](ag.concat(list(codes), axis=0), mode)
            combined = self.combiners[0].combine(individual, ag.concat(shared, axis=0), mode)
            return ModelOutputs(magnitude=[self._to_planes(x) for x in self._per_user(combined, codes[0].shape[0])])
        outputs = []
        for decoder, combiner, code, common in zip(self.decoders, self.combiners, codes, shared):
            individual = decoder(code, mode)
            outputs.append(self._to_planes(combiner.combine(individual, common, mode)))
        return ModelOutputs(magnitude=outputs)


class IndependentModel(FeedbackModel):
    """K separate encoder/decoder branches with no cross-user decoding"""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, width_multiplier: int = 1):
        super().__init__(cfg)
        enc_cfg = cfg.encoder_config()
        dec_cfg = cfg.decoder_config(enc_cfg.code_width, width_multiplier=width_multiplier)
        self.width_multiplier = width_multiplier
        self.encoders = [Encoder(enc_cfg, rng) for _ in range(cfg.n_users)]
        self.decoders = [Decoder(dec_cfg, rng) for _ in range(cfg.n_users)]
        self._encoders = self.encoders

    def decode(self, codes: Sequence[Tensor], mode: Mode) -> ModelOutputs:
        return ModelOutputs(magnitude=[self._to_planes(dec(code, mode))
                                       for dec, code in zip(self.decoders, codes)])


class PhaseFeedbackModel(FeedbackModel):
    """Phase feedback: naive MSE, magnitude-weighted loss (mdpf1), or
    magnitude-weighted loss with the magnitude as extra encoder input (mdpf2)"""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if not cfg.variant.is_phase:
            raise ConfigError(f"{cfg.variant.value} is not a phase feedback variant", key="model.variant")
        super().__init__(cfg)
        self.variant = cfg.variant
        planes = 2 if cfg.variant is Variant.MDPF2 else 1
        enc_cfg = cfg.encoder_config(input_planes=planes)
        dec_cfg = cfg.decoder_config(enc_cfg.code_width, output=OutputKind.PHASE)
        self.encoders = [Encoder(enc_cfg, rng) for _ in range(cfg.n_users)]
        self.decoders = [Decoder(dec_cfg, rng) for _ in range(cfg.n_users)]
        self._encoders = self.encoders

    def encoder_inputs(self, batch: FeedbackBatch) -> List[np.ndarray]:
        size = batch.size
        inputs = []
        for k in range(self.n_users):
            phase = batch.phase[:, k].reshape(size, -1) / math.pi
            if self.variant is Variant.MDPF2:
                phase = np.concatenate([phase, batch.magnitude[:, k].reshape(size, -1)], axis=1)
            inputs.append(phase)
        return inputs

    def decode(self, codes: Sequence[Tensor], mode: Mode) -> ModelOutputs:
        return ModelOutputs(phase=[self._to_planes(dec(code, mode)) for dec, code in zip(self.decoders, codes)])

    def loss(self, batch: FeedbackBatch, outputs: ModelOutputs) -> Tensor:
        total = None
        for k, phase_hat in enumerate(outputs.phase):
            if self.variant is Variant.NAIVE:
                term = loss_mse(batch.phase[:, k], phase_hat)
            else:
                term = loss_phase_weighted(batch.phase[:, k], phase_hat, batch.magnitude[:, k])
            total = term if total is None else ag.add(total, term)
        return total


def build_mdpf(variant: Variant, cfg: ModelConfig, rng: np.random.Generator) -> PhaseFeedbackModel:
    return PhaseFeedbackModel(replace(cfg, variant=Variant(variant)), rng)


def build_benchmarks(which: int, cfg: ModelConfig, rng: np.random.Generator) -> FeedbackModel:
    """1: independent branches; 2: independent with doubled decoder widths;
    3: cooperative topology whose co-decoders see one user's feedback each"""
    if which == 1:
        return IndependentModel(replace(cfg, variant=Variant.BENCHMARK1), rng)
    if which == 2:
        return IndependentModel(replace(cfg, variant=Variant.BENCHMARK2), rng, width_multiplier=2)
    if which == 3:
        return CooperativeModel(replace(cfg, variant=Variant.BENCHMARK3), rng, own_feedback_only=True)
    raise InvalidArgumentError(f"unknown benchmark {which!r}; expected 1, 2 or 3")


def build_model(cfg: ModelConfig, rng: np.random.Generator) -> FeedbackModel:
    """Instantiate the model named by ``cfg.variant``"""
    variant = cfg.variant
    if variant is Variant.COCSINET:
        model = CooperativeModel(cfg, rng)
    elif variant in (Variant.ALONE, Variant.BENCHMARK1):
        model = IndependentModel(cfg, rng)
    elif variant is Variant.BENCHMARK2:
        model = build_benchmarks(2, cfg, rng)
    elif variant is Variant.BENCHMARK3:
        model = build_benchmarks(3, cfg, rng)
    else:
        model = build_mdpf(variant, cfg, rng)
    logger.debug(f"Built {variant.value} model with {model.param_count()} parameters")
    return model
