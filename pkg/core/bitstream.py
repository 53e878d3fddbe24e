"""Feedback bitstreams: uniform quantization, stochastic binarization,
straight-through training nodes, bit-error corruption and bit budgets.

Quantization is mid-rise over [-1, 1] with 2**B bins and bin-center
reconstruction. Indices are packed B bits each, least-significant bit
first, values in codeword order. Binarized symbols map -1 -> 0, +1 -> 1.
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core import autograd as ag
from core.autograd import Tensor
from core.exceptions import FormatError, InvalidArgumentError
from utils.file_parser import BinaryReader, BinaryWriter
from utils.validators import require_positive, require_positive_int, require_probability

logger = logging.getLogger(__name__)

MAX_BITS_PER_VALUE = 16


class BitMode(enum.Enum):
    QUANTIZE = "quantize"
    BINARIZE = "binarize"


@dataclass(frozen=True)
class QuantizerSpec:
    bits_per_value: int = 4

    def __post_init__(self):
        require_positive_int("bits_per_value", self.bits_per_value)
        if self.bits_per_value > MAX_BITS_PER_VALUE:
            raise InvalidArgumentError(f"bits_per_value must be <= {MAX_BITS_PER_VALUE}, got {self.bits_per_value}")

    @property
    def levels(self) -> int:
        return 1 << self.bits_per_value

    @property
    def step(self) -> float:
        return 2.0 / self.levels


@dataclass(frozen=True)
class BitVector:
    """Packed bit string; bits beyond ``length`` in the last byte are zero"""
    length: int
    data: bytes

    def __post_init__(self):
        if len(self.data) != (self.length + 7) // 8:
            raise FormatError(f"bit vector of {self.length} bits needs {(self.length + 7) // 8} bytes, "
                              f"got {len(self.data)}", offset=0)
        tail = self.length % 8
        if tail and self.data[-1] >> tail:
            raise FormatError("unused trailing bits are not zero", offset=len(self.data) - 1)

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "BitVector":
        bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
        return cls(length=int(bits.size), data=np.packbits(bits, bitorder='little').tobytes())

    def to_bits(self) -> np.ndarray:
        raw = np.frombuffer(self.data, dtype=np.uint8)
        return np.unpackbits(raw, count=self.length, bitorder='little')

    def to_bytes(self) -> bytes:
        writer = BinaryWriter()
        writer.write('I', self.length)
        writer.write_bytes(self.data)
        return writer.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BitVector":
        reader = BinaryReader(data)
        length = reader.read_one('I')
        packed = reader.read_bytes((length + 7) // 8)
        return cls(length=length, data=packed)

    def __len__(self) -> int:
        return self.length


@dataclass(frozen=True)
class FeedbackBudget:
    total_bits: int
    bpd: float
    mag_bits: int
    phase_bits: int
    rounded_down: bool = False


# Array-level helpers
def quantize_indices(x: np.ndarray, bits_per_value: int) -> np.ndarray:
    """Bin index of each value; out-of-range inputs are clamped"""
    spec = QuantizerSpec(bits_per_value)
    clamped = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    index = np.floor((clamped + 1.0) / spec.step).astype(np.int64)
    return np.minimum(index, spec.levels - 1)


def dequantize_indices(index: np.ndarray, bits_per_value: int) -> np.ndarray:
    spec = QuantizerSpec(bits_per_value)
    return -1.0 + (np.asarray(index, dtype=np.float64) + 0.5) * spec.step


def indices_to_bits(index: np.ndarray, bits_per_value: int) -> np.ndarray:
    """Expand (..., n) indices to (..., n*B) bits, LSB first"""
    index = np.asarray(index, dtype=np.int64)
    shifts = np.arange(bits_per_value, dtype=np.int64)
    bits = (index[..., None] >> shifts) & 1
    return bits.reshape(index.shape[:-1] + (index.shape[-1] * bits_per_value,)).astype(np.uint8)


def bits_to_indices(bits: np.ndarray, bits_per_value: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    if bits.shape[-1] % bits_per_value:
        raise FormatError(f"bit length {bits.shape[-1]} is not a multiple of B={bits_per_value}",
                          offset=(bits.shape[-1] // bits_per_value) * bits_per_value)
    grouped = bits.reshape(bits.shape[:-1] + (bits.shape[-1] // bits_per_value, bits_per_value))
    weights = np.left_shift(1, np.arange(bits_per_value, dtype=np.int64))
    return (grouped * weights).sum(axis=-1)


def quantize(x: np.ndarray, spec: QuantizerSpec) -> BitVector:
    index = quantize_indices(np.asarray(x).reshape(-1), spec.bits_per_value)
    return BitVector.from_bits(indices_to_bits(index, spec.bits_per_value))


def dequantize(bits: BitVector, spec: QuantizerSpec) -> np.ndarray:
    return dequantize_indices(bits_to_indices(bits.to_bits(), spec.bits_per_value), spec.bits_per_value)


def binarize(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """+1 with probability (1 + x) / 2, otherwise -1, independently per element"""
    clamped = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    draws = rng.random(clamped.shape)
    return np.where(draws < (1.0 + clamped) / 2.0, 1.0, -1.0)


def binary_to_bits(values: np.ndarray) -> np.ndarray:
    return (np.asarray(values) > 0).astype(np.uint8)


def bits_to_binary(bits: np.ndarray) -> np.ndarray:
    return np.asarray(bits, dtype=np.float64) * 2.0 - 1.0


def flip_bit_array(bits: np.ndarray, ber: float, rng: np.random.Generator) -> np.ndarray:
    require_probability("ber", ber)
    bits = np.asarray(bits, dtype=np.uint8)
    if ber == 0.0:
        return bits.copy()
    mask = (rng.random(bits.shape) < ber).astype(np.uint8)
    return bits ^ mask


def flip_bits(bits: BitVector, ber: float, rng: np.random.Generator) -> BitVector:
    """XOR every bit with 1 independently with probability ``ber``"""
    return BitVector.from_bits(flip_bit_array(bits.to_bits(), ber, rng))


# Training-graph nodes
def quantize_st(x: Tensor, bits_per_value: int) -> Tensor:
    """Quantize-dequantize forward, identity gradient"""
    return ag.straight_through(x, lambda v: dequantize_indices(quantize_indices(v, bits_per_value),
                                                               bits_per_value))


def binarize_st(x: Tensor, rng: np.random.Generator) -> Tensor:
    """Stochastic binarization forward, identity gradient"""
    return ag.straight_through(x, lambda v: binarize(v, rng))


# Codeword <-> bits for a batch of codewords
def codeword_bits(width: int, bit_mode: BitMode, bits_per_value: int) -> int:
    return width * bits_per_value if bit_mode is BitMode.QUANTIZE else width


def codeword_to_bits(codeword: np.ndarray, bit_mode: BitMode, bits_per_value: int,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Encoder outputs (batch, width) in [-1, 1] to feedback bits (batch, n_bits)"""
    if bit_mode is BitMode.QUANTIZE:
        return indices_to_bits(quantize_indices(codeword, bits_per_value), bits_per_value)
    if rng is None:
        raise InvalidArgumentError("binarization needs a random generator")
    return binary_to_bits(binarize(codeword, rng))


def bits_to_codeword(bits: np.ndarray, bit_mode: BitMode, bits_per_value: int) -> np.ndarray:
    if bit_mode is BitMode.QUANTIZE:
        return dequantize_indices(bits_to_indices(bits, bits_per_value), bits_per_value)
    return bits_to_binary(bits)


def bit_node(x: Tensor, bit_mode: BitMode, bits_per_value: int, rng: np.random.Generator) -> Tensor:
    if bit_mode is BitMode.QUANTIZE:
        return quantize_st(x, bits_per_value)
    return binarize_st(x, rng)


# Budgets
def budget(L: int, gamma: float, B: int, n_dims: Optional[int] = None,
           mag_bits: Optional[int] = None) -> FeedbackBudget:
    """Bit budget ``N_bits = L * gamma * B`` and its bits per dimension.

    Args:
        L: codeword source dimension
        gamma: compression ratio
        B: bits per value
        n_dims: N_r * N_t used for the BPD (defaults to L)
        mag_bits: magnitude share for complex feedback (defaults to all bits)

    A non-integer product is rounded down and flagged in ``rounded_down``.
    """
    require_positive_int("L", L)
    require_positive("gamma", gamma)
    require_positive_int("B", B)
    n_dims = require_positive_int("n_dims", n_dims if n_dims is not None else L)

    exact = L * gamma * B
    total = int(math.floor(exact + 1e-9))
    rounded = abs(exact - total) > 1e-9
    if rounded:
        logger.info(f"bit budget {exact:.4f} is not an integer; rounded down to {total}")
    if total < 1:
        raise InvalidArgumentError(f"bit budget L*gamma*B = {exact} is below one bit")

    mag = total if mag_bits is None else int(mag_bits)
    if not 0 <= mag <= total:
        raise InvalidArgumentError(f"mag_bits must lie in [0, {total}], got {mag}")
    return FeedbackBudget(total_bits=total, bpd=total / n_dims, mag_bits=mag,
                          phase_bits=total - mag, rounded_down=rounded)


def bits_for_bpd(bpd: float, n_rx: int, n_tx: int, bit_mode: BitMode, bits_per_value: int = 1) -> int:
    """Largest admissible N_bits not above ``bpd * N_r * N_t``.

    In quantize mode the result is a multiple of B; never below one value.
    """
    require_positive("bpd", bpd)
    raw = int(math.floor(bpd * n_rx * n_tx + 1e-9))
    step = bits_per_value if bit_mode is BitMode.QUANTIZE else 1
    return max(step, (raw // step) * step)
