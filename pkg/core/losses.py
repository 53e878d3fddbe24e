"""Training objectives. Each returns a scalar Tensor: squared error summed
over each sample and averaged over the batch (axis 0)."""

from typing import Sequence, Union

import numpy as np

from core import autograd as ag
from core.autograd import Tensor
from core.exceptions import InvalidArgumentError

Target = Union[Tensor, np.ndarray]


def _constant(value: Target, like: Tensor) -> np.ndarray:
    array = value.data if isinstance(value, Tensor) else np.asarray(value)
    if array.shape != like.shape:
        raise InvalidArgumentError(f"target shape {array.shape} != output shape {like.shape}")
    return array.astype(like.dtype)


def _batch_mean_of_sum(squared: Tensor) -> Tensor:
    batch = squared.shape[0] if squared.ndim else 1
    return ag.mul(ag.reduce_sum(squared), 1.0 / batch)


def loss_mse(target: Target, output: Tensor) -> Tensor:
    """Squared Frobenius error per sample, averaged over the batch"""
    return _batch_mean_of_sum(ag.square(ag.sub(output, _constant(target, output))))


def loss_coop(targets: Sequence[Target], outputs: Sequence[Tensor]) -> Tensor:
    """Sum of the per-user squared errors of all K users"""
    if len(targets) != len(outputs) or not len(targets):
        raise InvalidArgumentError(f"loss_coop needs matching non-empty user lists, "
                                   f"got {len(targets)} and {len(outputs)}")
    total = loss_mse(targets[0], outputs[0])
    for target, output in zip(targets[1:], outputs[1:]):
        total = ag.add(total, loss_mse(target, output))
    return total


def loss_phase_weighted(phase: Target, phase_hat: Tensor, magnitude: Target) -> Tensor:
    """Phase error weighted elementwise by the CSI magnitude.

    Only ``phase_hat`` receives gradients.
    """
    weight = _constant(magnitude, phase_hat)
    weighted = ag.mul(ag.sub(_constant(phase, phase_hat), phase_hat), weight)
    return _batch_mean_of_sum(ag.square(weighted))
