"""Adam optimizer and finite-difference gradient checking"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Union

import numpy as np

from core.autograd import Tensor, straight_through_as_identity
from core.exceptions import ContractError
from core.layers import ParamSet
from utils.validators import require_non_negative

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Per-parameter moments and the shared step counter"""
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def attach(self, params: ParamSet) -> "AdamState":
        """Create a moment slot for every trainable parameter"""
        for name, tensor in params:
            if name not in self.m:
                self.m[name] = np.zeros_like(tensor.data)
                self.v[name] = np.zeros_like(tensor.data)
        return self

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Flatten to named arrays for checkpointing"""
        arrays = {'adam.t': np.array([self.t], dtype=np.float64)}
        for name in self.m:
            arrays[f'adam.m.{name}'] = self.m[name]
            arrays[f'adam.v.{name}'] = self.v[name]
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], lr: float = 0.001) -> "AdamState":
        state = cls(lr=lr)
        if 'adam.t' in arrays:
            state.t = int(np.asarray(arrays['adam.t']).reshape(-1)[0])
        for key, value in arrays.items():
            if key.startswith('adam.m.'):
                state.m[key[len('adam.m.'):]] = np.array(value)
            elif key.startswith('adam.v.'):
                state.v[key[len('adam.v.'):]] = np.array(value)
        return state


def adam_step(params: ParamSet, state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place and clear gradients.

    Raises:
        ContractError: if any parameter has no gradient
    """
    for name, tensor in params:
        if tensor.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        if tensor.grad.shape != tensor.data.shape:
            raise ContractError(f"parameter {name!r} gradient shape {tensor.grad.shape} != {tensor.data.shape}")

    state.attach(params)
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t

    for name, tensor in params:
        g = tensor.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data -= update.astype(tensor.data.dtype)
        tensor.grad = None


class Adam:
    """Optimizer bound to one ParamSet"""

    def __init__(self, params: ParamSet, lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        require_non_negative("lr", lr)
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps).attach(params)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        self.params.zero_grad()


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: Dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(diff / scale)


def grad_check(loss_fn: Callable[[], Tensor],
               tensors: Union[Mapping[str, Tensor], ParamSet],
               tolerance: float = 1e-4,
               step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Args:
        loss_fn: rebuilds the forward graph and returns a scalar loss
        tensors: inputs and/or parameters to check; must be float64
        tolerance: pass threshold on the relative error
        step: finite-difference step

    Returns:
        GradCheckReport with the relative error per tensor

    Straight-through nodes forward as the identity while checking, so only
    the surrogate path is compared.
    """
    named = dict(tensors.params) if isinstance(tensors, ParamSet) else dict(tensors)
    for name, tensor in named.items():
        if tensor.data.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 tensors; {name!r} is {tensor.data.dtype}")
        if not tensor.requires_grad:
            raise ContractError(f"grad_check target {name!r} does not require gradients")

    with straight_through_as_identity():
        for tensor in named.values():
            tensor.grad = None
        loss = loss_fn()
        loss.backward()
        analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                    for name, t in named.items()}

        errors = {}
        for name, tensor in named.items():
            numeric = np.zeros_like(tensor.data)
            flat = tensor.data.reshape(-1)
            numeric_flat = numeric.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                plus = loss_fn().item()
                flat[i] = original - step
                minus = loss_fn().item()
                flat[i] = original
                numeric_flat[i] = (plus - minus) / (2.0 * step)
            errors[name] = relative_error(analytic[name], numeric)

    report = GradCheckReport(max_rel_error=max(errors.values(), default=0.0), errors=errors, tolerance=tolerance)
    logger.debug(f"grad_check max relative error {report.max_rel_error:.3e} ({report.worst()})")
    return report
