"""
Adam optimizer over ParamSets, used to manufacture the pretrained base model.

Steps are ascent steps: `step(grad)` moves params along +grad.
"""

from typing import Dict

import numpy as np

from esforge.errors import ConfigurationError
from esforge.params import ParamSet


class Adam:
    """Adam with bias correction; moments kept per tensor in float64."""

    def __init__(
        self,
        params: ParamSet,
        stepsize: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        if stepsize <= 0:
            raise ConfigurationError(f"stepsize must be > 0, got {stepsize}")
        self.params = params
        self.stepsize = stepsize
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m: Dict[str, np.ndarray] = {t.name: np.zeros(t.shape) for t in params}
        self.v: Dict[str, np.ndarray] = {t.name: np.zeros(t.shape) for t in params}

    def step(self, grad: ParamSet) -> float:
        """
        Apply one ascent step.

        Returns:
            L2 norm of the applied step
        """
        self.params.check_comparable(grad)
        self.t += 1
        a = self.stepsize * np.sqrt(1 - self.beta2**self.t) / (1 - self.beta1**self.t)
        total = 0.0
        for tensor in self.params:
            g = grad.array(tensor.name).astype(np.float64)
            m = self.m[tensor.name] = self.beta1 * self.m[tensor.name] + (1 - self.beta1) * g
            v = self.v[tensor.name] = self.beta2 * self.v[tensor.name] + (1 - self.beta2) * g * g
            update = a * m / (np.sqrt(v) + self.epsilon)
            tensor.data[...] = (tensor.data.astype(np.float64) + update).astype(tensor.data.dtype)
            total += float(np.sum(update * update))
        return float(np.sqrt(total))
