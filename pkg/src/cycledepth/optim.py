import logging
from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

from .autodiff import Parameter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    # momentum 0.9, weight decay 2e-5 and lr 1e-5 are the published settings;
    # beta2 and epsilon are the usual Adam defaults.
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 2e-5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def adam_step(params: Iterable[Parameter], config: OptimizerConfig) -> List[str]:
    """One Adam update with decoupled weight decay, then clear gradients.

    Parameters without a gradient are left alone; their names are returned.
    """
    skipped = []
    lr, b1, b2, eps, wd = (config.learning_rate, config.beta1, config.beta2,
                           config.epsilon, config.weight_decay)
    for p in params:
        if p.grad is None:
            skipped.append(p.name)
            continue
        g = p.grad
        p.t += 1
        p.m = b1 * p.m + (1 - b1) * g
        p.v = b2 * p.v + (1 - b2) * (g * g)
        m_hat = p.m / (1 - b1 ** p.t)
        v_hat = p.v / (1 - b2 ** p.t)
        data = p.data
        if wd:
            data = data - lr * wd * data
        p.data = (data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        p.m = p.m.astype(p.dtype, copy=False)
        p.v = p.v.astype(p.dtype, copy=False)
        p.grad = None
    if skipped:
        logger.debug("adam_step skipped %d parameters without gradient", len(skipped))
    return skipped
