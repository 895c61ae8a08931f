"""
AdamW with decoupled weight decay and a cosine learning-rate schedule
"""

import logging
import math
from typing import Dict, Tuple

import numpy as np

from ballsparse.config import TRAIN_CONFIG
from ballsparse.exceptions import InvalidArgumentError, ShapeError

logger = logging.getLogger(__name__)


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Learning rate decayed from base_lr to min_lr over total_steps along a half cosine"""
    if total_steps <= 0:
        return base_lr
    progress = min(step, total_steps) / total_steps
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def decays(name: str) -> bool:
    """Weight decay applies to matrices, not to gains, biases or gate logits"""
    leaf = name.rsplit(".", 1)[-1]
    return not (leaf.startswith("norm_") or leaf.startswith("gate_") or leaf == "b")


class AdamW:
    """
    AdamW over a flat name -> array mapping, updating the arrays in place

    Args:
        params: Parameter arrays (updated in place)
        lr: Base learning rate
        weight_decay: Decoupled weight decay
        betas: Moment decay rates
        eps: Denominator stabilizer
    """

    def __init__(
        self,
        params: Dict[str, np.ndarray],
        lr: float = TRAIN_CONFIG["learning_rate"],
        weight_decay: float = TRAIN_CONFIG["weight_decay"],
        betas: Tuple[float, float] = TRAIN_CONFIG["betas"],
        eps: float = TRAIN_CONFIG["adam_eps"]
    ):
        if lr <= 0:
            raise InvalidArgumentError(f"Learning rate must be > 0, got {lr}")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float = None) -> None:
        """Apply one update using grads keyed like params"""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t

        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"Gradient for {name} has shape {g.shape}, expected {p.shape}")
            if decays(name) and self.weight_decay:
                p -= (lr * self.weight_decay * p).astype(p.dtype)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
