"""Adam optimization and plateau-based learning-rate scheduling."""

from __future__ import annotations

import math

import numpy as np

from .tape import Parameter


class MissingGradientError(ValueError):
    """A parameter reached the optimizer without a usable gradient."""


class Adam:
    """Bias-corrected Adam over a named parameter set.

    Parameters are updated in place by descending their .grad, so callers
    accumulate gradients of the quantity to be *minimized*.
    """

    def __init__(self, params: dict[str, Parameter], lr: float = 0.003,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if lr < 0.0 or epsilon <= 0.0:
            raise ValueError("lr must be non-negative and epsilon positive")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.second_moment = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.reset_grad()

    def step(self):
        for name, p in self.params.items():
            if p.grad is None or p.grad.shape != p.value.shape:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        b1t = 1.0 - self.beta1 ** self.step_count
        b2t = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.epsilon)

    def state(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "step_count": self.step_count,
        }

    def load_state(self, state: dict, first_moment: dict, second_moment: dict):
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.epsilon = float(state["epsilon"])
        self.step_count = int(state["step_count"])
        for name in self.params:
            self.first_moment[name] = np.array(first_moment[name], dtype=np.float64)
            self.second_moment[name] = np.array(second_moment[name], dtype=np.float64)


def clip_gradients(params: dict[str, Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm.  Off by default in training (max_norm <= 0
    means no clipping and this function is not called).
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


class PlateauSchedule:
    """Multiply the learning rate by `factor` after more than `patience`
    epochs without improvement of a higher-is-better metric."""

    def __init__(self, patience: int = 100, factor: float = 0.1, min_lr: float = 0.0):
        if patience < 1:
            raise ValueError("patience must be a positive integer")
        if not (0.0 < factor < 1.0):
            raise ValueError("factor must lie in (0, 1)")
        self.patience = int(patience)
        self.factor = float(factor)
        self.min_lr = float(min_lr)
        self.best_metric = -math.inf
        self.epochs_since_improvement = 0

    def update(self, metric: float, optimizer: Adam | None = None) -> bool:
        """Record one epoch's metric; returns True if the rate was reduced."""
        if not math.isfinite(metric):
            raise ValueError("plateau metric must be finite")
        if metric > self.best_metric:
            self.best_metric = metric
            self.epochs_since_improvement = 0
            return False
        self.epochs_since_improvement += 1
        if self.epochs_since_improvement > self.patience:
            self.epochs_since_improvement = 0
            if optimizer is not None:
                optimizer.lr = max(optimizer.lr * self.factor, self.min_lr)
            return True
        return False

    def state(self) -> dict:
        return {
            "patience": self.patience,
            "factor": self.factor,
            "min_lr": self.min_lr,
            "best_metric": self.best_metric,
            "epochs_since_improvement": self.epochs_since_improvement,
        }
