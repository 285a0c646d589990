"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Iterable, Optional

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, GradContractError

# Defaults the schedule and optimizer are documented against.
BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def cosine_lr_at(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Cosine decay from ``base_lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError("cosine schedule needs total_steps >= 1")
    if step < 0 or step > total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return min_lr + (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


class AdamW:
    """Decoupled-weight-decay Adam over a fixed set of named tensors.

    Moment buffers are created for exactly the tensors handed in at
    construction time (the trainables of an applied plan). The step counter
    drives both the bias correction and the cosine schedule.
    """

    def __init__(self, params: Iterable[tuple[str, Tensor]], base_lr: float,
                 weight_decay: float = 0.0, min_lr: float = 0.0,
                 total_steps: int = 1, beta1: float = BETA1, beta2: float = BETA2,
                 eps: float = EPS):
        self.params = [(name, t) for name, t in params]
        for name, t in self.params:
            if not t.trainable:
                raise GradContractError(f"optimizer received non-trainable tensor {name!r}")
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.min_lr = min_lr
        self.total_steps = total_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def lr_for_next_step(self) -> float:
        """Learning rate the next ``step()`` call will use."""
        return cosine_lr_at(min(self.step_count, self.total_steps),
                            self.total_steps, self.base_lr, self.min_lr)

    def step(self) -> float:
        """Apply one AdamW update to every parameter; returns the lr used.

        Every parameter must carry a gradient (populated by ``backward``);
        a missing gradient is a contract violation. Gradients are cleared
        after the update.
        """
        lr = self.lr_for_next_step()
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            if p.grad is None:
                raise GradContractError(
                    f"trainable tensor {name!r} has no gradient at step {t}")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None
        return lr

    # -- serialization hooks used by the checkpoint module ------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt/m/{name}"] = self.m[name]
            out[f"opt/v/{name}"] = self.v[name]
        return out

    def state_scalars(self) -> dict:
        return {"step_count": self.step_count, "total_steps": self.total_steps,
                "base_lr": self.base_lr, "min_lr": self.min_lr,
                "weight_decay": self.weight_decay}

    def load_state(self, tensors: dict[str, np.ndarray], scalars: Optional[dict] = None):
        for name in self.m:
            mk, vk = f"opt/m/{name}", f"opt/v/{name}"
            if mk not in tensors or vk not in tensors:
                raise GradContractError(f"optimizer state missing moments for {name!r}")
            self.m[name] = tensors[mk].astype(self.m[name].dtype, copy=True)
            self.v[name] = tensors[vk].astype(self.v[name].dtype, copy=True)
        if scalars:
            self.step_count = int(scalars["step_count"])
