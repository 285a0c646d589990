"""Finite-difference gradient checking in double precision.

Perturbs every scalar of every checked tensor by +-h, recomputes the loss,
and compares the central difference against the analytic gradient from one
backward pass. The loss closure runs without a tape, so probe forwards stay
cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import GradTape, Tensor, backward
from .errors import ConfigError


@dataclass
class TensorCheck:
    name: str
    max_abs_err: float
    max_rel_excess: float  # worst |a-n| / (atol + rtol*max(|a|,|n|)); <= 1 passes
    ok: bool


@dataclass
class GradCheckReport:
    checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if not c.ok]

    def summary(self) -> str:
        lines = [f"{'tensor':<40}{'max|a-n|':>14}{'excess':>10}  status"]
        for c in self.checks:
            lines.append(f"{c.name:<40}{c.max_abs_err:>14.3e}{c.max_rel_excess:>10.3f}"
                         f"  {'ok' if c.ok else 'FAIL'}")
        return "\n".join(lines)


def check_gradients(loss_fn: Callable[[], Tensor], params: list[tuple[str, Tensor]],
                    h: float = 1e-5, rtol: float = 1e-3,
                    atol: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    Every tensor handed in must be float64; float32 round-off swamps the
    h=1e-5 stencil.
    """
    for name, t in params:
        if t.data.dtype != np.float64:
            raise ConfigError(f"gradient check requires float64 tensors ({name} is {t.data.dtype})")
    with GradTape():
        loss = loss_fn()
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params}

    report = GradCheckReport()
    for name, t in params:
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn().item()
            flat[i] = keep - h
            dn = loss_fn().item()
            flat[i] = keep
            num[i] = (up - dn) / (2.0 * h)
        a = analytic[name].reshape(-1)
        err = np.abs(a - num)
        bound = atol + rtol * np.maximum(np.abs(a), np.abs(num))
        excess = float(np.max(err / bound)) if flat.size else 0.0
        report.checks.append(TensorCheck(
            name=name, max_abs_err=float(err.max(initial=0.0)),
            max_rel_excess=excess, ok=bool(np.all(err <= bound))))
    return report


def model_gradcheck(model, sample, params=None, h: float = 1e-5,
                    rtol: float = 1e-3) -> GradCheckReport:
    """Check the full model loss against finite differences."""
    chosen = params if params is not None else list(model.trainable_parameters())

    def loss_fn():
        return model.lm_loss(sample.image, sample.question_ids, sample.answer_ids)

    return check_gradients(loss_fn, chosen, h=h, rtol=rtol)
