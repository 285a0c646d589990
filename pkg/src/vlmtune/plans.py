"""Per-component tuning plans and exact trainable-parameter accounting.

A plan assigns one mode to each of the three components: freeze everything,
train everything, or freeze the base weights and attach one of the four
adapter types. Applying a plan is a one-shot operation; the accountant then
walks the named-parameter sets and reports exact integer counts plus the
trainable fraction (denominator includes attached adapter parameters).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import peft
from .autograd import GradTape, backward
from .errors import ConfigError, PlanError
from .model import VLModel
from .optim import AdamW

COMPONENTS = ("vit", "jtm", "dec")


@dataclass(frozen=True)
class Mode:
    """One component's tuning mode: F, T, or an adapter with its sizing."""

    kind: str  # freeze | full | lora | ia3 | prefix | ptv2
    rank: int = 0
    prefix_len: int = 0
    hidden: int = 0

    @staticmethod
    def freeze() -> "Mode":
        return Mode("freeze")

    @staticmethod
    def full() -> "Mode":
        return Mode("full")

    @staticmethod
    def lora(rank: int) -> "Mode":
        return Mode("lora", rank=rank)

    @staticmethod
    def ia3() -> "Mode":
        return Mode("ia3")

    @staticmethod
    def prefix(prefix_len: int = peft.DEFAULT_PREFIX_LEN,
               hidden: int = peft.DEFAULT_PREFIX_HIDDEN) -> "Mode":
        return Mode("prefix", prefix_len=prefix_len, hidden=hidden)

    @staticmethod
    def ptv2(prefix_len: int) -> "Mode":
        return Mode("ptv2", prefix_len=prefix_len)

    def __str__(self):
        if self.kind == "freeze":
            return "F"
        if self.kind == "full":
            return "T"
        if self.kind == "lora":
            return f"LoRA{self.rank}"
        if self.kind == "ia3":
            return "IA3"
        if self.kind == "prefix":
            return f"Prefix{self.prefix_len}x{self.hidden}"
        return f"PTv2-{self.prefix_len}"


_MODE_RE = {
    "lora": re.compile(r"^lora[-_:]?(\d+)$"),
    "prefix": re.compile(r"^prefix[-_:]?(\d+)?(?:x(\d+))?$"),
    "ptv2": re.compile(r"^ptv2[-_:]?(\d+)?$"),
}


def parse_mode(text: str) -> Mode:
    """Parse a mode token such as F, T, LoRA4, IA3, Prefix16x512, PTv2-10."""
    tok = text.strip().lower()
    if tok in ("f", "freeze"):
        return Mode.freeze()
    if tok in ("t", "full"):
        return Mode.full()
    if tok == "ia3":
        return Mode.ia3()
    m = _MODE_RE["lora"].match(tok)
    if m:
        return Mode.lora(int(m.group(1)))
    m = _MODE_RE["prefix"].match(tok)
    if m:
        p = int(m.group(1)) if m.group(1) else peft.DEFAULT_PREFIX_LEN
        h = int(m.group(2)) if m.group(2) else peft.DEFAULT_PREFIX_HIDDEN
        return Mode.prefix(p, h)
    m = _MODE_RE["ptv2"].match(tok)
    if m:
        p = int(m.group(1)) if m.group(1) else 10
        return Mode.ptv2(p)
    raise ConfigError(f"cannot parse tuning mode {text!r}")


@dataclass(frozen=True)
class TuningPlan:
    """Immutable assignment of a mode to each component."""

    vit_mode: Mode
    jtm_mode: Mode
    dec_mode: Mode

    def __post_init__(self):
        if self.vit_mode.kind in ("prefix", "ptv2"):
            raise ConfigError("prefix-style modes are not permitted on the image encoder")

    def mode_for(self, comp_id: str) -> Mode:
        return {"vit": self.vit_mode, "jtm": self.jtm_mode, "dec": self.dec_mode}[comp_id]

    @staticmethod
    def parse(text: str) -> "TuningPlan":
        parts = [p for p in text.split(",") if p.strip()]
        if len(parts) != 3:
            raise ConfigError(f"plan needs three comma-separated modes, got {text!r}")
        return TuningPlan(*(parse_mode(p) for p in parts))

    def __str__(self):
        return f"{self.vit_mode},{self.jtm_mode},{self.dec_mode}"


def apply_plan(model: VLModel, plan: TuningPlan,
               rng: Optional[np.random.Generator] = None,
               ia3_sites: str = "all") -> VLModel:
    """Set trainability flags and attach adapters according to the plan.

    A model accepts exactly one plan; re-application is rejected rather than
    silently merged.
    """
    if model.applied_plan is not None:
        raise PlanError(f"plan {model.applied_plan} already applied to this model")
    for comp_id, comp in model.components.items():
        mode = plan.mode_for(comp_id)
        base_trainable = mode.kind == "full"
        for _, t in comp.base_named_parameters():
            t.trainable = base_trainable
        if mode.kind == "lora":
            peft.attach_lora(comp, mode.rank, rng)
        elif mode.kind == "ia3":
            peft.attach_ia3(comp, sites=ia3_sites)
        elif mode.kind == "prefix":
            peft.attach_prefix(comp, mode.prefix_len, mode.hidden, rng)
        elif mode.kind == "ptv2":
            peft.attach_ptv2(comp, mode.prefix_len, rng)
        comp.applied_mode = mode
    model.applied_plan = plan
    return model


@dataclass
class ComponentCount:
    base_total: int = 0
    base_trainable: int = 0
    peft_trainable: int = 0

    @property
    def total(self) -> int:
        return self.base_total + self.peft_trainable

    @property
    def trainable(self) -> int:
        return self.base_trainable + self.peft_trainable


@dataclass
class ParamReport:
    """Exact integer parameter counts per component and in total."""

    per_component: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(c.total for c in self.per_component.values())

    @property
    def trainable(self) -> int:
        return sum(c.trainable for c in self.per_component.values())

    @property
    def fraction_percent(self) -> float:
        return 100.0 * self.trainable / self.total if self.total else 0.0

    @property
    def fraction_display(self) -> str:
        return f"{self.fraction_percent:.3f}%"

    def rows(self) -> list[tuple]:
        out = []
        for comp_id in COMPONENTS:
            c = self.per_component[comp_id]
            out.append((comp_id, c.base_total, c.base_trainable, c.peft_trainable))
        cs = self.per_component.values()
        out.append(("total", sum(c.base_total for c in cs),
                    sum(c.base_trainable for c in cs),
                    sum(c.peft_trainable for c in cs)))
        return out


def count_params(model: VLModel) -> ParamReport:
    """Walk every named parameter and tally exact counts."""
    report = ParamReport()
    for comp_id, comp in model.components.items():
        cc = ComponentCount()
        for _, t in comp.base_named_parameters():
            cc.base_total += t.size
            if t.trainable:
                cc.base_trainable += t.size
        for _, t in comp.peft_named_parameters():
            cc.peft_trainable += t.size
        report.per_component[comp_id] = cc
    return report


@dataclass
class MaskingReport:
    """Outcome of the freeze-contract check over a short training run."""

    frozen_violations: list = field(default_factory=list)
    # trainable tensors that never changed, or changed without ever carrying
    # a nonzero gradient
    trainable_violations: list = field(default_factory=list)
    n_trainable: int = 0
    n_frozen: int = 0
    any_trainable_changed: bool = False

    @property
    def frozen_ok(self) -> bool:
        return not self.frozen_violations

    @property
    def all_trainable_changed(self) -> bool:
        return self.n_trainable > 0 and not self.trainable_violations

    @property
    def ok(self) -> bool:
        return self.frozen_ok and (self.n_trainable == 0 or self.any_trainable_changed)


def verify_masking(model: VLModel, samples, n_steps: int = 10,
                   base_lr: float = 1e-3, weight_decay: float = 0.05) -> MaskingReport:
    """Run ``n_steps`` training steps and audit the freeze contract.

    Frozen tensors must be bit-identical to their pre-training snapshot;
    trainable tensors are expected to change on at least one step where they
    carried a nonzero gradient.
    """
    named = list(model.named_parameters())
    snaps = {name: t.data.tobytes() for name, t in named}
    trainables = [(n, t) for n, t in named if t.trainable]
    report = MaskingReport(n_trainable=len(trainables),
                           n_frozen=len(named) - len(trainables))
    had_grad = {n: False for n, _ in trainables}
    if trainables:
        opt = AdamW(trainables, base_lr=base_lr, weight_decay=weight_decay,
                    total_steps=n_steps)
    for step in range(n_steps):
        sample = samples[step % len(samples)]
        with GradTape():
            loss = model.lm_loss(sample.image, sample.question_ids, sample.answer_ids)
        if not trainables:
            continue
        backward(loss)
        for n, t in trainables:
            if t.grad is not None and np.any(t.grad):
                had_grad[n] = True
        opt.step()
    for name, t in named:
        same = t.data.tobytes() == snaps[name]
        if t.trainable:
            if not same:
                report.any_trainable_changed = True
            if same or not had_grad[name]:
                report.trainable_violations.append(name)
        elif not same:
            report.frozen_violations.append(name)
    return report
