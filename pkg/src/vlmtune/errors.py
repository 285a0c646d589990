"""Exception hierarchy shared across the package."""


class VlmtuneError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(VlmtuneError):
    """Operands have incompatible shapes."""


class StaleTapeError(VlmtuneError):
    """backward() called without a live gradient tape for the loss."""


class DegenerateBatchError(VlmtuneError):
    """A loss was requested over zero scored positions."""


class ConfigError(VlmtuneError):
    """Invalid model, plan, or training configuration."""


class AttachError(VlmtuneError):
    """Illegal adapter attachment (double attach, unsupported target)."""


class PlanError(VlmtuneError):
    """Tuning plan applied twice or to an invalid target."""


class GradContractError(VlmtuneError):
    """A trainable tensor reached the optimizer without a gradient."""


class CheckpointMismatchError(VlmtuneError):
    """Checkpoint config does not match the instantiated model."""


class TrainingDivergedError(VlmtuneError):
    """Loss became non-finite; the last good checkpoint is retained."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class InstructionLeakError(VlmtuneError):
    """Instruction-format records were passed where benchmark records are required."""
