"""fxpquant: 8-bit fixed-point neural-network quantization toolkit."""

from .errors import (
    AccumulatorOverflowError,
    ConfigError,
    ContractError,
    DomainError,
    FixError,
    FormatError,
    InputError,
    TrainingDiverged,
)
from .formats import (
    FixFormat,
    FixScalar,
    FixTensor,
    fix_quant,
    fix_quant_signed,
    fix_quant_unsigned,
    from_mantissa,
    mul_accumulate,
    rescale_shift,
    round_half_away,
    to_mantissa,
)
from .pact import ClipParam, eta_fix, pact, pact_ste_grad, pact_via_fixquant
from .stats import (
    ErrorTable,
    SweepConfig,
    fl_from_std,
    relative_error,
    sample_gaussian,
    sweep,
    threshold_sigmas,
)

__version__ = "0.1.0"
