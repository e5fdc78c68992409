"""Reversible recurrent networks with exact fixed-point information buffers."""

from .fixedpoint import (
    FixedFormat,
    FixedPoint,
    FixedPointOverflow,
    ForgetGate,
    decode,
    encode_gate,
    encode_hidden,
    fixed_add,
    fixed_sub,
    restrict_forgetting,
)
from .revbuffer import (
    BigBuffer,
    BufferTensor,
    LimbBuffer,
    ideal_bits_per_step,
    ideal_total_bits,
    limb_guard,
    measured_bits,
    rev_mul_forward,
    rev_mul_reverse,
    savings_ratio,
)
from .revcells import GRU, LSTM, DFRevGRU, NFRevGRU, RevGRU, RevLSTM, RevState, make_cell
from .revgrad import (
    AdamState,
    SequenceModel,
    Tape,
    adam_step,
    finite_diff_check,
    reversible_backward,
    run_forward,
    sgd_step,
    stored_activation_backward,
    train_step,
)
from .tasks import evaluate_tokens_correct, gen_memorize, gen_repeat, toy_translation

__version__ = "0.1.0"
