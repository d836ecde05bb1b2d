from . import ops
from .gradcheck import GradCheckReport, finite_difference_check
from .ops import (add, broadcast_to, concat, div, exp, gelu, getitem, layer_norm, log,
                  log_softmax, matmul, mean, mul, neg, relu, reshape, scale, softmax,
                  square, stack, sub, sum, swap_last, transpose)
from .optim import Adam, AdamState, ConfigError, adam_step
from .rng import Rng
from .tensor import (GradientError, NonFiniteError, ShapeError, Tape, Tensor, as_tensor,
                     backward, clear_tape, current_tape, no_grad, record)
