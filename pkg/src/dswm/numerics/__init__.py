from .checkpoint import load_arrays, save_arrays
from .gradcheck import GradCheckReport, finite_difference_check, numeric_gradient
from .ops import (add, add_n, categorical_kl, concat, cosine_similarity, entropy, gru_cell,
                  gru_sequence, gumbel_noise, gumbel_softmax, gumbel_softmax_sample, linear,
                  log_softmax_np, mean, mse, reshape, scale, sigmoid, softmax, softmax_np,
                  swish, take_rows, total)
from .optim import Adam, AdamState, adam_step
from .tensor import GradientTape, Tensor, active_tape, as_tensor, record
