from .autograd import ContractError, Tensor, backward, no_grad
from .gradcheck import grad_check, grad_check_params, numeric_grad
from .optim import AdamState, LrSchedule, adam_step, cosine_warmup_lr

__all__ = [
    "AdamState",
    "ContractError",
    "LrSchedule",
    "Tensor",
    "adam_step",
    "backward",
    "cosine_warmup_lr",
    "grad_check",
    "grad_check_params",
    "no_grad",
    "numeric_grad",
]
