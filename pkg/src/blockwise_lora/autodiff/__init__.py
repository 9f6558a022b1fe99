from .gradcheck import grad_check
from .optim import AdamW, adamw_step
from .tensor import DTYPES, Parameter, Tensor, backward, dtype_name

__all__ = ["AdamW", "DTYPES", "Parameter", "Tensor", "adamw_step", "backward", "dtype_name", "grad_check"]
