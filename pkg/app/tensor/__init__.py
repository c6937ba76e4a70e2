from app.tensor.gradcheck import grad_check, grad_check_many
from app.tensor.tape import Gradients, Tape, Value, backward

__all__ = ["Gradients", "Tape", "Value", "backward", "grad_check", "grad_check_many"]
