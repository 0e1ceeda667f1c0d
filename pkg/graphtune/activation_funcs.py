"""activation registry"""

from compyute.nn.functional.activation_funcs import GELUFunction, ReLUFunction, TanhFunction
from compyute.nn.functional.functions import Function, FunctionContext
from compyute.tensors import Tensor


class IdentityFunction(Function):
    """Passes the input through unchanged."""

    @staticmethod
    def forward(ctx: FunctionContext, x: Tensor) -> Tensor:
        return x

    @staticmethod
    def backward(ctx: FunctionContext, dy: Tensor) -> Tensor:
        return dy


ACTIVATIONS: dict[str, type[Function]] = {
    "identity": IdentityFunction,
    "relu": ReLUFunction,
    "tanh": TanhFunction,
    "gelu": GELUFunction,
}


def get_activation(name: str) -> type[Function]:
    """Returns the activation function registered under ``name``.

    Parameters
    ----------
    name : str
        One of ``identity``, ``relu``, ``tanh`` or ``gelu``.

    Returns
    -------
    type[Function]
        Activation function class.
    """
    if name not in ACTIVATIONS:
        options = ", ".join(ACTIVATIONS)
        raise ValueError(f"Unknown activation {name!r}. Must be one of {options}.")
    return ACTIVATIONS[name]
