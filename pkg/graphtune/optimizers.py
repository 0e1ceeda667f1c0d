"""optimizers over named parameter arrays"""

import copy
from collections.abc import Mapping
from typing import Any, Literal, Optional

import compyute as cp
import numpy as np
from compyute import nn
from compyute.nn.parameter import Parameter

from .tensor_utils import to_array, to_tensor

OptimizerName = Literal["sgd", "adam", "adamw"]

OPTIMIZERS: dict[str, type] = {
    "sgd": nn.optimizers.SGD,
    "adam": nn.optimizers.Adam,
    "adamw": nn.optimizers.AdamW,
}


class Optimizer:
    """Applies a compyute optimizer to parameters held as named arrays.

    The compyute parameters are created on the first step. Every later step
    must use the same parameter names.

    Parameters
    ----------
    name : OptimizerName
        One of ``sgd``, ``adam`` or ``adamw``.
    lr : float
        Learning rate.
    **kwargs : Any
        Further arguments of the compyute optimizer, such as ``beta1``.
    """

    def __init__(self, name: OptimizerName, lr: float, **kwargs: Any) -> None:
        if name not in OPTIMIZERS:
            options = ", ".join(OPTIMIZERS)
            raise ValueError(f"Unknown optimizer {name!r}. Must be one of {options}.")
        if lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {lr}.")
        self.name = name
        self.lr = lr
        self.kwargs = kwargs
        self.t = 0
        self._names: Optional[list[str]] = None
        self._params: dict[str, Parameter] = {}
        self._optim: Optional[Any] = None
        self._pending_state: Optional[dict[str, Any]] = None

    def _build(self, params: Mapping[str, np.ndarray]) -> None:
        self._names = sorted(params)
        self._params = {n: Parameter(to_tensor(np.array(params[n], dtype=np.float64))) for n in self._names}
        self._optim = OPTIMIZERS[self.name](
            (self._params[n] for n in self._names), lr=self.lr, **self.kwargs
        )
        if self._pending_state is not None:
            self._optim.load_state_dict(self._pending_state, target_device=cp.cpu)
            self._pending_state = None

    def step(
        self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
    ) -> dict[str, np.ndarray]:
        """Returns updated copies of ``params``. The inputs are not modified."""
        missing = set(params) - set(grads)
        if missing:
            raise KeyError(f"Missing gradients for {sorted(missing)}.")
        if self._optim is None:
            self._build(params)
        elif sorted(params) != self._names:
            raise KeyError(f"Parameters changed between steps: expected {self._names}, got {sorted(params)}.")

        for name in self._names:
            p = self._params[name]
            p.data[...] = np.asarray(params[name], dtype=np.float64)
            p.grad = to_tensor(grads[name])
        self._optim.step()
        self._optim.reset_grads()
        self.t += 1
        return {name: to_array(self._params[name]).copy() for name in self._names}

    def get_state_dict(self) -> dict[str, Any]:
        """Returns a copy of the optimizer state, including the moment estimates."""
        if self._optim is not None:
            optim_state = self._optim.get_state_dict()
        else:
            optim_state = self._pending_state
        return {
            "name": self.name,
            "lr": self.lr,
            "t": self.t,
            "names": None if self._names is None else list(self._names),
            "optimizer": copy.deepcopy(optim_state),
        }

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        if state["name"] != self.name:
            raise ValueError(f"Cannot load {state['name']} state into {self.name}.")
        if state["names"] is not None and self._names is not None and list(state["names"]) != self._names:
            raise KeyError(f"State holds parameters {state['names']}, optimizer holds {self._names}.")
        self.lr = float(state["lr"])
        self.t = int(state["t"])
        optim_state = copy.deepcopy(state["optimizer"])
        if optim_state is None:
            return
        if self._optim is not None:
            self._optim.load_state_dict(optim_state, target_device=cp.cpu)
        else:
            self._pending_state = optim_state


def get_optimizer(name: OptimizerName, lr: float, **kwargs: Any) -> Optimizer:
    """Returns a fresh optimizer registered under ``name``."""
    return Optimizer(name, lr, **kwargs)
