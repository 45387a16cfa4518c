"""MLP building blocks on top of the Tensor autodiff core."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

_ACTIVATIONS = {
    "softplus": T.softplus,
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "none": lambda x: x,
}


def glorot_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


class Mlp:
    """Fully connected stack: widths[0] -> ... -> widths[-1].

    Hidden layers use `activation`; the final layer uses `final_activation`
    ("none" by default).  Weights are Glorot-uniform, biases zero; pass
    zero_init_last=True to start the network as the constant-zero function
    (used wherever training must begin purely skeletal).
    """

    def __init__(self, widths, activation="softplus", final_activation="none",
                 rng=None, zero_init_last=False, name="mlp"):
        if len(widths) < 2:
            raise ValueError("Mlp needs at least input and output widths")
        if rng is None:
            rng = np.random.default_rng(0)
        self.widths = list(widths)
        self.activation = activation
        self.final_activation = final_activation
        self.name = name
        self.weights = []
        self.biases = []
        for li, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = li == len(widths) - 2
            if last and zero_init_last:
                w = np.zeros((w_in, w_out), dtype=np.float32)
            else:
                w = glorot_uniform(rng, w_in, w_out)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(w_out, dtype=np.float32),
                                      requires_grad=True))

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        act = _ACTIVATIONS[self.activation]
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = T.add(T.matmul(x, w), b)
            if li < len(self.weights) - 1:
                x = act(x)
            else:
                x = _ACTIVATIONS[self.final_activation](x)
        return x

    def parameters(self):
        out = []
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{self.name}.w{li}", w))
            out.append((f"{self.name}.b{li}", b))
        return out

    def num_parameters(self):
        return sum(p.size for _, p in self.parameters())
