"""Adam optimizer with named parameter groups."""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam with bias correction.

    `groups` is a list of dicts: {"name": str, "params": [(name, Tensor)],
    "lr": float}.  Each group carries its own learning rate so the
    deformation module can run slower than the rest of the model.
    """

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = []
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        for g in groups:
            params = list(g["params"])
            self.groups.append({
                "name": g.get("name", "group"),
                "params": params,
                "lr": float(g["lr"]),
                "m": [np.zeros_like(p.data) for _, p in params],
                "v": [np.zeros_like(p.data) for _, p in params],
            })

    def zero_grad(self):
        for g in self.groups:
            for _, p in g["params"]:
                p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for g in self.groups:
            lr = g["lr"]
            for i, (pname, p) in enumerate(g["params"]):
                if p.grad is None:
                    grad = np.zeros_like(p.data)
                else:
                    grad = p.grad
                    if not np.all(np.isfinite(grad)):
                        raise FloatingPointError(
                            f"non-finite gradient in group '{g['name']}' "
                            f"parameter '{pname}'"
                        )
                m = g["m"][i]
                v = g["v"][i]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        """Flat view of moment buffers for checkpointing."""
        out = []
        for g in self.groups:
            for i, (pname, _) in enumerate(g["params"]):
                out.append((f"adam.{g['name']}.{pname}.m", g["m"][i]))
                out.append((f"adam.{g['name']}.{pname}.v", g["v"][i]))
        return out
