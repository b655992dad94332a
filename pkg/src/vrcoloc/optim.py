"""Adaptive-moment gradient descent over named parameter arrays."""
import numpy as np


class Adam:
    """Adam over a dict of named arrays.

    ``step`` is functional: it returns fresh parameter arrays and leaves the
    inputs untouched, which keeps frozen parameter sets safe to share.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
        return out

    def state_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t,
                "m": dict(self.m), "v": dict(self.v)}

    @classmethod
    def from_state(cls, state):
        opt = cls(state["lr"], state["beta1"], state["beta2"], state["eps"])
        opt.t = int(state["t"])
        opt.m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        opt.v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}
        return opt
