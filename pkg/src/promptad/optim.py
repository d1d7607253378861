"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict,
               lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place AdamW update over parallel lists of arrays.

    ``state`` holds first/second moment lists under "m"/"v" and the shared
    step counter "t". Weight decay is decoupled: it shrinks the parameters
    directly and never enters the moment estimates.
    """
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    for p, g, m in zip(params, grads, state["m"]):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"optimizer state shape mismatch: {p.shape} vs {g.shape}")
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p -= lr * mhat / (np.sqrt(vhat) + eps)
        if weight_decay:
            p -= lr * weight_decay * p


def clip_grad_norm(tensors: list[Tensor], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad *= factor
    return norm


class AdamW:
    """Optimizer over an ordered mapping of named parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        tensors = list(self.params.values())
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in tensors]
        adamw_step([p.data for p in tensors], grads, self.state,
                   lr if lr is not None else self.lr,
                   self.beta1, self.beta2, self.eps, self.weight_decay)

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of moments and step count, for checkpoints."""
        out: dict[str, np.ndarray] = {"opt/t": np.array([float(self.state.get("t", 0))])}
        if self.state:
            for name, m, v in zip(self.params, self.state["m"], self.state["v"]):
                out[f"opt/m/{name}"] = m
                out[f"opt/v/{name}"] = v
        return out

    def load_state_tensors(self, blobs: dict[str, np.ndarray]) -> None:
        t = int(round(float(blobs["opt/t"][0])))
        if t == 0:
            self.state = {}
            return
        self.state = {
            "t": t,
            "m": [blobs[f"opt/m/{name}"].reshape(p.shape).astype(p.data.dtype)
                  for name, p in self.params.items()],
            "v": [blobs[f"opt/v/{name}"].reshape(p.shape).astype(p.data.dtype)
                  for name, p in self.params.items()],
        }
