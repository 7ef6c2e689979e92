"""Adam optimizer, global-norm gradient clipping, and the analytic-vs-
finite-difference gradient checker."""

from __future__ import annotations

import math

import numpy as np

from rakugo_tts.autodiff import Tensor, no_grad


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Parameters without gradients are skipped.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    """Adam with bias correction; epsilon is added outside the square root.

    ``clip_norm`` (optional) applies global-norm gradient clipping before
    each update; the training pipeline turns it on by default.
    """

    def __init__(self, params: list[Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        if self.clip_norm is not None:
            clip_global_norm(self.params, self.clip_norm)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
                if g.shape != p.data.shape:
                    raise ValueError(
                        f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "lr": self.lr,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")
        for ours, theirs in zip(self.m, state["m"]):
            if ours.shape != theirs.shape:
                raise ValueError("optimizer state shapes do not match parameters")
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        self.m = [m.copy() for m in state["m"]]
        self.v = [v.copy() for v in state["v"]]


def grad_check(loss_fn, params: list[Tensor], eps: float = 1e-5,
               max_entries_per_param: int | None = None, seed: int = 0) -> float:
    """Worst relative error between backward-pass and central-difference
    gradients of the scalar loss returned by ``loss_fn()``.

    The check demands double precision and a deterministic loss (disable
    dropout/zoneout draws before calling). ``max_entries_per_param`` limits
    the finite-difference probes to a seeded random subset per parameter,
    which keeps large sweeps inside a time budget. Returns 0.0 when there is
    nothing to check.
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        return 0.0
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("gradient checking requires float64 parameters")

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def probe(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            hi = float(loss_fn().data)
        flat[i] = orig - step
        with no_grad():
            lo = float(loss_fn().data)
        flat[i] = orig
        return (hi - lo) / (2.0 * step)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            indices = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        for i in indices:
            fd1 = probe(flat, i, eps)
            fd2 = probe(flat, i, eps / 2.0)
            # two step sizes must agree; a probe straddling a kink (ReLU at
            # zero) makes the finite difference itself meaningless, so such
            # probes carry no information about the backward pass
            if abs(fd1 - fd2) / max(abs(fd1), abs(fd2), 1e-8) > 1e-3:
                continue
            # score against the better-agreeing step size: the two estimates
            # bracket the roundoff floor, and a wrong backward pass would
            # disagree with both
            err = min(
                abs(a_flat[i] - fd) / max(abs(a_flat[i]), abs(fd), 1e-8)
                for fd in (fd1, fd2)
            )
            worst = max(worst, err)
    return worst
