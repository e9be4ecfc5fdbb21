"""SGD and Adam parameter updates over ParamSets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet, _require_same_names


@dataclass
class OptimizerState:
    """Per-worker optimizer state; never shared across clients."""

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def sgd(lr: float) -> OptimizerState:
    return OptimizerState(kind="sgd", lr=lr)


def adam(lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(kind="adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def make_optimizer(kind: str, lr: float) -> OptimizerState:
    return OptimizerState(kind=kind, lr=lr)


def apply_gradient_step(params: ParamSet, grads: ParamSet, opt: OptimizerState) -> ParamSet:
    """One optimizer step; returns new params and advances `opt` in place."""
    _require_same_names("apply_gradient_step", params, grads)
    for name in params:
        if params[name].shape != grads[name].shape:
            raise ValueError(
                f"apply_gradient_step: shape mismatch for {name!r}: "
                f"{params[name].shape} vs {grads[name].shape}"
            )
    opt.step += 1
    updated: dict[str, np.ndarray] = {}
    if opt.kind == "sgd":
        lr = np.float32(opt.lr)
        for name in params:
            updated[name] = params[name] - lr * grads[name]
        return ParamSet(updated)

    bias1 = 1.0 - opt.beta1**opt.step
    bias2 = 1.0 - opt.beta2**opt.step
    for name in params:
        g = grads[name]
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        opt.m[name] = m
        opt.v[name] = v
        m_hat = m / np.float32(bias1)
        v_hat = v / np.float32(bias2)
        updated[name] = params[name] - np.float32(opt.lr) * m_hat / (np.sqrt(v_hat) + np.float32(opt.eps))
    return ParamSet(updated)
