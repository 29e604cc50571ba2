"""L-infinity PGD against an arbitrary differentiable loss over the input.

The attack owns no model state: the caller supplies a loss closure built over
frozen parameters, so gradients can only reach the input. Returned examples
satisfy the epsilon ball and pixel bounds exactly (float32, no tolerance).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .contrastive import nt_xent
from .model import BranchMode, ModelParams, encoder_forward, projection_forward
from . import tensor as T
from .tensor import Tensor

PIXEL_EPS = 8.0 / 255.0
PIXEL_STEP = 2.0 / 255.0


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = PIXEL_EPS
    step_size: float = PIXEL_STEP
    steps: int = 5
    random_start: bool = True
    bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be positive when steps > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.bounds[0] >= self.bounds[1]:
            raise ValueError(f"invalid bounds {self.bounds}")

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "step_size": self.step_size, "steps": self.steps,
                "random_start": self.random_start, "bounds": list(self.bounds)}

    @staticmethod
    def from_dict(d: dict) -> "AttackConfig":
        return AttackConfig(epsilon=d["epsilon"], step_size=d["step_size"], steps=d["steps"],
                            random_start=d["random_start"], bounds=tuple(d["bounds"]))


def pretrain_attack_config() -> AttackConfig:
    return AttackConfig(steps=5)


def eval_attack_config() -> AttackConfig:
    return AttackConfig(steps=20)


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Elementwise clamp to [-epsilon, epsilon]; idempotent."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    return np.clip(delta, -np.float32(epsilon), np.float32(epsilon))


def _enforce_feasible(x_adv: np.ndarray, x: np.ndarray, epsilon: float,
                      bounds: tuple) -> np.ndarray:
    """Make the float32 residual x_adv - x satisfy |.| <= eps bit-exactly.

    Rounding in x + clip(x_adv - x) can leave the recomputed residual one ulp
    outside the ball, so nudge offending entries toward x until it holds.
    """
    eps = np.float32(epsilon)
    x_adv = np.clip(x_adv, np.float32(bounds[0]), np.float32(bounds[1]))
    for _ in range(4):
        resid = x_adv - x
        bad = np.abs(resid) > eps
        if not bad.any():
            return x_adv
        x_adv = x_adv.copy()
        x_adv[bad] = np.nextafter(x_adv[bad], x[bad])
    raise RuntimeError("pgd_attack: could not restore linf feasibility")


def pgd_attack(loss_fn: Callable[[Tensor], Tensor], x: np.ndarray, cfg: AttackConfig,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Iterated signed-gradient ascent with projection after every step.

    loss_fn maps an input Tensor to a scalar loss Tensor; it must be built
    over frozen parameters. With epsilon == 0 the input is returned unchanged.
    """
    x = np.asarray(x, dtype=np.float32)
    if cfg.epsilon == 0.0:
        return x.copy()
    if cfg.random_start:
        if rng is None:
            raise ValueError("pgd_attack: random_start needs an rng")
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(np.float32)
    else:
        delta = np.zeros_like(x)
    x_adv = _enforce_feasible(x + delta, x, cfg.epsilon, cfg.bounds)

    step = np.float32(cfg.step_size)
    for _ in range(cfg.steps):
        xt = Tensor(x_adv, requires_grad=True)
        loss = loss_fn(xt)
        T.backward(loss)
        if xt.grad is None:
            break  # loss does not depend on the input; nothing to ascend
        g = xt.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("pgd_attack: non-finite input gradient")
        x_adv = x_adv + step * np.sign(g)
        delta = project_linf(x_adv - x, cfg.epsilon)
        x_adv = _enforce_feasible(x + delta, x, cfg.epsilon, cfg.bounds)
    return x_adv


def joint_contrastive_attack(params: ModelParams, view_i: np.ndarray, view_j: np.ndarray,
                             cfg: AttackConfig, temperature: float,
                             rng: Optional[np.random.Generator] = None):
    """Perturb both views jointly to maximize their contrastive loss.

    One PGD run over the stacked (2N,...) batch: each step distributes
    gradients to both views and projects each perturbation onto its own ball.
    The adversarial BN branch is used with frozen running statistics, so
    attack iterations never touch model state.
    """
    n = view_i.shape[0]
    frozen = params.view(trainable=False)

    def loss_fn(t: Tensor) -> Tensor:
        feats = encoder_forward(frozen, t, BranchMode.ADVERSARIAL, training=False)
        z = projection_forward(frozen, feats)
        zi = T.narrow(z, 0, 0, n)
        zj = T.narrow(z, 0, n, n)
        return nt_xent(T.interleave_rows(zi, zj), temperature)

    stacked = np.concatenate([view_i, view_j], axis=0)
    adv = pgd_attack(loss_fn, stacked, cfg, rng)
    return adv[:n], adv[n:]
