"""L-infinity PGD, optionally restricted to foreground pixels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffnet


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


@dataclass
class AdvResult:
    x_adv: np.ndarray
    adv_pred: np.ndarray
    clean_pred: np.ndarray
    loss: np.ndarray

    @property
    def flipped(self) -> np.ndarray:
        return self.adv_pred != self.clean_pred


def project_linf(x_adv, x, eps: float) -> np.ndarray:
    """Clamp ``x_adv`` into the eps-ball around ``x`` intersected with [0, 1]."""
    x_adv, x = np.asarray(x_adv, np.float64), np.asarray(x, np.float64)
    if x_adv.shape != x.shape:
        raise ValueError(f"shape mismatch {x_adv.shape} vs {x.shape}")
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def expand_mask(mask, x) -> np.ndarray:
    """Broadcast a per-pixel mask (N, H, W) or (H, W) over the channels of ``x``."""
    m = np.asarray(mask, bool)
    if m.shape == x.shape:
        return m
    if x.ndim == 4 and m.shape in ((x.shape[0],) + x.shape[2:], x.shape[2:]):
        m = m[:, None] if m.ndim == 3 else m[None, None]
        return np.broadcast_to(m, x.shape)
    raise ValueError(f"mask shape {m.shape} does not fit batch {x.shape}")


def pgd_perturb(model: diffnet.Model, x, y, cfg: AttackConfig = AttackConfig(),
                mask=None) -> np.ndarray:
    """Untargeted sign-gradient ascent on cross-entropy, projected every step.

    With ``mask`` the random start and every update are zeroed off-mask, so
    background pixels come back unchanged.
    """
    x = np.asarray(x, np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("inputs must lie in [0, 1]")
    m = None if mask is None else expand_mask(mask, x)
    eps = cfg.epsilon
    x_adv = x.copy()
    if eps == 0:
        return x_adv
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        noise = rng.uniform(-eps, eps, x.shape)
        if m is not None:
            noise = np.where(m, noise, 0.0)
        x_adv = project_linf(x + noise, x, eps)
    for _ in range(cfg.steps):
        _, grad, _ = diffnet.input_gradient(model, x_adv, y)
        step = cfg.step_size * np.sign(grad)
        if m is not None:
            step = np.where(m, step, 0.0)
        x_adv = project_linf(x_adv + step, x, eps)
    return x_adv


def pgd_attack(model: diffnet.Model, x, y, cfg: AttackConfig = AttackConfig(),
               mask=None) -> AdvResult:
    """Run :func:`pgd_perturb` and score clean and adversarial predictions."""
    x = np.asarray(x, np.float64)
    y = diffnet.check_labels(model, y, len(x))
    x_adv = pgd_perturb(model, x, y, cfg, mask)
    clean_logits = diffnet.forward(model, x)
    logits = diffnet.forward(model, x_adv) if cfg.epsilon > 0 else clean_logits
    losses = diffnet.cross_entropy(logits, y)
    return AdvResult(x_adv, logits.argmax(axis=1), clean_logits.argmax(axis=1), losses)
