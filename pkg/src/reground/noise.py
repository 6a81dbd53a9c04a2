"""Cosine variance schedule shared by the denoiser and the diffusion loop."""

from __future__ import annotations

import math

import numpy as np


class NoiseSchedule:
    """Cosine variance schedule over ``train_steps`` diffusion steps."""

    def __init__(self, train_steps: int = 200, max_beta: float = 0.999, offset: float = 0.008):
        if train_steps < 1:
            raise ValueError("train_steps must be >= 1")
        self.train_steps = train_steps
        f = lambda s: math.cos((s / train_steps + offset) / (1 + offset) * math.pi / 2) ** 2
        betas = [min(1 - f(i + 1) / f(i), max_beta) for i in range(train_steps)]
        self.betas = np.array(betas, dtype=np.float64)
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)

    def signal(self, t) -> np.ndarray:
        return np.sqrt(self.alphas_cumprod[t])

    def variance(self, t) -> np.ndarray:
        """Variance of ``x_t`` given ``x_0``: ``1 - prod(1 - beta)``."""
        return 1.0 - self.alphas_cumprod[t]

    def preconditioning(self, sigma_data: float) -> tuple[np.ndarray, np.ndarray]:
        """Per-step ``(c_skip, c_out)`` so that ``eps = c_skip * x_t + c_out * F``.

        ``c_skip * x_t`` is the best linear estimate of the noise when ``x_0``
        has per-pixel std ``sigma_data``; ``c_out`` is the std of what remains,
        so the learned residual ``F`` has unit scale at every step.
        """
        a = self.alphas_cumprod
        var_x = a * sigma_data**2 + 1.0 - a
        c_skip = np.sqrt(1.0 - a) / var_x
        c_out = np.sqrt(a * sigma_data**2 / var_x)
        return c_skip, c_out
