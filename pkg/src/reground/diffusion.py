"""Pixel-space DDPM machinery: noise schedule, two-phase training, ancestral sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as Fn

from .data import TensorDataset
from .errors import ConfigError, FrozenParameterError, ShapeError, TrainingError
from .grounding import LayoutSpec
from .noise import NoiseSchedule
from .scenes import ToyPrompt
from .seeding import derive_seed
from .wiring import (
    Denoiser,
    DenoiserConfig,
    ScheduleConfig,
    WiringMode,
    beta_at,
    is_grounding_param,
    parameter_checksum,
    sampler_timesteps,
)

log = logging.getLogger(__name__)


def add_noise(schedule: NoiseSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """Closed-form forward sample ``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``.

    ``t`` is an int or a ``(B,)`` tensor of per-sample timesteps.
    """
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.train_steps):
        raise ShapeError(f"timestep out of range [0, {schedule.train_steps})")
    a = torch.as_tensor(schedule.signal(t_arr), dtype=x0.dtype)
    s = torch.as_tensor(np.sqrt(schedule.variance(t_arr)), dtype=x0.dtype)
    if a.dim() == 1:
        a = a.view(-1, *([1] * (x0.dim() - 1)))
        s = s.view(-1, *([1] * (x0.dim() - 1)))
    return a * x0 + s * noise


LOSS_WEIGHTINGS = ("noise", "output")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 2e-3
    warmup: int = 100
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    heldout: int = 256
    # "noise": plain noise MSE; "output": noise MSE / c_out(t)^2, i.e. MSE on the network's raw output,
    # which keeps the noisiest steps (where the layout matters) from vanishing in the average
    weighting: str = "noise"

    def __post_init__(self):
        if self.weighting not in LOSS_WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {LOSS_WEIGHTINGS}, got {self.weighting!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainResult:
    net: Denoiser
    losses: list[tuple[int, float]] = field(default_factory=list)
    heldout: list[tuple[int, float]] = field(default_factory=list)
    base_checksum: str | None = None


def init_denoiser(config: DenoiserConfig, grounded: bool, seed: int) -> Denoiser:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = Denoiser(config, grounded=grounded)
    return net


def _heldout_batch(data: TensorDataset, n: int, seed: int, schedule: NoiseSchedule):
    g = torch.Generator().manual_seed(seed)
    n = min(n, len(data))
    idx = torch.arange(len(data) - n, len(data))
    t = torch.randint(0, schedule.train_steps, (n,), generator=g)
    noise = torch.randn(n, *data.images.shape[1:], generator=g)
    return idx, t, noise


def loss_weights(net: Denoiser, t: torch.Tensor, weighting: str) -> torch.Tensor | None:
    """Per-sample weights for the noise MSE, ``None`` for the unweighted loss."""
    if weighting == "noise":
        return None
    return 1.0 / net.c_out[t] ** 2


def noise_loss(net, schedule, data: TensorDataset, idx, t, noise, mode, grounded: bool,
               weighting: str = "noise") -> torch.Tensor:
    """Mean squared noise-prediction error, optionally weighted per sample."""
    x0 = data.images[idx]
    x_t = add_noise(schedule, x0, t, noise)
    tokens = net.ground([data.layouts[i] for i in idx.tolist()]) if grounded else None
    pred = net(x_t, t, data.prompts[idx], tokens, 1, mode)
    w = loss_weights(net, t, weighting)
    if w is None:
        return Fn.mse_loss(pred, noise)
    per_sample = (pred - noise).pow(2).flatten(1).mean(1)
    return (w.to(per_sample.dtype) * per_sample).mean()


def _run(net, params, data, schedule, cfg: TrainConfig, mode, grounded, tag) -> TrainResult:
    result = TrainResult(net)
    if cfg.steps == 0 or len(data) == 0:
        return result
    n_train = len(data) - min(cfg.heldout, len(data) // 4)
    h_idx, h_t, h_noise = _heldout_batch(data, len(data) - n_train, derive_seed(cfg.seed, tag, "heldout"), schedule)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / max(cfg.warmup, 1)) * 0.5 * (1 + math.cos(math.pi * s / cfg.steps))
    )
    g = torch.Generator().manual_seed(derive_seed(cfg.seed, tag, "batches"))

    def heldout_loss():
        if len(h_idx) == 0:
            return float("nan")
        net.eval()
        with torch.no_grad():
            val = noise_loss(net, schedule, data, h_idx, h_t, h_noise, mode, grounded, cfg.weighting).item()
        net.train()
        return val

    result.heldout.append((0, heldout_loss()))
    running = 0.0
    for step in range(1, cfg.steps + 1):
        idx = torch.randint(0, n_train, (cfg.batch_size,), generator=g)
        t = torch.randint(0, schedule.train_steps, (cfg.batch_size,), generator=g)
        noise = torch.randn(cfg.batch_size, *data.images.shape[1:], generator=g)
        loss = noise_loss(net, schedule, data, idx, t, noise, mode, grounded, cfg.weighting)
        if not torch.isfinite(loss):
            raise TrainingError(f"{tag} training diverged at step {step} (loss={loss.item()})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        sched.step()
        running += loss.item()
        if step % cfg.log_every == 0 or step == cfg.steps:
            k = cfg.log_every if step % cfg.log_every == 0 else step % cfg.log_every
            result.losses.append((step, running / k))
            running = 0.0
            result.heldout.append((step, heldout_loss()))
            log.info("%s step %d loss %.5f heldout %.5f", tag, step, result.losses[-1][1], result.heldout[-1][1])
    return result


def train_base(data: TensorDataset, config: DenoiserConfig, train: TrainConfig) -> TrainResult:
    """Train the base text-conditioned denoiser (no grounding modules)."""
    schedule = NoiseSchedule(config.train_steps)
    net = init_denoiser(config, grounded=False, seed=derive_seed(train.seed, "base", "init"))
    net.train()
    return _run(net, list(net.parameters()), data, schedule, train, WiringMode.BASELINE, False, "base")


def attach_grounding(base: Denoiser, seed: int) -> Denoiser:
    """Grounded net carrying ``base``'s weights and freshly initialised GSA/MLP."""
    net = init_denoiser(base.config, grounded=True, seed=seed)
    missing, unexpected = net.load_state_dict(base.state_dict(), strict=False)
    if unexpected or any(not is_grounding_param(k) for k in missing):
        raise ConfigError(f"base checkpoint does not match the grounded net: missing={missing} unexpected={unexpected}")
    return net


def train_gsa(base: Denoiser, data: TensorDataset, train: TrainConfig) -> TrainResult:
    """Train only GSA, gate and fusion-MLP parameters on top of a frozen base.

    Training runs in sequential wiring with the GSA always on. Raises
    ``FrozenParameterError`` if any base tensor changed.
    """
    net = attach_grounding(base, derive_seed(train.seed, "gsa", "init"))
    base_names = [n for n, _ in net.named_parameters() if not is_grounding_param(n)]
    before = parameter_checksum(net, base_names)
    for name, p in net.named_parameters():
        p.requires_grad_(is_grounding_param(name))
    net.train()
    result = _run(net, net.grounding_parameters(), data, NoiseSchedule(base.config.train_steps), train,
                  WiringMode.SEQUENTIAL, True, "gsa")
    after = parameter_checksum(net, base_names)
    if after != before:
        raise FrozenParameterError("base parameters changed during GSA training")
    for p in net.parameters():
        p.requires_grad_(True)
    result.base_checksum = after
    return result


def _as_prompt_tensor(prompts) -> torch.Tensor:
    if torch.is_tensor(prompts):
        return prompts.long()
    return torch.tensor([list(p.tokens) if isinstance(p, ToyPrompt) else list(p) for p in prompts], dtype=torch.long)


@torch.no_grad()
def sample_batch(
    net: Denoiser,
    prompts: Sequence[ToyPrompt] | torch.Tensor,
    layouts: Sequence[LayoutSpec],
    schedule: ScheduleConfig,
    mode: WiringMode | str,
    seeds: Sequence[int],
) -> np.ndarray:
    """Ancestral sampling of one image per seed; returns ``(B, H, W, 3)`` in [0, 1].

    Each image draws its starting noise and every per-step noise from its own
    seeded generator, so results do not depend on batch composition, ``gamma``
    or ``mode``.
    """
    mode = WiringMode.parse(mode)
    cfg = net.config
    c = _as_prompt_tensor(prompts)
    B = len(seeds)
    if c.shape[0] != B or len(layouts) != B:
        raise ShapeError("prompts, layouts and seeds must have equal length")
    if B == 0:
        return np.zeros((0, cfg.image_size, cfg.image_size, cfg.channels))
    dtype = next(net.parameters()).dtype
    noise_sched = NoiseSchedule(cfg.train_steps)
    ts = sampler_timesteps(cfg.train_steps, schedule.total_steps)
    abar = noise_sched.alphas_cumprod
    shape = (cfg.channels, cfg.image_size, cfg.image_size)
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    x = torch.stack([torch.randn(shape, generator=g, dtype=torch.float64) for g in gens]).to(dtype)
    tokens = net.ground(layouts) if (net.grounded and mode.uses_gsa) else None
    was_training = net.training
    net.eval()
    for i, t in enumerate(ts):
        beta = beta_at(schedule, i)
        a_t = abar[t]
        a_prev = abar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        eps = net(x, torch.full((B,), int(t), dtype=torch.long), c, tokens, beta, mode)
        x0 = ((x - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)).clamp(-1, 1)
        step_beta = 1 - a_t / a_prev
        mean = (math.sqrt(a_prev) * step_beta / (1 - a_t)) * x0 + (
            math.sqrt(1 - step_beta) * (1 - a_prev) / (1 - a_t)
        ) * x
        z = torch.stack([torch.randn(shape, generator=g, dtype=torch.float64) for g in gens]).to(dtype)
        if i + 1 < len(ts):
            var = step_beta * (1 - a_prev) / (1 - a_t)
            x = mean + math.sqrt(var) * z
        else:
            x = x0
    net.train(was_training)
    img = ((x.double() + 1) / 2).clamp(0, 1)
    return img.permute(0, 2, 3, 1).cpu().numpy()


def sample(net, prompt, layout, schedule: ScheduleConfig, mode, rng_seed: int) -> np.ndarray:
    """Single-image convenience wrapper around :func:`sample_batch`."""
    return sample_batch(net, [prompt], [layout], schedule, mode, [rng_seed])[0]


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
