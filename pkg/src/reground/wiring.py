"""U-Net-style layers wiring residual block, SA, GSA and CA under a selectable dataflow.

Per layer, with ``F_RN = F + Conv(F)`` and ``F_SA = F_RN + SA(F_RN)``:

* ``baseline``:   ``F_SA + CA(F_SA)``
* ``sequential``: ``F_GSA = F_SA + beta * GSA(F_SA)``; ``F_GSA + CA(F_GSA)``
* ``parallel``:   ``beta * GSA(F_SA) + CA(F_SA) + F_SA``
* ``no_ca``:      ``F_GSA`` (cross-attention removed)

The mode is a runtime argument; it never changes the parameter set, so a net
trained sequentially can be rewired to parallel at inference.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as Fn

from .attention import CrossAttention, GatedSelfAttention, SelfAttention
from .errors import ConfigError, ScheduleError, ShapeError
from .grounding import GroundingNet, LabelEncoder, LayoutSpec
from .noise import NoiseSchedule
from .scenes import LABELS, VOCAB_SIZE


class WiringMode(str, Enum):
    BASELINE = "baseline"
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"
    NO_CROSS_ATTENTION = "no_ca"

    @classmethod
    def parse(cls, value) -> "WiringMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown wiring mode {value!r}; choose from {[m.value for m in cls]}") from None

    @property
    def uses_gsa(self) -> bool:
        return self is not WiringMode.BASELINE

    @property
    def uses_ca(self) -> bool:
        return self is not WiringMode.NO_CROSS_ATTENTION


GROUNDED_MODES = (WiringMode.SEQUENTIAL, WiringMode.PARALLEL, WiringMode.NO_CROSS_ATTENTION)


@dataclass(frozen=True)
class ScheduleConfig:
    """Scheduled sampling: GSA is active for the first ``gamma`` fraction of sampler steps."""

    gamma: float = 1.0
    total_steps: int = 50

    def __post_init__(self):
        if not (isinstance(self.gamma, (int, float)) and 0.0 <= self.gamma <= 1.0):
            raise ScheduleError(f"gamma must lie in [0, 1], got {self.gamma!r}")
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise ScheduleError(f"total_steps must be a positive integer, got {self.total_steps!r}")

    @property
    def active_steps(self) -> int:
        # rounding guards products like 0.1 * 30 = 3.0000000000000004
        return math.ceil(round(self.gamma * self.total_steps, 9))


def beta_at(schedule: ScheduleConfig, step_index: int) -> int:
    """GSA weight at sampler step ``step_index`` (0 = first, noisiest step)."""
    if not 0 <= step_index < schedule.total_steps:
        raise ScheduleError(f"step {step_index} outside [0, {schedule.total_steps})")
    return 1 if step_index < schedule.active_steps else 0


def sampler_timesteps(train_steps: int, sampler_steps: int) -> np.ndarray:
    """Training timesteps visited by the sampler, noisiest first."""
    if sampler_steps > train_steps:
        raise ScheduleError(f"sampler_steps={sampler_steps} exceeds train_steps={train_steps}")
    return np.round(np.linspace(train_steps - 1, 0, sampler_steps)).astype(np.int64)


@dataclass
class LayerState:
    """Read-only snapshots of one layer's intermediate features (token form)."""

    F_RN: torch.Tensor
    F_SA: torch.Tensor
    F_GSA: torch.Tensor | None = None


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    d_model: int = 64
    d_text: int = 32
    label_dim: int = 32
    layers: int = 3
    heads: int = 1
    num_bands: int = 8
    max_boxes: int = 30
    train_steps: int = 200
    label_seed: int = 0
    mlp_activation: str = "silu"
    sigma_data: float = 0.5
    decoder_channels: int = 16

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be a multiple of patch_size")
        if self.d_model % 4:
            raise ConfigError("d_model must be a multiple of 4 (2-D sinusoidal position code)")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.decoder_channels < 1:
            raise ConfigError("decoder_channels must be >= 1")
        if not self.sigma_data > 0:
            raise ConfigError("sigma_data must be > 0")

    @property
    def grid(self) -> int:
        """Side length of the token grid every layer runs at."""
        return self.image_size // self.patch_size

    @classmethod
    def from_dict(cls, data: dict) -> "DenoiserConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown DenoiserConfig keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def position_code(grid: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal code, ``(grid*grid, dim)`` in row-major token order."""
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1)))
    pos = torch.arange(grid, dtype=torch.float64)
    ang = pos[:, None] * freqs[None, :]  # (grid, quarter)
    row = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)  # (grid, dim/2)
    code = torch.cat(
        [row[:, None, :].expand(grid, grid, -1), row[None, :, :].expand(grid, grid, -1)], dim=-1
    )  # y-code then x-code
    return code.reshape(grid * grid, dim).to(dtype)


def tokens_from_spatial(x: torch.Tensor) -> torch.Tensor:
    """``(B, d, h, w)`` -> ``(B, h*w, d)``, row-major."""
    return x.flatten(2).transpose(1, 2)


def spatial_from_tokens(x: torch.Tensor, grid: int) -> torch.Tensor:
    return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], grid, grid)


def timestep_code(steps: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal ``(steps, dim)`` code used to initialise the learned time table."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    ang = torch.arange(steps, dtype=torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1).to(dtype)


class ResidualBlock(nn.Module):
    """``F + Conv3x3(SiLU(Norm(F) + temb))`` on the spatial grid."""

    def __init__(self, d_model: int):
        super().__init__()
        self.norm = nn.GroupNorm(1, d_model)
        self.conv = nn.Conv2d(d_model, d_model, 3, padding=1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm(x)
        if temb is not None:
            h = h + temb[:, :, None, None]
        return x + self.conv(Fn.silu(h))


class DenoiserLayer(nn.Module):
    def __init__(self, config: DenoiserConfig, grounded: bool = True):
        super().__init__()
        d = config.d_model
        self.grid = config.grid
        self.rn = ResidualBlock(d)
        self.sa = SelfAttention(d, heads=config.heads)
        self.gsa = GatedSelfAttention(d, heads=config.heads) if grounded else None
        self.ca = CrossAttention(d, config.d_text, heads=config.heads)

    def forward(
        self,
        F_in: torch.Tensor,
        c: torch.Tensor,
        G: torch.Tensor | None = None,
        g_mask: torch.Tensor | None = None,
        beta: float = 1,
        mode: WiringMode | str = WiringMode.SEQUENTIAL,
        temb: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, LayerState]:
        """One layer on token features ``(B, N, d)`` (or unbatched ``(N, d)``)."""
        mode = WiringMode.parse(mode)
        if mode.uses_gsa and self.gsa is None:
            raise ConfigError(f"mode {mode.value!r} needs gated self-attention, but this net has none")
        unbatched = F_in.dim() == 2
        if unbatched:
            F_in, c = F_in[None], c[None]
            G = None if G is None else G[None]
            g_mask = None if g_mask is None else g_mask[None]
        if F_in.shape[1] != self.grid * self.grid:
            raise ShapeError(f"expected {self.grid * self.grid} tokens, got {F_in.shape[1]}")

        F_RN = tokens_from_spatial(self.rn(spatial_from_tokens(F_in, self.grid), temb))
        F_SA = self.sa(F_RN) + F_RN
        state = LayerState(F_RN, F_SA)

        if mode is WiringMode.BASELINE or beta == 0:
            gsa_term = None
        else:
            gsa_term = beta * self.gsa(F_SA, G, g_mask)

        if mode is WiringMode.PARALLEL:
            state.F_GSA = F_SA if gsa_term is None else gsa_term + F_SA
            ca_term = self.ca(F_SA, c)
            out = ca_term + F_SA if gsa_term is None else gsa_term + ca_term + F_SA
        else:
            F_GSA = F_SA if gsa_term is None else gsa_term + F_SA
            if mode is not WiringMode.BASELINE:
                state.F_GSA = F_GSA
            out = F_GSA if mode is WiringMode.NO_CROSS_ATTENTION else self.ca(F_GSA, c) + F_GSA

        if unbatched:
            out = out[0]
            state = LayerState(*(None if s is None else s[0] for s in (state.F_RN, state.F_SA, state.F_GSA)))
        return out, state


def layer_forward(params: DenoiserLayer, F_in, c, G=None, beta=1, mode=WiringMode.SEQUENTIAL, g_mask=None, temb=None):
    return params(F_in, c, G, g_mask, beta, mode, temb)


class Denoiser(nn.Module):
    """Flat stack of same-resolution layers predicting noise from ``x_t``.

    Pixels are patchified into a ``grid x grid`` token map, run through
    ``config.layers`` wired layers and unpatchified back to pixel space, where
    two 3x3 convolutions merge them with a 3x3 encoding of ``x_t``.
    ``grounded=False`` builds the base net without any GSA or grounding MLP.

    The head output ``F`` is wrapped as ``eps = c_skip(t) x_t + c_out(t) F``
    with fixed coefficients from the noise schedule, so the layers only learn
    the part of the noise that ``x_t`` does not already reveal.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), grounded: bool = True):
        super().__init__()
        self.config = config
        self.grounded = grounded
        d, p = config.d_model, config.patch_size
        self.stem = nn.Conv2d(config.channels, d, p, stride=p)
        self.time_embed = nn.Embedding(config.train_steps, d)
        with torch.no_grad():
            # learned per-step table, started from a smooth code so nearby steps share structure
            self.time_embed.weight.copy_(timestep_code(config.train_steps, d))
        self.prompt_embed = nn.Embedding(VOCAB_SIZE, config.d_text)
        self.layers = nn.ModuleList(DenoiserLayer(config, grounded) for _ in range(config.layers))
        self.out_norm = nn.GroupNorm(1, d)
        # thin full-resolution path: token features are unpatchified and merged with a
        # 3x3 encoding of x_t, so local denoising does not have to pass through patches
        dc = config.decoder_channels
        self.pixel_in = nn.Conv2d(config.channels, dc, 3, padding=1)
        self.unpatch = nn.Conv2d(d, dc * p * p, 1)
        self.refine = nn.Conv2d(2 * dc, dc, 3, padding=1)
        self.head = nn.Conv2d(dc, config.channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        c_skip, c_out = NoiseSchedule(config.train_steps).preconditioning(config.sigma_data)
        self.register_buffer("c_skip", torch.from_numpy(c_skip), persistent=False)
        self.register_buffer("c_out", torch.from_numpy(c_out), persistent=False)
        if grounded:
            encoder = LabelEncoder(LABELS, config.label_dim, config.label_seed)
            self.grounding = GroundingNet(encoder, d, config.num_bands, config.max_boxes, config.mlp_activation)
        else:
            self.grounding = None

    def ground(self, layouts: Sequence[LayoutSpec]) -> tuple[torch.Tensor, torch.Tensor]:
        if self.grounding is None:
            raise ConfigError("base net has no grounding tokenizer")
        return self.grounding(layouts)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        prompt: torch.Tensor,
        tokens: tuple[torch.Tensor, torch.Tensor] | None = None,
        beta: float = 1,
        mode: WiringMode | str = WiringMode.SEQUENTIAL,
        return_states: bool = False,
    ):
        """``x_t (B, C, H, W)``, ``t (B,)`` training timesteps, ``prompt (B, S)`` token ids.

        ``tokens`` is the ``(G, mask)`` pair from :meth:`ground`.
        """
        mode = WiringMode.parse(mode)
        cfg = self.config
        if x_t.dim() != 4 or tuple(x_t.shape[1:]) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"x_t must be (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {tuple(x_t.shape)}"
            )
        G, g_mask = tokens if tokens is not None else (None, None)
        c = self.prompt_embed(prompt)
        temb = self.time_embed(t)
        pos = position_code(cfg.grid, cfg.d_model, x_t.dtype)
        F = tokens_from_spatial(self.stem(x_t))
        states = []
        for layer in self.layers:
            # re-added at every layer so location survives noisy content for the grounding tokens
            F, st = layer(F + pos, c, G, g_mask, beta, mode, temb)
            states.append(st)
        h = Fn.silu(self.out_norm(spatial_from_tokens(F, cfg.grid)))
        pix = torch.cat([Fn.pixel_shuffle(self.unpatch(h), cfg.patch_size), self.pixel_in(x_t)], dim=1)
        out = self.head(Fn.silu(self.refine(Fn.silu(pix))))
        # schedule coefficients follow the input dtype
        c_skip = self.c_skip.to(x_t.dtype)[t].view(-1, 1, 1, 1)
        c_out = self.c_out.to(x_t.dtype)[t].view(-1, 1, 1, 1)
        eps = c_skip * x_t + c_out * out
        return (eps, states) if return_states else eps

    def base_parameters(self):
        return [p for n, p in self.named_parameters() if not is_grounding_param(n)]

    def grounding_parameters(self):
        return [p for n, p in self.named_parameters() if is_grounding_param(n)]


def is_grounding_param(name: str) -> bool:
    return name.startswith("grounding.") or ".gsa." in name


def denoiser_forward(
    net: Denoiser,
    x_t: torch.Tensor,
    step_index: int,
    c: torch.Tensor,
    layouts: Sequence[LayoutSpec] | LayoutSpec | None,
    schedule: ScheduleConfig,
    mode: WiringMode | str,
    timestep: int | None = None,
    return_states: bool = False,
):
    """Noise prediction at sampler step ``step_index`` with the scheduled GSA weight.

    ``timestep`` defaults to the training timestep the sampler visits at that step.
    """
    beta = beta_at(schedule, step_index)
    if timestep is None:
        timestep = int(sampler_timesteps(net.config.train_steps, schedule.total_steps)[step_index])
    if isinstance(layouts, LayoutSpec):
        layouts = [layouts] * x_t.shape[0]
    mode = WiringMode.parse(mode)
    tokens = net.ground(layouts) if (net.grounded and mode.uses_gsa and layouts is not None) else None
    t = torch.full((x_t.shape[0],), timestep, dtype=torch.long)
    return net(x_t, t, c, tokens, beta, mode, return_states)


def parameter_manifest(net: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    """Sorted ``(name, shape)`` of every learnable tensor."""
    return sorted((name, tuple(p.shape)) for name, p in net.named_parameters())


def parameter_checksum(net: nn.Module, names: Sequence[str] | None = None) -> str:
    """SHA-256 over parameter names and raw bytes, in sorted-name order."""
    params = dict(net.named_parameters())
    h = hashlib.sha256()
    for name in sorted(params if names is None else names):
        h.update(name.encode())
        h.update(params[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
