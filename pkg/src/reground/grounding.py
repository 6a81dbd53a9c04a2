"""Grounding tokens: Fourier box embedding + label embedding fused by a small MLP.

A grounding token is built from one ``(box, label)`` pair::

    g = MLP(concat(label_embedding(label), fourier(box)))

The Fourier embedding follows the NeRF convention: for every coordinate ``u``
and band ``k`` it emits ``sin(2^k * pi * u)`` and ``cos(2^k * pi * u)``, laid
out coordinate-major, band-minor, sin before cos.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import CapacityError, InvalidBoxError, ShapeError, VocabularyError

DEFAULT_NUM_BANDS = 8
DEFAULT_MAX_BOXES = 30


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates (top-left, bottom-right)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) and 0.0 <= c <= 1.0 for c in coords):
            raise InvalidBoxError(f"box coordinates must lie in [0, 1], got {coords}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise InvalidBoxError(f"box corners out of order: {coords}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0.0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0.0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class LayoutEntry:
    box: BoundingBox
    label: str


@dataclass(frozen=True)
class LayoutSpec:
    """Ordered (box, label) pairs for one image."""

    entries: tuple[LayoutEntry, ...] = ()

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Sequence[float], str]]) -> "LayoutSpec":
        return cls(tuple(LayoutEntry(BoundingBox(*box), label) for box, label in pairs))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    def subset(self, indices: Iterable[int]) -> "LayoutSpec":
        return LayoutSpec(tuple(self.entries[i] for i in indices))

    def to_records(self) -> list[dict]:
        return [{"label": e.label, "box": list(e.box.as_tuple())} for e in self.entries]

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "LayoutSpec":
        entries = []
        for i, rec in enumerate(records):
            if set(rec) != {"label", "box"}:
                raise ValueError(f"layout entry {i}: expected keys 'label' and 'box', got {sorted(rec)}")
            if len(rec["box"]) != 4:
                raise InvalidBoxError(f"layout entry {i}: box needs 4 coordinates")
            entries.append(LayoutEntry(BoundingBox(*map(float, rec["box"])), str(rec["label"])))
        return cls(tuple(entries))

    def to_json(self) -> str:
        return json.dumps(self.to_records(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "LayoutSpec":
        return cls.from_records(json.loads(text))


def _box_coords(box) -> tuple[float, float, float, float]:
    if isinstance(box, BoundingBox):
        return box.as_tuple()
    # validates on construction
    return BoundingBox(*map(float, box)).as_tuple()


def fourier_features(coords: torch.Tensor, num_bands: int) -> torch.Tensor:
    """Vectorized Fourier embedding of ``(..., 4)`` coordinates -> ``(..., 8 * num_bands)``."""
    if num_bands < 1:
        raise ValueError("num_bands must be >= 1")
    freqs = (2.0 ** torch.arange(num_bands, dtype=coords.dtype, device=coords.device)) * math.pi
    angles = coords.unsqueeze(-1) * freqs  # (..., 4, bands)
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., 4, bands, 2)
    return out.flatten(-3)


def fourier_embed(box, num_bands: int = DEFAULT_NUM_BANDS, dtype=torch.float64) -> torch.Tensor:
    """Fourier embedding of a single box; raises ``InvalidBoxError`` for invalid boxes."""
    coords = torch.tensor(_box_coords(box), dtype=dtype)
    return fourier_features(coords, num_bands)


class LabelEncoder:
    """Fixed random embedding table standing in for a text encoder.

    Rows are drawn from a seeded Gaussian and normalized to unit length, so the
    same (vocabulary, dim, seed) triple always yields the same table.
    """

    def __init__(self, vocabulary: Sequence[str], dim: int = 32, seed: int = 0):
        if len(set(vocabulary)) != len(vocabulary):
            raise ValueError("vocabulary contains duplicate labels")
        self.vocabulary = list(vocabulary)
        self.dim = dim
        self.seed = seed
        self._index = {label: i for i, label in enumerate(self.vocabulary)}
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((len(self.vocabulary), dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        self.table = torch.from_numpy(table)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise VocabularyError(f"label {label!r} is not in the vocabulary") from None

    def __contains__(self, label: str) -> bool:
        return label in self._index


def encode_label(encoder: LabelEncoder, label: str, dtype=torch.float64) -> torch.Tensor:
    return encoder.table[encoder.index(label)].to(dtype).clone()


class FusionMLP(nn.Module):
    """Two-layer MLP fusing label and box embeddings into a grounding token."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, activation: str = "silu"):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        if activation == "silu":
            self.act = nn.SiLU()
        elif activation == "identity":
            self.act = nn.Identity()
        else:
            raise ValueError(f"unsupported activation {activation!r}")

    @property
    def in_dim(self) -> int:
        return self.fc1.in_features

    @property
    def out_dim(self) -> int:
        return self.fc2.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


def make_grounding_token(mlp: FusionMLP, label_emb: torch.Tensor, box_emb: torch.Tensor) -> torch.Tensor:
    if label_emb.shape[-1] + box_emb.shape[-1] != mlp.in_dim:
        raise ShapeError(
            f"label ({label_emb.shape[-1]}) + box ({box_emb.shape[-1]}) dims != MLP input {mlp.in_dim}"
        )
    return mlp(torch.cat([label_emb, box_emb], dim=-1))


def build_tokens(
    encoder: LabelEncoder,
    mlp: FusionMLP,
    layout: LayoutSpec,
    num_bands: int = DEFAULT_NUM_BANDS,
    max_boxes: int = DEFAULT_MAX_BOXES,
) -> torch.Tensor:
    """Grounding tokens for every layout entry, as an ``(M, d_model)`` tensor."""
    if len(layout) > max_boxes:
        raise CapacityError(f"layout has {len(layout)} boxes, limit is {max_boxes}")
    dtype = mlp.fc1.weight.dtype
    if len(layout) == 0:
        return torch.zeros(0, mlp.out_dim, dtype=dtype)
    tokens = []
    for i, entry in enumerate(layout):
        try:
            g = make_grounding_token(
                mlp, encode_label(encoder, entry.label, dtype), fourier_embed(entry.box, num_bands, dtype)
            )
        except (VocabularyError, ShapeError) as exc:
            raise type(exc)(f"layout entry {i}: {exc}") from exc
        tokens.append(g)
    return torch.stack(tokens)


class GroundingNet(nn.Module):
    """Batched grounding-token builder used inside the denoiser.

    The label table stays outside the module (it is fixed by the encoder seed);
    only the fusion MLP trains.
    """

    def __init__(
        self,
        encoder: LabelEncoder,
        d_model: int,
        num_bands: int = DEFAULT_NUM_BANDS,
        max_boxes: int = DEFAULT_MAX_BOXES,
        activation: str = "silu",
    ):
        super().__init__()
        self.encoder = encoder
        self.num_bands = num_bands
        self.max_boxes = max_boxes
        self.mlp = FusionMLP(encoder.dim + 8 * num_bands, d_model, d_model, activation)

    def forward(self, layouts: Sequence[LayoutSpec]) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(tokens (B, M_max, d), mask (B, M_max))``; ``mask`` marks real entries."""
        dtype = self.mlp.fc1.weight.dtype
        m_max = max((len(lay) for lay in layouts), default=0)
        if m_max > self.max_boxes:
            raise CapacityError(f"layout has {m_max} boxes, limit is {self.max_boxes}")
        B = len(layouts)
        idx = torch.zeros(B, m_max, dtype=torch.long)
        coords = torch.zeros(B, m_max, 4, dtype=dtype)
        mask = torch.zeros(B, m_max, dtype=torch.bool)
        for b, lay in enumerate(layouts):
            for i, entry in enumerate(lay):
                try:
                    idx[b, i] = self.encoder.index(entry.label)
                except VocabularyError as exc:
                    raise VocabularyError(f"layout {b} entry {i}: {exc}") from None
                coords[b, i] = torch.tensor(entry.box.as_tuple(), dtype=dtype)
                mask[b, i] = True
        label_emb = self.encoder.table.to(dtype)[idx]
        tokens = make_grounding_token(self.mlp, label_emb, fourier_features(coords, self.num_bands))
        return tokens, mask
