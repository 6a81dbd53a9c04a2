"""Synthetic shape scenes with a fixed prompt grammar.

A scene is a small RGB image with a flat background and 1-3 colored shapes.
Information is deliberately split between the two conditioning channels:

* the layout carries every shape's box and ``"<color> <kind>"`` label;
* the prompt carries the global style and background color, plus each
  shape's kind and (unless the shape is box-only) its color.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GenerationError, GrammarError
from .grounding import BoundingBox, LayoutSpec

PALETTE: dict[str, tuple[float, float, float]] = {
    "blue": (0.05, 0.10, 0.80),
    "red": (0.90, 0.10, 0.10),
    "magenta": (0.85, 0.25, 0.80),
    "green": (0.30, 0.85, 0.20),
    "cyan": (0.40, 0.95, 1.00),
    "yellow": (1.00, 0.95, 0.60),
}
COLORS = tuple(PALETTE)
KINDS = ("circle", "square", "triangle")
STYLES = ("color", "grayscale")
LUMA = np.array([0.299, 0.587, 0.114])

LABELS = tuple(f"{c} {k}" for c in COLORS for k in KINDS)

# prompt grammar: BOS STYLE BG SHAPE{1..3} EOS PAD*
SPECIALS = ("<pad>", "<bos>", "<eos>")
PAD, BOS, EOS = 0, 1, 2
MAX_SHAPES = 3
PROMPT_LEN = 3 + MAX_SHAPES + 1
TOKENS: tuple[str, ...] = (
    SPECIALS
    + tuple(f"style:{s}" for s in STYLES)
    + tuple(f"bg:{c}" for c in COLORS)
    + tuple(f"shape:{c}:{k}" for c in COLORS for k in KINDS)
    + tuple(f"shape:*:{k}" for k in KINDS)
)
TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)


def luminance(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) @ LUMA


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    box: BoundingBox

    @property
    def label(self) -> str:
        return f"{self.color} {self.kind}"


@dataclass(frozen=True)
class ToyPrompt:
    """Token-id sequence over ``TOKENS``, padded to ``PROMPT_LEN``."""

    tokens: tuple[int, ...]

    @classmethod
    def encode(cls, style: str, background: str, shapes: list[tuple[str | None, str]]) -> "ToyPrompt":
        if len(shapes) > MAX_SHAPES:
            raise GrammarError(f"at most {MAX_SHAPES} shapes fit in a prompt")
        words = [f"style:{style}", f"bg:{background}"]
        words += [f"shape:{'*' if color is None else color}:{kind}" for color, kind in shapes]
        try:
            ids = [BOS] + [TOKEN_ID[w] for w in words] + [EOS]
        except KeyError as exc:
            raise GrammarError(f"unknown prompt word {exc.args[0]!r}") from None
        return cls(tuple(ids + [PAD] * (PROMPT_LEN - len(ids))))

    def decode(self) -> tuple[str, str, list[tuple[str | None, str]]]:
        """Inverse of ``encode``: ``(style, background, [(color or None, kind), ...])``."""
        t = list(self.tokens)
        if len(t) != PROMPT_LEN or any(not 0 <= i < VOCAB_SIZE for i in t):
            raise GrammarError(f"prompt must be {PROMPT_LEN} valid token ids")
        if t[0] != BOS or EOS not in t:
            raise GrammarError("prompt must start with <bos> and contain <eos>")
        end = t.index(EOS)
        if any(i != PAD for i in t[end + 1:]):
            raise GrammarError("only padding may follow <eos>")
        words = [TOKENS[i] for i in t[1:end]]
        if len(words) < 2 or not words[0].startswith("style:") or not words[1].startswith("bg:"):
            raise GrammarError("prompt must open with a style word and a background word")
        shapes = []
        for w in words[2:]:
            parts = w.split(":")
            if parts[0] != "shape":
                raise GrammarError(f"unexpected word {w!r} in shape list")
            shapes.append((None if parts[1] == "*" else parts[1], parts[2]))
        return words[0][6:], words[1][3:], shapes

    def words(self) -> list[str]:
        return [TOKENS[i] for i in self.tokens if i != PAD]

    def attribute_count(self) -> int:
        _, _, shapes = self.decode()
        return 2 + sum(c is not None for c, _ in shapes)


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 32
    min_shapes: int = 1
    max_shapes: int = 3
    min_size: int = 8
    max_size: int = 14
    p_grayscale: float = 0.5
    p_boxonly: float = 0.3
    gap: int = 1
    max_retries: int = 20

    def __post_init__(self):
        if not 1 <= self.min_shapes <= self.max_shapes <= MAX_SHAPES:
            raise ValueError(f"need 1 <= min_shapes <= max_shapes <= {MAX_SHAPES}")
        if not 1 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("need 1 <= min_size <= max_size <= image_size")
        for name in ("p_grayscale", "p_boxonly"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class ToyScene:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    shapes: list[Shape]
    background: str
    style: str
    box_only: list[bool] = field(default_factory=list)

    @property
    def layout(self) -> LayoutSpec:
        return LayoutSpec.from_pairs((s.box.as_tuple(), s.label) for s in self.shapes)

    @property
    def prompt(self) -> ToyPrompt:
        return ToyPrompt.encode(
            self.style,
            self.background,
            [(None if hidden else s.color, s.kind) for s, hidden in zip(self.shapes, self.box_only)],
        )

    def to_record(self) -> dict:
        return {
            "background": self.background,
            "style": self.style,
            "shapes": [
                {"kind": s.kind, "color": s.color, "box": list(s.box.as_tuple()), "box_only": hidden}
                for s, hidden in zip(self.shapes, self.box_only)
            ],
        }

    @classmethod
    def from_record(cls, record: dict, image: np.ndarray | None = None, image_size: int = 32) -> "ToyScene":
        shapes = [Shape(s["kind"], s["color"], BoundingBox(*s["box"])) for s in record["shapes"]]
        box_only = [bool(s["box_only"]) for s in record["shapes"]]
        if image is None:
            image = render(shapes, record["background"], record["style"], image_size)
        return cls(image, shapes, record["background"], record["style"], box_only)


def shape_mask(kind: str, px: tuple[int, int, int, int], size: int) -> np.ndarray:
    """Boolean ``(size, size)`` mask of ``kind`` inscribed in pixel box ``(x0, y0, x1, y1)``."""
    x0, y0, x1, y1 = px
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    inside = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    w, h = x1 - x0, y1 - y0
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    if kind == "square":
        return inside
    if kind == "circle":
        return inside & (((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0)
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        return inside & (np.abs(xs - cx) <= (ys - y0) / h * (w / 2))
    raise ValueError(f"unknown shape kind {kind!r}")


def _pixel_box(box: BoundingBox, size: int) -> tuple[int, int, int, int]:
    return tuple(int(round(v * size)) for v in box.as_tuple())


def render(shapes: list[Shape], background: str, style: str, size: int = 32) -> np.ndarray:
    image = np.empty((size, size, 3))
    image[:] = PALETTE[background]
    for s in shapes:
        image[shape_mask(s.kind, _pixel_box(s.box, size), size)] = PALETTE[s.color]
    if style == "grayscale":
        image[:] = luminance(image)[..., None]
    return image


def _place_boxes(rng, n: int, config: SceneConfig, tries: int = 50):
    """Square pixel boxes with ``config.gap`` clearance, or None if placement got stuck."""
    size, g = config.image_size, config.gap
    placed = []
    for _ in range(n):
        for _try in range(tries):
            w = int(rng.integers(config.min_size, config.max_size + 1))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - w + 1))
            cand = (x0, y0, x0 + w, y0 + w)
            if all(
                cand[2] + g <= p[0] or p[2] + g <= cand[0] or cand[3] + g <= p[1] or p[3] + g <= cand[1]
                for p in placed
            ):
                placed.append(cand)
                break
        else:
            return None
    return placed


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> tuple[ToyScene, ToyPrompt, LayoutSpec]:
    """Deterministic scene, prompt and layout for ``seed``.

    Boxes are square, pixel-aligned and separated by at least ``config.gap``
    pixels so every shape is a separate connected component.
    """
    rng = np.random.default_rng(seed)
    size = config.image_size
    style = STYLES[int(rng.random() < config.p_grayscale)]
    background = COLORS[rng.integers(len(COLORS))]
    n = int(rng.integers(config.min_shapes, config.max_shapes + 1))

    placed: list[tuple[int, int, int, int]] = []
    for _attempt in range(config.max_retries):
        placed = _place_boxes(rng, n, config)
        if placed is not None:
            break
    else:
        raise GenerationError(f"seed {seed}: could not place {n} shapes after {config.max_retries} layouts")

    shapes, box_only = [], []
    for cand in placed:
        choices = [c for c in COLORS if c != background]
        color = choices[rng.integers(len(choices))]
        kind = KINDS[rng.integers(len(KINDS))]
        shapes.append(Shape(kind, color, BoundingBox(*(v / size for v in cand))))
        box_only.append(bool(rng.random() < config.p_boxonly))

    scene = ToyScene(render(shapes, background, style, size), shapes, background, style, box_only)
    return scene, scene.prompt, scene.layout


def scene_config_dict(config: SceneConfig) -> dict:
    return asdict(config)
