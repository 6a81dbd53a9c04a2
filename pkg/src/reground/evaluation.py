"""Oracle proxy metrics, category-level box dropping and the gamma/mode sweep.

The detector knows the scene palette, so on clean renders it is exact. It
segments each image by nearest palette colour (in luminance when the image is
grayscale), splits colour masks into 4-connected components and drops tiny
fragments. Two touching shapes of the same colour come out as one region.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .grounding import BoundingBox, LayoutSpec
from .scenes import COLORS, PALETTE, ToyPrompt, luminance

log = logging.getLogger(__name__)

PALETTE_RGB = np.array([PALETTE[c] for c in COLORS])
PALETTE_LUMA = luminance(PALETTE_RGB)

GRAY_THRESHOLD = 0.05  # mean per-pixel channel range below this => grayscale
RGB_TOLERANCE = 0.35  # pixels farther than this from every palette colour are unassigned
MIN_AREA = 8
CSV_HEADER = ("gamma", "mode", "spatial_mean", "textual_mean", "n_scenes", "seed_set")


@dataclass
class Region:
    mask: np.ndarray
    color: str
    kind: str
    box: BoundingBox

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def channel_spread(image: np.ndarray) -> float:
    image = np.asarray(image, dtype=np.float64)
    return float((image.max(axis=-1) - image.min(axis=-1)).mean())


def is_grayscale(image: np.ndarray, threshold: float = GRAY_THRESHOLD) -> bool:
    return channel_spread(image) < threshold


def _nearest_palette(image: np.ndarray, gray: bool) -> np.ndarray:
    """Per-pixel palette index, or -1 where no colour is close enough."""
    if gray:
        d = np.abs(luminance(image)[..., None] - PALETTE_LUMA)
        return d.argmin(-1)
    d = np.linalg.norm(image[..., None, :] - PALETTE_RGB, axis=-1)
    idx = d.argmin(-1)
    idx[d.min(-1) > RGB_TOLERANCE] = -1
    return idx


def estimate_background(image: np.ndarray) -> str:
    """Palette colour nearest to the per-channel median of the border pixels."""
    image = np.asarray(image, dtype=np.float64)
    border = np.concatenate([image[0], image[-1], image[1:-1, 0], image[1:-1, -1]])
    med = np.median(border, axis=0)
    if is_grayscale(image):
        return COLORS[int(np.abs(luminance(med) - PALETTE_LUMA).argmin())]
    return COLORS[int(np.linalg.norm(med - PALETTE_RGB, axis=-1).argmin())]


def guess_kind(mask: np.ndarray, box: tuple[int, int, int, int]) -> str:
    x0, y0, x1, y1 = box
    fill = mask.sum() / max((x1 - x0) * (y1 - y0), 1)
    if fill > 0.9:
        return "square"
    if fill > 0.64:
        return "circle"
    return "triangle"


def detect_shapes(image: np.ndarray, min_area: int = MIN_AREA) -> list[Region]:
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = image.shape[:2]
    idx = _nearest_palette(image, is_grayscale(image))
    bg = COLORS.index(estimate_background(image))
    regions = []
    for ci, color in enumerate(COLORS):
        if ci == bg:
            continue
        labels, n = ndimage.label(idx == ci)
        for j, sl in enumerate(ndimage.find_objects(labels), start=1):
            mask = labels == j
            if mask.sum() < min_area:
                continue
            px = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
            box = BoundingBox(px[0] / w, px[1] / h, px[2] / w, px[3] / h)
            regions.append(Region(mask, color, guess_kind(mask[sl], px), box))
    return regions


def spatial_score(image: np.ndarray, layout: LayoutSpec, iou_threshold: float = 0.5, regions=None):
    """Fraction of layout boxes matched by a same-coloured region at IoU >= threshold.

    Matching is greedy and one-to-one in descending IoU order. Returns ``None``
    for an empty layout.
    """
    if len(layout) == 0:
        return None
    if regions is None:
        regions = detect_shapes(image)
    pairs = []
    for i, entry in enumerate(layout):
        color = entry.label.split()[0]
        for j, r in enumerate(regions):
            if r.color == color:
                pairs.append((entry.box.iou(r.box), i, j))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    used_boxes, used_regions, hits = set(), set(), 0
    for iou, i, j in pairs:
        if i in used_boxes or j in used_regions:
            continue
        used_boxes.add(i)
        used_regions.add(j)
        if iou >= iou_threshold:
            hits += 1
    return hits / len(layout)


def textual_score(image: np.ndarray, prompt: ToyPrompt, regions=None) -> float:
    """Fraction of prompt-carried attributes visible in the image.

    Attributes: global style, background colour, and one entry per shape whose
    colour the prompt names (matched one-to-one against detected regions).
    """
    style, background, shapes = prompt.decode()
    if regions is None:
        regions = detect_shapes(image)
    checks = [is_grayscale(image) == (style == "grayscale"), estimate_background(image) == background]
    pool = [r.color for r in regions]
    for color, _kind in shapes:
        if color is None:
            continue
        if color in pool:
            pool.remove(color)
            checks.append(True)
        else:
            checks.append(False)
    return sum(checks) / len(checks)


def drop_boxes(layout: LayoutSpec, rng_seed: int, fraction: float = 0.5) -> LayoutSpec:
    """Remove every box of ``floor(k * fraction)`` randomly chosen label categories."""
    categories = list(dict.fromkeys(layout.labels))
    n_drop = int(np.floor(len(categories) * fraction))
    if n_drop == 0:
        return layout
    rng = np.random.default_rng(rng_seed)
    dropped = {categories[i] for i in rng.choice(len(categories), size=n_drop, replace=False)}
    return layout.subset(i for i, e in enumerate(layout) if e.label not in dropped)


@dataclass(frozen=True)
class TradeoffPoint:
    gamma: float
    mode: str
    spatial_mean: float
    textual_mean: float
    n_scenes: int
    seed_set: str

    def row(self) -> list[str]:
        return [f"{self.gamma:.6f}", self.mode, f"{self.spatial_mean:.6f}", f"{self.textual_mean:.6f}",
                str(self.n_scenes), self.seed_set]


@dataclass
class EvalScene:
    prompt: ToyPrompt
    layout: LayoutSpec
    seed: int
    name: str = ""


def score_images(images, scenes: Sequence[EvalScene], iou_threshold: float = 0.5):
    spatial, textual = [], []
    for img, sc in zip(images, scenes):
        regions = detect_shapes(img)
        spatial.append(spatial_score(img, sc.layout, iou_threshold, regions))
        textual.append(textual_score(img, sc.prompt, regions))
    return spatial, textual


def _mean(values) -> float:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def sweep(
    net,
    scenes: Sequence[EvalScene],
    gammas: Sequence[float],
    modes: Sequence,
    sampler_steps: int = 50,
    seed_set: str = "default",
    iou_threshold: float = 0.5,
    batch_size: int = 100,
    jobs: int = 1,
    details: list | None = None,
) -> list[TradeoffPoint]:
    """Sample and score every scene under each ``(gamma, mode)`` cell.

    Every cell reuses each scene's own seed, so curves are paired. If
    ``details`` is a list, per-scene rows are appended to it.
    """
    from .diffusion import sample_batch
    from .wiring import ScheduleConfig, WiringMode

    modes = [WiringMode.parse(m) for m in modes]
    cells = [(float(g), m) for g in gammas for m in modes]

    def run_cell(cell):
        gamma, mode = cell
        schedule = ScheduleConfig(gamma, sampler_steps)
        spatial, textual = [], []
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            imgs = sample_batch(net, [s.prompt for s in chunk], [s.layout for s in chunk], schedule, mode,
                                [s.seed for s in chunk])
            sp, tx = score_images(imgs, chunk, iou_threshold)
            spatial += sp
            textual += tx
        log.info("gamma=%.2f mode=%s spatial=%.4f textual=%.4f", gamma, mode.value, _mean(spatial), _mean(textual))
        point = TradeoffPoint(gamma, mode.value, _mean(spatial), _mean(textual), len(scenes), seed_set)
        rows = [(gamma, mode.value, s.name, sp, tx) for s, sp, tx in zip(scenes, spatial, textual)]
        return point, rows

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]
    if details is not None:
        for _, rows in results:
            details.extend(rows)
    return [p for p, _ in results]


def tradeoff_csv(points: Sequence[TradeoffPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for p in points:
        writer.writerow(p.row())
    return buf.getvalue()


def write_tradeoff_csv(points: Sequence[TradeoffPoint], path: Path):
    Path(path).write_text(tradeoff_csv(points))


def read_tradeoff_csv(path: Path) -> list[TradeoffPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [
            TradeoffPoint(float(r["gamma"]), r["mode"], float(r["spatial_mean"]), float(r["textual_mean"]),
                          int(r["n_scenes"]), r["seed_set"])
            for r in reader
        ]


def write_details_csv(rows, path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("gamma", "mode", "scene", "spatial", "textual"))
        for g, m, name, sp, tx in rows:
            w.writerow((f"{g:.6f}", m, name, "" if sp is None else f"{sp:.6f}", f"{tx:.6f}"))


def headline_deltas(points: Sequence[TradeoffPoint], gamma: float = 1.0) -> dict:
    """Textual gain and spatial drop of parallel vs sequential wiring at ``gamma``."""
    cell = {(round(p.gamma, 6), p.mode): p for p in points}
    seq, par = cell.get((round(gamma, 6), "sequential")), cell.get((round(gamma, 6), "parallel"))
    if seq is None or par is None:
        return {}
    return {
        "textual_gain": par.textual_mean - seq.textual_mean,
        "spatial_drop": seq.spatial_mean - par.spatial_mean,
        "spatial_drop_relative": (seq.spatial_mean - par.spatial_mean) / seq.spatial_mean
        if seq.spatial_mean else float("nan"),
    }
