"""On-disk scene datasets: one PNG + JSON sidecar per scene, plus a manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .grounding import LayoutSpec
from .scenes import SceneConfig, ToyPrompt, ToyScene, generate_scene
from .seeding import derive_seed


@dataclass
class SceneRecord:
    seed: int
    scene: ToyScene
    prompt: ToyPrompt
    layout: LayoutSpec


def scene_seeds(root_seed: int, n: int, split: str = "train") -> list[int]:
    return [derive_seed(root_seed, split, i) for i in range(n)]


def make_scenes(seeds, config: SceneConfig = SceneConfig()) -> list[SceneRecord]:
    return [SceneRecord(s, *generate_scene(s, config)) for s in seeds]


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: Path, image: np.ndarray):
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _sidecar(rec: SceneRecord) -> dict:
    return {
        "seed": rec.seed,
        "prompt_tokens": list(rec.prompt.tokens),
        "prompt_words": rec.prompt.words(),
        "layout": rec.layout.to_records(),
        "scene": rec.scene.to_record(),
    }


def write_dataset(out_dir: Path, records: list[SceneRecord], config: dict) -> dict:
    """Write scenes and ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    names = []
    for i, rec in enumerate(records):
        name = f"scene_{i:06d}"
        save_png(out_dir / f"{name}.png", rec.scene.image)
        side = json.dumps(_sidecar(rec), sort_keys=True)
        (out_dir / f"{name}.json").write_text(side)
        digest.update(side.encode())
        digest.update(to_uint8(rec.scene.image).tobytes())
        names.append(name)
    manifest = {
        "count": len(records),
        "config": config,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "content_hash": digest.hexdigest(),
        "scenes": names,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_dataset(data_dir: Path) -> list[SceneRecord]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    size = manifest.get("config", {}).get("scene", {}).get("image_size", 32)
    records = []
    for name in manifest["scenes"]:
        side = json.loads((data_dir / f"{name}.json").read_text())
        image = load_png(data_dir / f"{name}.png")
        scene = ToyScene.from_record(side["scene"], image=image, image_size=size)
        records.append(
            SceneRecord(side["seed"], scene, ToyPrompt(tuple(side["prompt_tokens"])), LayoutSpec.from_records(side["layout"]))
        )
    return records


@dataclass
class TensorDataset:
    """Training view of a scene list: images in [-1, 1], prompt ids, layouts."""

    images: torch.Tensor  # (N, 3, H, W)
    prompts: torch.Tensor  # (N, S) long
    layouts: list[LayoutSpec]

    @classmethod
    def from_records(cls, records: list[SceneRecord], quantize: bool = True) -> "TensorDataset":
        imgs = []
        for r in records:
            img = r.scene.image
            if quantize:
                img = to_uint8(img) / 255.0
            imgs.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1))
        images = torch.from_numpy(np.stack(imgs)) * 2.0 - 1.0 if imgs else torch.zeros(0, 3, 32, 32)
        prompts = torch.tensor([list(r.prompt.tokens) for r in records], dtype=torch.long)
        return cls(images, prompts, [r.layout for r in records])

    def __len__(self) -> int:
        return self.images.shape[0]
