"""Synthetic desk-scale VQA corpus: geometric shapes with attribute QA.

Scenes are small RGB images containing one colored shape at a coarse
position. Questions cover the shape, color, size, and location attributes
plus closed yes/no presence questions, so the instruction generator's
attribute pools and the train/eval harness run with zero downloads.
Everything is deterministic in (seed, scene index).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross", "diamond")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (60, 90, 220),
    "yellow": (230, 220, 60),
    "purple": (160, 60, 200),
}
SIZES = {"tiny": 0.09, "small": 0.14, "medium": 0.19, "large": 0.25, "huge": 0.31}
POSITIONS = {
    "left": (0.50, 0.28),
    "right": (0.50, 0.72),
    "top": (0.28, 0.50),
    "bottom": (0.72, 0.50),
    "center": (0.50, 0.50),
}
BACKGROUND = (24, 24, 28)


@dataclass(frozen=True)
class Scene:
    shape: str
    color: str
    size: str
    position: str


def render_scene(scene: Scene, image_size: int = 32) -> np.ndarray:
    """Rasterize a scene to float32 [H, W, 3] in [0, 1]."""
    img = np.empty((image_size, image_size, 3), dtype=np.float32)
    img[:] = np.asarray(BACKGROUND, dtype=np.float32) / 255.0
    cy, cx = (int(round(f * (image_size - 1))) for f in POSITIONS[scene.position])
    radius = max(2, int(round(SIZES[scene.size] * image_size)))
    rr, cc = np.mgrid[0:image_size, 0:image_size]
    dy, dx = rr - cy, cc - cx
    if scene.shape == "circle":
        mask = dy * dy + dx * dx <= radius * radius
    elif scene.shape == "square":
        mask = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    elif scene.shape == "triangle":
        h = rr - (cy - radius)
        mask = (h >= 0) & (h <= 2 * radius) & (np.abs(dx) * 2 <= h)
    elif scene.shape == "cross":
        bar = max(1, radius // 3)
        mask = ((np.abs(dy) <= bar) & (np.abs(dx) <= radius)) | \
               ((np.abs(dx) <= bar) & (np.abs(dy) <= radius))
    elif scene.shape == "diamond":
        mask = np.abs(dy) + np.abs(dx) <= radius
    else:
        raise ValueError(f"unknown shape {scene.shape!r}")
    img[mask] = np.asarray(COLORS[scene.color], dtype=np.float32) / 255.0
    return img


def make_scenes(n: int, seed: int = 0) -> list[Scene]:
    """n scenes cycling through all attribute values, shuffled by seed.

    Strides are chosen so consecutive scenes differ on every attribute even
    for very small n, and block offsets break cross-attribute correlation
    over larger corpora.
    """
    shapes, colors = list(SHAPES), list(COLORS)
    sizes, positions = list(SIZES), list(POSITIONS)
    rng = random.Random(seed)
    scenes = []
    for i in range(n):
        block = i // len(shapes)
        scenes.append(Scene(
            shape=shapes[i % len(shapes)],
            color=colors[(2 * i + block) % len(colors)],
            size=sizes[(3 * i + 2 * block) % len(sizes)],
            position=positions[(4 * i + 3 * block) % len(positions)],
        ))
    rng.shuffle(scenes)
    return scenes


_OPEN_QA = (
    ("What shape appears in the image?", "shape", lambda s: s.shape),
    ("What color is the object?", "other", lambda s: s.color),
    ("What size is the object?", "size", lambda s: s.size),
    ("Where is the object located?", "location", lambda s: s.position),
)


def scene_records(scene: Scene, image_ref: str, index: int, seed: int,
                  kinds=("shape", "color", "size", "location", "closed")) -> list[dict]:
    """QA records for one scene; the closed question flips yes/no by rng."""
    rng = random.Random(f"{seed}:{index}")
    out = []
    for q, attr, getter in _OPEN_QA:
        kind = "color" if attr == "other" else attr
        if kind not in kinds:
            continue
        out.append({"image": image_ref, "question": q, "answer": getter(scene),
                    "answer_type": "open", "attribute": attr})
    if "closed" in kinds:
        probe = rng.choice(SHAPES)
        out.append({"image": image_ref,
                    "question": f"Is there a {probe} in the image?",
                    "answer": "yes" if probe == scene.shape else "no",
                    "answer_type": "closed", "attribute": "shape"})
    return out


def build_corpus(n_scenes: int, seed: int = 0, image_size: int = 32,
                 qa_per_scene=("shape", "color", "size", "location", "closed")):
    """In-memory corpus: list of (record dict, image array)."""
    scenes = make_scenes(n_scenes, seed)
    items = []
    for i, scene in enumerate(scenes):
        ref = f"images/scene_{i:04d}.png"
        img = render_scene(scene, image_size)
        for rec in scene_records(scene, ref, i, seed, qa_per_scene):
            items.append((rec, img))
    return items


ALL_KINDS = ("shape", "color", "size", "location", "closed")


def write_corpus(out_dir, n_scenes: int, seed: int = 0, image_size: int = 32,
                 qa_per_scene=ALL_KINDS, split=None) -> dict:
    """Materialize scenes as PNGs plus JSONL annotation files.

    ``qa_per_scene`` is a tuple of question kinds emitted for every scene,
    or ``"rotate"`` to emit exactly one question per scene, cycling through
    the kinds. ``split`` maps file names to fractions, e.g.
    {"train": 0.8, "bench": 0.2}; records of one scene always land in the
    same split.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    scenes = make_scenes(n_scenes, seed)
    per_file: dict[str, list[str]] = {}
    split = split or {"qa": 1.0}
    names = list(split)
    bounds = np.cumsum([split[n] for n in names])
    for i, scene in enumerate(scenes):
        ref = f"images/scene_{i:04d}.png"
        arr = (render_scene(scene, image_size) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(out_dir / ref)
        frac = (i + 0.5) / n_scenes
        fname = names[int(np.searchsorted(bounds, frac))]
        kinds = (ALL_KINDS[i % len(ALL_KINDS)],) if qa_per_scene == "rotate" \
            else qa_per_scene
        for rec in scene_records(scene, ref, i, seed, kinds):
            per_file.setdefault(fname, []).append(json.dumps(rec, sort_keys=True))
    counts = {}
    for fname, lines in per_file.items():
        (out_dir / f"{fname}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
        counts[fname] = len(lines)
    return counts
