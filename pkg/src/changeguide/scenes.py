"""Synthetic bi-temporal scenes with exact change ground truth.

A scene is a textured background with axis-aligned rectangular "buildings".
The second acquisition mutates some of the buildings (added, removed or
resized) and then receives a global brightness shift and a per-channel tint;
both frames receive independent sensor noise.  Ground truth is the set of
pixels whose building label differs between the two times, computed before any
photometric perturbation, so it cannot depend on perturbation settings.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .codec import GridSpec, block_labels_from_mask, serialize_runs
from .netpbm import write_pgm_mask, write_ppm

CHANGE_KINDS = ("add", "remove", "resize")


@dataclass(frozen=True)
class GenConfig:
    h: int = 64
    w: int = 64
    n_objects: tuple[int, int] = (3, 6)
    object_size: tuple[int, int] = (8, 20)
    change_rate: float = 0.5
    change_kinds: tuple[str, ...] = CHANGE_KINDS
    brightness_delta: tuple[float, float] = (-0.1, 0.1)
    tint: tuple[float, float] = (-0.04, 0.04)
    noise_sigma: float = 0.02
    seed: int = 0
    grid_rows: int = 8
    grid_cols: int = 8
    extreme_perturbation: bool = False

    def __post_init__(self):
        for name in ("n_objects", "object_size", "brightness_delta", "tint", "change_kinds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        problems = self.validate()
        if problems:
            raise ValueError("; ".join(problems))

    def validate(self) -> list[str]:
        out = []
        if self.h % self.grid_rows or self.w % self.grid_cols:
            out.append(f"gen.h/gen.w {self.h}x{self.w} not divisible by grid {self.grid_rows}x{self.grid_cols}")
        if self.h < self.grid_rows or self.w < self.grid_cols:
            out.append(f"gen.h/gen.w {self.h}x{self.w} smaller than one block per grid cell")
        if not 0.0 <= self.change_rate <= 1.0:
            out.append(f"gen.change_rate must be in [0, 1], got {self.change_rate}")
        if self.noise_sigma < 0:
            out.append(f"gen.noise_sigma must be >= 0, got {self.noise_sigma}")
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            out.append(f"gen.n_objects must be a range 0 <= lo <= hi, got {self.n_objects}")
        lo, hi = self.object_size
        if lo < 4 or hi < lo or hi > min(self.h, self.w) // 2:
            out.append(f"gen.object_size {self.object_size} must satisfy 4 <= lo <= hi <= min(h, w)/2")
        for name in ("brightness_delta", "tint"):
            a, b = getattr(self, name)
            if b < a:
                out.append(f"gen.{name} range reversed: {getattr(self, name)}")
        bad = [k for k in self.change_kinds if k not in CHANGE_KINDS]
        if bad or not self.change_kinds:
            out.append(f"gen.change_kinds must be a nonempty subset of {CHANGE_KINDS}, got {self.change_kinds}")
        return out

    def at_max_perturbation(self) -> "GenConfig":
        """Same scenes with brightness and tint pushed to the edge of their ranges."""
        return replace(self, extreme_perturbation=True)


@dataclass
class ScenePair:
    img_t1: np.ndarray
    img_t2: np.ndarray
    gt: np.ndarray
    seed: int
    labels_t1: np.ndarray = field(repr=False, default=None)
    labels_t2: np.ndarray = field(repr=False, default=None)


@dataclass
class _Rect:
    y: int
    x: int
    h: int
    w: int

    def overlaps(self, other: "_Rect", gap: int = 2) -> bool:
        return not (
            self.y + self.h + gap <= other.y
            or other.y + other.h + gap <= self.y
            or self.x + self.w + gap <= other.x
            or other.x + other.w + gap <= self.x
        )


def _place(rng, cfg: GenConfig, taken: list[_Rect]) -> _Rect | None:
    lo, hi = cfg.object_size
    for _ in range(200):
        h, w = rng.integers(lo, hi + 1, size=2)
        r = _Rect(int(rng.integers(0, cfg.h - h + 1)), int(rng.integers(0, cfg.w - w + 1)), int(h), int(w))
        if not any(r.overlaps(t) for t in taken):
            return r
    return None


def _resized(rng, cfg: GenConfig, rect: _Rect, others: list[_Rect]) -> _Rect:
    for _ in range(50):
        dh, dw = rng.integers(3, 7, size=2) * rng.choice([-1, 1], size=2)
        h, w = rect.h + int(dh), rect.w + int(dw)
        y = rect.y - (int(dh) // 2 if dh > 0 else 0)
        x = rect.x - (int(dw) // 2 if dw > 0 else 0)
        cand = _Rect(y, x, h, w)
        if h >= 4 and w >= 4 and y >= 0 and x >= 0 and y + h <= cfg.h and x + w <= cfg.w \
                and not any(cand.overlaps(o) for o in others):
            return cand
    # shrinking in place always fits
    return _Rect(rect.y, rect.x, max(4, rect.h - 3), max(4, rect.w - 3))


def _background(rng, cfg: GenConfig) -> np.ndarray:
    base = np.array([0.22, 0.32, 0.18]) + rng.uniform(-0.05, 0.05, size=3)
    coarse = gaussian_filter(rng.normal(size=(cfg.h, cfg.w)), sigma=4.0, mode="wrap")
    coarse *= 0.04 / (coarse.std() + 1e-12)
    fine = rng.uniform(-0.015, 0.015, size=(cfg.h, cfg.w, 3))
    return base + coarse[..., None] + fine


def _roof_color(rng, background_mean: np.ndarray) -> np.ndarray:
    while True:
        c = rng.uniform(0.35, 0.95, size=3)
        if np.abs(c - background_mean).max() >= 0.3:
            return c


def generate(cfg: GenConfig) -> ScenePair:
    layout = np.random.default_rng([cfg.seed, 0])
    photo = np.random.default_rng([cfg.seed, 1])
    noise = np.random.default_rng([cfg.seed, 2])

    bg = _background(layout, cfg)
    n = int(layout.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    rects_t1: list[_Rect | None] = []
    placed: list[_Rect] = []
    for _ in range(n):
        r = _place(layout, cfg, placed)
        if r is None:
            break
        placed.append(r)
        rects_t1.append(r)
    n = len(rects_t1)
    n_mut = int(np.floor(cfg.change_rate * n + 0.5))
    mutated = set(layout.permutation(n)[:n_mut].tolist())
    rects_t2 = list(rects_t1)
    for k in sorted(mutated):
        kind = cfg.change_kinds[int(layout.integers(len(cfg.change_kinds)))]
        if kind == "add":
            rects_t1[k] = None
        elif kind == "remove":
            rects_t2[k] = None
        else:
            others = [r for i, r in enumerate(placed) if i != k]
            rects_t2[k] = _resized(layout, cfg, rects_t1[k], others)
            placed[k] = _Rect(
                min(rects_t1[k].y, rects_t2[k].y), min(rects_t1[k].x, rects_t2[k].x),
                max(rects_t1[k].y + rects_t1[k].h, rects_t2[k].y + rects_t2[k].h) - min(rects_t1[k].y, rects_t2[k].y),
                max(rects_t1[k].x + rects_t1[k].w, rects_t2[k].x + rects_t2[k].w) - min(rects_t1[k].x, rects_t2[k].x),
            )

    colors = [_roof_color(layout, bg.mean(axis=(0, 1))) for _ in range(n)]
    jitter = [layout.uniform(-0.02, 0.02, size=(cfg.h, cfg.w, 3)) for _ in range(n)]

    def render(rects):
        img = bg.copy()
        labels = np.zeros((cfg.h, cfg.w), dtype=np.int32)
        for k, r in enumerate(rects):
            if r is None:
                continue
            sl = (slice(r.y, r.y + r.h), slice(r.x, r.x + r.w))
            img[sl] = colors[k] + jitter[k][sl]
            labels[sl] = k + 1
        return img, labels

    img1, lab1 = render(rects_t1)
    img2, lab2 = render(rects_t2)
    gt = (lab1 != lab2).astype(np.uint8)

    if cfg.extreme_perturbation:
        b = max(abs(v) for v in cfg.brightness_delta)
        t = max(abs(v) for v in cfg.tint)
        brightness = b * photo.choice([-1.0, 1.0])
        tint = t * photo.choice([-1.0, 1.0], size=3)
    else:
        brightness = photo.uniform(*cfg.brightness_delta)
        tint = photo.uniform(*cfg.tint, size=3)
    img2 = img2 + brightness + tint
    img1 = img1 + noise.normal(0.0, cfg.noise_sigma, size=img1.shape) if cfg.noise_sigma > 0 else img1
    img2 = img2 + noise.normal(0.0, cfg.noise_sigma, size=img2.shape) if cfg.noise_sigma > 0 else img2

    def quantize(img):
        return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)

    return ScenePair(quantize(img1), quantize(img2), gt, cfg.seed, lab1, lab2)


def scene_grid(cfg: GenConfig) -> GridSpec:
    return GridSpec(cfg.grid_rows, cfg.grid_cols, cfg.h, cfg.w)


def generate_dataset(cfg: GenConfig, n: int, out_dir, grid: GridSpec | None = None) -> dict:
    """Write ``n`` scenes (seeds ``cfg.seed .. cfg.seed+n-1``) and ``manifest.json``."""
    grid = grid or scene_grid(cfg)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    scenes = []
    for i in range(n):
        seed = cfg.seed + i
        pair = generate(replace(cfg, seed=seed))
        names = {key: f"scene_{i:05d}_{key}.{ext}" for key, ext in (("t1", "ppm"), ("t2", "ppm"), ("gt", "pgm"))}
        try:
            write_ppm(out / names["t1"], pair.img_t1)
            write_ppm(out / names["t2"], pair.img_t2)
            write_pgm_mask(out / names["gt"], pair.gt)
        except OSError as exc:
            raise OSError(f"cannot write scene files under {out}: {exc}") from exc
        runs = serialize_runs(block_labels_from_mask(pair.gt, grid))
        scenes.append({**names, "seed": seed, "gt_runs": runs})
    manifest = {"grid": {"rows": grid.rows, "cols": grid.cols}, "size": [cfg.h, cfg.w], "scenes": scenes}
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc
    return manifest
