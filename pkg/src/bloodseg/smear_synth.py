"""Deterministic synthetic blood smears with exact per-class masks.

Cells are filled ellipses: many pale-red RBC discs with a lighter centre, a
few large purple WBCs with a dark nucleus and tiny magenta platelets. RBCs
are placed first; WBCs and platelets are then added one at a time for as
long as each addition brings the class's share of cell pixels closer to the
target frequency.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import label_codec as lc

RBC_RIM = (200, 85, 95)
RBC_CENTRE = (222, 140, 145)
WBC_BODY = (150, 110, 200)
WBC_NUCLEUS = (80, 35, 135)
PLT_COLOUR = (185, 30, 150)


@dataclass
class SynthConfig:
    size: tuple[int, int] = (300, 300)  # width, height
    rbc_count: tuple[int, int] = (70, 90)
    wbc_count: tuple[int, int] = (0, 3)
    plt_count: tuple[int, int] = (0, 12)
    rbc_radius: tuple[float, float] = (11.0, 16.0)
    wbc_radius: tuple[float, float] = (18.0, 26.0)
    plt_radius: tuple[float, float] = (1.5, 3.0)
    target_frequencies: tuple[float, float, float] = (0.9355, 0.0609, 0.0034)
    background: tuple[int, int, int] = (238, 230, 218)
    noise: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("rbc_count", "wbc_count", "plt_count", "rbc_radius", "wbc_radius", "plt_radius"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a non-empty non-negative range, got {(lo, hi)}")
        if any(f <= 0 for f in self.target_frequencies):
            raise ValueError("target frequencies must be positive")
        if min(self.size) < 1 or self.noise < 0:
            raise ValueError("size must be positive and noise non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def small(cls, **overrides) -> "SynthConfig":
        """A 32x32 layout with cells large enough to survive two poolings."""
        base = dict(
            size=(32, 32), rbc_count=(4, 6), wbc_count=(1, 1), plt_count=(1, 1),
            rbc_radius=(4.0, 5.5), wbc_radius=(5.0, 6.0), plt_radius=(1.5, 2.0),
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class SmearSample:
    image: np.ndarray
    rbc: np.ndarray
    wbc: np.ndarray
    plt: np.ndarray

    @property
    def label(self) -> np.ndarray:
        return lc.fuse_masks(self.rbc, self.wbc, self.plt)

    @property
    def painted_areas(self) -> dict[int, int]:
        """Pixel area of each class mask before overlap resolution."""
        return {lc.RBC: int(self.rbc.sum()), lc.WBC: int(self.wbc.sum()), lc.PLATELET: int(self.plt.sum())}

    @property
    def label_areas(self) -> dict[int, int]:
        """Pixel area per class after fusion."""
        lab = self.label
        return {c: int((lab == c).sum()) for c in (lc.RBC, lc.WBC, lc.PLATELET)}


def _ellipse(shape, cx, cy, a, b, theta, scale=1.0):
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    r = max(a, b) * scale + 1
    y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 1, h)
    x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return out
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / (a * scale)
    v = (-dx * s + dy * c) / (b * scale)
    out[y0:y1, x0:x1] = u * u + v * v <= 1.0
    return out


def _random_cell(rng, shape, radius):
    h, w = shape
    a = rng.uniform(*radius)
    b = a * rng.uniform(0.85, 1.0)
    return rng.uniform(0, w), rng.uniform(0, h), a, b, rng.uniform(0, np.pi)


def _share(rbc, wbc, plt, cls):
    lab = lc.fuse_masks(rbc, wbc, plt)
    cells = np.count_nonzero(lab)
    return np.count_nonzero(lab == cls) / cells if cells else 0.0


def generate(config: SynthConfig, index: int = 0) -> SmearSample:
    """One smear. ``index`` selects an independent substream of ``config.seed``."""
    rng = np.random.default_rng([config.seed, index])
    width, height = config.size
    shape = (height, width)
    image = np.empty(shape + (3,), dtype=np.float64)
    image[:] = config.background
    rbc = np.zeros(shape, dtype=bool)
    wbc = np.zeros(shape, dtype=bool)
    plt = np.zeros(shape, dtype=bool)

    for _ in range(int(rng.integers(config.rbc_count[0], config.rbc_count[1] + 1))):
        cx, cy, a, b, t = _random_cell(rng, shape, config.rbc_radius)
        body = _ellipse(shape, cx, cy, a, b, t)
        image[body] = RBC_RIM
        image[_ellipse(shape, cx, cy, a, b, t, 0.5)] = RBC_CENTRE
        rbc |= body

    f_r, f_w, f_p = config.target_frequencies
    for target, cls, count, radius in (
        (f_w / (f_r + f_w + f_p), lc.WBC, config.wbc_count, config.wbc_radius),
        (f_p / (f_r + f_w + f_p), lc.PLATELET, config.plt_count, config.plt_radius),
    ):
        mask = wbc if cls == lc.WBC else plt
        placed = 0
        while placed < count[1]:
            cx, cy, a, b, t = _random_cell(rng, shape, radius)
            body = _ellipse(shape, cx, cy, a, b, t)
            if placed >= count[0]:
                before = _share(rbc, wbc, plt, cls)
                trial = mask | body
                after = _share(rbc, trial if cls == lc.WBC else wbc, trial if cls == lc.PLATELET else plt, cls)
                if abs(after - target) >= abs(before - target):
                    break
            mask |= body
            if cls == lc.WBC:
                image[body] = WBC_BODY
                image[_ellipse(shape, cx, cy, a, b, t, 0.6)] = WBC_NUCLEUS
            else:
                image[body] = PLT_COLOUR
            placed += 1

    if config.noise > 0:
        image += rng.normal(0.0, config.noise, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return SmearSample(image, rbc, wbc, plt)


def generate_corpus(config: SynthConfig, n: int, root: str | Path, preview: bool = False) -> Path:
    """Write ``n`` smears as a datastore plus per-class mask folders.

    Per-class masks go to ``masks_rbc/``, ``masks_wbc/`` and ``masks_plt/``
    (0/255 PNGs), so the directory doubles as preprocessing input. Painted
    and fused areas per entry are recorded in ``areas.json``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Path(root)
    entries, areas = [], {}
    for sub in lc.MASK_DIRS.values():
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(n):
        sid = f"smear_{i:04d}"
        s = generate(config, i)
        entries.append(lc.DatasetEntry(s.image, s.label, sid))
        for cls, mask in ((lc.RBC, s.rbc), (lc.WBC, s.wbc), (lc.PLATELET, s.plt)):
            Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(root / lc.MASK_DIRS[cls] / f"{sid}.png")
        areas[sid] = {
            "painted": {lc.CLASS_NAMES[c]: v for c, v in s.painted_areas.items()},
            "label": {lc.CLASS_NAMES[c]: v for c, v in s.label_areas.items()},
        }
    manifest = lc.write_datastore(entries, root, preview=preview)
    (root / "areas.json").write_text(json.dumps(areas, indent=1, sort_keys=True), encoding="utf-8")
    (root / "synth_config.json").write_text(json.dumps(asdict(config), indent=1), encoding="utf-8")
    return manifest
