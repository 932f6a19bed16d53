"""Mask fusion into pixel-ID labels, resizing and the on-disk datastore.

Class IDs: 0 background, 1 RBC, 2 WBC, 3 platelet. Binary masks are bool
arrays of shape H x W, label masks uint8 arrays of shape H x W, images uint8
H x W x 3.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

BACKGROUND, RBC, WBC, PLATELET = 0, 1, 2, 3
CLASS_IDS = (BACKGROUND, RBC, WBC, PLATELET)
CLASS_NAMES = {BACKGROUND: "background", RBC: "rbc", WBC: "wbc", PLATELET: "platelet"}
# preview colours: 1 red, 2 blue, 3 green
PREVIEW_PALETTE = np.array([[0, 0, 0], [255, 0, 0], [0, 0, 255], [0, 255, 0]], dtype=np.uint8)

MASK_DIRS = {RBC: "masks_rbc", WBC: "masks_wbc", PLATELET: "masks_plt"}


class MalformedMaskError(ValueError):
    pass


class MaskShapeError(ValueError):
    pass


@dataclass
class DatasetEntry:
    image: np.ndarray
    label: np.ndarray
    source_id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise MaskShapeError(f"{self.source_id}: image must be H x W x 3, got {self.image.shape}")
        if self.image.shape[:2] != self.label.shape:
            raise MaskShapeError(
                f"{self.source_id}: image {self.image.shape[:2]} and label {self.label.shape} differ"
            )


def binarize_mask(raw: np.ndarray) -> np.ndarray:
    """1 where any channel is > 0. Accepts H x W, H x W x 1 or H x W x 3."""
    raw = np.asarray(raw)
    if raw.ndim == 2:
        return raw > 0
    if raw.ndim == 3 and raw.shape[2] in (1, 3):
        return (raw > 0).any(axis=2)
    raise MalformedMaskError(f"mask must have 1 or 3 channels, got shape {raw.shape}")


def fuse_masks(rbc: np.ndarray, wbc: np.ndarray, plt: np.ndarray) -> np.ndarray:
    """Assign RBC, then WBC, then platelet IDs; later classes win on overlap."""
    if not (rbc.shape == wbc.shape == plt.shape) or rbc.ndim != 2:
        raise MaskShapeError(f"mask shapes differ: {rbc.shape}, {wbc.shape}, {plt.shape}")
    label = np.zeros(rbc.shape, dtype=np.uint8)
    label[rbc.astype(bool)] = RBC
    label[wbc.astype(bool)] = WBC
    label[plt.astype(bool)] = PLATELET
    return label


def split_label(label: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return label == RBC, label == WBC, label == PLATELET


def resolve_overlaps(rbc, wbc, plt):
    """Per-class masks as they survive fusion (what split_label returns)."""
    plt = plt.astype(bool)
    wbc = wbc.astype(bool) & ~plt
    rbc = rbc.astype(bool) & ~wbc & ~plt
    return rbc, wbc, plt


def resize_pair(image: np.ndarray, label: np.ndarray, size: tuple[int, int], source_id: str = "") -> DatasetEntry:
    """Bilinear resize for the image, nearest-neighbour for the label.

    ``size`` is (width, height), matching PIL.
    """
    width, height = size
    if width < 1 or height < 1:
        raise ValueError(f"target size must be positive, got {width}x{height}")
    if image.shape[:2] == (height, width) and label.shape == (height, width):
        return DatasetEntry(image.copy(), label.copy(), source_id)
    img = Image.fromarray(np.asarray(image, dtype=np.uint8)).resize((width, height), Image.BILINEAR)
    lab = Image.fromarray(np.asarray(label, dtype=np.uint8)).resize((width, height), Image.NEAREST)
    return DatasetEntry(np.asarray(img), np.asarray(lab), source_id)


def colorize(label: np.ndarray) -> np.ndarray:
    return PREVIEW_PALETTE[label]


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im)


def write_datastore(entries: list[DatasetEntry], root: str | Path, preview: bool = False) -> Path:
    """Write ``root/images/<id>.png``, ``root/labels/<id>.png`` and a manifest.

    The manifest has one ``image_path<TAB>label_path`` row per entry, paths
    relative to ``root``. Returns the manifest path.
    """
    root = Path(root)
    rows = []
    try:
        for sub in ("images", "labels") + (("previews",) if preview else ()):
            (root / sub).mkdir(parents=True, exist_ok=True)
        for e in entries:
            img_rel = f"images/{e.source_id}.png"
            lab_rel = f"labels/{e.source_id}.png"
            Image.fromarray(np.asarray(e.image, dtype=np.uint8), mode="RGB").save(root / img_rel)
            Image.fromarray(np.asarray(e.label, dtype=np.uint8), mode="L").save(root / lab_rel)
            if preview:
                Image.fromarray(colorize(e.label), mode="RGB").save(root / f"previews/{e.source_id}.png")
            rows.append(f"{img_rel}\t{lab_rel}\n")
        manifest = root / "manifest.tsv"
        manifest.write_text("".join(rows), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing datastore at {root}: {exc}") from exc
    return manifest


def read_manifest(root: str | Path) -> list[tuple[str, Path, Path]]:
    """(source_id, image_path, label_path) per manifest row."""
    root = Path(root)
    manifest = root / "manifest.tsv" if root.is_dir() else root
    base = manifest.parent
    out = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        img_rel, lab_rel = line.split("\t")
        out.append((Path(img_rel).stem, base / img_rel, base / lab_rel))
    return out


def read_datastore(root: str | Path) -> list[DatasetEntry]:
    entries = []
    for sid, img_path, lab_path in read_manifest(root):
        label = read_image(lab_path)
        if label.ndim != 2:
            raise MalformedMaskError(f"{lab_path}: label file must be single-channel")
        if label.max(initial=0) > PLATELET:
            raise MalformedMaskError(f"{lab_path}: label ids outside {{0,1,2,3}}")
        image = read_image(img_path)
        if image.ndim == 2:
            image = np.repeat(image[:, :, None], 3, axis=2)
        entries.append(DatasetEntry(image, label, sid))
    return entries


def collect_mask_triples(
    images_dir: str | Path, rbc_dir: str | Path, wbc_dir: str | Path, plt_dir: str | Path
) -> list[tuple[str, Path, Path, Path, Path]]:
    """Stems present in all four directories, sorted, with their file paths."""

    def by_stem(d):
        return {p.stem: p for p in sorted(Path(d).iterdir()) if p.is_file()}

    imgs, rbcs, wbcs, plts = (by_stem(d) for d in (images_dir, rbc_dir, wbc_dir, plt_dir))
    common = sorted(set(imgs) & set(rbcs) & set(wbcs) & set(plts))
    skipped = set(imgs) | set(rbcs) | set(wbcs) | set(plts)
    skipped -= set(common)
    if skipped:
        log.warning("skipping %d stems missing from some directory: %s", len(skipped), sorted(skipped)[:5])
    return [(s, imgs[s], rbcs[s], wbcs[s], plts[s]) for s in common]


def preprocess_triple(image_path, rbc_path, wbc_path, plt_path, size, source_id) -> DatasetEntry:
    image = read_image(image_path)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    rbc, wbc, plt = (binarize_mask(read_image(p)) for p in (rbc_path, wbc_path, plt_path))
    label = fuse_masks(rbc, wbc, plt)
    if label.shape != image.shape[:2]:
        raise MaskShapeError(f"{source_id}: masks {label.shape} do not match image {image.shape[:2]}")
    if size is None:
        return DatasetEntry(image, label, source_id)
    return resize_pair(image, label, size, source_id)
