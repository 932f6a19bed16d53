"""Classwise pixel counting over one label mask or a corpus."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .label_codec import CLASS_IDS, CLASS_NAMES


@dataclass
class PixelCountReport:
    counts: dict[int, int]
    include_background: bool = False
    scope: str = "image"
    images: int = 1

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def frequencies(self) -> dict[int, float] | None:
        """Share of counted pixels per class; None when nothing was counted."""
        total = self.total
        if total == 0:
            return None
        return {c: n / total for c, n in self.counts.items()}

    @classmethod
    def from_counts(cls, counts: Mapping[int, int], scope: str = "corpus", images: int = 1) -> "PixelCountReport":
        return cls(dict(counts), include_background=0 in counts, scope=scope, images=images)

    def to_dict(self) -> dict:
        freqs = self.frequencies
        return {
            "scope": self.scope,
            "images": self.images,
            "include_background": self.include_background,
            "total": self.total,
            "frequencies_defined": freqs is not None,
            "classes": [
                {"class": CLASS_NAMES[c], "count": n, "frequency": None if freqs is None else freqs[c]}
                for c, n in self.counts.items()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "count", "frequency"])
        freqs = self.frequencies
        for c, n in self.counts.items():
            w.writerow([CLASS_NAMES[c], n, "" if freqs is None else repr(freqs[c])])
        return buf.getvalue()


def _histogram(label: np.ndarray) -> np.ndarray:
    label = np.asarray(label)
    if label.size and label.max() > CLASS_IDS[-1]:
        raise ValueError(f"label contains ids outside {CLASS_IDS}")
    return np.bincount(label.ravel().astype(np.int64), minlength=len(CLASS_IDS))


def _report(hist: np.ndarray, include_background: bool, scope: str, images: int) -> PixelCountReport:
    classes = CLASS_IDS if include_background else CLASS_IDS[1:]
    return PixelCountReport({c: int(hist[c]) for c in classes}, include_background, scope, images)


def count_pixels(label: np.ndarray, include_background: bool = False) -> PixelCountReport:
    return _report(_histogram(label), include_background, "image", 1)


def count_corpus(labels: Iterable[np.ndarray], include_background: bool = False) -> PixelCountReport:
    hist = np.zeros(len(CLASS_IDS), dtype=np.int64)
    n = 0
    for lab in labels:
        hist += _histogram(lab)
        n += 1
    if n == 0:
        raise ValueError("count_corpus needs at least one label mask")
    return _report(hist, include_background, "corpus", n)
