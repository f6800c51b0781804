"""Squares-and-circles toy dataset: two 32x32 binary modalities sharing a full/empty class."""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

SIZE = 32
MIN_WIDTH, MAX_WIDTH = 10, 28
MODALITIES = ("square", "circle")
FULL, EMPTY = 1, 0
HEADER_RE = re.compile(r"^JNF-TOY v1 n=(\d+) seed=(-?\d+)$")


class DatasetFormatError(ValueError):
    pass


def _check_width(width: int) -> None:
    if not MIN_WIDTH <= width <= MAX_WIDTH:
        raise ValueError(f"width {width} outside [{MIN_WIDTH}, {MAX_WIDTH}]")


@lru_cache(maxsize=None)
def _square(width: int, filled: bool) -> np.ndarray:
    img = np.zeros((SIZE, SIZE), dtype=np.uint8)
    lo = (SIZE - width) // 2
    hi = lo + width
    img[lo:hi, lo:hi] = 1
    if not filled:
        img[lo + 1:hi - 1, lo + 1:hi - 1] = 0
    img.setflags(write=False)
    return img


@lru_cache(maxsize=None)
def _circle(width: int, filled: bool) -> np.ndarray:
    r, c = np.mgrid[0:SIZE, 0:SIZE]
    centre = (SIZE - 1) / 2.0
    dist = np.hypot(r - centre, c - centre)
    radius = width / 2.0
    on = dist <= radius if filled else (dist >= radius - 1.0) & (dist <= radius)
    img = on.astype(np.uint8)
    img.setflags(write=False)
    return img


def rasterize_square(width: int, filled: bool) -> np.ndarray:
    """Centred axis-aligned square; empty squares keep a 1-pixel border."""
    _check_width(width)
    return _square(int(width), bool(filled)).copy()


def rasterize_circle(width: int, filled: bool) -> np.ndarray:
    """Centred disc of diameter ``width``; empty circles are a 1-pixel annulus."""
    _check_width(width)
    return _circle(int(width), bool(filled)).copy()


@dataclass(frozen=True)
class ShapeSample:
    square_image: np.ndarray
    circle_image: np.ndarray
    shape_class: int
    square_width: int
    circle_width: int


@dataclass(frozen=True)
class ToyDatasetConfig:
    n_samples: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if self.n_samples <= 0 or self.n_samples % 2:
            raise ValueError(f"n_samples must be a positive even number, got {self.n_samples}")


@dataclass
class ToyDataset:
    """Flattened arrays: ``squares``/``circles`` are (n, 1024) float64 in {0, 1}."""

    squares: np.ndarray
    circles: np.ndarray
    labels: np.ndarray
    square_widths: np.ndarray
    circle_widths: np.ndarray
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def modalities(self) -> list[np.ndarray]:
        return [self.squares, self.circles]

    def subset(self, index) -> "ToyDataset":
        index = np.asarray(index)
        return ToyDataset(self.squares[index], self.circles[index], self.labels[index],
                          self.square_widths[index], self.circle_widths[index], self.seed)

    def samples(self):
        for i in range(len(self)):
            yield ShapeSample(self.squares[i].reshape(SIZE, SIZE).astype(np.uint8),
                              self.circles[i].reshape(SIZE, SIZE).astype(np.uint8),
                              int(self.labels[i]), int(self.square_widths[i]),
                              int(self.circle_widths[i]))


def _sample_widths(seed: int, index: int) -> tuple[int, int]:
    rng = np.random.default_rng([seed, index])
    w = rng.integers(MIN_WIDTH, MAX_WIDTH + 1, size=2)
    return int(w[0]), int(w[1])


def generate_dataset(cfg: ToyDatasetConfig) -> ToyDataset:
    """Deterministic in ``cfg.seed``; sample i depends only on (seed, i).

    Even indices are full and odd ones empty, so every even-sized dataset is
    exactly balanced.
    """
    n = cfg.n_samples
    labels = np.where(np.arange(n) % 2 == 0, FULL, EMPTY)
    sw = np.empty(n, dtype=int)
    cw = np.empty(n, dtype=int)
    for i in range(n):
        sw[i], cw[i] = _sample_widths(cfg.seed, i)
    squares = np.stack([_square(w, bool(f)) for w, f in zip(sw, labels)]).reshape(n, -1)
    circles = np.stack([_circle(w, bool(f)) for w, f in zip(cw, labels)]).reshape(n, -1)
    return ToyDataset(squares.astype(np.float64), circles.astype(np.float64),
                      labels, sw, cw, cfg.seed)


def interior_class(image: np.ndarray) -> int:
    """Full iff the central pixels are on: the class is readable from either modality."""
    img = np.asarray(image).reshape(SIZE, SIZE)
    return FULL if img[15:17, 15:17].all() else EMPTY


def estimate_width(image: np.ndarray) -> int:
    """Extent of the on-pixels along the middle row."""
    img = np.asarray(image).reshape(SIZE, SIZE)
    cols = np.flatnonzero(img.any(axis=0))
    return int(cols[-1] - cols[0] + 1) if len(cols) else 0


def save_dataset(ds: ToyDataset, path) -> None:
    """ASCII format: header line, then per sample a square row, a circle row and a class row."""
    lines = [f"JNF-TOY v1 n={len(ds)} seed={ds.seed}"]
    for sq, ci, lab in zip(ds.squares, ds.circles, ds.labels):
        lines.append("".join("1" if v else "0" for v in sq))
        lines.append("".join("1" if v else "0" for v in ci))
        lines.append("F" if lab == FULL else "E")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_dataset(path) -> ToyDataset:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text:
        raise DatasetFormatError(f"{path}: empty file")
    match = HEADER_RE.match(text[0])
    if not match:
        raise DatasetFormatError(f"{path}: bad header {text[0]!r}")
    n, seed = int(match.group(1)), int(match.group(2))
    body = text[1:]
    if len(body) != 3 * n:
        raise DatasetFormatError(f"{path}: expected {3 * n} record lines, found {len(body)}")
    squares = np.empty((n, SIZE * SIZE))
    circles = np.empty((n, SIZE * SIZE))
    labels = np.empty(n, dtype=int)
    for i in range(n):
        sq, ci, lab = body[3 * i: 3 * i + 3]
        if len(sq) != SIZE * SIZE or len(ci) != SIZE * SIZE or lab not in ("F", "E"):
            raise DatasetFormatError(f"{path}: malformed record {i}")
        squares[i] = np.frombuffer(sq.encode(), dtype=np.uint8) - ord("0")
        circles[i] = np.frombuffer(ci.encode(), dtype=np.uint8) - ord("0")
        labels[i] = FULL if lab == "F" else EMPTY
    if not (np.isin(squares, (0, 1)).all() and np.isin(circles, (0, 1)).all()):
        raise DatasetFormatError(f"{path}: pixels must be 0 or 1")
    sw = np.array([estimate_width(s) for s in squares])
    cw = np.array([estimate_width(c) for c in circles])
    return ToyDataset(squares, circles, labels, sw, cw, seed)
