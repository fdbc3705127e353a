"""Frame records, preprocessing and frame stores (in-memory and on-disk PNG)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import Manifest


@dataclass(frozen=True)
class Frame:
    pair_id: str
    view: str
    timestamp: float
    image: np.ndarray | None = None  # H x W x 3 float32 in [0, 1]


@dataclass(frozen=True)
class Triplet:
    """Anchor third-person frame ``y`` with first-person frames ``x`` (corresponding)
    and ``z`` (non-corresponding)."""

    x: Frame
    y: Frame
    z: Frame


def to_float(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def preprocess(img: np.ndarray, side: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Resize the shorter side to ``side`` then crop a ``side`` x ``side`` window.

    The crop is centered unless ``rng`` is given (train-time random crop).
    """
    arr = to_uint8(img) if img.dtype != np.uint8 else img
    h, w = arr.shape[:2]
    if min(h, w) != side:
        scale = side / min(h, w)
        nh, nw = max(side, round(h * scale)), max(side, round(w * scale))
        arr = np.asarray(Image.fromarray(arr).resize((nw, nh), Image.BILINEAR))
        h, w = nh, nw
    if rng is None:
        top, left = (h - side) // 2, (w - side) // 2
    else:
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
    return to_float(arr[top:top + side, left:left + side])


def write_png(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img) if img.dtype != np.uint8 else img, mode="RGB").save(path)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


class MemoryFrameStore:
    """Frames held as uint8 arrays keyed by ``(pair_id, view, second)``."""

    def __init__(self, frames: dict | None = None):
        self.frames: dict[tuple[str, str, int], np.ndarray] = dict(frames or {})

    def put(self, pair_id: str, view: str, second: int, img: np.ndarray) -> None:
        self.frames[(pair_id, view, int(second))] = img if img.dtype == np.uint8 else to_uint8(img)

    def get(self, pair_id: str, view: str, second: int) -> np.ndarray:
        return to_float(self.frames[(pair_id, view, int(second))])

    def frame(self, pair_id: str, view: str, second: int) -> Frame:
        return Frame(pair_id, view, float(second), self.get(pair_id, view, second))


class DirectoryFrameStore(MemoryFrameStore):
    """Per-second frames read from ``<stream path>/<t>.png`` (or .jpg), cached.

    Relative stream paths resolve against the manifest's directory.
    """

    def __init__(self, manifest: Manifest, side: int):
        super().__init__()
        self.manifest = manifest
        self.side = side
        self._pairs: dict[str, tuple] = {}
        self.add(manifest)

    def add(self, manifest: Manifest) -> None:
        """Make the pairs of another manifest readable through this store."""
        self._pairs.update({p.pair_id: (p, manifest.root) for p in manifest})

    def _path(self, pair_id: str, view: str, second: int) -> Path:
        pair, root = self._pairs[pair_id]
        base = Path(pair.stream(view).path)
        if not base.is_absolute() and root is not None:
            base = root / base
        for ext in (".png", ".jpg", ".jpeg"):
            p = base / f"{int(second)}{ext}"
            if p.exists():
                return p
        raise FileNotFoundError(f"no frame {second} under {base}")

    def get(self, pair_id: str, view: str, second: int) -> np.ndarray:
        key = (pair_id, view, int(second))
        if key not in self.frames:
            raw = read_png(self._path(pair_id, view, second))
            self.frames[key] = to_uint8(preprocess(raw, self.side))
        return to_float(self.frames[key])


def load_triplet(store: MemoryFrameStore, t: Triplet) -> Triplet:
    def fill(f: Frame) -> Frame:
        return Frame(f.pair_id, f.view, f.timestamp, store.get(f.pair_id, f.view, int(f.timestamp)))

    return Triplet(fill(t.x), fill(t.y), fill(t.z))
