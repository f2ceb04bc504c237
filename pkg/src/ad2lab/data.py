"""Sequence directories and the procedural sequence generator.

On disk a sequence is::

    <name>/frames/000001.png ...
    <name>/groundtruth.txt      # one "x,y,w,h" line per frame, top-left convention
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .boxes import BBox
from .errors import ConfigError, DataError, InvalidInputError

FRAME_EXTS = (".png", ".jpg", ".jpeg")


def read_frame(path: str | Path) -> np.ndarray:
    """Load an image file as ``(H, W, 3)`` float32 in [0, 1]."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise DataError(f"cannot decode frame {path}: {exc}") from None
    return arr / 255.0


def write_frame(path: str | Path, frame: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".png":
        PILImage.fromarray(arr).save(path, compress_level=1)
    else:
        PILImage.fromarray(arr).save(path)


def read_groundtruth(path: str | Path) -> list[BBox]:
    boxes = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        parts = line.replace("\t", ",").replace(" ", ",").split(",")
        parts = [p for p in parts if p]
        try:
            x, y, w, h = (float(p) for p in parts[:4])
            boxes.append(BBox.from_xywh(x, y, w, h))
        except (ValueError, InvalidInputError) as exc:
            raise DataError(f"{path}:{lineno}: bad box {line!r} ({exc})") from None
    return boxes


@dataclass
class Sequence:
    name: str
    frame_paths: list[Path]
    boxes: list[BBox]

    def __len__(self) -> int:
        return len(self.frame_paths)

    def frame(self, i: int) -> np.ndarray:
        return read_frame(self.frame_paths[i])


def load_sequence(path: str | Path) -> Sequence:
    root = Path(path)
    frame_dir = root / "frames"
    if not frame_dir.is_dir():
        raise DataError(f"{root} has no frames/ directory")
    frames = sorted(p for p in frame_dir.iterdir() if p.suffix.lower() in FRAME_EXTS)
    boxes = read_groundtruth(root / "groundtruth.txt")
    if not frames:
        raise DataError(f"{root}: no frames")
    if len(boxes) != len(frames):
        raise DataError(f"{root}: {len(frames)} frames but {len(boxes)} ground-truth boxes")
    return Sequence(root.name, frames, boxes)


def find_sequences(root: str | Path) -> list[Path]:
    """Sequence directories below ``root`` (or ``root`` itself), sorted by name."""
    root = Path(root)
    if (root / "frames").is_dir():
        return [root]
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if (p / "frames").is_dir())


def load_dataset(root: str | Path) -> list[Sequence]:
    seqs = [load_sequence(p) for p in find_sequences(root)]
    if not seqs:
        raise ConfigError(f"no sequences found under {root}")
    return seqs


# --- procedural sequences -------------------------------------------------

def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int, lo: float, hi: float) -> np.ndarray:
    from PIL import Image as _I

    gh, gw = max(2, h // cells), max(2, w // cells)
    coarse = rng.uniform(lo, hi, size=(gh, gw, 3)).astype(np.float32)
    chans = [np.asarray(_I.fromarray(coarse[..., c]).resize((w, h), _I.BICUBIC)) for c in range(3)]
    return np.stack(chans, axis=-1)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = _smooth_field(rng, h, w, cells=40, lo=0.15, hi=0.85)
    detail = _smooth_field(rng, h, w, cells=6, lo=-0.12, hi=0.12)
    return np.clip(base + detail, 0.0, 1.0)


def _target_texture(rng: np.random.Generator) -> np.ndarray:
    """A small high-contrast colour pattern, resized per frame to the box size."""
    n = int(rng.integers(3, 6))
    blocks = rng.uniform(0.0, 1.0, size=(n, n, 3)).astype(np.float32)
    # force contrast between neighbouring blocks
    blocks[::2, ::2] = 1.0 - blocks[::2, ::2]
    return blocks


def _render_texture(tex: np.ndarray, w: int, h: int) -> np.ndarray:
    chans = [np.asarray(PILImage.fromarray(tex[..., c]).resize((w, h), PILImage.NEAREST)) for c in range(3)]
    return np.stack(chans, axis=-1)


def synth_sequence(rng: np.random.Generator, frames: int, height: int, width: int,
                   min_target: int, max_target: int) -> tuple[list[np.ndarray], list[tuple[int, int, int, int]]]:
    """One procedurally generated sequence: a textured box drifting over texture."""
    bg = _background(rng, height, width)
    tex = _target_texture(rng)
    size0 = rng.uniform(min_target, max_target)
    aspect = rng.uniform(0.7, 1.4)
    base_w, base_h = size0 * np.sqrt(aspect), size0 / np.sqrt(aspect)
    cx = rng.uniform(0.3, 0.7) * width
    cy = rng.uniform(0.3, 0.7) * height
    speed = rng.uniform(0.5, 3.0)
    angle = rng.uniform(0, 2 * np.pi)
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    scale_phase, scale_rate = rng.uniform(0, 2 * np.pi), rng.uniform(0.01, 0.05)
    out_frames, boxes = [], []
    for t in range(frames):
        s = 1.0 + 0.2 * np.sin(scale_phase + scale_rate * t)
        w = int(max(4, round(base_w * s)))
        h = int(max(4, round(base_h * s)))
        vx += rng.normal(0.0, 0.3)
        vy += rng.normal(0.0, 0.3)
        vx, vy = np.clip(vx, -4, 4), np.clip(vy, -4, 4)
        cx, cy = cx + vx, cy + vy
        if cx - w / 2 < 2 or cx + w / 2 > width - 2:
            vx = -vx
            cx = np.clip(cx, w / 2 + 2, width - w / 2 - 2)
        if cy - h / 2 < 2 or cy + h / 2 > height - 2:
            vy = -vy
            cy = np.clip(cy, h / 2 + 2, height - h / 2 - 2)
        x0, y0 = int(round(cx - w / 2)), int(round(cy - h / 2))
        frame = bg.copy()
        frame[y0:y0 + h, x0:x0 + w] = _render_texture(tex, w, h)
        frame += rng.normal(0.0, 0.01, size=frame.shape).astype(np.float32)
        out_frames.append(np.clip(frame, 0.0, 1.0))
        boxes.append((x0, y0, w, h))
    return out_frames, boxes


def write_sequence(root: str | Path, frames: list[np.ndarray], boxes) -> Path:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames, 1):
        write_frame(root / "frames" / f"{i:06d}.png", frame)
    (root / "groundtruth.txt").write_text("".join(f"{x},{y},{w},{h}\n" for x, y, w, h in boxes))
    return root


def synth_dataset(out_dir: str | Path, seed: int, n_sequences: int, frames_each: int,
                  height: int = 320, width: int = 480, min_target: int = 16,
                  max_target: int = 32) -> list[Path]:
    if n_sequences < 1 or frames_each < 1:
        raise ConfigError("n_sequences and frames_each must be positive")
    if not 4 <= min_target <= max_target < min(height, width) // 2:
        raise ConfigError("target size range does not fit the frame")
    rng = np.random.default_rng(seed)
    paths = []
    for k in range(n_sequences):
        frames, boxes = synth_sequence(rng, frames_each, height, width, min_target, max_target)
        paths.append(write_sequence(Path(out_dir) / f"synth_{k:03d}", frames, boxes))
    return paths
