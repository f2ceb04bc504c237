"""A small trainable Siamese tracker and the adapter registry around it.

The tracker is a single-anchor, SiamRPN-style network: a shared 5-layer
convolutional backbone, depthwise cross-correlation of template and search
embeddings, and two 1x1 heads.

* ``score``: ``(B, 2, G, G)`` logits, channel 0 background, channel 1 target.
* ``regression``: ``(B, 4, G, G)`` ordered ``(x, y, w, h)``; ``x``/``y`` are
  centre offsets in response cells and ``w``/``h`` are log size ratios
  against the previous box.
"""

from __future__ import annotations

import dataclasses
import math
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import BBox
from .config import TrackerConfig
from .errors import DataError, InvalidInputError, RegistrationError
from .resample_attack import SearchGeometry

VICTIM_FORMAT = "ad2attack-victim/1"
STRIDE = 4  # backbone stride in patch pixels


@dataclass
class TrackerOutput:
    score: torch.Tensor
    regression: torch.Tensor
    predicted_box: BBox


def context_side(box: BBox, factor: float) -> float:
    p = (box.w + box.h) / 2.0
    return factor * math.sqrt((box.w + p) * (box.h + p))


def context_extent(box: BBox, factor: float) -> tuple[float, float]:
    """(width, height) of the context region; their geometric mean is ``context_side``.

    Keeping the previous box's aspect in the crop is what lets the size head
    see an aspect error at all: after a square crop every aspect looks alike.
    """
    p = (box.w + box.h) / 2.0
    return factor * (box.w + p), factor * (box.h + p)


def crop_rect(frame: np.ndarray, cx: float, cy: float, side_w: float, side_h: float,
              out_size: int) -> torch.Tensor:
    """Bilinearly resample a ``side_w`` x ``side_h`` region centred on (cx, cy) to a square.

    ``frame`` is ``(H, W, 3)`` float in [0, 1].  Samples that fall outside
    the frame take the frame's per-channel mean.
    """
    h, w = frame.shape[:2]
    mean = frame.reshape(-1, 3).mean(axis=0, dtype=np.float64)
    k = np.arange(out_size, dtype=np.float64) + 0.5
    xs = cx - side_w / 2.0 + k * (side_w / out_size) - 0.5
    ys = cy - side_h / 2.0 + k * (side_h / out_size) - 0.5

    def axis(coords, n):
        inside = (coords >= -0.5) & (coords <= n - 0.5)
        c = np.clip(coords, 0.0, n - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, (c - lo), inside

    x0, x1, fx, xin = axis(xs, w)
    y0, y1, fy, yin = axis(ys, h)

    def at(rows, cols):
        return frame[np.ix_(rows, cols)].astype(np.float64)

    top = at(y0, x0) * (1 - fx)[None, :, None] + at(y0, x1) * fx[None, :, None]
    bot = at(y1, x0) * (1 - fx)[None, :, None] + at(y1, x1) * fx[None, :, None]
    patch = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    outside = ~(yin[:, None] & xin[None, :])
    patch[outside] = mean
    patch = np.clip(patch, 0.0, 1.0).astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(patch.transpose(2, 0, 1)))


def crop_square(frame: np.ndarray, cx: float, cy: float, side: float, out_size: int) -> torch.Tensor:
    return crop_rect(frame, cx, cy, side, side, out_size)


def crop_search_patch(frame: np.ndarray, prev_box: BBox, search_size: int,
                      context: float = 2.0) -> tuple[torch.Tensor, SearchGeometry]:
    """Crop the context region around ``prev_box`` and resize it to ``search_size``.

    For a square box this is the usual square crop of side
    ``context * sqrt((w+p)(h+p))``; otherwise the crop follows the box's aspect
    with the same area, so Q (and the pyramid depth) is unchanged.
    """
    fh, fw = frame.shape[:2]
    x0, y0, x1, y1 = prev_box.corners()
    if x1 <= 0 or y1 <= 0 or x0 >= fw or y0 >= fh:
        raise InvalidInputError("previous box does not intersect the frame")
    side_w, side_h = context_extent(prev_box, context)
    if not (side_w > 0 and side_h > 0):
        raise InvalidInputError("degenerate box")
    patch = crop_rect(frame, prev_box.cx, prev_box.cy, side_w, side_h, search_size)
    geom = SearchGeometry(search_size, min(side_h, fh), min(side_w, fw), fh, fw, crop_h=side_h, crop_w=side_w)
    return patch, geom


class Backbone(nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        half = max(width // 2, 1)
        self.layers = nn.Sequential(
            nn.Conv2d(3, half, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(half, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
        )

    def forward(self, x):
        return self.layers(x)


def xcorr_depthwise(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    b, c = kernel.shape[:2]
    out = F.conv2d(x.reshape(1, b * c, *x.shape[2:]), kernel.reshape(b * c, 1, *kernel.shape[2:]),
                   groups=b * c)
    return out.reshape(b, c, *out.shape[2:])


class ToyTracker(nn.Module):
    """Reference victim; also the reference implementation of the adapter contract."""

    def __init__(self, cfg: TrackerConfig | None = None):
        super().__init__()
        self.cfg = cfg or TrackerConfig()
        c = self.cfg.backbone_width
        self.backbone = Backbone(c)
        self.adjust_z = nn.Conv2d(c, c, 1)
        self.adjust_x = nn.Conv2d(c, c, 1)
        self.cls_head = nn.Sequential(nn.Conv2d(c, c, 1), nn.ReLU(), nn.Conv2d(c, 2, 1))
        self.reg_head = nn.Sequential(nn.Conv2d(c, c, 1), nn.ReLU(), nn.Conv2d(c, 4, 1))

    @property
    def search_size(self) -> int:
        return self.cfg.search_size

    @property
    def context(self) -> float:
        return self.cfg.context_search

    @property
    def stride(self) -> int:
        return STRIDE

    def embed_template(self, z: torch.Tensor) -> torch.Tensor:
        zf = self.backbone(z if z.dim() == 4 else z.unsqueeze(0))
        k = self.cfg.template_crop
        lo = (zf.shape[-1] - k) // 2
        return self.adjust_z(zf[..., lo:lo + k, lo:lo + k])

    def forward(self, template_feat: torch.Tensor, search: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = search if search.dim() == 4 else search.unsqueeze(0)
        xf = self.adjust_x(self.backbone(x))
        if template_feat.shape[0] != xf.shape[0]:
            template_feat = template_feat.expand(xf.shape[0], -1, -1, -1)
        corr = xcorr_depthwise(xf, template_feat)
        return self.cls_head(corr), self.reg_head(corr)

    def template_patch(self, frame: np.ndarray, box: BBox) -> torch.Tensor:
        side_w, side_h = context_extent(box, self.cfg.context_template)
        return crop_rect(frame, box.cx, box.cy, side_w, side_h, self.cfg.template_size)

    def init_template(self, frame: np.ndarray, box: BBox) -> torch.Tensor:
        x0, y0, x1, y1 = box.corners()
        fh, fw = frame.shape[:2]
        if x1 <= 0 or y1 <= 0 or x0 >= fw or y0 >= fh:
            raise InvalidInputError("initial box does not intersect the frame")
        with torch.no_grad():
            return self.embed_template(self.template_patch(frame, box))


def decode_box(score: torch.Tensor, reg: torch.Tensor, geom: SearchGeometry, prev_box: BBox,
               stride: int = STRIDE) -> BBox:
    """Decode one ``(2, G, G)`` score map and ``(4, G, G)`` regression map.

    Ties in target probability resolve to the smallest row-major index.
    """
    if score.dim() == 4:
        score, reg = score[0], reg[0]
    if score.shape[-2:] != reg.shape[-2:] or score.shape[0] != 2 or reg.shape[0] != 4:
        raise InvalidInputError("score/regression shapes disagree")
    prob = torch.softmax(score.detach().double(), dim=0)[1]
    gh, gw = prob.shape
    idx = int(torch.argmax(prob.reshape(-1)))  # first maximum wins
    i, j = divmod(idx, gw)
    r = reg.detach().double()[:, i, j]
    crop_h, crop_w = geom.extent
    cell_x = stride * crop_w / geom.search_size
    cell_y = stride * crop_h / geom.search_size
    cx = prev_box.cx + ((j - (gw - 1) / 2.0) + float(r[0])) * cell_x
    cy = prev_box.cy + ((i - (gh - 1) / 2.0) + float(r[1])) * cell_y
    w = prev_box.w * math.exp(float(r[2]))
    h = prev_box.h * math.exp(float(r[3]))
    return BBox(cx, cy, w, h)


def track_step(tracker, template_feat: torch.Tensor, search_patch: torch.Tensor,
               geom: SearchGeometry, prev_box: BBox) -> TrackerOutput:
    with torch.no_grad():
        score, reg = tracker(template_feat, search_patch)
    box = decode_box(score[0], reg[0], geom, prev_box, stride=getattr(tracker, "stride", STRIDE))
    return TrackerOutput(score[0], reg[0], box)


@runtime_checkable
class TrackerAdapter(Protocol):
    search_size: int
    context: float
    stride: int

    def init_template(self, frame: np.ndarray, box: BBox) -> Any: ...

    def __call__(self, template_feat: Any, search: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]: ...


_REGISTRY: dict[str, Any] = {}


def _probe(adapter) -> None:
    size = int(adapter.search_size)
    frame = np.full((2 * size, 2 * size, 3), 0.5, dtype=np.float32)
    box = BBox(float(size), float(size), size / 4.0, size / 4.0)
    try:
        template = adapter.init_template(frame, box)
        patch, _ = crop_search_patch(frame, box, size, adapter.context)
        with torch.no_grad():
            score, reg = adapter(template, patch.unsqueeze(0))
    except Exception as exc:  # noqa: BLE001 - any failure means the contract is unmet
        raise RegistrationError(f"adapter probe failed: {exc}") from exc
    if score.dim() != 4 or score.shape[1] != 2:
        raise RegistrationError(f"score map must have 2 channels, got shape {tuple(score.shape)}")
    if reg.dim() != 4 or reg.shape[1] != 4:
        raise RegistrationError(f"regression map must have 4 channels, got shape {tuple(reg.shape)}")
    if score.shape[-2:] != reg.shape[-2:]:
        raise RegistrationError("score and regression grids differ")


def register_tracker(name: str, adapter) -> None:
    for attr in ("search_size", "context", "init_template"):
        if not hasattr(adapter, attr):
            raise RegistrationError(f"adapter {name!r} lacks {attr!r}")
    if not callable(adapter):
        raise RegistrationError(f"adapter {name!r} is not callable")
    if isinstance(adapter, nn.Module):
        adapter.eval()
    _probe(adapter)
    _REGISTRY[name] = adapter


def get_tracker(name: str):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise RegistrationError(f"no tracker registered as {name!r}") from None


def registered() -> list[str]:
    return sorted(_REGISTRY)


def load_adapter_factory(spec: str) -> Callable[..., Any]:
    """Resolve ``package.module:factory`` to a callable."""
    import importlib

    module, _, attr = spec.partition(":")
    if not module or not attr:
        raise RegistrationError(f"adapter spec must look like 'module:factory', got {spec!r}")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise RegistrationError(f"cannot import adapter {spec!r}: {exc}") from None


def save_victim(tracker: ToyTracker, path: str | Path) -> None:
    params = {k: v.detach().clone() for k, v in tracker.state_dict().items()}
    torch.save({
        "format": VICTIM_FORMAT,
        "config": dataclasses.asdict(tracker.cfg),
        "params": params,
        "shapes": {k: list(v.shape) for k, v in params.items()},
    }, path)


def load_victim(path: str | Path) -> ToyTracker:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, pickle.UnpicklingError) as exc:
        raise DataError(f"cannot read victim checkpoint {path}: {exc}") from None
    if not isinstance(blob, dict) or blob.get("format") != VICTIM_FORMAT:
        raise DataError(f"{path} is not an {VICTIM_FORMAT} checkpoint")
    tracker = ToyTracker(TrackerConfig(**blob["config"]))
    tracker.load_state_dict(blob["params"])
    return tracker.eval()


def freeze(tracker: nn.Module) -> nn.Module:
    tracker.eval()
    for p in tracker.parameters():
        p.requires_grad_(False)
    return tracker
