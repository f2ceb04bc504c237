"""Downsample-then-super-resolve adversarial patch generation.

A clean search patch is decimated by ``2**levels`` (no anti-aliasing, so
pixel information is genuinely lost) and then rebuilt by a cascaded pyramid
network.  Each pyramid level bilinearly doubles the current image and adds a
learned residual produced by the level's feature branch; the feature branch
of level ``k`` feeds level ``k + 1``.

Images are torch tensors, ``(3, H, W)`` or batched ``(B, 3, H, W)``, with
values in ``[0, 1]``.
"""

from __future__ import annotations

import dataclasses
import math
import pickle
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import PyramidConfig
from .errors import DataError, InvalidInputError, InvariantError

SEARCH_SIZE = 255
LEVEL_CAP = 5
SRU_FORMAT = "ad2attack-sru/1"


@dataclass(frozen=True)
class SearchGeometry:
    """Where a search patch came from.

    ``patch_h``/``patch_w`` are the crop extent in frame pixels, before the
    crop is resized to ``search_size``, capped at the frame size so that Q
    stays a fraction of the frame.  ``crop_h``/``crop_w`` keep the uncapped
    extent when it differs (needed to map response cells back to pixels).
    """

    search_size: int
    patch_h: float
    patch_w: float
    frame_h: int
    frame_w: int
    crop_h: float | None = None
    crop_w: float | None = None

    def __post_init__(self):
        if self.frame_h <= 0 or self.frame_w <= 0:
            raise InvalidInputError("degenerate geometry: zero-area frame")
        if self.search_size <= 0:
            raise InvalidInputError("search_size must be positive")
        if not (0 < self.patch_h <= self.frame_h and 0 < self.patch_w <= self.frame_w):
            raise InvalidInputError(
                f"patch {self.patch_h}x{self.patch_w} does not fit frame "
                f"{self.frame_h}x{self.frame_w}")

    @property
    def extent(self) -> tuple[float, float]:
        """Uncapped (height, width) of the crop in frame pixels."""
        return (self.crop_h if self.crop_h is not None else self.patch_h,
                self.crop_w if self.crop_w is not None else self.patch_w)

    @property
    def area_fraction(self) -> Fraction:
        """Q: exact ratio of patch area to frame area."""
        return (Fraction(self.patch_h) * Fraction(self.patch_w)
                / (Fraction(self.frame_h) * Fraction(self.frame_w)))


def raw_pyramid_levels(geom: SearchGeometry) -> int:
    """floor(sqrt(H_s * Q)) in exact rational arithmetic, before clamping."""
    x = geom.search_size * geom.area_fraction
    # floor(sqrt(x)) == isqrt(floor(x)) for x >= 0
    return math.isqrt(math.floor(x))


def adaptive_pyramid_levels(geom: SearchGeometry, cap: int = LEVEL_CAP) -> int:
    return max(1, min(cap, raw_pyramid_levels(geom)))


def check_image(img: torch.Tensor, name: str = "image") -> None:
    if img.dim() not in (3, 4) or img.shape[-3] != 3:
        raise InvalidInputError(f"{name} must be (3,H,W) or (B,3,H,W), got {tuple(img.shape)}")
    if img.shape[-1] < 8 or img.shape[-2] < 8:
        raise InvalidInputError(f"{name} must be at least 8x8, got {tuple(img.shape[-2:])}")
    if not torch.isfinite(img).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    if img.min() < 0 or img.max() > 1:
        raise InvalidInputError(f"{name} values must lie in [0, 1]")


def did_downsample(img: torch.Tensor, levels: int) -> torch.Tensor:
    """Strided decimation by 2**levels, anchored at the top-left pixel."""
    if levels < 0:
        raise InvalidInputError("levels must be non-negative")
    step = 2 ** levels
    h, w = img.shape[-2:]
    if h % step or w % step:
        raise InvalidInputError(f"{h}x{w} is not divisible by {step}")
    return img[..., ::step, ::step]


@dataclass(frozen=True)
class RestoreRecipe:
    height: int
    width: int
    identity: bool


def _resize(img: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    batched = img.dim() == 4
    x = img if batched else img.unsqueeze(0)
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return x if batched else x.squeeze(0)


def align_for_pyramid(img: torch.Tensor, levels: int) -> tuple[torch.Tensor, RestoreRecipe]:
    step = 2 ** levels
    h, w = img.shape[-2:]
    ah, aw = -(-h // step) * step, -(-w // step) * step
    recipe = RestoreRecipe(h, w, identity=(ah, aw) == (h, w))
    if recipe.identity:
        return img, recipe
    return _resize(img, (ah, aw)), recipe


def restore(recipe: RestoreRecipe, img: torch.Tensor) -> torch.Tensor:
    if recipe.identity:
        return img
    return _resize(img, (recipe.height, recipe.width))


def upsample2(img: torch.Tensor) -> torch.Tensor:
    return F.interpolate(img, scale_factor=2, mode="bilinear", align_corners=False)


class SpatialGate(nn.Module):
    """Spatial attention: channel max+mean -> conv -> sigmoid."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.amax(dim=1, keepdim=True), x.mean(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class RSE(nn.Module):
    """Residual spatial enhancement block.

    ``out = relu(conv1x1(gate(act(group_conv(x))))) + x``.  With
    ``zero_init=True`` the final 1x1 projection starts at zero and the block
    is exactly the identity.
    """

    def __init__(self, channels: int, groups: int, kernel_size: int = 7, zero_init: bool = False):
        super().__init__()
        if channels % groups:
            raise InvalidInputError("channels must be divisible by groups")
        self.channels = channels
        self.group_conv = nn.Conv2d(channels, channels, 3, padding=1, groups=groups)
        self.act = nn.LeakyReLU(0.2)
        self.spatial = SpatialGate(kernel_size)
        self.project = nn.Conv2d(channels, channels, 1)
        if zero_init:
            nn.init.zeros_(self.project.weight)
            nn.init.zeros_(self.project.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise InvalidInputError(f"expected {self.channels} channels, got {x.shape[1]}")
        branch = self.spatial(self.act(self.group_conv(x)))
        return F.relu(self.project(branch)) + x


def rse_forward(features: torch.Tensor, block: RSE) -> torch.Tensor:
    return block(features)


class PyramidLevel(nn.Module):
    def __init__(self, cfg: PyramidConfig):
        super().__init__()
        c = cfg.feature_channels
        self.rse = RSE(c, cfg.group_count, cfg.spatial_kernel) if cfg.use_rse else nn.Identity()
        body = []
        for _ in range(cfg.convs_per_block):
            body += [nn.Conv2d(c, c, 3, padding=1), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*body)
        self.up = nn.ConvTranspose2d(c, c, 4, stride=2, padding=1)
        self.act = nn.LeakyReLU(0.2)
        self.to_residual = nn.Conv2d(c, 3, 3, padding=1)
        nn.init.zeros_(self.to_residual.weight)
        nn.init.zeros_(self.to_residual.bias)

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.act(self.up(self.body(self.rse(feats))))
        return feats, self.to_residual(feats)


class SruNetwork(nn.Module):
    """Cascaded pyramid super-resolution network with one parameter set per level."""

    def __init__(self, cfg: PyramidConfig | None = None):
        super().__init__()
        self.cfg = cfg or PyramidConfig()
        c = self.cfg.feature_channels
        self.stem = nn.Sequential(nn.Conv2d(3, c, 3, padding=1), nn.LeakyReLU(0.2))
        self.levels = nn.ModuleList(PyramidLevel(self.cfg) for _ in range(self.cfg.levels))

    def forward(self, lr: torch.Tensor, levels: int) -> torch.Tensor:
        return sru_forward(lr, self, levels)

    def zero_residuals(self) -> "SruNetwork":
        with torch.no_grad():
            for level in self.levels:
                level.to_residual.weight.zero_()
                level.to_residual.bias.zero_()
        return self


def sru_forward(lr: torch.Tensor, net: SruNetwork, levels: int,
                max_size: tuple[int, int] | None = None) -> torch.Tensor:
    if not 1 <= levels <= len(net.levels):
        raise InvalidInputError(f"levels={levels} outside [1, {len(net.levels)}]")
    batched = lr.dim() == 4
    image = lr if batched else lr.unsqueeze(0)
    feats = net.stem(image)
    for level in net.levels[:levels]:
        feats, residual = level(feats)
        image = upsample2(image) + residual
    if max_size is not None and (image.shape[-2] > max_size[0] or image.shape[-1] > max_size[1]):
        raise InvariantError(f"pyramid output {tuple(image.shape[-2:])} overflows {max_size}")
    image = image.clamp(0.0, 1.0)
    return image if batched else image.squeeze(0)


def down_up(clean: torch.Tensor, levels: int) -> torch.Tensor:
    """Decimate then plain bilinear upsampling; the zero-residual baseline."""
    aligned, recipe = align_for_pyramid(clean, levels)
    image = did_downsample(aligned, levels)
    batched = image.dim() == 4
    image = image if batched else image.unsqueeze(0)
    for _ in range(levels):
        image = upsample2(image)
    image = image.clamp(0.0, 1.0)
    return restore(recipe, image if batched else image.squeeze(0))


def resample(clean: torch.Tensor, levels: int, net: SruNetwork) -> torch.Tensor:
    aligned, recipe = align_for_pyramid(clean, levels)
    lr = did_downsample(aligned, levels)
    adv = sru_forward(lr, net, levels, max_size=tuple(aligned.shape[-2:]))
    if tuple(adv.shape[-2:]) != tuple(aligned.shape[-2:]):
        raise InvariantError("pyramid output does not match aligned patch size")
    return restore(recipe, adv)


def attack_patch(clean: torch.Tensor, geom: SearchGeometry, net: SruNetwork) -> torch.Tensor:
    levels = min(adaptive_pyramid_levels(geom), len(net.levels))
    return resample(clean, levels, net)


def save_sru(net: SruNetwork, path: str | Path) -> None:
    params = {k: v.detach().clone() for k, v in net.state_dict().items()}
    torch.save({
        "format": SRU_FORMAT,
        "config": dataclasses.asdict(net.cfg),
        "params": params,
        "shapes": {k: list(v.shape) for k, v in params.items()},
    }, path)


def load_sru(path: str | Path) -> SruNetwork:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, pickle.UnpicklingError) as exc:
        raise DataError(f"cannot read SrU checkpoint {path}: {exc}") from None
    if not isinstance(blob, dict) or blob.get("format") != SRU_FORMAT:
        raise DataError(f"{path} is not an {SRU_FORMAT} checkpoint")
    for name, shape in blob["shapes"].items():
        if list(blob["params"][name].shape) != shape:
            raise DataError(f"{path}: tensor {name} has shape {blob['params'][name].shape}, expected {shape}")
    net = SruNetwork(PyramidConfig(**blob["config"]))
    net.load_state_dict(blob["params"])
    return net
