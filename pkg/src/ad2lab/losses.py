"""Attack objectives: score reversal, box drift, perceptibility.

All functions take batched maps, ``(B, 2, G, G)`` scores and
``(B, 4, G, G)`` regressions, or single unbatched maps.  Each loss is
normalised per sample by the number of elements it sums over and then
averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import INTENT, AttackConfig


def _batch(t: torch.Tensor, dims: int = 4) -> torch.Tensor:
    return t if t.dim() == dims else t.unsqueeze(0)


def class_probs(score: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-cell softmax; returns (background, target) probability grids."""
    p = torch.softmax(score, dim=-3)
    return p.select(-3, 0), p.select(-3, 1)


@dataclass
class RegionMasks:
    target_mask: torch.Tensor
    background_mask: torch.Tensor

    @property
    def n_target(self) -> torch.Tensor:
        return self.target_mask.flatten(1).sum(1)

    @property
    def n_background(self) -> torch.Tensor:
        return self.background_mask.flatten(1).sum(1)


def region_masks(clean_score: torch.Tensor, cfg: AttackConfig) -> RegionMasks:
    with torch.no_grad():
        p_b, p_t = class_probs(_batch(clean_score))
        target = p_t > cfg.epsilon
        if cfg.mask_rule == INTENT:
            background = p_b > cfg.epsilon
        else:
            background = p_b < -cfg.epsilon
    return RegionMasks(target, background)


def _masked_sum(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return (values * mask.to(values.dtype)).flatten(1).sum(1)


def _safe_mean(per_sample: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    n = n.to(per_sample.dtype)
    out = torch.where(n > 0, per_sample / n.clamp(min=1), torch.zeros_like(per_sample))
    return out.mean()


def score_reversal_loss(clean_score: torch.Tensor, adv_score: torch.Tensor,
                        masks: RegionMasks, cfg: AttackConfig) -> torch.Tensor:
    clean_score, adv_score = _batch(clean_score), _batch(adv_score)
    pb_c, pt_c = class_probs(clean_score.detach())
    pb_a, pt_a = class_probs(adv_score)
    target_term = _masked_sum(pt_a - pt_c, masks.target_mask)
    background_term = _masked_sum(pb_a - pb_c, masks.background_mask)
    sign = -1.0 if cfg.background_sign == INTENT else 1.0
    n = masks.n_target + masks.n_background
    return cfg.phi * _safe_mean(target_term + sign * background_term, n)


def box_drift_loss(adv_reg: torch.Tensor, masks: RegionMasks, cfg: AttackConfig) -> torch.Tensor:
    reg = _batch(adv_reg)
    size = torch.clamp(reg[:, 2] + reg[:, 3], min=cfg.tau_b)
    offset = torch.clamp(reg[:, 0] ** 2 + reg[:, 1] ** 2, max=cfg.tau_c)
    n = masks.n_target
    shrink = _safe_mean(_masked_sum(size, masks.target_mask), n)
    drift = _safe_mean(_masked_sum(offset, masks.target_mask), n)
    return cfg.beta * shrink - cfg.alpha * drift


def perceptibility_loss(clean: torch.Tensor, adv: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    clean, adv = _batch(clean), _batch(adv)
    diff = (adv - clean).flatten(1)
    n = diff.shape[1]
    return (cfg.gamma / n * torch.linalg.vector_norm(diff, dim=1)).mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    score: torch.Tensor
    drift: torch.Tensor
    l2: torch.Tensor

    def record(self) -> dict[str, float]:
        return {"total": float(self.total), "L_score": float(self.score),
                "L_drift": float(self.drift), "L_2": float(self.l2)}


def total_loss(clean: torch.Tensor, adv: torch.Tensor,
               clean_out: tuple[torch.Tensor, torch.Tensor],
               adv_out: tuple[torch.Tensor, torch.Tensor],
               cfg: AttackConfig, masks: RegionMasks | None = None) -> LossBreakdown:
    """``clean_out``/``adv_out`` are ``(score, regression)`` pairs."""
    clean_score = clean_out[0]
    adv_score, adv_reg = adv_out
    if masks is None:
        masks = region_masks(clean_score, cfg)
    score = score_reversal_loss(clean_score, adv_score, masks, cfg)
    drift = box_drift_loss(adv_reg, masks, cfg)
    l2 = perceptibility_loss(clean, adv, cfg)
    return LossBreakdown(score + drift + l2, score, drift, l2)


def heatmap(tracker, template_feat: torch.Tensor, patch: torch.Tensor) -> torch.Tensor:
    """Input-gradient attention map of the target logits, ``(H, W)`` in [0, 1]."""
    x = patch.detach().clone()
    if x.dim() == 3:
        x = x.unsqueeze(0)
    x.requires_grad_(True)
    with torch.enable_grad():
        score, _ = tracker(template_feat, x)
        (grad,) = torch.autograd.grad(score[:, 1].sum(), x)
    g = torch.linalg.vector_norm(grad[0], dim=0)
    peak = g.max()
    return g / peak if peak > 0 else torch.zeros_like(g)
