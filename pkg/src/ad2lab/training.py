"""Corpus construction, victim pretraining and SrU attack training."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import BBox
from .config import AttackConfig, Config, TrackerConfig, TrainConfig
from .data import Sequence, find_sequences, load_sequence
from .errors import ConfigError, InvariantError
from .losses import region_masks, total_loss
from .resample_attack import SruNetwork, adaptive_pyramid_levels, resample
from .tracker import STRIDE, ToyTracker, context_extent, crop_rect, crop_search_patch, freeze

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorpusItem:
    sequence: Sequence
    search_index: int
    init_box: BBox
    gt_box: BBox
    prev_box: BBox
    template_index: int = 0


@dataclass
class TrainingCorpus:
    items: list[CorpusItem]
    cadence: int

    def __len__(self) -> int:
        return len(self.items)


def build_corpus(sequence_dirs: Iterable[str | Path | Sequence], cadence: int = 10) -> TrainingCorpus:
    """Sample every ``cadence``-th frame of each sequence.

    Each item pairs the sampled frame with its sequence's first frame (the
    template source).  The crop is centred on the previous frame's box, as it
    would be during tracking.
    """
    if cadence < 1:
        raise ConfigError("cadence must be >= 1")
    seqs: list[Sequence] = []
    for entry in sequence_dirs:
        if isinstance(entry, Sequence):
            seqs.append(entry)
        else:
            seqs.extend(load_sequence(p) for p in find_sequences(entry))
    items = []
    for seq in seqs:
        for k in range(0, len(seq), cadence):
            prev = seq.boxes[max(k - 1, 0)]
            items.append(CorpusItem(seq, k, seq.boxes[0], seq.boxes[k], prev))
    if not items:
        raise ConfigError("training corpus is empty")
    return TrainingCorpus(items, cadence)


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- victim pretraining ---------------------------------------------------

def _cell_offsets(grid: int) -> torch.Tensor:
    return torch.arange(grid, dtype=torch.float32) - (grid - 1) / 2.0


def victim_labels(gt: BBox, prev: BBox, crop_w: float, crop_h: float, search_size: int, grid: int,
                  pos_radius: float = 1.5, neg_radius: float = 3.0):
    """Classification labels (1 pos, 0 neg, -1 ignore) and regression targets."""
    dx = (gt.cx - prev.cx) / (STRIDE * crop_w / search_size)
    dy = (gt.cy - prev.cy) / (STRIDE * crop_h / search_size)
    off = _cell_offsets(grid)
    rx = dx - off[None, :].expand(grid, grid)
    ry = dy - off[:, None].expand(grid, grid)
    dist = torch.sqrt(rx ** 2 + ry ** 2)
    cls = torch.full((grid, grid), -1.0)
    cls[dist > neg_radius] = 0.0
    cls[dist <= pos_radius] = 1.0
    rw = torch.full((grid, grid), math.log(gt.w / prev.w))
    rh = torch.full((grid, grid), math.log(gt.h / prev.h))
    return cls, torch.stack([rx, ry, rw, rh])


def victim_loss(score, reg, cls, reg_target, beta: float = 1.0 / 9.0):
    logp = F.log_softmax(score, dim=1)
    pos, neg = cls == 1, cls == 0
    pos_loss = -(logp[:, 1][pos]).mean() if pos.any() else score.sum() * 0
    neg_loss = -(logp[:, 0][neg]).mean() if neg.any() else score.sum() * 0
    cls_loss = 0.5 * (pos_loss + neg_loss)
    if pos.any():
        m = pos.unsqueeze(1).expand_as(reg)
        reg_loss = F.smooth_l1_loss(reg[m], reg_target[m], beta=beta)
    else:
        reg_loss = reg.sum() * 0
    return cls_loss + reg_loss, cls_loss, reg_loss


class _FrameCache:
    def __init__(self, sequences: list[Sequence]):
        self.frames = {
            id(s): [np.rint(s.frame(i) * 255).astype(np.uint8) for i in range(len(s))] for s in sequences
        }

    def get(self, seq: Sequence, i: int) -> np.ndarray:
        return self.frames[id(seq)][i].astype(np.float32) / 255.0


def pretrain_victim(sequences: list[Sequence], tracker_cfg: TrackerConfig, train_cfg: TrainConfig,
                    on_epoch: Callable[[dict], None] | None = None) -> tuple[ToyTracker, list[dict]]:
    """Train the toy victim on clean pairs (cross-entropy + smooth-L1)."""
    if not sequences:
        raise ConfigError("no sequences for victim pretraining")
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    tracker = ToyTracker(tracker_cfg)
    tracker.train()
    opt = torch.optim.Adam(tracker.parameters(), lr=train_cfg.victim_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, train_cfg.victim_steps))
    cache = _FrameCache(sequences)
    s = tracker_cfg.search_size
    with torch.no_grad():
        templates = [tracker.template_patch(cache.get(seq, 0), seq.boxes[0]) for seq in sequences]
    history, window, best = [], [], math.inf
    epoch_len = 100
    for step in range(train_cfg.victim_steps):
        zs, xs, meta = [], [], []
        for _ in range(train_cfg.victim_batch_size):
            si = int(rng.integers(len(sequences)))
            seq = sequences[si]
            k = int(rng.integers(1, len(seq))) if len(seq) > 1 else 0
            base = seq.boxes[k - 1] if k > 0 else seq.boxes[0]
            # perturbed previous box, so the heads learn to pull position and size back
            jitter = 0.25 * (base.w + base.h) / 2.0
            prev = BBox(base.cx + rng.normal(0, jitter), base.cy + rng.normal(0, jitter),
                        base.w * math.exp(rng.uniform(-0.4, 0.4)), base.h * math.exp(rng.uniform(-0.4, 0.4)))
            frame = cache.get(seq, k)
            side_w, side_h = context_extent(prev, tracker_cfg.context_search)
            xs.append(crop_rect(frame, prev.cx, prev.cy, side_w, side_h, s))
            zs.append(templates[si])
            meta.append((seq.boxes[k], prev, side_w, side_h))
        score, reg = tracker(tracker.embed_template(torch.stack(zs)), torch.stack(xs))
        grid = score.shape[-1]
        labels = [victim_labels(gt, prev, sw, sh, s, grid) for gt, prev, sw, sh in meta]
        cls = torch.stack([c for c, _ in labels])
        reg_t = torch.stack([r for _, r in labels])
        loss, _, _ = victim_loss(score, reg, cls, reg_t)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        window.append(loss.item())
        if (step + 1) % epoch_len == 0 or step + 1 == train_cfg.victim_steps:
            mean = float(np.mean(window))
            best = min(best, mean)
            rec = {"step": step + 1, "loss": mean, "best": best}
            history.append(rec)
            window = []
            log.info("victim step %d loss %.4f", step + 1, mean)
            if on_epoch:
                on_epoch(rec)
    return freeze(tracker), history


# --- attack training ------------------------------------------------------

@dataclass
class PreparedCorpus:
    clean: torch.Tensor        # (N, 3, S, S)
    template: torch.Tensor     # (N, C, k, k)
    levels: torch.Tensor       # (N,)
    clean_score: torch.Tensor  # (N, 2, G, G)
    clean_reg: torch.Tensor    # (N, 4, G, G)


def prepare_corpus(corpus: TrainingCorpus, victim: ToyTracker, max_levels: int) -> PreparedCorpus:
    templates: dict[str, torch.Tensor] = {}
    clean, tmpl, levels = [], [], []
    for item in corpus.items:
        seq = item.sequence
        if id(seq) not in templates:
            templates[id(seq)] = victim.init_template(seq.frame(item.template_index), item.init_box)
        patch, geom = crop_search_patch(seq.frame(item.search_index), item.prev_box,
                                        victim.search_size, victim.context)
        clean.append(patch)
        tmpl.append(templates[id(seq)][0])
        levels.append(min(adaptive_pyramid_levels(geom), max_levels))
    clean_t, tmpl_t = torch.stack(clean), torch.stack(tmpl)
    with torch.no_grad():
        score, reg = victim(tmpl_t, clean_t)
    return PreparedCorpus(clean_t, tmpl_t, torch.tensor(levels), score, reg)


@dataclass
class TrainResult:
    sru: SruNetwork
    history: list[dict]
    best_loss: float
    best_state: dict = field(repr=False, default_factory=dict)
    victim_hash_before: str = ""
    victim_hash_after: str = ""


def _step_loss(sru, victim, data: PreparedCorpus, idx: torch.Tensor, attack: AttackConfig):
    """Batch loss, computed per pyramid-level group and weighted by group size."""
    parts = {"total": 0.0, "score": 0.0, "drift": 0.0, "l2": 0.0}
    total = None
    n = len(idx)
    for lv in torch.unique(data.levels[idx]).tolist():
        g = idx[data.levels[idx] == lv]
        clean = data.clean[g]
        adv = resample(clean, int(lv), sru)
        adv_score, adv_reg = victim(data.template[g], adv)
        br = total_loss(clean, adv, (data.clean_score[g], data.clean_reg[g]), (adv_score, adv_reg), attack)
        w = len(g) / n
        total = br.total * w if total is None else total + br.total * w
        for key, val in (("score", br.score), ("drift", br.drift), ("l2", br.l2)):
            parts[key] += val.item() * w
    return total, parts


def train(corpus: TrainingCorpus | PreparedCorpus, victim: ToyTracker, sru: SruNetwork, cfg: Config,
          on_record: Callable[[dict], None] | None = None, dump_dir: str | Path | None = None) -> TrainResult:
    """Optimise the SrU parameters against a frozen victim with Adam.

    Returns the network after the final step; the lowest-loss parameters are
    kept in ``best_state``.
    """
    tc, attack = cfg.train, cfg.attack
    freeze(victim)
    before = param_hash(victim)
    data = corpus if isinstance(corpus, PreparedCorpus) else prepare_corpus(corpus, victim, len(sru.levels))
    n_items = data.clean.shape[0]
    gen = torch.Generator().manual_seed(tc.seed)
    opt = torch.optim.Adam(sru.parameters(), lr=tc.lr)
    sru.train()
    history: list[dict] = []
    best, best_state = math.inf, copy.deepcopy(sru.state_dict())
    order = torch.empty(0, dtype=torch.long)
    for step in range(1, tc.steps + 1):
        if len(order) < tc.batch_size:
            order = torch.cat([order, torch.randperm(n_items, generator=gen)])
        idx, order = order[:tc.batch_size], order[tc.batch_size:]
        loss, parts = _step_loss(sru, victim, data, idx, attack)
        if not torch.isfinite(loss):
            _dump_batch(dump_dir, step, data, idx, sru)
            raise InvariantError(f"non-finite loss at step {step}: {parts}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"step": step, "L_score": parts["score"], "L_drift": parts["drift"], "L_2": parts["l2"]}
        rec["total"] = rec["L_score"] + rec["L_drift"] + rec["L_2"]
        history.append(rec)
        if rec["total"] < best:
            best = rec["total"]
            best_state = copy.deepcopy(sru.state_dict())
        if on_record:
            on_record(rec)
        if tc.log_every and step % tc.log_every == 0:
            log.info("step %d total %.4f score %.4f drift %.4f l2 %.4f", step, rec["total"],
                     rec["L_score"], rec["L_drift"], rec["L_2"])
    sru.eval()
    after = param_hash(victim)
    if after != before:
        raise InvariantError("victim parameters changed during attack training")
    return TrainResult(sru, history, best, best_state, before, after)


def _dump_batch(dump_dir, step, data: PreparedCorpus, idx, sru) -> None:
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nonfinite_step{step:06d}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"step": step, "indices": idx, "clean": data.clean[idx], "levels": data.levels[idx],
                "sru": sru.state_dict()}, path)
    log.error("non-finite loss; batch dumped to %s", path)
