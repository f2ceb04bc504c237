"""One-pass evaluation, clean or under attack, and the metric reports built on it.

Precision comes from centre location error (fraction of frames with
CLE <= 20 px), success from IoU (fraction of frames with IoU strictly above
each threshold in 0, 0.05, ..., 1, averaged over thresholds).  Because the
comparison is strict, a perfect run scores 20/21 rather than 1.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .boxes import BBox, cle, iou
from .data import Sequence, write_frame
from .errors import DataError, InvalidInputError
from .resample_attack import SruNetwork, adaptive_pyramid_levels, down_up, resample
from .tracker import crop_search_patch, decode_box

RUN_FORMAT = "ad2attack-run/1"
MODES = ("clean", "down-up", "no-rse", "attack")
PRECISION_THRESHOLDS = tuple(range(51))
SUCCESS_THRESHOLDS = tuple(Fraction(i, 20) for i in range(21))
PRECISION_AT = 20
MIN_BOX = 4.0


@dataclass
class TrackingRun:
    sequence: str
    mode: str
    boxes: list[BBox]
    iou_series: list[float]
    cle_series: list[float]
    latency_ms: list[float]
    levels: list[int] = field(default_factory=list)
    perturbation: list[float] = field(default_factory=list)      # ||S^a - S^c||_2 / N per frame
    perturbation_rms: list[float] = field(default_factory=list)  # ||S^a - S^c||_2 / sqrt(N)
    complete: bool = True
    error: str = ""

    def __post_init__(self):
        n = len(self.boxes)
        if not (len(self.iou_series) == len(self.cle_series) == len(self.latency_ms) == n):
            raise InvalidInputError("per-frame series lengths differ")

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou_series)) if self.iou_series else 0.0


def _clip_box(box: BBox, frame_h: int, frame_w: int) -> BBox:
    w = min(max(box.w, MIN_BOX), float(frame_w))
    h = min(max(box.h, MIN_BOX), float(frame_h))
    cx = min(max(box.cx, 0.0), float(frame_w))
    cy = min(max(box.cy, 0.0), float(frame_h))
    return BBox(cx, cy, w, h)


def perturb(mode: str, patch: torch.Tensor, levels: int, sru: SruNetwork | None) -> torch.Tensor:
    if mode == "clean":
        return patch
    if mode == "down-up":
        return down_up(patch, levels)
    if mode in ("no-rse", "attack"):
        if sru is None:
            raise InvalidInputError(f"mode {mode!r} needs a pyramid network")
        return resample(patch, min(levels, len(sru.levels)), sru)
    raise InvalidInputError(f"unknown mode {mode!r}; expected one of {MODES}")


def run_sequence(tracker, sequence: Sequence, mode: str = "clean", sru: SruNetwork | None = None,
                 frame_hook=None) -> TrackingRun:
    """Track one sequence from its first ground-truth box, never re-initialising.

    ``frame_hook(index, clean_patch, used_patch)`` is called for every tracked
    frame when given (used for dumping attacked frames).
    """
    if mode not in MODES:
        raise InvalidInputError(f"unknown mode {mode!r}; expected one of {MODES}")
    gt = sequence.boxes
    boxes, ious, cles, lat, lvls = [gt[0]], [1.0], [0.0], [0.0], [0]
    pert, rms = [0.0], [0.0]
    try:
        first = sequence.frame(0)
        template = tracker.init_template(first, gt[0])
        prev = gt[0]
        fh, fw = first.shape[:2]
        for i in range(1, len(sequence)):
            frame = sequence.frame(i)
            patch, geom = crop_search_patch(frame, prev, tracker.search_size, tracker.context)
            levels = adaptive_pyramid_levels(geom)
            t0 = time.perf_counter()
            with torch.no_grad():
                used = perturb(mode, patch, levels, sru)
            dt = (time.perf_counter() - t0) * 1000.0 if mode != "clean" else 0.0
            with torch.no_grad():
                score, reg = tracker(template, used.unsqueeze(0))
            box = _clip_box(decode_box(score[0], reg[0], geom, prev, getattr(tracker, "stride", 4)), fh, fw)
            if frame_hook is not None:
                frame_hook(i, patch, used)
            boxes.append(box)
            ious.append(iou(box, gt[i]))
            cles.append(cle(box, gt[i]))
            lat.append(dt)
            lvls.append(levels if mode != "clean" else 0)
            norm = float(torch.linalg.vector_norm((used - patch).double()))
            pert.append(norm / patch.numel())
            rms.append(norm / math.sqrt(patch.numel()))
            prev = box
    except DataError as exc:
        return TrackingRun(sequence.name, mode, boxes, ious, cles, lat, lvls, pert, rms,
                           complete=False, error=str(exc))
    return TrackingRun(sequence.name, mode, boxes, ious, cles, lat, lvls, pert, rms)


# --- metrics --------------------------------------------------------------

def precision_curve(cles: list[float]) -> list[Fraction]:
    n = len(cles)
    return [Fraction(sum(1 for e in cles if e <= t), n) for t in PRECISION_THRESHOLDS]


def success_curve(ious: list[float]) -> list[Fraction]:
    n = len(ious)
    return [Fraction(sum(1 for v in ious if v > t), n) for t in SUCCESS_THRESHOLDS]


@dataclass
class MetricReport:
    precision: float
    success_auc: float
    precision_curve: list[float]
    success_curve: list[float]
    n_sequences: int
    n_frames: int
    mean_iou: float
    mean_latency_ms: float
    mean_perturbation: float = 0.0
    mean_perturbation_rms: float = 0.0
    delta_precision_pct: float | None = None
    delta_success_pct: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(runs: list[TrackingRun], baseline: "MetricReport | None" = None) -> MetricReport:
    """Average per-sequence curves over sequences (exact rational arithmetic)."""
    if not runs:
        raise InvalidInputError("no runs to aggregate")
    k = len(runs)
    p_curves = [precision_curve(r.cle_series) for r in runs]
    s_curves = [success_curve(r.iou_series) for r in runs]
    p_mean = [sum(c[t] for c in p_curves) / k for t in range(len(PRECISION_THRESHOLDS))]
    s_mean = [sum(c[t] for c in s_curves) / k for t in range(len(SUCCESS_THRESHOLDS))]
    auc = sum(s_mean) / len(s_mean)
    latencies = [v for r in runs for v in r.latency_ms[1:]]
    perts = [v for r in runs for v in r.perturbation[1:]]
    rms = [v for r in runs for v in r.perturbation_rms[1:]]
    report = MetricReport(
        precision=float(p_mean[PRECISION_AT]),
        success_auc=float(auc),
        precision_curve=[float(v) for v in p_mean],
        success_curve=[float(v) for v in s_mean],
        n_sequences=k,
        n_frames=sum(len(r.boxes) for r in runs),
        mean_iou=float(np.mean([r.mean_iou for r in runs])),
        mean_latency_ms=float(np.mean(latencies)) if latencies else 0.0,
        mean_perturbation=float(np.mean(perts)) if perts else 0.0,
        mean_perturbation_rms=float(np.mean(rms)) if rms else 0.0,
    )
    if baseline is not None:
        report.delta_precision_pct = delta_percent(baseline.precision, report.precision)
        report.delta_success_pct = delta_percent(baseline.success_auc, report.success_auc)
    return report


def delta_percent(original: float, attacked: float) -> float:
    if original == 0:
        return 0.0 if attacked == 0 else math.inf
    return (attacked - original) / original * 100.0


def comparison_rows(reports: dict[str, MetricReport], baseline: str = "clean") -> list[dict]:
    """Org./Att./Delta% rows for every non-baseline mode."""
    org = reports[baseline]
    rows = []
    for mode, rep in reports.items():
        if mode == baseline:
            continue
        rows.append({
            "mode": mode,
            "prec_org": org.precision, "prec_att": rep.precision,
            "prec_delta": delta_percent(org.precision, rep.precision),
            "succ_org": org.success_auc, "succ_att": rep.success_auc,
            "succ_delta": delta_percent(org.success_auc, rep.success_auc),
        })
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'Mode':<12}| {'Prec Org.':>9} {'Att.':>7} {'Delta':>9} | {'Succ Org.':>9} {'Att.':>7} {'Delta':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['mode']:<12}| {r['prec_org']:>9.3f} {r['prec_att']:>7.3f} {r['prec_delta']:>8.2f}% "
            f"| {r['succ_org']:>9.3f} {r['succ_att']:>7.3f} {r['succ_delta']:>8.2f}%")
    return "\n".join(lines) + "\n"


def format_ablation(reports: dict[str, MetricReport]) -> str:
    modes = list(reports)
    lines = [f"{'':<10}" + "".join(f"{m:>10}" for m in modes)]
    lines.append(f"{'Precision':<10}" + "".join(f"{reports[m].precision:>10.3f}" for m in modes))
    lines.append(f"{'Success':<10}" + "".join(f"{reports[m].success_auc:>10.3f}" for m in modes))
    return "\n".join(lines) + "\n"


def write_table_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["mode"])
        writer.writeheader()
        writer.writerows(rows)


def run_report(run: TrackingRun, metadata: dict | None = None) -> dict:
    metrics = aggregate([run])
    return {
        "format": RUN_FORMAT,
        "metadata": {"sequence": run.sequence, "mode": run.mode, "complete": run.complete,
                     "error": run.error, **(metadata or {})},
        "frames": {
            "boxes": [list(b.to_xywh()) for b in run.boxes],
            "iou": run.iou_series,
            "cle": run.cle_series,
            "latency_ms": run.latency_ms,
            "levels": run.levels,
            "perturbation": run.perturbation,
            "perturbation_rms": run.perturbation_rms,
        },
        "metrics": metrics.to_dict(),
    }


def write_run_report(run: TrackingRun, path: str | Path, metadata: dict | None = None) -> None:
    Path(path).write_text(json.dumps(run_report(run, metadata), indent=1))


def read_run_report(path: str | Path) -> TrackingRun:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != RUN_FORMAT:
        raise DataError(f"{path} is not an {RUN_FORMAT} report")
    meta, fr = blob["metadata"], blob["frames"]
    return TrackingRun(meta["sequence"], meta["mode"], [BBox.from_xywh(*b) for b in fr["boxes"]],
                       fr["iou"], fr["cle"], fr["latency_ms"], fr.get("levels", []),
                       fr.get("perturbation", []), fr.get("perturbation_rms", []),
                       meta.get("complete", True), meta.get("error", ""))


def write_curves(reports: dict[str, MetricReport], path: str | Path) -> None:
    blob = {
        mode: {
            "precision": [[t, v] for t, v in zip(PRECISION_THRESHOLDS, rep.precision_curve)],
            "success": [[float(t), v] for t, v in zip(SUCCESS_THRESHOLDS, rep.success_curve)],
        }
        for mode, rep in reports.items()
    }
    Path(path).write_text(json.dumps(blob, indent=1))


def save_heatmap(path: str | Path, heat: torch.Tensor) -> None:
    h = heat.detach().cpu().numpy()
    write_frame(path, np.repeat(h[..., None], 3, axis=-1))


def save_patch(path: str | Path, patch: torch.Tensor) -> None:
    write_frame(path, patch.detach().cpu().numpy().transpose(1, 2, 0))
