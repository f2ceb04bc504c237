"""Command-line entry point.

Every subcommand accepts ``--config FILE`` plus arbitrary ``--key value``
overrides for any flat config key.  Exit codes: 0 success, 2 config error,
3 invariant violation, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import statistics
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .boxes import BBox
from .config import Config, PyramidConfig
from .data import load_dataset, read_frame, synth_dataset
from .errors import Ad2Error, ConfigError, DataError, RegistrationError
from .evaluation import (MODES, aggregate, comparison_rows, format_ablation, format_table, perturb,
                         run_sequence, save_heatmap, save_patch, write_curves, write_run_report,
                         write_table_csv)
from .losses import heatmap
from .resample_attack import SruNetwork, adaptive_pyramid_levels, load_sru, save_sru
from .tracker import (crop_search_patch, get_tracker, load_adapter_factory, load_victim, register_tracker,
                      save_victim)
from .training import build_corpus, pretrain_victim, train

log = logging.getLogger("ad2lab")

COMMANDS = ("synth", "train-victim", "train-attack", "eval", "heatmap", "bench")
IOU_GATE = 0.6


# --- plumbing ---------------------------------------------------------------

def _split_overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def resolve_config(path: str | None, overrides: dict[str, str]) -> Config:
    """Defaults < file < AD2_SEED < command line."""
    values: dict[str, object] = {}
    if path:
        try:
            values.update(config_mod.parse_flat(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if "AD2_SEED" in os.environ:
        values["seed"] = os.environ["AD2_SEED"]
    values.update(overrides)
    return config_mod.from_mapping(values)


def prepare_out_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, command: str, cfg: Config, argv: list[str]) -> dict:
    manifest = {
        "command": command,
        "argv": argv,
        "config": cfg.flat(),
        "seed": cfg.train.seed,
        "checkpoints": {"victim": cfg.paths.victim_ckpt, "sru": cfg.paths.sru_ckpt,
                        "no_rse": cfg.paths.norse_ckpt},
        "output_dir": str(out),
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "python": platform.python_version(),
        "torch": torch.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (out / "config.txt").write_text(config_mod.dump_flat(cfg))
    return manifest


def _setup_determinism(cfg: Config) -> None:
    torch.manual_seed(cfg.train.seed)
    torch.set_num_threads(max(1, cfg.train.workers))
    torch.use_deterministic_algorithms(True, warn_only=True)


def _tracker(cfg: Config):
    name = cfg.tracker.tracker
    if name == "toy":
        if not cfg.paths.victim_ckpt:
            raise ConfigError("victim_ckpt is required for the toy tracker")
        register_tracker("toy", load_victim(cfg.paths.victim_ckpt))
    elif ":" in name:
        register_tracker(name, load_adapter_factory(name)(cfg))
    return get_tracker(name)


def _sru(path: str, what: str) -> SruNetwork:
    if not path:
        raise ConfigError(f"{what} checkpoint path is required")
    return load_sru(path).eval()


# --- commands -----------------------------------------------------------------

def cmd_synth(cfg: Config, out: Path) -> int:
    d = cfg.data
    paths = synth_dataset(out, cfg.train.seed, d.n_sequences, d.frames_each, d.frame_height,
                          d.frame_width, d.min_target, d.max_target)
    log.info("wrote %d sequences to %s", len(paths), out)
    return 0


def cmd_train_victim(cfg: Config, out: Path) -> int:
    seqs = load_dataset(cfg.data.train_dir)
    records = open(out / "victim_history.jsonl", "w")
    tracker, history = pretrain_victim(seqs, cfg.tracker, cfg.train,
                                       on_epoch=lambda r: records.write(json.dumps(r) + "\n"))
    records.close()
    save_victim(tracker, out / "victim.pt")
    gate_dir = cfg.data.eval_dir if Path(cfg.data.eval_dir).is_dir() else cfg.data.train_dir
    runs = [run_sequence(tracker, s, "clean") for s in load_dataset(gate_dir)]
    mean_iou = float(np.mean([r.mean_iou for r in runs]))
    (out / "victim_gate.json").write_text(json.dumps({"dataset": gate_dir, "mean_iou": mean_iou,
                                                      "gate": IOU_GATE}, indent=1))
    log.info("victim clean mean IoU %.3f on %s", mean_iou, gate_dir)
    if mean_iou < IOU_GATE:
        log.error("victim failed the IoU >= %.1f gate", IOU_GATE)
        return 3
    return 0


def cmd_train_attack(cfg: Config, out: Path) -> int:
    victim = load_victim(cfg.paths.victim_ckpt) if cfg.paths.victim_ckpt else None
    if victim is None:
        raise ConfigError("victim_ckpt is required")
    corpus = build_corpus([cfg.data.train_dir], cfg.train.cadence)
    torch.manual_seed(cfg.train.seed)
    sru = SruNetwork(cfg.pyramid)
    with open(out / "loss_history.jsonl", "w") as fh:
        result = train(corpus, victim, sru, cfg, on_record=lambda r: fh.write(json.dumps(r) + "\n"),
                       dump_dir=out)
    save_sru(result.sru, out / "sru.pt")
    best = SruNetwork(cfg.pyramid)
    best.load_state_dict(result.best_state)
    save_sru(best, out / "sru_best.pt")
    (out / "train_summary.json").write_text(json.dumps({
        "steps": len(result.history), "best_total": result.best_loss,
        "final_total": result.history[-1]["total"] if result.history else None,
        "victim_hash": result.victim_hash_after}, indent=1))
    return 0


def cmd_eval(cfg: Config, out: Path) -> int:
    tracker = _tracker(cfg)
    modes = [m.strip() for m in cfg.paths.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ConfigError(f"unknown modes {bad}; choose from {MODES}")
    nets = {}
    if "attack" in modes:
        nets["attack"] = _sru(cfg.paths.sru_ckpt, "sru_ckpt")
    if "no-rse" in modes:
        nets["no-rse"] = _sru(cfg.paths.norse_ckpt, "norse_ckpt")
    seqs = load_dataset(cfg.data.eval_dir)
    (out / "runs").mkdir(exist_ok=True)
    reports = {}
    incomplete = False
    for mode in modes:
        runs = []
        for seq in seqs:
            hook = None
            if cfg.paths.dump_frames:
                dump = out / "frames" / mode / seq.name
                dump.mkdir(parents=True, exist_ok=True)
                hook = lambda i, clean, used, d=dump: save_patch(d / f"{i:06d}.png", used)  # noqa: E731
            run = run_sequence(tracker, seq, mode, nets.get(mode), frame_hook=hook)
            incomplete |= not run.complete
            write_run_report(run, out / "runs" / f"{seq.name}__{mode}.json", {"seed": cfg.train.seed})
            runs.append(run)
        reports[mode] = aggregate(runs)
        log.info("%-8s precision %.3f success %.3f", mode, reports[mode].precision, reports[mode].success_auc)
    if "clean" in reports:
        rows = comparison_rows(reports)
        for row in rows:
            reports[row["mode"]].delta_precision_pct = row["prec_delta"]
            reports[row["mode"]].delta_success_pct = row["succ_delta"]
        (out / "table.txt").write_text(format_table(rows) + "\n" + format_ablation(reports))
        write_table_csv(rows, out / "table.csv")
    (out / "metrics.json").write_text(json.dumps({m: r.to_dict() for m, r in reports.items()}, indent=1))
    write_curves(reports, out / "curves.json")
    return 4 if incomplete else 0


def _parse_box(text: str) -> BBox:
    try:
        x, y, w, h = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--box expects x,y,w,h, got {text!r}") from None
    return BBox.from_xywh(x, y, w, h)


def cmd_heatmap(cfg: Config, out: Path, frame_path: str, box_text: str, template_path: str | None,
                template_box: str | None) -> int:
    tracker = _tracker(cfg)
    sru = _sru(cfg.paths.sru_ckpt, "sru_ckpt")
    frame = read_frame(frame_path)
    box = _parse_box(box_text)
    tframe = read_frame(template_path) if template_path else frame
    tbox = _parse_box(template_box) if template_box else box
    template = tracker.init_template(tframe, tbox)
    patch, geom = crop_search_patch(frame, box, tracker.search_size, tracker.context)
    with torch.no_grad():
        adv = perturb("attack", patch, adaptive_pyramid_levels(geom), sru)
    save_patch(out / "clean_patch.png", patch)
    save_patch(out / "attacked_patch.png", adv)
    save_heatmap(out / "clean_heatmap.png", heatmap(tracker, template, patch))
    save_heatmap(out / "attacked_heatmap.png", heatmap(tracker, template, adv))
    return 0


def cmd_bench(cfg: Config, out: Path) -> int:
    tracker = _tracker(cfg)
    sru = _sru(cfg.paths.sru_ckpt, "sru_ckpt")
    seqs = load_dataset(cfg.data.eval_dir)
    attack_ms, track_ms = [], []
    budget = cfg.paths.bench_frames
    for seq in seqs:
        template = tracker.init_template(seq.frame(0), seq.boxes[0])
        for i in range(1, len(seq)):
            if len(attack_ms) >= budget:
                break
            patch, geom = crop_search_patch(seq.frame(i), seq.boxes[i - 1], tracker.search_size, tracker.context)
            t0 = time.perf_counter()
            with torch.no_grad():
                adv = perturb("attack", patch, adaptive_pyramid_levels(geom), sru)
            t1 = time.perf_counter()
            with torch.no_grad():
                tracker(template, adv.unsqueeze(0))
            t2 = time.perf_counter()
            attack_ms.append((t1 - t0) * 1000)
            track_ms.append((t2 - t1) * 1000)
    if not attack_ms:
        raise DataError("no frames to benchmark")
    q = np.percentile(attack_ms, [50, 90, 99])
    summary = {
        "frames": len(attack_ms),
        "attack_ms": {"mean": statistics.fmean(attack_ms), "p50": q[0], "p90": q[1], "p99": q[2]},
        "track_ms_mean": statistics.fmean(track_ms),
        "attack_fps": 1000.0 / statistics.fmean(attack_ms),
        "attack_plus_track_fps": 1000.0 / (statistics.fmean(attack_ms) + statistics.fmean(track_ms)),
        "threads": torch.get_num_threads(),
    }
    (out / "bench.json").write_text(json.dumps(summary, indent=1))
    np.savetxt(out / "attack_latency_ms.txt", np.asarray(attack_ms), fmt="%.4f")
    print(json.dumps(summary, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ad2lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", help="output directory (defaults to out_dir, or data dir for synth)")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
        if name == "heatmap":
            p.add_argument("--frame", required=True)
            p.add_argument("--box", required=True, help="x,y,w,h in the frame (top-left convention)")
            p.add_argument("--template-frame")
            p.add_argument("--template-box")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, _split_overrides(extra))
        out = Path(args.out or (cfg.data.train_dir if args.command == "synth" else cfg.paths.out_dir))
        out = prepare_out_dir(out, args.force)
        write_manifest(out, args.command, cfg, argv)
        _setup_determinism(cfg)
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "train-victim":
            return cmd_train_victim(cfg, out)
        if args.command == "train-attack":
            return cmd_train_attack(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "heatmap":
            return cmd_heatmap(cfg, out, args.frame, args.box, args.template_frame, args.template_box)
        return cmd_bench(cfg, out)
    except (Ad2Error, RegistrationError) as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
