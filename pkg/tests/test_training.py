import math

import numpy as np
import pytest
import torch

from ad2lab.boxes import BBox
from ad2lab.config import Config, PyramidConfig, TrackerConfig, TrainConfig
from ad2lab.data import load_dataset, synth_dataset
from ad2lab.errors import ConfigError, InvariantError
from ad2lab.resample_attack import SruNetwork
from ad2lab.tracker import ToyTracker
from ad2lab.training import (
    build_corpus, param_hash, prepare_corpus, pretrain_victim, train, victim_labels, victim_loss)

TINY_SRU = PyramidConfig(levels=5, convs_per_block=1, feature_channels=4, group_count=2, spatial_kernel=3)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    synth_dataset(root, seed=3, n_sequences=2, frames_each=25, height=160, width=240,
                  min_target=16, max_target=24)
    return load_dataset(root)


@pytest.fixture(scope="module")
def victim():
    torch.manual_seed(0)
    return ToyTracker(TrackerConfig(backbone_width=8)).eval()


def _cfg(steps=4, seed=0):
    return Config().replace(steps=steps, batch_size=2, seed=seed, log_every=0, convs_per_block=1,
                            feature_channels=4, group_count=2, spatial_kernel=3)


def _sru(seed=0):
    torch.manual_seed(seed)
    return SruNetwork(TINY_SRU)


class TestCorpus:
    def test_counts(self, dataset):
        corpus = build_corpus(dataset, cadence=10)
        assert len(corpus) == 2 * 3  # frames 0, 10, 20 of each 25-frame sequence
        assert [it.search_index for it in corpus.items[:3]] == [0, 10, 20]

    def test_previous_box_and_template(self, dataset):
        item = build_corpus(dataset, cadence=10).items[1]
        seq = item.sequence
        assert item.prev_box == seq.boxes[9] and item.gt_box == seq.boxes[10]
        assert item.template_index == 0 and item.init_box == seq.boxes[0]

    def test_from_directory(self, dataset):
        root = dataset[0].frame_paths[0].parent.parent.parent
        assert len(build_corpus([root], cadence=5)) == 2 * 5

    def test_bad_cadence(self, dataset):
        with pytest.raises(ConfigError):
            build_corpus(dataset, cadence=0)


class TestVictimPretraining:
    def test_labels_centred(self):
        box = BBox(100, 100, 20, 20)
        cls, reg = victim_labels(box, box, 80.0, 80.0, search_size=127, grid=25)
        assert cls[12, 12] == 1 and cls[0, 0] == 0
        assert reg[:, 12, 12].abs().max() == 0

    def test_labels_offset(self):
        prev = BBox(100, 100, 20, 20)
        # unit scale: one cell is 4 px
        gt = BBox(108, 96, 40, 10)
        cls, reg = victim_labels(gt, prev, 127.0, 127.0, 127, 25)
        assert cls[11, 14] == 1
        assert reg[0, 11, 14].item() == pytest.approx(0.0) and reg[1, 11, 14].item() == pytest.approx(0.0)
        assert reg[2, 0, 0].item() == pytest.approx(math.log(2)) and reg[3, 0, 0].item() == pytest.approx(math.log(0.5))

    def test_loss_finite_without_positives(self):
        score, reg = torch.randn(1, 2, 5, 5, requires_grad=True), torch.randn(1, 4, 5, 5)
        cls = torch.zeros(1, 5, 5)
        total, _, reg_loss = victim_loss(score, reg, cls, torch.zeros(1, 4, 5, 5))
        assert torch.isfinite(total) and reg_loss.item() == 0.0

    def test_short_run(self, dataset):
        tcfg = TrackerConfig(backbone_width=8)
        records = []
        tracker, hist = pretrain_victim(dataset, tcfg, TrainConfig(victim_steps=3, victim_batch_size=2),
                                        on_epoch=records.append)
        assert hist == records and hist[-1]["step"] == 3
        assert not tracker.training and not any(p.requires_grad for p in tracker.parameters())


class TestAttackTraining:
    def test_zero_steps_leaves_network_untouched(self, dataset, victim):
        sru = _sru()
        before = param_hash(sru)
        res = train(build_corpus(dataset, 10), victim, sru, _cfg(steps=0))
        assert param_hash(res.sru) == before and res.history == []

    def test_deterministic_history(self, dataset, victim):
        corpus = build_corpus(dataset, 10)
        a = train(corpus, victim, _sru(), _cfg(steps=3)).history
        b = train(corpus, victim, _sru(), _cfg(steps=3)).history
        assert a == b

    def test_records_and_sums(self, dataset, victim):
        seen = []
        res = train(build_corpus(dataset, 10), victim, _sru(), _cfg(steps=3), on_record=seen.append)
        assert seen == res.history and [r["step"] for r in seen] == [1, 2, 3]
        for r in res.history:
            assert set(r) == {"step", "L_score", "L_drift", "L_2", "total"}
            assert abs(r["total"] - (r["L_score"] + r["L_drift"] + r["L_2"])) <= 1e-9
        assert res.best_loss == min(r["total"] for r in res.history)

    def test_updates_only_the_network(self, dataset, victim):
        sru = _sru()
        before_sru, before_victim = param_hash(sru), param_hash(victim)
        res = train(build_corpus(dataset, 10), victim, sru, _cfg(steps=2))
        assert param_hash(res.sru) != before_sru
        assert res.victim_hash_before == res.victim_hash_after == before_victim
        assert not any(p.requires_grad for p in victim.parameters())

    def test_prepared_corpus_shapes(self, dataset, victim):
        data = prepare_corpus(build_corpus(dataset, 10), victim, 5)
        assert data.clean.shape == (6, 3, 127, 127)
        assert data.clean_score.shape == (6, 2, 25, 25)
        assert ((data.levels >= 1) & (data.levels <= 5)).all()

    def test_non_finite_loss_raises_and_dumps(self, dataset, victim, tmp_path):
        sru = _sru()
        with torch.no_grad():
            for level in sru.levels:
                level.to_residual.bias.fill_(float("nan"))
        with pytest.raises(InvariantError):
            train(build_corpus(dataset, 10), victim, sru, _cfg(steps=2), dump_dir=tmp_path)
        assert len(list(tmp_path.glob("nonfinite_step*.pt"))) == 1
