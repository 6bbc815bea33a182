from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from protogrid.checkpoint import (
    CheckpointFormatError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from protogrid.encoder import ConfigError
from protogrid.losses import LossConfig
from protogrid.model import build_model, make_model_config
from protogrid.training import (
    DivergenceError,
    Metrics,
    TrainConfig,
    _Trainer,
    cyclic_adjacency,
    evaluate,
    train,
    train_transfer,
)

TINY = dict(
    encoder_channels=(4, 8),
    embedding_hw=(2, 2),
    per_class=2,
    batch_size=32,
    final_stage3_epochs=1,
    max_cycles=2,
    early_stop_cycles=8,
    projection_period=2,
    seed=5,
)


def tiny_cfg(**overrides) -> TrainConfig:
    return TrainConfig(**{**TINY, **overrides})


@pytest.fixture(scope="module")
def trained_tiny(tiny_dataset):
    return train(tiny_cfg(), tiny_dataset)


class TestStageIsolation:
    def test_stage1_freezes_head_bitwise(self, tiny_dataset):
        trainer = _Trainer(tiny_cfg(), tiny_dataset)
        psi_before = trainer.model.head.psi.detach().clone()
        trainer.stage1_epoch(cycle=1)
        assert torch.equal(trainer.model.head.psi, psi_before)

    def test_stage3_freezes_encoder_prototypes_scaling_bitwise(self, tiny_dataset):
        trainer = _Trainer(tiny_cfg(), tiny_dataset)
        trainer.stage1_epoch(cycle=1)
        theta = [p.detach().clone() for p in trainer.model.encoder.parameters()]
        phi = trainer.model.bank.phi.detach().clone()
        omega = trainer.model.bank.omega.detach().clone()
        trainer.stage3_epoch(cycle=1, max_sims=trainer.cached_max_sims())
        for before, after in zip(theta, trainer.model.encoder.parameters()):
            assert torch.equal(before, after)
        assert torch.equal(trainer.model.bank.phi, phi)
        assert torch.equal(trainer.model.bank.omega, omega)

    def test_projection_changes_only_phi_and_provenance(self, tiny_dataset):
        trainer = _Trainer(tiny_cfg(), tiny_dataset)
        trainer.stage1_epoch(cycle=1)
        psi = trainer.model.head.psi.detach().clone()
        omega = trainer.model.bank.omega.detach().clone()
        theta = [p.detach().clone() for p in trainer.model.encoder.parameters()]
        trainer.project()
        assert torch.equal(trainer.model.head.psi, psi)
        assert torch.equal(trainer.model.bank.omega, omega)
        for before, after in zip(theta, trainer.model.encoder.parameters()):
            assert torch.equal(before, after)
        assert trainer.model.bank.projected


class TestDeterminism:
    def test_same_seed_same_final_metrics(self, tiny_dataset):
        first = train(tiny_cfg(), tiny_dataset)
        second = train(tiny_cfg(), tiny_dataset)
        m1 = evaluate(first.model, tiny_dataset.test)
        m2 = evaluate(second.model, tiny_dataset.test)
        assert m1.accuracy == m2.accuracy
        np.testing.assert_array_equal(m1.confusion, m2.confusion)
        for a, b in zip(first.model.parameters(), second.model.parameters()):
            assert torch.equal(a, b)

    def test_history_is_reproducible(self, tiny_dataset, tmp_path):
        train(tiny_cfg(), tiny_dataset, history_path=tmp_path / "a.jsonl")
        train(tiny_cfg(), tiny_dataset, history_path=tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()

    def test_history_records_cycles_and_losses(self, tiny_dataset, tmp_path):
        train(tiny_cfg(), tiny_dataset, history_path=tmp_path / "h.jsonl")
        records = [json.loads(line) for line in (tmp_path / "h.jsonl").read_text().splitlines()]
        assert records[0]["cycle"] == 1
        assert "stage1_total" in records[0]
        assert "stage3_total" in records[0]
        assert "val_accuracy" in records[0]


class TestBaselines:
    def test_standard_nn_has_no_prototypes(self, tiny_dataset):
        result = train(tiny_cfg(model_kind="standard_nn"), tiny_dataset)
        assert not hasattr(result.model, "bank")

    def test_joint_model_single_bank(self, tiny_dataset):
        result = train(tiny_cfg(model_kind="proto_joint", max_cycles=1), tiny_dataset)
        bank = result.model.bank
        assert bank.num_channels == 1
        assert bank.total == bank.per_class * tiny_dataset.k
        assert bank.projected

    def test_divergent_loss_aborts_with_cycle(self, tiny_dataset):
        cfg = tiny_cfg(learning_rate=1e18, grad_clip=0.0, max_cycles=3)
        with pytest.raises(DivergenceError, match="cycle"):
            train(cfg, tiny_dataset)


class TestEvaluate:
    def test_perfect_predictions(self, tiny_dataset):
        # a stub model that emits the true label as its argmax logit
        part = tiny_dataset.test

        class Stub:
            num_classes = 10

            def forward_full(self, images):
                idx = Stub._cursor
                Stub._cursor += images.shape[0]
                labels = part.labels[idx : idx + images.shape[0]]
                logits = torch.zeros(images.shape[0], 10)
                logits[torch.arange(images.shape[0]), labels] = 5.0
                from protogrid.model import ForwardOutputs

                return ForwardOutputs(None, None, None, None, logits)

        Stub._cursor = 0
        metrics = evaluate(Stub(), part, adjacency=cyclic_adjacency(1, 8))
        assert metrics.accuracy == 1.0
        assert metrics.plus_minus_one == 1.0

    def test_plus_minus_one_cyclic_neighbors(self):
        adj = cyclic_adjacency(1, 8)
        assert adj[4] == {3, 5}
        assert adj[1] == {8, 2}
        assert adj[8] == {7, 1}
        assert 0 not in adj

    def test_adjacent_prediction_counts(self, tiny_dataset):
        # predicted 3 with true 4, and predicted 8 with true 1, count under +-1
        part = tiny_dataset.test

        class Stub:
            num_classes = 10
            _cursor = 0

            def forward_full(self, images):
                idx = Stub._cursor
                Stub._cursor += images.shape[0]
                labels = part.labels[idx : idx + images.shape[0]]
                logits = torch.zeros(images.shape[0], 10)
                for row, lab in enumerate(labels):
                    pred = 3 if lab == 4 else (8 if lab == 1 else int(lab))
                    logits[row, pred] = 5.0
                from protogrid.model import ForwardOutputs

                return ForwardOutputs(None, None, None, None, logits)

        metrics = evaluate(Stub(), part, adjacency=cyclic_adjacency(1, 8))
        assert metrics.accuracy < 1.0
        assert metrics.plus_minus_one == 1.0

    def test_confusion_rows_sum_to_class_counts(self, trained_tiny, tiny_dataset):
        metrics = evaluate(trained_tiny.model, tiny_dataset.test)
        counts = np.bincount(tiny_dataset.test.labels, minlength=10)
        np.testing.assert_array_equal(metrics.confusion.sum(axis=1), counts)

    def test_empty_split_rejected(self, trained_tiny, tiny_dataset):
        from protogrid.data.types import SplitPart

        empty = SplitPart(
            np.zeros((0, 56, 56, 3), dtype=np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64)
        )
        with pytest.raises(ValueError, match="empty"):
            evaluate(trained_tiny.model, empty)


class TestCheckpoints:
    def test_round_trip_bit_exact_logits(self, trained_tiny, tiny_dataset, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(trained_tiny.model, path)
        loaded = load_checkpoint(path)
        x = torch.from_numpy(tiny_dataset.test.images[:16])
        with torch.no_grad():
            want = trained_tiny.model.forward_full(x).logits
            got = loaded.forward_full(x).logits
        assert torch.equal(want, got)

    def test_provenance_survives_round_trip(self, trained_tiny, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(trained_tiny.model, path)
        loaded = load_checkpoint(path)
        assert torch.equal(loaded.bank.provenance, trained_tiny.model.bank.provenance)

    def test_truncated_file_rejected(self, trained_tiny, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(trained_tiny.model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 64])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, trained_tiny, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(trained_tiny.model, path)
        blob = bytearray(path.read_bytes())
        blob[0] = 0x58
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_mnist_config_manifest_lists_150_prototypes(self, tmp_path):
        config = make_model_config("proto_channel", (56, 56), 3, 10, (8, 16, 32), (2, 2),
                                   per_class=5)
        model = build_model(config, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        manifest = read_manifest(path)
        assert manifest["prototypes_total"] == 150


class TestTransfer:
    @pytest.fixture(scope="class")
    def pretrained(self, tiny_dataset, tmp_path_factory):
        result = train(tiny_cfg(model_kind="standard_nn", max_cycles=1), tiny_dataset)
        path = tmp_path_factory.mktemp("ckpt") / "standard.ckpt"
        save_checkpoint(result.model, path)
        return path

    def test_frozen_encoder_bit_identical(self, tiny_dataset, pretrained):
        cfg = tiny_cfg(transfer="frozen", pretrained_checkpoint=str(pretrained), max_cycles=1)
        result = train_transfer(cfg, tiny_dataset)
        source = load_checkpoint(pretrained)
        for ours, theirs in zip(
            result.model.encoder.parameters(), source.encoder.parameters()
        ):
            assert torch.equal(ours, theirs)

    def test_unfrozen_encoder_moves(self, tiny_dataset, pretrained):
        cfg = tiny_cfg(transfer="unfrozen", pretrained_checkpoint=str(pretrained), max_cycles=1)
        result = train_transfer(cfg, tiny_dataset)
        source = load_checkpoint(pretrained)
        moved = any(
            not torch.equal(ours, theirs)
            for ours, theirs in zip(result.model.encoder.parameters(), source.encoder.parameters())
        )
        assert moved

    def test_transfer_none_ignores_checkpoint(self, tiny_dataset):
        a = train(tiny_cfg(max_cycles=1), tiny_dataset)
        b = train(tiny_cfg(max_cycles=1, pretrained_checkpoint="/nonexistent.ckpt"), tiny_dataset)
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert torch.equal(pa, pb)

    def test_architecture_mismatch_rejected(self, tiny_dataset, pretrained):
        cfg = tiny_cfg(encoder_channels=(4, 8, 8), embedding_hw=(2, 2),
                       transfer="frozen", pretrained_checkpoint=str(pretrained))
        with pytest.raises(ConfigError, match="mismatch"):
            train_transfer(cfg, tiny_dataset)

    def test_train_transfer_requires_mode(self, tiny_dataset):
        with pytest.raises(ConfigError, match="transfer"):
            train_transfer(tiny_cfg(), tiny_dataset)


class TestMetricsType:
    def test_to_dict_round_trips_json(self):
        metrics = Metrics(
            accuracy=0.5,
            per_class=np.array([0.5, 0.5]),
            confusion=np.array([[1, 1], [1, 1]]),
            plus_minus_one=0.75,
        )
        blob = json.dumps(metrics.to_dict())
        assert json.loads(blob)["plus_minus_one"] == 0.75
