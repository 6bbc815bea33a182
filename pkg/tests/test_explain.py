from __future__ import annotations

import numpy as np
import pytest
import torch

from protogrid.data.types import RasterSample
from protogrid.encoder import EncoderConfig, StageConfig, init_encoder
from protogrid.explain import (
    channel_weight_summary,
    local_explanation,
    prototype_scores,
    receptive_field,
    receptive_field_map,
    top_prototype_frequency,
)
from protogrid.model import build_model, make_model_config
from protogrid.training import _Trainer, train
from oracles import (
    conv2d_direct,
    matvec_softmax_direct,
    max_pool_direct,
    receptive_box_recurrence,
    similarity_direct,
)
from test_training import tiny_cfg


@pytest.fixture(scope="module")
def trained(tiny_dataset):
    return train(tiny_cfg(max_cycles=2), tiny_dataset).model


class TestReceptiveField:
    def test_one_by_one_conv_no_pool_single_pixel(self):
        config = EncoderConfig(
            input_hw=(4, 4),
            stages=(StageConfig(2, kernel_size=1, padding=0, pool=1),),
            embedding_hw=(4, 4),
        )
        encoder = init_encoder(config, seed=0)
        for u in range(4):
            for v in range(4):
                box = receptive_field(encoder, (u, v))
                assert box.as_tuple() == (u, u, v, v)

    def test_3x3_no_padding_corner(self):
        config = EncoderConfig(
            input_hw=(6, 6),
            stages=(StageConfig(2, kernel_size=3, padding=0, pool=1),),
            embedding_hw=(4, 4),
        )
        encoder = init_encoder(config, seed=0)
        assert receptive_field(encoder, (0, 0)).as_tuple() == (0, 2, 0, 2)

    def test_impulse_oracle_via_direct_convolution(self):
        # independent direct-conv sweep on a single 3x3 stage, no padding
        config = EncoderConfig(
            input_hw=(5, 5),
            stages=(StageConfig(2, kernel_size=3, padding=0, pool=1),),
            embedding_hw=(3, 3),
        )
        encoder = init_encoder(config, seed=1)
        weight = np.abs(encoder.convs[0].weight.detach().numpy().astype(np.float64))
        bias = np.zeros(2)
        want = {}
        for r in range(5):
            for c in range(5):
                impulse = np.zeros((1, 5, 5))
                impulse[0, r, c] = 1.0
                out = conv2d_direct(impulse, weight, bias, stride=1, padding=0)
                for u in range(3):
                    for v in range(3):
                        if np.abs(out[:, u, v]).sum() > 0:
                            box = want.setdefault((u, v), [5, -1, 5, -1])
                            box[0], box[1] = min(box[0], r), max(box[1], r)
                            box[2], box[3] = min(box[2], c), max(box[3], c)
        for (u, v), box in want.items():
            assert receptive_field(encoder, (u, v)).as_tuple() == tuple(box)

    def test_multi_stage_matches_analytic_recurrence(self):
        config = EncoderConfig.from_channel_counts((20, 20), (3, 4), (2, 2))
        encoder = init_encoder(config, seed=2)
        stages = [
            {"kernel": s.kernel_size, "stride": s.stride, "padding": s.padding, "pool": s.pool}
            for s in config.stages
        ]
        for u in range(2):
            for v in range(2):
                want = receptive_box_recurrence(stages, (20, 20), (2, 2), (u, v))
                assert receptive_field(encoder, (u, v)).as_tuple() == want

    def test_mnist_geometry_matches_recurrence(self):
        config = EncoderConfig.from_channel_counts((56, 56), (8, 16, 32), (2, 2))
        encoder = init_encoder(config, seed=3)
        stages = [
            {"kernel": s.kernel_size, "stride": s.stride, "padding": s.padding, "pool": s.pool}
            for s in config.stages
        ]
        for u in range(2):
            for v in range(2):
                want = receptive_box_recurrence(stages, (56, 56), (2, 2), (u, v))
                assert receptive_field(encoder, (u, v)).as_tuple() == want

    def test_out_of_range_location_rejected(self):
        config = EncoderConfig.from_channel_counts((8, 8), (2,), (2, 2))
        encoder = init_encoder(config, seed=0)
        with pytest.raises(ValueError, match="outside"):
            receptive_field(encoder, (2, 0))

    def test_map_is_cached(self):
        config = EncoderConfig.from_channel_counts((8, 8), (2,), (2, 2))
        encoder = init_encoder(config, seed=0)
        first = receptive_field_map(encoder)
        assert receptive_field_map(encoder) is first


class TestPrototypeScores:
    def test_zero_head_weight_zero_score(self, trained, tiny_dataset):
        sample = tiny_dataset.test[0]
        with torch.no_grad():
            trained.head.linear.weight[:, 3] = 0.0
        scores, _ = prototype_scores(trained, sample, target_class=0)
        assert scores[3] == 0.0

    def test_zero_scaling_zero_score(self, trained, tiny_dataset):
        sample = tiny_dataset.test[1]
        with torch.no_grad():
            trained.bank.omega[0, 0].zero_()
        scores, _ = prototype_scores(trained, sample, target_class=2)
        assert scores[0] == 0.0

    def test_scores_match_full_forward_oracle(self, trained, tiny_dataset):
        sample = tiny_dataset.test[2]
        target = 4
        scores, warn = prototype_scores(trained, sample, target)
        assert not warn

        # independent scalar recomputation from raw parameters
        bank = trained.bank
        psi = trained.head.psi.detach().numpy().astype(np.float64)
        x = torch.from_numpy(sample.pixels).unsqueeze(0)
        with torch.no_grad():
            emb = trained.embed(x)[0].numpy().astype(np.float64)
        want = np.zeros(bank.total)
        for j in range(bank.num_channels):
            grid = similarity_direct(
                emb[j],
                bank.phi[j].detach().numpy().astype(np.float64),
                bank.omega[j].detach().numpy().astype(np.float64),
                bank.epsilon,
            )
            values, _ = max_pool_direct(grid)
            for n in range(bank.per_channel):
                flat = j * bank.per_channel + n
                want[flat] = values[n] * psi[flat, target]
        np.testing.assert_allclose(scores, want, atol=1e-5)

    def test_score_sum_equals_logit(self, trained, tiny_dataset):
        sample = tiny_dataset.test[3]
        x = torch.from_numpy(sample.pixels).unsqueeze(0)
        with torch.no_grad():
            logits = trained.forward_full(x).logits[0].numpy()
        for k in range(trained.num_classes):
            scores, _ = prototype_scores(trained, sample, k)
            assert abs(scores.sum() - logits[k]) < 1e-5


class TestLocalExplanation:
    def test_top_scores_sorted_descending(self, trained, tiny_dataset):
        exp = local_explanation(trained, tiny_dataset.test[4], top_k=5)
        scores = [c.score for c in exp.contributions]
        assert scores == sorted(scores, reverse=True)
        assert len(exp.contributions) == 5

    def test_score_is_similarity_times_weight(self, trained, tiny_dataset):
        exp = local_explanation(trained, tiny_dataset.test[5], top_k=4)
        for c in exp.contributions:
            assert c.score == pytest.approx(c.max_similarity * c.head_weight, abs=1e-6)

    def test_full_ranking_is_permutation_of_scores(self, trained, tiny_dataset):
        sample = tiny_dataset.test[6]
        exp = local_explanation(trained, sample, top_k=trained.bank.total)
        scores, _ = prototype_scores(trained, sample, exp.predicted_class)
        np.testing.assert_allclose(
            sorted(c.score for c in exp.contributions), sorted(scores), atol=1e-7
        )
        assert {c.prototype for c in exp.contributions} == set(range(trained.bank.total))

    def test_identical_pixels_identical_explanations(self, trained, tiny_dataset):
        base = tiny_dataset.test[7]
        clone = RasterSample(pixels=base.pixels.copy(), label=base.label, id=base.id)
        a = local_explanation(trained, base)
        b = local_explanation(trained, clone)
        assert a.to_dict() == b.to_dict()

    def test_provenance_resolved_after_projection(self, trained, tiny_dataset):
        exp = local_explanation(trained, tiny_dataset.test[8])
        assert not exp.unprojected_warning
        for c in exp.contributions:
            assert c.source_sample_id is not None
            assert c.source_sample_id in set(tiny_dataset.train.ids.tolist())

    def test_unprojected_model_warns_but_scores(self, tiny_dataset):
        config = make_model_config("proto_channel", (56, 56), 3, 10, (4, 8), (2, 2), per_class=2)
        model = build_model(config, seed=0)
        sample = tiny_dataset.test[0]
        scores, warn = prototype_scores(model, sample, 0)
        assert warn
        assert scores.shape == (model.bank.total,)
        exp = local_explanation(model, sample)
        assert exp.unprojected_warning

    def test_standard_model_rejected(self, tiny_dataset):
        result = train(tiny_cfg(model_kind="standard_nn", max_cycles=1), tiny_dataset)
        with pytest.raises(TypeError, match="no prototype layer"):
            local_explanation(result.model, tiny_dataset.test[0])


class TestGlobalExplanations:
    def test_zero_weights_zero_importance(self, trained):
        with torch.no_grad():
            saved = trained.head.linear.weight.detach().clone()
            trained.head.linear.weight.zero_()
        summary = channel_weight_summary(trained)
        with torch.no_grad():
            trained.head.linear.weight.copy_(saved)
        assert np.all(summary.mean_abs == 0.0)
        assert np.all(summary.near_zero_fraction == 1.0)

    def test_summary_shapes(self, trained):
        summary = channel_weight_summary(trained)
        bank = trained.bank
        assert summary.psi_by_channel.shape == (bank.num_channels, bank.per_channel, 10)
        assert summary.by_class_mean_abs.shape == (bank.num_channels, 10)

    def test_frequency_single_sample(self, trained, tiny_dataset):
        from protogrid.data.types import SplitPart

        part = tiny_dataset.test
        single = SplitPart(part.images[:1], part.labels[:1], part.ids[:1])
        freq = top_prototype_frequency(trained, single)
        x = torch.from_numpy(part.images[:1])
        with torch.no_grad():
            pred = int(trained.forward_full(x).logits.argmax())
        expected_total = 1 if pred == part.labels[0] else 0
        assert freq.total == expected_total
        assert freq.counts.sum() == expected_total

    def test_frequency_counts_partition_correct_samples(self, trained, tiny_dataset):
        from protogrid.training import evaluate

        freq = top_prototype_frequency(trained, tiny_dataset.test)
        metrics = evaluate(trained, tiny_dataset.test)
        correct = int(round(metrics.accuracy * len(tiny_dataset.test)))
        assert freq.total == correct
        assert freq.channel_counts.sum() == correct

    def test_frequency_order_invariant(self, trained, tiny_dataset):
        from protogrid.data.types import SplitPart

        part = tiny_dataset.test
        perm = np.random.default_rng(2).permutation(len(part))
        shuffled = SplitPart(part.images[perm], part.labels[perm], part.ids[perm])
        a = top_prototype_frequency(trained, part)
        b = top_prototype_frequency(trained, shuffled)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_class_filter_restricts_counts(self, trained, tiny_dataset):
        all_freq = top_prototype_frequency(trained, tiny_dataset.test)
        even_freq = top_prototype_frequency(trained, tiny_dataset.test, class_filter={0, 2, 4, 6, 8})
        odd_freq = top_prototype_frequency(trained, tiny_dataset.test, class_filter={1, 3, 5, 7, 9})
        assert even_freq.total + odd_freq.total == all_freq.total
