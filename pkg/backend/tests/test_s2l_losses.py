"""
Unit tests for the Speech2Landmarks network and its loss terms.
"""
import math

import numpy as np
import pytest
import torch

from app.audio_frontend import FeatureSequence
from app.models import S2LConfig
from app.s2l_model import (
    Speech2Landmarks,
    loss_cos,
    loss_mouth,
    loss_rec,
    loss_s2l_total,
    loss_vel,
    s2l_forward,
    weighted_sum,
)


def naive_rec(gt, hat):
    """Mean over sequences of the mean per-frame Frobenius norm, by explicit loops."""
    per_sequence = []
    for g, h in zip(gt, hat):
        total = 0.0
        for t in range(g.shape[0]):
            total += math.sqrt(sum(float(x) ** 2 for x in (g[t] - h[t]).reshape(-1)))
        per_sequence.append(total / g.shape[0])
    return sum(per_sequence) / len(per_sequence)


def naive_vel(gt, hat):
    per_sequence = []
    for g, h in zip(gt, hat):
        T = g.shape[0]
        total = 0.0
        for t in range(1, T):
            diff = (g[t] - g[t - 1]) - (h[t] - h[t - 1])
            total += float(np.sqrt((diff ** 2).sum()))
        per_sequence.append(total / T)
    return sum(per_sequence) / len(per_sequence)


@pytest.fixture
def pair():
    rng = np.random.default_rng(3)
    gt = [rng.normal(size=(6, 5, 3)), rng.normal(size=(4, 5, 3))]
    hat = [rng.normal(size=(6, 5, 3)), rng.normal(size=(4, 5, 3))]
    return gt, hat


def tensors(arrays):
    return [torch.from_numpy(a) for a in arrays]


class TestSpeech2Landmarks:
    """Tests for the Bi-LSTM regressor."""

    def test_output_shapes(self):
        cfg = S2LConfig(input_channels=8, landmark_count=5, hidden_size=16, lstm_layers=2)
        model = Speech2Landmarks(cfg)

        assert model(torch.zeros(3, 11, 8)).shape == (3, 11, 5, 3)
        assert model(torch.zeros(11, 8)).shape == (11, 5, 3)

    def test_head_starts_near_zero(self):
        cfg = S2LConfig(input_channels=8, landmark_count=5, head_init_std=1e-4)
        model = Speech2Landmarks(cfg)

        out = model(torch.randn(2, 9, 8))

        assert out.abs().max() < 0.05

    def test_rejects_wrong_feature_width(self):
        cfg = S2LConfig(input_channels=8, landmark_count=5)
        model = Speech2Landmarks(cfg)

        with pytest.raises(ValueError, match="input_channels=8"):
            model(torch.zeros(1, 4, 7))

    def test_forward_is_deterministic(self):
        cfg = S2LConfig(input_channels=4, landmark_count=3, hidden_size=8)
        torch.manual_seed(0)
        model = Speech2Landmarks(cfg)
        features = FeatureSequence(features=np.random.default_rng(0).normal(size=(12, 4)),
                                   source_sample_rate=16000, target_fps=60.0)

        first = s2l_forward(features, cfg, model).values
        second = s2l_forward(features, cfg, model).values

        assert first.shape == (12, 3, 3)
        np.testing.assert_array_equal(first, second)

    def test_forward_checks_channels(self):
        cfg = S2LConfig(input_channels=4, landmark_count=3)
        features = FeatureSequence(features=np.zeros((5, 6)), source_sample_rate=16000, target_fps=60.0)

        with pytest.raises(ValueError):
            s2l_forward(features, cfg, Speech2Landmarks(cfg))

    def test_seeds_change_the_output(self):
        cfg = S2LConfig(input_channels=4, landmark_count=3, hidden_size=8, head_init_std=0.1)
        features = torch.randn(1, 6, 4, generator=torch.Generator().manual_seed(2))
        outputs = []
        for seed in (0, 1):
            torch.manual_seed(seed)
            with torch.no_grad():
                outputs.append(Speech2Landmarks(cfg)(features))

        assert not torch.allclose(outputs[0], outputs[1])


class TestLossTerms:
    """Loss values against explicit-loop oracles."""

    def test_rec_matches_oracle(self, pair):
        gt, hat = pair

        value = loss_rec(tensors(gt), tensors(hat))

        assert float(value) == pytest.approx(naive_rec(gt, hat), rel=1e-9)

    def test_mouth_restricts_to_subset(self, pair):
        gt, hat = pair
        subset = [0, 3]

        value = loss_mouth(tensors(gt), tensors(hat), subset)

        expected = naive_rec([g[:, subset] for g in gt], [h[:, subset] for h in hat])
        assert float(value) == pytest.approx(expected, rel=1e-9)

    @pytest.mark.parametrize("subset", [[], [5]])
    def test_mouth_subset_validation(self, pair, subset):
        gt, hat = pair
        with pytest.raises(ValueError):
            loss_mouth(tensors(gt), tensors(hat), subset)

    def test_vel_matches_oracle(self, pair):
        gt, hat = pair

        value = loss_vel(tensors(gt), tensors(hat))

        assert float(value) == pytest.approx(naive_vel(gt, hat), rel=1e-9)

    def test_vel_ignores_constant_offsets(self, pair):
        gt, hat = pair
        rng = np.random.default_rng(9)
        shifted_gt = [g + rng.normal(size=(1, 5, 3)) * 10 for g in gt]
        shifted_hat = [h + rng.normal(size=(1, 5, 3)) * 10 for h in hat]

        value = loss_vel(tensors(shifted_gt), tensors(shifted_hat))

        assert float(value) == pytest.approx(float(loss_vel(tensors(gt), tensors(hat))), rel=1e-9)

    def test_vel_single_frame_is_zero(self):
        gt = torch.randn(1, 5, 3, dtype=torch.float64)

        assert float(loss_vel([gt], [gt + 1.0])) == 0.0

    def test_cos_flattened(self, pair):
        gt, hat = pair
        expected = []
        for g, h in zip(gt, hat):
            frames = [1 - float(np.dot(a.ravel(), b.ravel()) / (np.linalg.norm(a) * np.linalg.norm(b)))
                      for a, b in zip(g, h)]
            expected.append(np.mean(frames))

        value = loss_cos(tensors(gt), tensors(hat))

        assert float(value) == pytest.approx(np.mean(expected), rel=1e-9)

    def test_cos_per_landmark(self, pair):
        gt, hat = pair
        expected = []
        for g, h in zip(gt, hat):
            cos = (g * h).sum(-1) / (np.linalg.norm(g, axis=-1) * np.linalg.norm(h, axis=-1))
            expected.append((1 - cos).mean(axis=-1).mean())

        value = loss_cos(tensors(gt), tensors(hat), mode='per_landmark')

        assert float(value) == pytest.approx(np.mean(expected), rel=1e-9)

    def test_cos_is_finite_on_zero_displacements(self):
        zeros = torch.zeros(4, 5, 3, dtype=torch.float64)

        value = loss_cos([zeros], [zeros])

        assert float(value) == pytest.approx(1.0)

    def test_cos_rejects_bad_eps_and_mode(self, pair):
        gt, hat = pair
        with pytest.raises(ValueError):
            loss_cos(tensors(gt), tensors(hat), eps=0.0)
        with pytest.raises(ValueError, match="Unknown cosine mode"):
            loss_cos(tensors(gt), tensors(hat), mode='spherical')

    def test_identical_sequences_have_zero_distance_terms(self, pair):
        gt, _ = pair

        assert float(loss_rec(tensors(gt), tensors(gt))) == 0.0
        assert float(loss_vel(tensors(gt), tensors(gt))) == 0.0
        assert float(loss_cos(tensors(gt), tensors(gt))) == pytest.approx(0.0, abs=1e-12)

    def test_batched_tensor_equals_list(self, pair):
        gt, hat = pair
        gt4 = torch.from_numpy(np.stack([gt[0], gt[0]]))
        hat4 = torch.from_numpy(np.stack([hat[0], hat[0]]))

        assert float(loss_rec(gt4, hat4)) == pytest.approx(float(loss_rec([gt4[0]], [hat4[0]])))

    def test_mismatched_shapes(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            loss_rec([torch.zeros(3, 5, 3)], [torch.zeros(4, 5, 3)])

    def test_total_is_the_weighted_sum(self, pair):
        gt, hat = pair
        cfg = S2LConfig(input_channels=1, landmark_count=5, lambda1=0.3, lambda2=2.0, lambda3=0.5, lambda4=7.0)

        total, terms = loss_s2l_total(tensors(gt), tensors(hat), cfg, [1, 2])

        expected = 0.3 * terms["rec"] + 2.0 * terms["mouth"] + 0.5 * terms["cos"] + 7.0 * terms["vel"]
        assert float(total) == pytest.approx(float(expected), rel=1e-12)
        assert set(terms) == {"rec", "mouth", "cos", "vel"}


def unit_rows(count, rows, axis):
    """One frame of count landmarks where the given rows are offset by one along an axis."""
    frame = torch.zeros(1, count, 3, dtype=torch.float64)
    frame[0, rows, axis] = 1.0
    return frame


class TestLossExamples:
    """Hand-computed loss values."""

    def test_rec_all_rows_off_by_one(self):
        zeros = torch.zeros(1, 68, 3, dtype=torch.float64)

        value = loss_rec([zeros], [unit_rows(68, list(range(68)), 0)])

        assert float(value) == pytest.approx(math.sqrt(68), abs=1e-6)
        assert float(value) == pytest.approx(8.2462, abs=1e-4)

    def test_rec_averages_over_sequences(self):
        zeros = torch.zeros(1, 1, 3, dtype=torch.float64)
        one = torch.tensor([[[1.0, 0.0, 0.0]]], dtype=torch.float64)

        assert float(loss_rec([zeros, zeros], [one, 3 * one])) == pytest.approx(2.0, abs=1e-6)

    def test_mouth_on_the_ibug_mouth_and_jaw(self):
        mouth_jaw = list(range(17)) + list(range(48, 68))
        zeros = torch.zeros(1, 68, 3, dtype=torch.float64)
        hat = unit_rows(68, mouth_jaw, 1)

        value = loss_mouth([zeros], [hat], mouth_jaw)

        assert len(mouth_jaw) == 37
        assert float(value) == pytest.approx(math.sqrt(37), abs=1e-6)
        assert float(value) == pytest.approx(6.0828, abs=1e-4)

    def test_mouth_ignores_rows_outside_the_subset(self):
        zeros = torch.zeros(2, 6, 3, dtype=torch.float64)
        hat = zeros.clone()
        hat[:, 3:] = 5.0

        assert float(loss_mouth([zeros], [hat], [0, 1, 2])) == 0.0

    def test_vel_static_prediction(self):
        gt = torch.tensor([[[0.0, 0, 0]], [[1.0, 0, 0]], [[2.0, 0, 0]]], dtype=torch.float64)

        value = loss_vel([gt], [torch.zeros_like(gt)])

        assert float(value) == pytest.approx(2.0 / 3.0, abs=1e-6)

    @pytest.mark.parametrize("sign,expected", [(1.0, 0.0), (-1.0, 2.0)])
    def test_cos_parallel_and_opposite(self, sign, expected):
        gt = torch.randn(3, 4, 3, generator=torch.Generator().manual_seed(4), dtype=torch.float64)

        assert float(loss_cos([gt], [sign * gt])) == pytest.approx(expected, abs=1e-6)

    def test_cos_orthogonal(self):
        gt = unit_rows(4, [0], 0)
        hat = unit_rows(4, [0], 1)

        assert float(loss_cos([gt], [hat])) == pytest.approx(1.0, abs=1e-6)

    def test_total_with_default_weights(self):
        cfg = S2LConfig(input_channels=1)
        ones = {name: torch.tensor(1.0, dtype=torch.float64) for name in ("rec", "mouth", "cos", "vel")}

        total = weighted_sum(ones, {"rec": cfg.lambda1, "mouth": cfg.lambda2, "cos": cfg.lambda3, "vel": cfg.lambda4})

        assert float(total) == pytest.approx(11.1001, abs=1e-6)

    def test_total_of_zero_terms(self):
        gt = [torch.randn(4, 5, 3, generator=torch.Generator().manual_seed(6), dtype=torch.float64)]

        total, _ = loss_s2l_total(gt, gt, S2LConfig(input_channels=1, landmark_count=5), [0, 1])

        assert float(total) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("case", range(20))
    def test_vel_unchanged_by_constant_offsets(self, case):
        rng = np.random.default_rng(100 + case)
        lengths = rng.integers(2, 9, size=rng.integers(1, 4))
        landmarks = int(rng.integers(1, 10))
        gt = [rng.normal(size=(t, landmarks, 3)) for t in lengths]
        hat = [rng.normal(size=(t, landmarks, 3)) for t in lengths]
        shifted = [h + rng.normal(size=(1, landmarks, 3)) * 100 for h in hat]

        before = float(loss_vel(tensors(gt), tensors(hat)))
        after = float(loss_vel(tensors(gt), tensors(shifted)))

        assert abs(after - before) < 1e-6
