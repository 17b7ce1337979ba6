"""CMPM alignment loss, total objective, similarity ranking, feature dumps."""

import math

import numpy as np
import pytest

from pedsearch.alignment import (AlignmentBatch, LossBreakdown, cmpm_direction,
                                 cmpm_loss, read_features, similarity_matrix,
                                 total_loss, write_features)
from pedsearch.calibration import pair_labels
from pedsearch.errors import ContractError, TrainingAbort
from pedsearch.gradcheck import finite_difference_check
from pedsearch.tensor import Tensor


def cmpm_direction_oracle(anchors, candidates, y, tau, eps):
    """Direct double loop over the definition."""
    b = len(anchors)
    cos = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            ni = max(np.linalg.norm(anchors[i]), 1e-12)
            nj = max(np.linalg.norm(candidates[j]), 1e-12)
            cos[i, j] = anchors[i] @ candidates[j] / (ni * nj)
    p = np.exp(cos / tau - (cos / tau).max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    q = y / y.sum(axis=1, keepdims=True)
    total = 0.0
    for i in range(b):
        li = sum(p[i, j] * math.log(p[i, j] / (q[i, j] + eps)) for j in range(b)) / b
        total += li
    return total / b


class TestCmpmDirection:
    def test_single_pair_degenerate(self):
        f = Tensor(np.array([[1.0, 2.0]]))
        loss = cmpm_direction(f, f, np.ones((1, 1)), tau=0.02, eps=1e-8).item()
        assert loss == pytest.approx(math.log(1 / (1 + 1e-8)), rel=1e-6)
        assert abs(loss) <= 2e-8

    def test_matched_identical_limit_approaches_zero(self):
        # matched pairs identical, unmatched orthogonal, small tau: p -> q = I
        feats = np.eye(4)
        y = np.eye(4)
        loss = cmpm_direction(Tensor(feats), Tensor(feats.copy()), y,
                              tau=0.01, eps=1e-8).item()
        assert abs(loss) <= 1e-6

    @pytest.mark.parametrize("seed", range(6))
    def test_against_double_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((5, 8))
        c = rng.standard_normal((5, 8))
        pids = rng.integers(0, 3, size=5)
        y = pair_labels(pids)
        got = cmpm_direction(Tensor(a), Tensor(c), y, tau=0.2, eps=1e-8).item()
        want = cmpm_direction_oracle(a, c, y, 0.2, 1e-8)
        assert abs(got - want) <= 1e-10

    def test_lower_bound_with_eps(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = rng.standard_normal((6, 4))
            c = rng.standard_normal((6, 4))
            y = pair_labels(rng.integers(0, 3, size=6))
            loss = cmpm_direction(Tensor(a), Tensor(c), y, tau=0.5, eps=1e-8).item()
            assert loss >= -1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            cmpm_direction(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))),
                           np.eye(2), 0.02)


class TestCmpmLoss:
    def test_swapping_modalities_swaps_directions(self):
        rng = np.random.default_rng(1)
        fi = rng.standard_normal((4, 6))
        ft = rng.standard_normal((4, 6))
        y = pair_labels(np.array([0, 0, 1, 1]))
        _, i2t, t2i = cmpm_loss(AlignmentBatch(Tensor(fi), Tensor(ft), y), 0.1)
        _, i2t_sw, t2i_sw = cmpm_loss(AlignmentBatch(Tensor(ft), Tensor(fi), y.T), 0.1)
        assert i2t.item() == pytest.approx(t2i_sw.item(), abs=1e-12)
        assert t2i.item() == pytest.approx(i2t_sw.item(), abs=1e-12)

    def test_total_is_sum_of_directions(self):
        rng = np.random.default_rng(2)
        batch = AlignmentBatch(Tensor(rng.standard_normal((5, 4))),
                               Tensor(rng.standard_normal((5, 4))),
                               pair_labels(rng.integers(0, 2, size=5)))
        total, i2t, t2i = cmpm_loss(batch, 0.1)
        assert total.item() == pytest.approx(i2t.item() + t2i.item(), abs=1e-9)

    def test_all_ones_labels_uniform_target(self):
        # every pair matches: q is uniform, so each direction is the mean
        # KL(p || uniform) under the double 1/B average
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 6))
        c = rng.standard_normal((4, 6))
        y = np.ones((4, 4))
        got = cmpm_direction(Tensor(a), Tensor(c), y, 0.2, 1e-8).item()
        want = cmpm_direction_oracle(a, c, y, 0.2, 1e-8)
        assert got == pytest.approx(want, abs=1e-12)

    def test_gradients_both_matrices(self):
        rng = np.random.default_rng(4)
        fi = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
        ft = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
        y = pair_labels(np.array([0, 1, 1, 2]))

        def f():
            return cmpm_loss(AlignmentBatch(fi, ft, y), tau=0.1)[0]

        assert finite_difference_check(f, [fi, ft]) <= 1e-4

    def test_rescaling_leaves_loss_unchanged(self):
        rng = np.random.default_rng(5)
        fi = rng.standard_normal((4, 8))
        ft = rng.standard_normal((4, 8))
        y = pair_labels(np.array([0, 0, 1, 1]))
        base = cmpm_loss(AlignmentBatch(Tensor(fi), Tensor(ft), y), 0.1)[0].item()
        fi2 = fi.copy()
        fi2[1] *= 12.5
        scaled = cmpm_loss(AlignmentBatch(Tensor(fi2), Tensor(ft), y), 0.1)[0].item()
        assert scaled == pytest.approx(base, abs=1e-9)

    def test_diagonal_must_match(self):
        with pytest.raises(ContractError):
            AlignmentBatch(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))),
                           np.zeros((2, 2)))


class TestTotalLoss:
    def test_zero_parts(self):
        parts = {k: Tensor(np.zeros(())) for k in ("mim", "calibration", "cmpm")}
        assert total_loss(parts).item() == 0.0

    def test_unit_weight_sum(self):
        parts = {"mim": Tensor(np.asarray(0.2)), "calibration": Tensor(np.asarray(0.3)),
                 "cmpm": Tensor(np.asarray(0.5))}
        assert total_loss(parts).item() == pytest.approx(1.0, abs=1e-12)

    def test_disabled_term_removed_exactly(self):
        parts = {"calibration": Tensor(np.asarray(0.3)), "cmpm": Tensor(np.asarray(0.5))}
        assert total_loss(parts).item() == pytest.approx(0.8, abs=1e-12)

    def test_custom_weights(self):
        parts = {"mim": Tensor(np.asarray(1.0)), "cmpm": Tensor(np.asarray(1.0))}
        assert total_loss(parts, {"mim": 0.25}).item() == pytest.approx(1.25)

    def test_nan_part_names_term(self):
        parts = {"cmpm": Tensor(np.asarray(0.1)), "mim": Tensor(np.asarray(np.nan))}
        with pytest.raises(TrainingAbort) as err:
            total_loss(parts)
        assert err.value.term == "mim"

    def test_breakdown_additivity_fields(self):
        b = LossBreakdown(mim=0.1, calibration=0.2, cmpm=0.3, i2t=0.1, t2i=0.2,
                          total=0.6)
        assert b.total == pytest.approx(b.mim + b.calibration + b.cmpm, abs=1e-9)
        assert b.cmpm == pytest.approx(b.i2t + b.t2i, abs=1e-9)


class TestSimilarityMatrix:
    def test_identical_vector_scores_one(self):
        g = np.random.default_rng(0).standard_normal((4, 8))
        sim = similarity_matrix(g[2:3], g)
        assert sim[0, 2] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_scores_zero(self):
        q = np.array([[1.0, 0.0]])
        g = np.array([[0.0, 1.0]])
        assert similarity_matrix(q, g)[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(1)
        q = rng.standard_normal((3, 5))
        g = rng.standard_normal((4, 5))
        sim = similarity_matrix(q, g)
        for i in range(3):
            for j in range(4):
                want = q[i] @ g[j] / (np.linalg.norm(q[i]) * np.linalg.norm(g[j]))
                assert abs(sim[i, j] - want) <= 1e-12

    def test_rescaling_preserves_rankings(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((3, 6))
        g = rng.standard_normal((10, 6))
        base = similarity_matrix(q, g)
        q2 = q.copy()
        q2[1] *= 42.0
        g2 = g.copy()
        g2[4] *= 0.001
        scaled = similarity_matrix(q2, g2)
        assert np.array_equal(np.argsort(-base, axis=1), np.argsort(-scaled, axis=1))

    def test_zero_norm_guarded(self):
        sim = similarity_matrix(np.zeros((1, 4)), np.ones((2, 4)))
        assert np.isfinite(sim).all()


class TestFeatureDump:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((5, 8)).astype(np.float32)
        meta = [{"person_id": i % 3, "modality": "image" if i < 3 else "text"}
                for i in range(5)]
        path = tmp_path / "features.bin"
        write_features(path, feats, meta)
        back, meta_back = read_features(path)
        assert np.array_equal(back, feats)
        assert [m["person_id"] for m in meta_back] == [0, 1, 2, 0, 1]
        assert meta_back[0]["modality"] == "image"
        assert meta_back[4]["index"] == 4

    def test_header_layout(self, tmp_path):
        path = tmp_path / "f.bin"
        write_features(path, np.zeros((2, 3), dtype=np.float32),
                       [{"person_id": 0, "modality": "image"}] * 2)
        blob = path.read_bytes()
        assert blob[:4] == b"VFET"
        import struct
        version, count, dim = struct.unpack("<III", blob[4:16])
        assert (version, count, dim) == (1, 2, 3)
        assert len(blob) == 16 + 2 * 3 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ContractError):
            read_features(path)
