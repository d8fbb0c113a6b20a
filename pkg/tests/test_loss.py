"""Multi-way InfoNCE: closed forms, oracles, invariances, gradients."""

import math

import numpy as np
import pytest

from gradcheck import check_grads

from geoalign import tensor as T
from geoalign.errors import ConfigError, DomainError
from geoalign.loss import (
    TAU_MAX,
    TAU_MIN,
    LossConfig,
    clamp_log_tau,
    pairwise_infonce,
    similarity,
    total_loss,
)
from geoalign.modality import BatchEmbeddings
from geoalign.tensor import ComputationGraph, Parameter

# Frozen from an independent scalar re-implementation (pure math.exp/log
# loops) of the InfoNCE formula on this hand-fixed similarity matrix.
HAND_S = np.array([[0.9, 0.1, -0.3], [0.2, 0.8, 0.0], [-0.1, 0.4, 0.6]])
HAND_TAU = 0.5
HAND_LOSS = 0.438302845201299


def _blocks_with_similarity(s):
    """Unit-row blocks whose cosine matrix equals s exactly: queries are
    basis vectors, gallery rows are s columns padded to unit norm."""
    n = s.shape[0]
    fm = np.eye(n, n + 1)
    fn = np.zeros((n, n + 1))
    for j in range(n):
        col = s[:, j]
        fn[j, :n] = col
        fn[j, n] = math.sqrt(1.0 - float(col @ col))
    return fm, fn


def _loop_oracle(blocks, tau, include_self_pairs):
    """Plain-python re-implementation: ordered pairs, row-normalized cosine."""
    names = list(blocks)
    normed = {
        m: blocks[m] / np.linalg.norm(blocks[m], axis=1, keepdims=True) for m in names
    }
    losses = []
    for m in names:
        for n in names:
            if m == n and not include_self_pairs:
                continue
            s = normed[m] @ normed[n].T
            b = s.shape[0]
            val = 0.0
            for i in range(b):
                denom = sum(math.exp(s[i, j] / tau) for j in range(b))
                val += -math.log(math.exp(s[i, i] / tau) / denom)
            losses.append(val / b)
    return sum(losses) / len(losses)


def _embed(graph, arrays):
    return BatchEmbeddings({m: graph.constant(a) for m, a in arrays.items()})


class TestPairwiseInfonce:
    def test_single_positive_is_exactly_zero(self):
        g = ComputationGraph()
        f = g.constant(np.array([[0.3, -0.8, 0.1]]))
        loss = pairwise_infonce(f, f, 0.07)
        assert float(loss.data) == 0.0

    @pytest.mark.parametrize("b", [2, 4, 8, 64])
    def test_identical_blocks_give_log_b(self, b):
        rng = np.random.default_rng(b)
        row = rng.normal(size=6)
        block = np.tile(row, (b, 1))
        g = ComputationGraph()
        loss = pairwise_infonce(g.constant(block), g.constant(block), 0.5)
        assert abs(float(loss.data) - math.log(b)) < 1e-9

    def test_hand_matrix_against_scalar_oracle(self):
        fm, fn = _blocks_with_similarity(HAND_S)
        g = ComputationGraph()
        loss = pairwise_infonce(g.constant(fm), g.constant(fn), HAND_TAU)
        assert abs(float(loss.data) - HAND_LOSS) < 1e-12

    def test_non_negative_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            b, d = rng.integers(1, 10), rng.integers(2, 8)
            g = ComputationGraph()
            loss = pairwise_infonce(
                g.constant(rng.normal(size=(b, d))),
                g.constant(rng.normal(size=(b, d))),
                float(rng.uniform(0.05, 2.0)),
            )
            assert float(loss.data) >= 0.0

    def test_scale_invariance_of_rows(self):
        rng = np.random.default_rng(1)
        fm = rng.normal(size=(5, 7))
        fn = rng.normal(size=(5, 7))
        g = ComputationGraph()
        base = float(pairwise_infonce(g.constant(fm), g.constant(fn), 0.3).data)
        fm2 = fm.copy()
        fm2[2] *= 1234.5
        fn2 = fn * 0.001
        g2 = ComputationGraph()
        scaled = float(pairwise_infonce(g2.constant(fm2), g2.constant(fn2), 0.3).data)
        assert abs(base - scaled) < 1e-12

    def test_perfect_alignment_loss_vanishes_as_tau_shrinks(self):
        # orthonormal rows: diagonal similarity 1, off-diagonal 0 (<= 1 - 0.1)
        q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(6, 6)))
        vals = []
        for tau in (1.0, 0.1, 0.01):
            g = ComputationGraph()
            vals.append(float(pairwise_infonce(g.constant(q), g.constant(q), tau).data))
        assert vals[0] > vals[1] > vals[2]
        assert vals[2] < 1e-6

    def test_zero_norm_row_rejected(self):
        g = ComputationGraph()
        bad = np.ones((3, 4))
        bad[1] = 0.0
        with pytest.raises(DomainError):
            pairwise_infonce(g.constant(bad), g.constant(np.ones((3, 4))), 0.1)

    def test_shape_mismatch_rejected(self):
        g = ComputationGraph()
        with pytest.raises(Exception, match="B, D"):
            pairwise_infonce(
                g.constant(np.ones((3, 4))), g.constant(np.ones((4, 4))), 0.1
            )


class TestTotalLoss:
    def test_two_identical_modalities_give_log_b(self):
        rng = np.random.default_rng(3)
        block = np.tile(rng.normal(size=5), (4, 1))
        g = ComputationGraph()
        batch = _embed(g, {"street": block, "aerial": block})
        loss, pairs = total_loss(batch, 0.2)
        assert abs(float(loss.data) - math.log(4)) < 1e-9
        assert set(pairs) == {"street->aerial", "aerial->street"}

    @pytest.mark.parametrize("include_self", [False, True])
    def test_five_modality_loop_oracle(self, include_self):
        rng = np.random.default_rng(4)
        arrays = {
            m: rng.normal(size=(8, 6))
            for m in ("street", "aerial", "dsm", "text", "gps")
        }
        g = ComputationGraph()
        loss, pairs = total_loss(_embed(g, arrays), 0.31, include_self)
        assert len(pairs) == (25 if include_self else 20)
        oracle = _loop_oracle(arrays, 0.31, include_self)
        assert abs(float(loss.data) - oracle) < 1e-10

    def test_modality_relabeling_invariance(self):
        rng = np.random.default_rng(5)
        arrays = {m: rng.normal(size=(4, 5)) for m in ("street", "aerial", "dsm")}
        g = ComputationGraph()
        base = float(total_loss(_embed(g, arrays), 0.4)[0].data)
        relabeled = {"dsm": arrays["street"], "street": arrays["aerial"],
                     "aerial": arrays["dsm"]}
        g2 = ComputationGraph()
        swapped = float(total_loss(_embed(g2, relabeled), 0.4)[0].data)
        assert abs(base - swapped) < 1e-12

    def test_single_modality_rejected(self):
        g = ComputationGraph()
        with pytest.raises(ConfigError):
            total_loss(_embed(g, {"street": np.ones((3, 4))}), 0.1)

    def test_gradcheck_blocks_and_log_tau(self):
        rng = np.random.default_rng(6)
        p_street = Parameter("street", rng.normal(size=(4, 5)))
        p_gps = Parameter("gps", rng.normal(size=(4, 5)))
        log_tau = Parameter("log_tau", np.array(math.log(0.4)))

        def make():
            g = ComputationGraph()
            batch = BatchEmbeddings(
                {"street": g.param(p_street), "gps": g.param(p_gps)}
            )
            loss, _ = total_loss(batch, T.exp(g.param(log_tau)))
            return g, loss

        check_grads(make, [p_street, p_gps, log_tau], rng, samples_per_param=6)

    def test_pair_values_match_pairwise_calls(self):
        rng = np.random.default_rng(7)
        arrays = {m: rng.normal(size=(5, 4)) for m in ("street", "aerial", "text")}
        g = ComputationGraph()
        _, pairs = total_loss(_embed(g, arrays), 0.25)
        for key, val in pairs.items():
            m, n = key.split("->")
            g2 = ComputationGraph()
            solo = pairwise_infonce(
                g2.constant(arrays[m]), g2.constant(arrays[n]), 0.25
            )
            assert abs(val - float(solo.data)) < 1e-12


class TestTemperature:
    def test_log_tau_initialization(self):
        p = LossConfig(tau_init=0.07).make_log_tau()
        assert float(np.exp(p.value)) == pytest.approx(0.07, rel=1e-12)
        with pytest.raises(ConfigError):
            LossConfig(tau_init=100.0).make_log_tau()

    def test_clamping_after_step(self):
        p = Parameter("log_tau", np.array(math.log(50.0)))
        clamp_log_tau(p)
        assert float(np.exp(p.value)) == pytest.approx(TAU_MAX, rel=1e-12)
        p.value[...] = math.log(1e-9)
        clamp_log_tau(p)
        assert float(np.exp(p.value)) == pytest.approx(TAU_MIN, rel=1e-12)


class TestSimilarity:
    def test_self_similarity_diagonal(self):
        f = np.random.default_rng(8).normal(size=(6, 4))
        s = similarity(f, f)
        assert np.allclose(np.diag(s), 1.0, atol=1e-12)
        assert s.max() <= 1.0 and s.min() >= -1.0

    def test_orthogonal_rows(self):
        s = similarity(np.eye(3), np.roll(np.eye(3), 1, axis=0))
        assert np.allclose(np.diag(s), 0.0, atol=1e-15)
        offdiag = np.sort(s[~np.eye(3, dtype=bool)])
        assert np.allclose(offdiag, [0, 0, 0, 1, 1, 1], atol=1e-15)

    def test_per_entry_oracle(self):
        rng = np.random.default_rng(9)
        fm, fn = rng.normal(size=(4, 6)), rng.normal(size=(5, 6))
        s = similarity(fm, fn)
        for i in range(4):
            for j in range(5):
                expected = fm[i] @ fn[j] / (np.linalg.norm(fm[i]) * np.linalg.norm(fn[j]))
                assert abs(s[i, j] - expected) < 1e-12

    def test_zero_row_rejected(self):
        with pytest.raises(DomainError):
            similarity(np.zeros((2, 3)), np.ones((2, 3)))
