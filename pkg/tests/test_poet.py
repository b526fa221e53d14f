import math

import numpy as np
import pytest

from poetloc import geometry as G
from poetloc import poet as P
from poetloc.correlation import CostVolume
from poetloc.gradcheck import check_gradients
from poetloc.tensor import Tensor, linear, make_rng


class FixedQueryRng:
    """Stands in for a generator: hands back a preset query matrix."""

    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.float64)

    def normal(self, mean, std, size):
        assert size == self.rows.shape
        return self.rows.copy()


def mini_params(seed=42, n_layers=3):
    return P.init_poet_params(
        9, make_rng(seed), dtype=np.float64, d_model=8, n_layers=n_layers, lift_hidden=4
    )


def mini_volume(seed=7, h=2, w=2):
    rng = make_rng(seed)
    return CostVolume(Tensor(rng.normal(size=(h, w, 9))), 1)


class TestPositionalEmbedding:
    def test_origin_pattern(self):
        pe = P.positional_embedding(2, 3, 8).data
        assert np.array_equal(pe[0, 0, :4], [0.0, 1.0, 0.0, 1.0])

    def test_first_channel_tracks_column(self):
        pe = P.positional_embedding(2, 3, 8).data
        assert abs(pe[0, 1, 0] - math.sin(1.0)) < 1e-12
        assert abs(pe[1, 1, 0] - math.sin(1.0)) < 1e-12  # row-independent

    def test_third_channel_tracks_row(self):
        pe = P.positional_embedding(3, 2, 8).data
        assert abs(pe[1, 0, 2] - math.sin(1.0)) < 1e-12
        assert abs(pe[1, 1, 2] - math.sin(1.0)) < 1e-12  # column-independent

    def test_sin_cos_pairs_have_unit_energy(self):
        pe = P.positional_embedding(4, 5, 16).data
        for k in range(4):
            sx = pe[:, :, 4 * k] ** 2 + pe[:, :, 4 * k + 1] ** 2
            sy = pe[:, :, 4 * k + 2] ** 2 + pe[:, :, 4 * k + 3] ** 2
            assert np.allclose(sx, 1.0, atol=1e-12)
            assert np.allclose(sy, 1.0, atol=1e-12)

    def test_frequency_decays_with_channel(self):
        pe = P.positional_embedding(1, 50, 256).data
        fast = np.abs(np.diff(pe[0, :, 0]))
        slow = np.abs(np.diff(pe[0, :, 252]))
        assert fast.mean() > slow.mean()

    def test_indivisible_dim_rejected(self):
        with pytest.raises(ValueError):
            P.positional_embedding(2, 2, 10)


class TestLiftAndFlatten:
    def test_token_count_and_width(self):
        params = P.init_poet_params(9, make_rng(1))
        cv = CostVolume(Tensor(make_rng(2).normal(size=(2, 3, 9)).astype(np.float32)), 1)
        tokens = P.lift_and_flatten(cv, params)
        assert tokens.shape == (6, 256)

    def test_zero_volume_gives_pure_positional_embedding(self):
        params = P.init_poet_params(9, make_rng(3))
        cv = CostVolume(Tensor(np.zeros((2, 3, 9), dtype=np.float32)), 1)
        tokens = P.lift_and_flatten(cv, params)
        pe = P.positional_embedding(2, 3, 256).data.astype(np.float32).reshape(6, 256)
        assert np.array_equal(tokens.data, pe)

    def test_gradient_through_lift_convs(self):
        params = mini_params()
        cv_data = make_rng(4).normal(size=(2, 2, 9))
        weights = make_rng(5).normal(size=(4, 8))

        def build(w0, w1):
            swapped = dict(params)
            swapped["poet.lift.conv0.w"] = w0
            swapped["poet.lift.conv1.w"] = w1
            tokens = P.lift_and_flatten(CostVolume(Tensor(cv_data), 1), swapped)
            return (tokens * Tensor(weights)).sum()

        check_gradients(
            build,
            [params["poet.lift.conv0.w"].data, params["poet.lift.conv1.w"].data],
        )


class TestAttention:
    def test_single_matching_key_returns_value(self):
        rng = make_rng(6)
        q = Tensor(rng.normal(size=(1, 4)))
        v = Tensor(rng.normal(size=(1, 3)))
        out = P.attention(q, q, v)
        assert np.array_equal(out.data, v.data)

    def test_identical_values_collapse(self):
        rng = make_rng(7)
        q = Tensor(rng.normal(size=(2, 4)))
        k = Tensor(rng.normal(size=(3, 4)))
        row = rng.normal(size=3)
        v = Tensor(np.tile(row, (3, 1)))
        out = P.attention(q, k, v)
        assert np.allclose(out.data, np.tile(row, (2, 1)), atol=1e-12)

    def test_matches_direct_formula(self):
        rng = make_rng(8)
        q = rng.normal(size=(1, 5))
        k = rng.normal(size=(4, 5))
        v = rng.normal(size=(4, 2))
        out = P.attention(Tensor(q), Tensor(k), Tensor(v)).data
        scores = (q @ k.T) / math.sqrt(5)
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        assert np.allclose(out, weights @ v, atol=1e-12)

    def test_weights_rows_sum_to_one(self):
        rng = make_rng(9)
        q = Tensor(rng.normal(size=(5, 4)))
        k = Tensor(rng.normal(size=(7, 4)))
        ones = Tensor(np.ones((7, 1)))
        out = P.attention(q, k, ones)
        assert np.allclose(out.data, 1.0, atol=1e-6)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            P.attention(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 2))))

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            P.attention(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


class TestDecoderLayer:
    @pytest.mark.parametrize("nq", [1, 5, 15])
    def test_shape_preserved(self, nq):
        params = mini_params()
        rng = make_rng(10)
        queries = Tensor(rng.normal(size=(nq, 8)))
        tokens = Tensor(rng.normal(size=(4, 8)))
        out = P.decoder_layer(queries, tokens, params, 0)
        assert out.shape == (nq, 8)

    def test_single_query_self_attention_is_value_path(self):
        # with one query the self-attention softmax is the number 1, so
        # the whole sublayer is just the value and output projections
        params = mini_params()
        x = Tensor(make_rng(11).normal(size=(1, 8)))
        out = P.multi_head_attention(x, x, params, "poet.dec0.self")
        expected = linear(
            linear(x, params["poet.dec0.self.wv"], params["poet.dec0.self.bv"]),
            params["poet.dec0.self.wo"],
            params["poet.dec0.self.bo"],
        )
        assert np.allclose(out.data, expected.data, atol=1e-12)

    def test_width_mismatch_rejected(self):
        params = mini_params()
        with pytest.raises(ValueError):
            P.decoder_layer(Tensor(np.ones((2, 12))), Tensor(np.ones((4, 8))), params, 0)
        with pytest.raises(ValueError):
            P.decoder_layer(Tensor(np.ones((2, 8))), Tensor(np.ones((4, 12))), params, 0)

    def test_gradient_wrt_input_queries(self):
        params = mini_params()
        tokens = Tensor(make_rng(12).normal(size=(4, 8)))
        weights = make_rng(13).normal(size=(2, 8))

        def build(q):
            out = P.decoder_layer(q, tokens, params, 1)
            return (out * Tensor(weights)).sum()

        check_gradients(build, [make_rng(14).normal(size=(2, 8))])


class TestPoseHead:
    def head_params(self, w0, b0, w1, b1):
        return {
            "poet.head0.fc0.w": Tensor(np.asarray(w0, dtype=np.float64)),
            "poet.head0.fc0.b": Tensor(np.asarray(b0, dtype=np.float64)),
            "poet.head0.fc1.w": Tensor(np.asarray(w1, dtype=np.float64)),
            "poet.head0.fc1.b": Tensor(np.asarray(b1, dtype=np.float64)),
        }

    def test_zero_weights_identity_bias_gives_identity_pose(self):
        params = self.head_params(
            np.zeros((8, 8)), np.zeros(8), np.zeros((8, 7)), P.IDENTITY_HEAD_BIAS
        )
        pred = P.pose_head(Tensor(np.ones(8)), params, 0)
        assert np.array_equal(pred.t.data, np.zeros(3))
        assert np.array_equal(pred.q.data, [1.0, 0.0, 0.0, 0.0])
        assert not pred.quaternion_degenerate

    def test_raw_quaternion_is_normalized(self):
        bias = np.array([0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0])
        params = self.head_params(np.zeros((8, 8)), np.zeros(8), np.zeros((8, 7)), bias)
        pred = P.pose_head(Tensor(np.zeros(8)), params, 0)
        assert np.array_equal(pred.q.data, [1.0, 0.0, 0.0, 0.0])

    def test_zero_norm_quaternion_flagged_and_replaced(self):
        params = self.head_params(np.zeros((8, 8)), np.zeros(8), np.zeros((8, 7)), np.zeros(7))
        pred = P.pose_head(Tensor(np.zeros(8)), params, 0)
        assert pred.quaternion_degenerate
        assert np.array_equal(pred.q.data, [1.0, 0.0, 0.0, 0.0])

    def test_gradient_through_rotation_distance(self):
        rng = make_rng(15)
        query = Tensor(rng.normal(size=8))
        target = G.quaternion_from_axis_angle([0.3, -0.7, 0.2], 0.8)
        shapes = [(8, 8), (8,), (8, 7), (7,)]
        arrays = [rng.normal(size=s) for s in shapes]

        def build(w0, b0, w1, b1):
            params = {
                "poet.head0.fc0.w": w0,
                "poet.head0.fc0.b": b0,
                "poet.head0.fc1.w": w1,
                "poet.head0.fc1.b": b1,
            }
            pred = P.pose_head(query, params, 0)
            return G.quaternion_distance_graph(pred.q, target)

        check_gradients(build, arrays)


class TestPoetForward:
    def test_one_prediction_per_layer(self):
        preds = P.poet_forward(mini_volume(), mini_params(), 1, make_rng(16))
        assert len(preds) == 3
        for pred in preds:
            assert pred.t.shape == (3,)
            assert abs(np.linalg.norm(pred.q.data) - 1.0) < 1e-9

    def test_full_size_forward(self):
        params = P.init_poet_params(9, make_rng(17))
        cv = CostVolume(Tensor(make_rng(18).normal(size=(2, 3, 9)).astype(np.float32)), 1)
        preds = P.poet_forward(cv, params, 1, make_rng(19))
        assert len(preds) == 6
        for pred in preds:
            assert abs(np.linalg.norm(pred.q.data) - 1.0) < 1e-6

    def test_seeded_runs_repeat(self):
        params = mini_params()
        cv = mini_volume()
        a = P.poet_forward(cv, params, 3, make_rng(20))
        b = P.poet_forward(cv, params, 3, make_rng(20))
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.t.data, pb.t.data)
            assert np.array_equal(pa.q.data, pb.q.data)

    def test_nq_below_one_rejected(self):
        with pytest.raises(ValueError):
            P.poet_forward(mini_volume(), mini_params(), 0, make_rng(21))

    def test_unknown_aggregation_rejected(self):
        with pytest.raises(ValueError):
            P.poet_forward(mini_volume(), mini_params(), 1, make_rng(22), aggregation="mode")

    def test_identical_queries_match_single_query(self):
        params = mini_params()
        cv = mini_volume()
        row = make_rng(23).normal(size=(1, 8))
        single = P.poet_forward(cv, params, 1, FixedQueryRng(row))
        tiled = P.poet_forward(cv, params, 15, FixedQueryRng(np.tile(row, (15, 1))))
        for ps, pt in zip(single, tiled):
            assert np.allclose(ps.t.data, pt.t.data, atol=1e-12)
            assert np.allclose(ps.q.data, pt.q.data, atol=1e-12)

    def test_query_permutation_leaves_predictions_alone(self):
        params = mini_params()
        cv = mini_volume()
        rows = make_rng(24).normal(size=(5, 8))
        base = P.poet_forward(cv, params, 5, FixedQueryRng(rows))
        permuted = P.poet_forward(cv, params, 5, FixedQueryRng(rows[[3, 0, 4, 1, 2]]))
        for pa, pb in zip(base, permuted):
            assert np.allclose(pa.t.data, pb.t.data, atol=1e-9)
            assert np.allclose(pa.q.data, pb.q.data, atol=1e-9)

    def test_pose_averaging_variant_matches_at_single_query(self):
        params = mini_params()
        cv = mini_volume()
        row = make_rng(25).normal(size=(1, 8))
        a = P.poet_forward(cv, params, 1, FixedQueryRng(row))
        b = P.poet_forward(cv, params, 1, FixedQueryRng(row), aggregation="poses")
        for pa, pb in zip(a, b):
            assert np.allclose(pa.t.data, pb.t.data, atol=1e-12)
            assert np.allclose(pa.q.data, pb.q.data, atol=1e-12)

    def test_more_queries_reduce_run_to_run_spread(self):
        params = mini_params(seed=77)
        cv = mini_volume(seed=78)

        def spread(nq):
            finals = []
            for i in range(10):
                preds = P.poet_forward(cv, params, nq, make_rng(1000 + i))
                finals.append(preds[-1].t.data)
            return np.linalg.norm(np.std(np.array(finals), axis=0, ddof=1))

        assert spread(15) < spread(1)


class TestInit:
    def test_layer_count_matches_request(self):
        assert P.layer_count(P.init_poet_params(9, make_rng(26))) == 6
        assert P.layer_count(mini_params(n_layers=2)) == 2

    def test_head_bias_starts_at_identity_pose(self):
        params = P.init_poet_params(9, make_rng(27))
        for k in range(6):
            b = params["poet.head%d.fc1.b" % k].data
            assert np.array_equal(b, P.IDENTITY_HEAD_BIAS.astype(np.float32))

    def test_indivisible_width_rejected(self):
        with pytest.raises(ValueError):
            P.init_poet_params(9, make_rng(28), d_model=10)
