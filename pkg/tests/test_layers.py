import numpy as np
import pytest

from avfuse.checkpoint import CheckpointError, load_arrays, save_arrays
from avfuse.layers import (
    BatchNorm1d,
    Branch,
    Conv1d,
    LayerNorm,
    Linear,
    audio_branch_config,
    conv1d,
    global_avg_pool,
    he_init,
    max_pool1d,
    vision_branch_config,
)
from avfuse.rng import Rng
from avfuse.tensor import (
    ShapeError,
    Tape,
    Tensor,
    backward,
    finite_diff_check,
    reduce_sum,
)


def naive_conv1d(x, w, b, stride, padding):
    """Direct triple-loop convolution; the oracle conv1d is checked against."""
    bsz, n, c_in = x.shape
    c_out, _, k = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (0, 0)))
    length = (n + 2 * padding - k) // stride + 1
    out = np.zeros((bsz, length, c_out))
    for s in range(bsz):
        for t in range(length):
            for o in range(c_out):
                acc = 0.0
                for j in range(k):
                    acc += xp[s, t * stride + j] @ w[o, :, j]
                out[s, t, o] = acc + (b[o] if b is not None else 0.0)
    return out


class TestConv1d:
    def test_hand_example(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1))
        w = Tensor(np.ones((1, 1, 3)))
        out = conv1d(x, w, None, stride=1, padding=1)
        assert np.array_equal(out.data.reshape(-1), [3.0, 6.0, 9.0, 7.0])

    def test_zero_input_bias_free(self):
        out = conv1d(Tensor(np.zeros((2, 5, 3))), Tensor(Rng(0).gaussian((4, 3, 3))), None)
        assert np.array_equal(out.data, np.zeros((2, 5, 4)))

    def test_zero_input_with_bias(self):
        b = Tensor(np.array([1.5, -2.0]))
        out = conv1d(Tensor(np.zeros((1, 5, 3))), Tensor(np.zeros((2, 3, 3))), b)
        assert np.allclose(out.data, np.broadcast_to(b.data, (1, 5, 2)))

    def test_matches_naive_oracle_on_random_cases(self):
        rng = Rng(77)
        for case in range(100):
            g = rng.split("case", case)
            bsz = 1 + g.integer(3)
            k = 1 + g.integer(3)
            stride = 1 + g.integer(2)
            padding = g.integer(3)
            c_in = 1 + g.integer(4)
            c_out = 1 + g.integer(4)
            n = k + g.integer(6)
            x = g.gaussian((bsz, n, c_in))
            w = g.gaussian((c_out, c_in, k))
            b = g.gaussian((c_out,)) if g.uniform() < 0.5 else None
            if (n + 2 * padding - k) // stride + 1 < 1:
                continue
            got = conv1d(Tensor(x), Tensor(w), None if b is None else Tensor(b),
                         stride, padding).data
            want = naive_conv1d(x, w, b, stride, padding)
            assert np.allclose(got, want, atol=1e-12, rtol=1e-12)

    def test_vision_stage1_shape(self):
        branch = Branch(vision_branch_config(35), Rng(1))
        out = branch.stage1(Tensor(Rng(2).gaussian((2, 15, 35))), training=True)
        assert out.shape == (2, 15, 64)

    def test_feature_dim_mismatch(self):
        layer = Conv1d(3, 4, Rng(0))
        with pytest.raises(ShapeError):
            layer(Tensor(np.zeros((1, 5, 2))))

    def test_gradients(self):
        x = Tensor(Rng(3).gaussian((2, 6, 3)))
        w = Tensor(Rng(4).gaussian((4, 3, 3)))
        b = Tensor(Rng(5).gaussian((4,)))
        assert finite_diff_check(
            lambda t: reduce_sum(conv1d(t, w, b, stride=2, padding=1)), x) < 1e-4
        assert finite_diff_check(
            lambda t: reduce_sum(conv1d(x, t, b, stride=2, padding=1)), w) < 1e-4
        assert finite_diff_check(
            lambda t: reduce_sum(conv1d(x, w, t, stride=2, padding=1)), b) < 1e-4


class TestBatchNorm:
    def test_constant_channel_normalizes_to_zero(self):
        bn = BatchNorm1d(1)
        out = bn(Tensor(np.full((1, 3, 1), 2.0)), training=True)
        assert np.all(np.abs(out.data) < 1e-6)

    def test_beta_shift(self):
        bn = BatchNorm1d(1)
        bn.beta = Tensor(np.array([5.0]), requires_grad=True)
        x = Rng(6).gaussian((4, 50, 1))
        out = bn(Tensor(x), training=True)
        assert abs(out.data.mean() - 5.0) < 1e-9

    def test_eval_identity_statistics(self):
        bn = BatchNorm1d(3)
        x = Rng(7).gaussian((2, 4, 3))
        out = bn(Tensor(x), training=False)
        expected = x / np.sqrt(1.0 + bn.eps)
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_eval_mode_is_bitwise_repeatable(self):
        bn = BatchNorm1d(3)
        bn.running_mean = Rng(8).gaussian((3,))
        bn.running_var = Rng(9).uniform((3,)) + 0.5
        x = Tensor(Rng(10).gaussian((2, 4, 3)))
        assert np.array_equal(bn(x, training=False).data, bn(x, training=False).data)

    def test_running_stats_update(self):
        bn = BatchNorm1d(1, momentum=0.5)
        x = np.full((1, 4, 1), 3.0)
        bn(Tensor(x), training=True)
        assert np.allclose(bn.running_mean, [1.5])
        assert np.allclose(bn.running_var, [0.5])

    def test_train_mode_gradient(self):
        bn = BatchNorm1d(2)
        x = Tensor(Rng(11).gaussian((3, 4, 2)))
        assert finite_diff_check(
            lambda t: reduce_sum(bn(t, training=True)), x) < 1e-4


class TestMaxPool:
    def test_basic(self):
        x = Tensor(np.array([1.0, 3.0, 2.0, 5.0]).reshape(1, 4, 1))
        assert np.array_equal(max_pool1d(x).data.reshape(-1), [3.0, 5.0])

    def test_odd_length_truncates(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
        assert np.array_equal(max_pool1d(x).data.reshape(-1), [2.0])

    def test_constant_input(self):
        out = max_pool1d(Tensor(np.full((1, 6, 2), 4.0)))
        assert np.array_equal(out.data, np.full((1, 3, 2), 4.0))

    def test_too_short_errors(self):
        with pytest.raises(ShapeError):
            max_pool1d(Tensor(np.zeros((1, 1, 2))), k=2)

    def test_gradient_is_one_hot_per_window(self):
        x = Tensor(Rng(12).gaussian((2, 8, 3)), requires_grad=True)
        with Tape():
            backward(reduce_sum(max_pool1d(x)))
        windows = x.grad.reshape(2, 4, 2, 3)
        assert np.array_equal(windows.sum(axis=2), np.ones((2, 4, 3)))
        assert set(np.unique(x.grad)) <= {0.0, 1.0}

    def test_tie_routes_to_first_index(self):
        x = Tensor(np.array([2.0, 2.0]).reshape(1, 2, 1), requires_grad=True)
        with Tape():
            backward(reduce_sum(max_pool1d(x)))
        assert np.array_equal(x.grad.reshape(-1), [1.0, 0.0])


class TestPoolingAndLinear:
    def test_global_avg_pool(self):
        x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 2, 2))
        assert np.array_equal(global_avg_pool(x).data, [[3.0, 5.0]])

    def test_global_avg_pool_single_step(self):
        x = Tensor(np.array([[2.0, 4.0]]).reshape(1, 1, 2))
        assert np.array_equal(global_avg_pool(x).data, [[2.0, 4.0]])

    def test_linear_identity(self):
        layer = Linear(3, 3, Rng(13))
        layer.w = Tensor(np.eye(3), requires_grad=True)
        layer.b = Tensor(np.zeros(3), requires_grad=True)
        x = Rng(14).gaussian((2, 3))
        assert np.allclose(layer(Tensor(x)).data, x)

    def test_linear_zero_weight(self):
        layer = Linear(3, 2, Rng(15))
        layer.w = Tensor(np.zeros((3, 2)), requires_grad=True)
        layer.b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        out = layer(Tensor(np.ones((4, 3))))
        assert np.allclose(out.data, np.tile([1.0, 2.0], (4, 1)))

    def test_linear_gradient(self):
        layer = Linear(4, 2, Rng(16))
        x = Tensor(Rng(17).gaussian((3, 4)))
        assert finite_diff_check(lambda t: reduce_sum(layer(t)), x) < 1e-4
        assert finite_diff_check(
            lambda t: reduce_sum(Tensor(x.data) @ t + layer.b), layer.w) < 1e-4


class TestLayerNorm:
    def test_constant_row_gives_beta(self):
        ln = LayerNorm(3)
        ln.beta = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        out = ln(Tensor(np.full((1, 2, 3), 7.0)))
        assert np.allclose(out.data, np.broadcast_to([1.0, 2.0, 3.0], (1, 2, 3)), atol=1e-2)

    def test_rows_are_zero_mean(self):
        ln = LayerNorm(5)
        out = ln(Tensor(Rng(18).gaussian((2, 3, 5))))
        assert np.all(np.abs(out.data.mean(axis=-1)) < 1e-10)

    def test_scale_invariance(self):
        ln = LayerNorm(5, eps=1e-12)
        x = Rng(19).gaussian((2, 3, 5))
        a = ln(Tensor(x)).data
        b = ln(Tensor(2.0 * x)).data
        assert np.allclose(a, b, atol=1e-10)

    def test_gradient(self):
        ln = LayerNorm(4)
        x = Tensor(Rng(20).gaussian((2, 3, 4)))
        assert finite_diff_check(lambda t: reduce_sum(ln(t)), x) < 1e-4


class TestHeInit:
    def test_std_matches_fan_in(self):
        t = he_init((100000,), fan_in=2, seed_or_rng=21)
        assert abs(t.data.std() - 1.0) < 0.05

    def test_deterministic(self):
        a = he_init((4, 4), fan_in=4, seed_or_rng=22)
        b = he_init((4, 4), fan_in=4, seed_or_rng=22)
        assert np.array_equal(a.data, b.data)

    def test_large_fan_in_near_zero(self):
        t = he_init((100,), fan_in=10**12, seed_or_rng=23)
        assert np.max(np.abs(t.data)) < 1e-4


class TestBranch:
    def test_vision_shapes_for_any_valid_input(self):
        branch = Branch(vision_branch_config(35), Rng(24))
        x = Tensor(Rng(25).gaussian((2, 15, 35)))
        h1 = branch.stage1(x, training=True)
        h2 = branch.stage2(h1, training=True)
        assert h1.shape == (2, 15, 64)
        assert h2.shape == (2, 15, 128)

    def test_audio_shapes_halve_per_block(self):
        branch = Branch(audio_branch_config(10), Rng(26))
        x = Tensor(Rng(27).gaussian((2, 64, 10)))
        h1 = branch.stage1(x, training=True)
        h2 = branch.stage2(h1, training=True)
        assert h1.shape == (2, 16, 128)
        assert h2.shape == (2, 4, 128)

    def test_bias_free_branch_is_positively_homogeneous(self):
        cfg = vision_branch_config(6, widths=[[4, 4], [8, 8]])
        cfg.use_bn = False
        branch = Branch(cfg, Rng(28))
        x = Rng(29).gaussian((1, 7, 6))
        alpha = 2.5
        a = branch(Tensor(alpha * x)).data
        b = alpha * branch(Tensor(x)).data
        assert np.allclose(a, b, rtol=1e-10, atol=1e-10)

    def test_zero_input_bias_free_gives_zero_before_bn_shift(self):
        cfg = audio_branch_config(5, widths=[[4, 8], [8, 8]])
        cfg.use_bn = False
        branch = Branch(cfg, Rng(30))
        out = branch(Tensor(np.zeros((1, 32, 5))))
        assert np.array_equal(out.data, np.zeros_like(out.data))

    def test_invalid_stage_arg(self):
        branch = Branch(vision_branch_config(4, widths=[[2, 2], [2, 2]]), Rng(31))
        with pytest.raises(ValueError):
            branch(Tensor(np.zeros((1, 5, 4))), stage="3")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        arrays = {
            "a.w": Rng(32).gaussian((3, 4)),
            "b.bias": Rng(33).gaussian((5,)),
            "c.scalar": np.array(2.5),
        }
        save_arrays(arrays, tmp_path / "ckpt")
        loaded = load_arrays(tmp_path / "ckpt")
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])

    def test_bytes_are_deterministic(self, tmp_path):
        arrays = {"z": np.arange(4.0), "a": np.ones((2, 2))}
        save_arrays(arrays, tmp_path / "c1")
        save_arrays(dict(reversed(list(arrays.items()))), tmp_path / "c2")
        assert (tmp_path / "c1" / "data.bin").read_bytes() == (tmp_path / "c2" / "data.bin").read_bytes()
        assert (tmp_path / "c1" / "index.json").read_text() == (tmp_path / "c2" / "index.json").read_text()

    def test_missing_index_errors(self, tmp_path):
        with pytest.raises(CheckpointError, match="index"):
            load_arrays(tmp_path / "nope")
