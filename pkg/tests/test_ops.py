import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import conv2d_loop, maxpool_loop, rand_tensor, upsample_loop
from tfd import ops
from tfd.gradcheck import grad_check
from tfd.tensor import DimensionError, GradTape, Tensor


def conv_cases(count, seed=0):
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = "same" if rng.random() < 0.6 else "valid"
        h = int(rng.integers(k, 7))
        w = int(rng.integers(k, 7))
        shape = (int(rng.integers(1, 3)), h, w, int(rng.integers(1, 4)))
        cases.append((shape, k, int(rng.integers(1, 4)), stride, padding, int(rng.integers(1 << 30))))
    return cases


class TestConv2d:
    def test_scalar_affine(self):
        out = ops.conv2d(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.array([1.0])))
        assert out.data.item() == 7.0

    def test_identity_kernel(self, rng):
        x = rand_tensor(rng, (1, 5, 4, 1))
        out = ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_3x3_same_matches_loop(self, rng):
        x = rng.normal(size=(1, 4, 4, 3))
        k = rng.normal(size=(3, 3, 3, 2))
        b = rng.normal(size=2)
        out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b))
        np.testing.assert_allclose(out.data, conv2d_loop(x, k, b, 1, "same"), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("shape,k,cout,stride,padding,seed", conv_cases(50))
    def test_random_shapes_match_loop(self, shape, k, cout, stride, padding, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=shape)
        kern = rng.normal(size=(k, k, shape[3], cout))
        b = rng.normal(size=cout)
        out = ops.conv2d(Tensor(x), Tensor(kern), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, conv2d_loop(x, kern, b, stride, padding), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("h,k,s,expected", [(8, 3, 1, 8), (8, 3, 2, 4), (7, 3, 2, 4), (1, 3, 2, 1), (16, 1, 2, 8)])
    def test_same_output_size(self, h, k, s, expected):
        assert ops.conv_output_geometry(h, k, s, "same")[0] == expected

    def test_channel_mismatch_names_axis(self, rng):
        with pytest.raises(DimensionError) as err:
            ops.conv2d(rand_tensor(rng, (1, 4, 4, 3)), rand_tensor(rng, (3, 3, 2, 1)))
        assert err.value.axis == "channels"

    def test_bad_stride(self, rng):
        with pytest.raises(ValueError):
            ops.conv2d(rand_tensor(rng, (1, 4, 4, 1)), rand_tensor(rng, (1, 1, 1, 1)), stride=0)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
    def test_gradients(self, rng, stride, padding):
        x = rng.normal(size=(1, 5, 5, 2))
        k = rng.normal(size=(3, 3, 2, 2))
        b = rng.normal(size=2)
        wsum = rng.normal(size=ops.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).shape)

        def loss_x(t):
            return ops.total(Tensor(wsum) * ops.conv2d(t, Tensor(k), Tensor(b), stride, padding))

        def loss_k(t):
            return ops.total(Tensor(wsum) * ops.conv2d(Tensor(x), t, Tensor(b), stride, padding))

        def loss_b(t):
            return ops.total(Tensor(wsum) * ops.conv2d(Tensor(x), Tensor(k), t, stride, padding))

        assert grad_check(loss_x, x) < 1e-7
        assert grad_check(loss_k, k) < 1e-7
        assert grad_check(loss_b, b) < 1e-7


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))).data.ravel(), [0, 0, 2])

    def test_positive_identity(self, rng):
        x = rand_tensor(rng, (1, 3, 3, 2), low=0.1, high=2.0)
        np.testing.assert_array_equal(ops.relu(x).data, x.data)

    def test_gradient(self):
        x = Tensor(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2), requires_grad=True)
        with GradTape() as tape:
            y = ops.total(ops.relu(x))
        tape.backward(y)
        np.testing.assert_array_equal(x.grad.ravel(), [0.0, 1.0])
        # finite differences agree away from the kink
        assert grad_check(lambda t: ops.total(ops.relu(t)), x.data) < 1e-9

    def test_subgradient_at_zero(self):
        x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        with GradTape() as tape:
            y = ops.total(ops.relu(x))
        tape.backward(y)
        assert x.grad.item() == 0.0


def pool_shapes(count, seed=1):
    rng = np.random.default_rng(seed)
    return [(int(rng.integers(1, 3)), 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5)), int(rng.integers(1, 4)))
            for _ in range(count)]


class TestMaxpool:
    def test_block(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
        assert ops.maxpool2(x).data.item() == 4.0

    def test_constant(self):
        out = ops.maxpool2(Tensor(np.full((1, 4, 6, 2), 0.5)))
        assert out.shape == (1, 2, 3, 2)
        assert np.all(out.data == 0.5)

    @pytest.mark.parametrize("shape", pool_shapes(50))
    def test_random_shapes_match_loop(self, shape):
        x = np.random.default_rng(sum(shape)).normal(size=shape)
        np.testing.assert_allclose(ops.maxpool2(Tensor(x)).data, maxpool_loop(x), rtol=0, atol=1e-10)

    def test_random_4x4x2(self, rng):
        x = rng.normal(size=(1, 4, 4, 2))
        np.testing.assert_array_equal(ops.maxpool2(Tensor(x)).data, maxpool_loop(x))

    @pytest.mark.parametrize("shape,axis", [((1, 3, 4, 1), "height"), ((1, 4, 5, 1), "width")])
    def test_odd_dims_rejected(self, shape, axis):
        with pytest.raises(DimensionError) as err:
            ops.maxpool2(Tensor(np.zeros(shape)))
        assert err.value.axis == axis

    def test_gradient_goes_to_first_max_on_ties(self):
        x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
        with GradTape() as tape:
            y = ops.total(ops.maxpool2(x))
        tape.backward(y)
        np.testing.assert_array_equal(x.grad.reshape(2, 2), [[1, 0], [0, 0]])

    def test_gradient_matches_finite_differences(self, rng):
        # distinct values keep the argmax stable under the eps perturbation
        x = rng.permutation(32).astype(float).reshape(1, 4, 4, 2)
        w = rng.normal(size=(1, 2, 2, 2))
        assert grad_check(lambda t: ops.total(Tensor(w) * ops.maxpool2(t)), x) < 1e-8


class TestUpsample:
    def test_single(self):
        np.testing.assert_array_equal(ops.upsample_nearest2(Tensor(np.ones((1, 1, 1, 1)))).data.reshape(2, 2), np.ones((2, 2)))

    def test_shape(self):
        assert ops.upsample_nearest2(Tensor(np.zeros((1, 2, 2, 5)))).shape == (1, 4, 4, 5)

    @pytest.mark.parametrize("shape", pool_shapes(50, seed=2))
    def test_random_shapes_match_loop(self, shape):
        x = np.random.default_rng(sum(shape) + 7).normal(size=shape)
        np.testing.assert_allclose(ops.upsample_nearest2(Tensor(x)).data, upsample_loop(x), rtol=0, atol=1e-10)

    def test_gradient(self, rng):
        x = rng.normal(size=(1, 2, 3, 2))
        w = rng.normal(size=(1, 4, 6, 2))
        assert grad_check(lambda t: ops.total(Tensor(w) * ops.upsample_nearest2(t)), x) < 1e-8


def concat_cases(count, seed=3):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n, h, w = (int(v) for v in rng.integers(1, 5, size=3))
        chans = [int(c) for c in rng.integers(1, 5, size=int(rng.integers(1, 5)))]
        out.append(((n, h, w), chans))
    return out


class TestConcat:
    def test_channel_sum(self):
        out = ops.concat_channels([Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.ones((1, 4, 4, 3)))])
        assert out.shape == (1, 4, 4, 6)

    def test_single_identity(self, rng):
        x = rand_tensor(rng, (1, 2, 2, 3))
        np.testing.assert_array_equal(ops.concat_channels([x]).data, x.data)

    @pytest.mark.parametrize("spatial,chans", concat_cases(50))
    def test_random_match_loop_and_slice_back(self, spatial, chans):
        rng = np.random.default_rng(sum(chans) * 31 + sum(spatial))
        parts = [rng.normal(size=spatial + (c,)) for c in chans]
        out = ops.concat_channels([Tensor(p) for p in parts]).data
        ref = np.zeros(spatial + (sum(chans),))
        offset = 0
        for p in parts:
            for c in range(p.shape[3]):
                ref[..., offset + c] = p[..., c]
            offset += p.shape[3]
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)
        offset = 0
        for p in parts:
            back = ops.slice_channels(Tensor(out), offset, offset + p.shape[3]).data
            np.testing.assert_array_equal(back, p)
            offset += p.shape[3]

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError) as err:
            ops.concat_channels([Tensor(np.zeros((1, 4, 4, 1))), Tensor(np.zeros((1, 4, 5, 1)))])
        assert err.value.axis == "width"

    def test_gradient(self, rng):
        a = rng.normal(size=(1, 2, 2, 2))
        b = rng.normal(size=(1, 2, 2, 3))
        w = rng.normal(size=(1, 2, 2, 5))
        assert grad_check(lambda t: ops.total(Tensor(w) * ops.concat_channels([t, Tensor(b)])), a) < 1e-8


def gather_cases(count, seed=4):
    rng = np.random.default_rng(seed)
    return [((1, int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 17))), int(rng.integers(0, 4)),
             int(rng.integers(1 << 30))) for _ in range(count)]


class TestGatherChannel:
    @pytest.mark.parametrize("shape,n,seed", gather_cases(50))
    def test_random_match_loop(self, shape, n, seed):
        rng = np.random.default_rng(seed)
        maps = [rng.normal(size=shape) for _ in range(2 * n + 1)]
        k = int(rng.integers(0, shape[3]))
        out = ops.gather_channel([Tensor(m) for m in maps], k).data
        assert out.shape == shape[:3] + (2 * n + 1,)
        for j, m in enumerate(maps):
            for y in range(shape[1]):
                for x in range(shape[2]):
                    assert out[0, y, x, j] == m[0, y, x, k]

    def test_ordering_example(self):
        # channel j of the output is channel k of frame j
        maps = [Tensor(np.full((1, 1, 1, 3), 10.0 * f) + np.arange(3)) for f in range(3)]
        np.testing.assert_array_equal(ops.gather_channel(maps, 1).data.ravel(), [1.0, 11.0, 21.0])

    def test_out_of_range(self):
        with pytest.raises(DimensionError):
            ops.gather_channel([Tensor(np.zeros((1, 2, 2, 3)))], 3)

    def test_gradient(self, rng):
        maps = [rng.normal(size=(1, 3, 3, 4)) for _ in range(3)]
        w = rng.normal(size=(1, 3, 3, 3))
        f = lambda t: ops.total(Tensor(w) * ops.gather_channel([Tensor(maps[0]), t, Tensor(maps[2])], 2))
        assert grad_check(f, maps[1]) < 1e-8


class TestTape:
    def test_reverse_order_and_accumulation(self):
        x = Tensor(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
        with GradTape() as tape:
            y = ops.add(x, x)            # x feeds two consumers
            z = ops.add(y, ops.relu(x))  # and a third through relu
        tape.backward(z)
        assert x.grad.item() == 3.0

    def test_no_tape_no_record(self):
        x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        ops.relu(x)
        with GradTape() as tape:
            pass
        assert len(tape.records) == 0

    def test_grad_accumulates_across_backward_calls(self):
        x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        for _ in range(2):
            with GradTape() as tape:
                y = ops.total(ops.scale(x, 2.0))
            tape.backward(y)
        assert x.grad.item() == 4.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3), st.sampled_from([1, 2, 3]), st.integers(0, 1000))
def test_forward_ops_stay_finite(h, w, c, k, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2 * h, 2 * w, c)) * 100)
    y = ops.conv2d(x, Tensor(rng.normal(size=(k, k, c, 2))), Tensor(rng.normal(size=2)))
    for t in (y, ops.relu(y), ops.maxpool2(y), ops.upsample_nearest2(y)):
        assert np.all(np.isfinite(t.data))
        assert t.data.size == np.prod(t.shape)
