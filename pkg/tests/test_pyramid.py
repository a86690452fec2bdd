import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfd import ops
from tfd.gradcheck import grad_check
from tfd.pyramid import (
    AnchorConfig,
    anchor_level_shapes,
    build_pyramid,
    dump_anchors,
    generate_anchors,
    head_param_shapes,
    head_params,
    init_from_shapes,
    level_anchors,
    pyramid_param_shapes,
    run_heads,
)
from tfd.serialize import load_tensor
from tfd.tensor import DimensionError, Tensor

FIXTURES = Path(__file__).parent / "fixtures"
TAPS = {3: 4, 4: 6, 5: 6}


def taps(rng, h, w, zeros=False):
    make = (lambda s: np.zeros(s)) if zeros else (lambda s: rng.normal(size=s))
    return [Tensor(make((1, h // k, w // k, TAPS[b]))) for k, b in ((1, 3), (2, 4), (4, 5))]


@pytest.fixture
def pyr_params():
    return init_from_shapes(pyramid_param_shapes(TAPS, 8), seed=5)


class TestPyramid:
    def test_desk_shapes(self, rng, pyr_params):
        pyr = build_pyramid(*taps(rng, 16, 16), pyr_params)
        assert [p.shape for p in pyr.levels()] == [(1, s, s, 8) for s in (16, 8, 4, 2, 1)]

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 1000))
    def test_halving_law(self, hk, wk, seed):
        rng = np.random.default_rng(seed)
        params = init_from_shapes(pyramid_param_shapes(TAPS, 3), seed=seed)
        pyr = build_pyramid(*taps(rng, 16 * hk, 16 * wk), params)
        for i, p in enumerate(pyr.levels()):
            assert p.shape[1:3] == (16 * hk >> i, 16 * wk >> i)

    def test_b3_too_small_rejected(self, rng, pyr_params):
        with pytest.raises(DimensionError):
            build_pyramid(*taps(rng, 8, 8), pyr_params)

    def test_broken_chain_rejected(self, rng, pyr_params):
        b3, b4, b5 = taps(rng, 16, 16)
        with pytest.raises(DimensionError):
            build_pyramid(b3, b5, b5, pyr_params)

    def test_zero_in_zero_out(self, rng, pyr_params):
        pyr = build_pyramid(*taps(rng, 16, 16, zeros=True), pyr_params)
        assert all(not p.data.any() for p in pyr.levels())

    def test_golden(self, pyr_params):
        rng = np.random.default_rng(77)
        inputs = [Tensor(rng.normal(size=s)) for s in [(1, 16, 16, 4), (1, 8, 8, 6), (1, 4, 4, 6)]]
        pyr = build_pyramid(*inputs, pyr_params)
        for lvl, p in zip(range(3, 8), pyr.levels()):
            np.testing.assert_allclose(p.data, load_tensor(FIXTURES / f"pyramid_p{lvl}.bin", p.shape), rtol=0, atol=1e-12)

    def test_gradient_through_pyramid(self, rng):
        params = init_from_shapes(pyramid_param_shapes(TAPS, 2), seed=1)
        b3, b4, b5 = taps(rng, 16, 16)
        w = rng.normal(size=(1, 4, 4, 2))
        f = lambda t: ops.total(Tensor(w) * build_pyramid(b3, b4, t, params).p5)
        assert grad_check(f, b5.data) < 1e-6


class TestHeads:
    def test_output_shapes_and_sharing(self, rng, pyr_params):
        params = dict(pyr_params)
        params.update(init_from_shapes(head_param_shapes(8, 1, 9, 3), seed=2))
        pyr = build_pyramid(*taps(rng, 16, 16), pyr_params)
        out = run_heads(pyr, params, depth=1, num_classes=3)
        for c, b, p in zip(out.cls, out.box, pyr.levels()):
            assert c.shape == p.shape[:3] + (27,)
            assert b.shape == p.shape[:3] + (36,)
        a, b = head_params(params, "cls"), head_params(params, "cls")
        assert all(a[k] is b[k] is params[f"head.cls.{k}"] for k in a)

    def test_prior_bias(self):
        params = init_from_shapes(head_param_shapes(4, 1, 9, 2), seed=0, prior=0.01)
        bias = params["head.cls.out.bias"].data
        np.testing.assert_allclose(1 / (1 + np.exp(-bias)), 0.01, rtol=1e-12)
        assert params["head.cls.out.kernel"].data.std() < 0.02


class TestAnchors:
    def test_nine_per_location(self):
        a = level_anchors(2, 3, 8, 32.0, AnchorConfig())
        assert a.shape == (2 * 3 * 9, 4)

    def test_scales_and_ratios(self):
        a = level_anchors(1, 1, 8, 32.0, AnchorConfig())
        w = a[:, 2] - a[:, 0]
        h = a[:, 3] - a[:, 1]
        sizes = np.sqrt(w * h)
        expected_sizes = np.tile([32.0, 32 * 2 ** (-1 / 3), 32 * 2 ** (-2 / 3)], 3)
        np.testing.assert_allclose(sizes, expected_sizes, rtol=1e-12)
        np.testing.assert_allclose(h / w, np.repeat([0.5, 1.0, 2.0], 3), rtol=1e-12)

    def test_centers_on_stride_grid(self):
        a = level_anchors(3, 4, 16, 64.0, AnchorConfig())
        cx = (a[:, 0] + a[:, 2]) / 2
        cy = (a[:, 1] + a[:, 3]) / 2
        for c in (cx, cy):
            grid = c / 16 - 0.5
            np.testing.assert_allclose(grid, np.round(grid), atol=1e-12)
        # (y, x, anchor) order: x advances every 9 anchors
        assert cx[9] - cx[0] == 16 and cy[9] == cy[0]

    def test_total_count_128(self):
        boxes, levels = generate_anchors(anchor_level_shapes(128, 128))
        assert len(boxes) == 9 * (256 + 64 + 16 + 4 + 1)
        assert levels[0] == 3 and levels[-1] == 7

    def test_dump(self, tmp_path):
        boxes, levels = generate_anchors([(1, 1)])
        dump_anchors(tmp_path / "a.txt", boxes, levels)
        lines = (tmp_path / "a.txt").read_text().splitlines()
        assert len(lines) == 9
        lvl, cx, cy, w, h = lines[4].split()
        assert (lvl, float(cx), float(cy)) == ("3", 4.0, 4.0)
        assert float(w) == pytest.approx(32 * 2 ** (-1 / 3), abs=1e-6)
        assert math.isclose(float(w), float(h), rel_tol=1e-6)
