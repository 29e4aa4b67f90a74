import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from see.gradcheck import check_gradients
from see.tensor import Tensor, precision
from see.transformer import (
    IDENTITY,
    bilinear_sample,
    bilinear_sample_reference,
    generate_grids,
    grids_to_bboxes,
    make_base_grid,
    read_bboxes_jsonl,
    rotation_dropout,
    write_bboxes_jsonl,
)
from see.verify import _kink_free, _smooth_grid


def params(*theta):
    return Tensor(np.asarray([theta], dtype=np.float64))


# --- base grid ---------------------------------------------------------------


def test_base_grid_spacing():
    np.testing.assert_array_equal(make_base_grid(2, 2).base[0, :, 0], [-1, 1])
    np.testing.assert_array_equal(make_base_grid(2, 3).base[0, :, 0], [-1, 0, 1])
    np.testing.assert_allclose(make_base_grid(4, 2).base[:, 0, 1], [-1, -1 / 3, 1 / 3, 1], atol=1e-7)


@pytest.mark.parametrize("h,w", [(1, 4), (4, 1), (0, 0)])
def test_base_grid_too_small(h, w):
    with pytest.raises(ValueError):
        make_base_grid(h, w)


# --- grid generator ----------------------------------------------------------


def _point(theta, x, y):
    base = make_base_grid(2, 2, dtype=np.float64)
    base.base[0, 0] = (x, y)
    return generate_grids(params(*theta), base).transformed.data[0, 0, 0]


def test_grid_identity_point():
    np.testing.assert_array_equal(_point(IDENTITY, 0.5, -0.25), [0.5, -0.25])


def test_grid_translation_point():
    np.testing.assert_allclose(_point((1, 0, 0.2, 0, 1, 0), 0.0, 0.0), [0.2, 0.0])


def test_grid_rotation_point():
    np.testing.assert_array_equal(_point((0, -1, 0, 1, 0, 0), 1.0, 0.0), [0.0, 1.0])


def test_identity_params_return_base_exactly():
    base = make_base_grid(5, 7)
    out = generate_grids(Tensor(np.array([IDENTITY], dtype=np.float32)), base).transformed.data[0]
    assert np.array_equal(out, base.base)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_grid_generator_matches_per_point_oracle(seed):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((2, 6))
    base = make_base_grid(int(rng.integers(2, 5)), int(rng.integers(2, 5)), dtype=np.float64)
    got = generate_grids(Tensor(theta), base).transformed.data
    for n in range(2):
        t = [float(v) for v in theta[n]]
        for i in range(base.out_height):
            for j in range(base.out_width):
                x, y = (float(v) for v in base.base[i, j])
                assert got[n, i, j, 0] == t[0] * x + t[1] * y + t[2]
                assert got[n, i, j, 1] == t[3] * x + t[4] * y + t[5]


# --- sampler -----------------------------------------------------------------


def _to_norm(px, size):
    return px / (size - 1) * 2 - 1


def test_sampler_half_pixel_example():
    img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    grid = np.array([[[[_to_norm(0.5, 2), _to_norm(0.5, 2)]]]])
    with precision("f64"):
        assert bilinear_sample(Tensor(img), Tensor(grid)).data.item() == pytest.approx(1.5)
    assert bilinear_sample_reference(img, grid).item() == pytest.approx(1.5)


def test_sampler_integer_pixel_example():
    img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    # column 0, row 1 -> I[1][0]
    grid = np.array([[[[-1.0, 1.0]]]])
    assert bilinear_sample(Tensor(img), Tensor(grid)).data.item() == 2.0


def test_identity_resampling_reproduces_input():
    rng = np.random.default_rng(0)
    with precision("f64"):
        img = rng.random((3, 12, 17))
        grids = generate_grids(params(*IDENTITY), make_base_grid(12, 17, dtype=np.float64))
        out = bilinear_sample(Tensor(img), grids).data[0]
    np.testing.assert_allclose(out, img, atol=1e-6)


def test_sampler_matches_brute_force_oracle_50_grids():
    with precision("f64"):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            C, H, W = int(rng.integers(1, 4)), int(rng.integers(2, 10)), int(rng.integers(2, 10))
            img = rng.standard_normal((C, H, W))
            grid = rng.uniform(-1.4, 1.4, (2, 4, 3, 2))
            fast = bilinear_sample(Tensor(img), Tensor(grid)).data
            np.testing.assert_allclose(fast, bilinear_sample_reference(img, grid), atol=1e-6)


def test_fully_outside_grid_is_zero_with_zero_image_gradient():
    img = Tensor(np.random.default_rng(1).random((1, 1, 5, 5)), requires_grad=True)
    grid = Tensor(np.full((1, 1, 3, 3, 2), 3.0))
    out = bilinear_sample(img, grid)
    assert not np.any(out.data)
    out.sum().backward()
    assert not np.any(img.grad)


def test_batched_and_unbatched_agree():
    rng = np.random.default_rng(2)
    img = rng.random((2, 6, 6)).astype(np.float32)
    grid = rng.uniform(-1, 1, (3, 4, 4, 2)).astype(np.float32)
    a = bilinear_sample(Tensor(img), Tensor(grid)).data
    b = bilinear_sample(Tensor(img[None]), Tensor(grid[None])).data[0]
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_sampler_gradient_image_and_grid(seed):
    rng = np.random.default_rng(seed)
    with precision("f64"):
        img = Tensor(rng.standard_normal((1, 2, 5, 6)), requires_grad=True)
        grid = Tensor(_smooth_grid(rng, (1, 2, 3, 3, 2), 5, 6), requires_grad=True)
        P = rng.standard_normal((1, 2, 2, 3, 3))
        assert max(check_gradients(lambda: (bilinear_sample(img, grid) * P).sum(), [img, grid])) <= 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_theta_gradient_through_sampling(seed):
    rng = np.random.default_rng(seed)
    base = make_base_grid(3, 4, dtype=np.float64)
    with precision("f64"):
        img = Tensor(rng.standard_normal((1, 1, 8, 8)))
        for _ in range(200):
            theta = np.array(IDENTITY) * 0.7 + rng.normal(0, 0.2, 6)
            if _kink_free(generate_grids(Tensor(theta[None, None]), base).transformed.data, 8, 8):
                break
        th = Tensor(theta[None, None], requires_grad=True)
        fn = lambda: (bilinear_sample(img, generate_grids(th, base)) ** 2).sum()  # noqa: E731
        assert max(check_gradients(fn, [th])) <= 1e-4


def test_image_gradient_scatter_is_deterministic():
    rng = np.random.default_rng(3)
    img = Tensor(rng.random((2, 3, 9, 9)).astype(np.float32), requires_grad=True)
    grid = Tensor(rng.uniform(-1, 1, (2, 2, 6, 6, 2)).astype(np.float32))
    grads = []
    for _ in range(2):
        img.zero_grad()
        (bilinear_sample(img, grid) * 1.7).sum().backward()
        grads.append(img.grad.tobytes())
    assert grads[0] == grads[1]


# --- rotation dropout --------------------------------------------------------


def test_rotation_dropout_examples():
    th = params(1, 0.3, 0, -0.2, 1, 0)
    np.testing.assert_array_equal(rotation_dropout(th, 0.0, None, True).data, th.data)
    np.testing.assert_array_equal(rotation_dropout(th, 1.0, None, True).data, [[1, 0, 0, 0, 1, 0]])
    np.testing.assert_array_equal(rotation_dropout(th, 0.7, np.random.default_rng(0), False).data, th.data)


def test_rotation_dropout_rejects_bad_probability():
    with pytest.raises(ValueError):
        rotation_dropout(params(*IDENTITY), 1.5, None, True)
    with pytest.raises(ValueError):
        rotation_dropout(params(*IDENTITY), -0.1, None, True)


def test_rotation_dropout_gradients():
    th = Tensor(np.array([[1.0, 0.3, 0.1, -0.2, 0.9, 0.05]]), requires_grad=True)
    (rotation_dropout(th, 1.0, None, True) * np.arange(1, 7)).sum().backward()
    np.testing.assert_array_equal(th.grad, [[1, 0, 3, 0, 5, 6]])


def test_rotation_dropout_joint_per_region():
    rng = np.random.default_rng(4)
    th = Tensor(rng.standard_normal((50, 6)))
    out = rotation_dropout(th, 0.5, rng, True).data
    dropped2 = out[:, 1] == 0
    dropped4 = out[:, 3] == 0
    assert np.array_equal(dropped2, dropped4)
    assert 0 < dropped2.sum() < 50


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_full_rotation_dropout_makes_grids_axis_aligned(seed):
    rng = np.random.default_rng(seed)
    th = rotation_dropout(Tensor(rng.standard_normal((3, 6))), 1.0, rng, True)
    g = generate_grids(th, make_base_grid(4, 5)).transformed.data
    assert np.all(g[:, :, :, 1] == g[:, :, :1, 1])   # each row one v
    assert np.all(g[:, :, :, 0] == g[:, :1, :, 0])   # each column one u


# --- boxes -------------------------------------------------------------------


def _boxes(theta, w=100, h=100):
    grids = generate_grids(params(*theta), make_base_grid(3, 3, dtype=np.float64))
    return grids_to_bboxes(grids, w, h)


def test_identity_box_corners():
    np.testing.assert_allclose(_boxes(IDENTITY)[0].corners, [[0, 0], [99, 0], [0, 99], [99, 99]])


def test_half_scale_box_corners():
    c = _boxes((0.5, 0, 0, 0, 0.5, 0))[0].corners
    np.testing.assert_allclose(c, [[24.75, 24.75], [74.25, 24.75], [24.75, 74.25], [74.25, 74.25]])


def test_translation_shifts_corners():
    shifted = _boxes((1, 0, 0.5, 0, 1, 0))[0].corners
    base = _boxes(IDENTITY)[0].corners
    np.testing.assert_allclose(shifted[:, 0] - base[:, 0], 24.75)
    np.testing.assert_allclose(shifted[:, 1], base[:, 1])


def test_box_raw_coordinates_preserved_clamped_for_rendering():
    box = _boxes((2, 0, 0, 0, 2, 0))[0]
    assert box.corners.min() < 0 and box.corners.max() > 99
    c = box.clamped(100, 100)
    assert c.min() == 0 and c.max() == 99


def test_boxes_jsonl_round_trip():
    boxes = _boxes((0.5, 0.1, 0.2, -0.1, 0.6, 0.0))
    buf = io.StringIO()
    write_bboxes_jsonl(boxes, buf)
    back = read_bboxes_jsonl(io.StringIO(buf.getvalue()))
    assert back[0].region == 0
    np.testing.assert_array_equal(back[0].corners, boxes[0].corners)
