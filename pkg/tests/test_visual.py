import numpy as np
import pytest

from cogrind import visual as vis
from cogrind.autodiff import Tensor
from cogrind.params import zeros
from cogrind.synthetic import shape_mask


@pytest.fixture(scope="module")
def params():
    return vis.init_backbone_params(np.random.default_rng(0), channels=(4, 8, 8, 8))


@pytest.mark.parametrize("size,grid", [(64, 4), (256, 16)])
def test_grid_arithmetic(params, size, grid):
    img = np.random.default_rng(1).random((1, size, size, 3))
    (F,) = vis.backbone_forward(img, params)
    assert F.shape == (1, grid, grid, 8)
    assert vis.grid_size(size, 3) == grid


def test_size_mismatch(params):
    with pytest.raises(ValueError, match="64x64"):
        vis.backbone_forward(np.zeros((1, 32, 32, 3)), params, image_size=64)


def test_zero_image_zero_bias_gives_zero_features(params):
    (F,) = vis.backbone_forward(np.zeros((2, 64, 64, 3)), params)
    np.testing.assert_array_equal(F.data, 0.0)


def test_backbone_is_deterministic(params):
    img = np.random.default_rng(2).random((2, 64, 64, 3))
    a = vis.backbone_forward(img, params)[0].data
    b = vis.backbone_forward(img, params)[0].data
    assert a.tobytes() == b.tobytes()


def test_taps_and_adapters():
    p = vis.init_backbone_params(np.random.default_rng(0), channels=(4, 8, 8, 6), taps=(1, 2, 3), out_dim=6)
    maps = vis.backbone_forward(np.random.default_rng(1).random((1, 64, 64, 3)), p, taps=(1, 2, 3))
    assert [m.shape for m in maps] == [(1, 16, 16, 6), (1, 8, 8, 6), (1, 4, 4, 6)]


def test_coordinate_cell_zero():
    U = vis.coordinate_encode(4, 4)
    np.testing.assert_allclose(U[0, 0], [0, 0, 0.125, 0.125, 0.25, 0.25, 0.25, 0.25])
    assert np.all(U[:, 0, 0] == U[0, 0, 0])
    with pytest.raises(ValueError):
        vis.coordinate_encode(0, 3)


def test_coordinate_map_is_shared_bitwise():
    assert vis.coordinate_encode(5, 3).tobytes() == vis.coordinate_encode(5, 3).tobytes()


def test_identity_projection_reproduces_raw_map():
    w = np.zeros((8, 10))
    w[:, :8] = np.eye(8)
    U = vis.coordinate_features(4, 4, {"w": Tensor(w), "b": zeros(10)})
    np.testing.assert_array_equal(U.data[..., :8], vis.coordinate_encode(4, 4))


def test_shift_by_one_cell_moves_argmax():
    """A lone square shifted by 16 px moves the strongest feature cell by one."""
    rng = np.random.default_rng(3)
    p = vis.init_backbone_params(rng, channels=(8, 8, 8, 8))
    hits = 0
    for x in (4, 20):
        base, moved = np.zeros((2, 64, 64, 3))
        base[shape_mask("square", 12, x, 20, 64)] = (1.0, 0.2, 0.1)
        moved[shape_mask("square", 12, x + 16, 20, 64)] = (1.0, 0.2, 0.1)
        a, b = (vis.backbone_forward(im, p)[0].data[0] for im in (base, moved))
        na, nb = (np.linalg.norm(m, axis=-1) for m in (a, b))
        ia, ib = np.unravel_index(na.argmax(), na.shape), np.unravel_index(nb.argmax(), nb.shape)
        hits += ib == (ia[0], ia[1] + 1)
    assert hits == 2
