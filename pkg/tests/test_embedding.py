import numpy as np
import pytest

from point2vec.embedding import MiniPointNet, PositionalEncoder, embed_patches, encode_positions
from point2vec.numerics import Tensor, check_gradients
from point2vec.numerics.errors import NumericError


def small_net(seed=0):
    return MiniPointNet(np.random.default_rng(seed), (8, 12), (16, 10)).to(np.float64)


def test_patch_embedding_shape():
    out = embed_patches(np.zeros((2, 5, 7, 3)), small_net())
    assert out.shape == (2, 5, 10)


def test_permuting_points_inside_patch_is_exact_noop():
    rng = np.random.default_rng(1)
    patches = rng.standard_normal((4, 9, 3))
    net = small_net()
    perm = rng.permutation(9)
    a = embed_patches(patches, net).data
    b = embed_patches(patches[:, perm], net).data
    assert a.tobytes() == b.tobytes()


def test_duplicating_points_is_exact_noop():
    patches = np.random.default_rng(2).standard_normal((3, 6, 3))
    net = small_net()
    a = embed_patches(patches, net).data
    b = embed_patches(np.concatenate([patches, patches], axis=1), net).data
    assert a.tobytes() == b.tobytes()


def test_non_finite_patch_rejected():
    patches = np.zeros((1, 4, 3))
    patches[0, 1, 2] = np.inf
    with pytest.raises(NumericError):
        embed_patches(patches, small_net())


@pytest.mark.parametrize("seed", range(3))
def test_patch_embedding_gradients(seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed)
    x = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True, dtype=np.float64)
    assert check_gradients(lambda: embed_patches(x, net).sum(), [x]) < 1e-4
    params = net.parameters()
    assert check_gradients(lambda: embed_patches(x, net).sum(), params) < 1e-4


def test_identical_centers_identical_positions():
    enc = PositionalEncoder(np.random.default_rng(0), dim=8, hidden=6).to(np.float64)
    c = np.array([[0.3, -0.2, 0.9], [0.3, -0.2, 0.9]])
    out = encode_positions(c, enc).data
    assert out[0].tobytes() == out[1].tobytes()


def test_zero_weights_give_bias():
    enc = PositionalEncoder(np.random.default_rng(0), dim=5, hidden=4).to(np.float64)
    enc.fc2.weight.data[...] = 0.0
    b = np.arange(5.0)
    enc.fc2.bias.data[...] = b
    out = encode_positions(np.random.default_rng(1).standard_normal((7, 3)), enc).data
    np.testing.assert_array_equal(out, np.tile(b, (7, 1)))


def test_positional_gradients():
    enc = PositionalEncoder(np.random.default_rng(0), dim=6, hidden=5).to(np.float64)
    c = Tensor(np.random.default_rng(3).standard_normal((4, 3)), requires_grad=True, dtype=np.float64)
    r = np.random.default_rng(9).standard_normal((4, 6))
    loss = lambda: (encode_positions(c, enc) * Tensor(r, dtype=np.float64)).sum()  # noqa: E731
    assert check_gradients(loss, [c, *enc.parameters()]) < 1e-4
