import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srftkv import transform as tr
from srftkv.errors import DataError, DimensionError, RangeError, ShapeError, UndefinedMomentError
from srftkv.oracle import dense_srft_matrix, dense_srht_matrix

DIMS = (4, 8, 16, 64, 128, 256)


def test_make_spec_deterministic():
    a = tr.make_spec("srft", 64, 0)
    b = tr.make_spec("srft", 64, 0)
    assert a.signs.tobytes() == b.signs.tobytes()
    assert a == b


def test_identity_signs_all_positive():
    spec = tr.make_spec("identity", 8, 1234)
    assert np.all(spec.signs == 1)


def test_signs_are_plus_minus_one_and_seed_dependent():
    s0 = tr.make_spec("srft", 256, 0).signs
    s1 = tr.make_spec("srft", 256, 1).signs
    assert set(np.unique(s0)) <= {-1, 1}
    assert not np.array_equal(s0, s1)
    # roughly balanced
    assert 80 < np.sum(s0 == 1) < 176


def test_signs_prefix_stable():
    # counter-based derivation: sign i depends only on (seed, i)
    a = tr.derive_signs(7, 16)
    b = tr.derive_signs(7, 64)
    assert np.array_equal(a, b[:16])


def test_signs_read_only():
    spec = tr.make_spec("srft", 8, 0)
    with pytest.raises(ValueError):
        spec.signs[0] = 1


@pytest.mark.parametrize("d", [6, 12, 3, 0, -4])
def test_non_power_of_two_rejected(d):
    with pytest.raises(DimensionError):
        tr.make_spec("srft", d, 0)


@pytest.mark.parametrize("d", [2, 8192])
def test_out_of_range_rejected(d):
    with pytest.raises(RangeError):
        tr.make_spec("srft", d, 0)


def test_zero_maps_to_zero():
    spec = tr.make_spec("srft", 64, 3)
    assert np.all(tr.srft_forward(spec, np.zeros(64)) == 0)
    assert np.all(tr.srft_inverse(spec, np.zeros(64)) == 0)


def test_shape_error():
    spec = tr.make_spec("srft", 16, 0)
    with pytest.raises(ShapeError):
        tr.srft_forward(spec, np.zeros(8))
    with pytest.raises(ShapeError):
        tr.srht_inverse(tr.make_spec("srht", 16, 0), np.zeros(15))


def test_complex_input_rejected():
    spec = tr.make_spec("srft", 8, 0)
    with pytest.raises(DataError):
        tr.srft_forward(spec, np.zeros(8, dtype=complex))


def test_kind_mismatch():
    with pytest.raises(ValueError):
        tr.srft_forward(tr.make_spec("srht", 8, 0), np.zeros(8))


def test_srht_closed_form_d4():
    # the smallest supported size: (1, 0, 0, 0) spreads evenly with all-positive signs
    spec = tr.make_spec("identity", 4, 0)
    spec = tr.TransformSpec(kind=tr.TransformKind.SRHT, d=4, seed=0, signs=spec.signs)
    out = tr.srht_forward(spec, np.array([1.0, 0, 0, 0]))
    assert np.allclose(out, 0.5)


def test_srht_closed_form_h2():
    # H_2 (1, 0) / sqrt(2) via the fast butterfly on a 2-vector
    out = tr._fwht(np.array([1.0, 0.0])) / np.sqrt(2)
    assert np.allclose(out, [1 / np.sqrt(2), 1 / np.sqrt(2)])


def test_srft_impulse_matches_dense_column():
    signs = np.ones(8, dtype=np.int8)
    signs.setflags(write=False)
    spec = tr.TransformSpec(kind=tr.TransformKind.SRFT, d=8, seed=0, signs=signs)
    e0 = np.zeros(8)
    e0[0] = 1.0
    M = dense_srft_matrix(spec)
    assert np.allclose(tr.srft_forward(spec, e0), M[:, 0], atol=1e-15)


def test_fft_stockham_matches_numpy():
    rng = np.random.default_rng(0)
    for n in (1, 2, 4, 32, 512):
        z = rng.standard_normal((3, n)) + 1j * rng.standard_normal((3, n))
        assert np.allclose(tr.fft_stockham(z), np.fft.fft(z), atol=1e-10)
        assert np.allclose(tr.fft_stockham(z, inverse=True), n * np.fft.ifft(z), atol=1e-10)


@pytest.mark.parametrize("kind", ["srft", "srht"])
@pytest.mark.parametrize("d", [4, 8, 16, 64])
def test_dense_oracle_equivalence(kind, d):
    spec = tr.make_spec(kind, d, 11)
    M = dense_srft_matrix(spec) if kind == "srft" else dense_srht_matrix(spec)
    rng = np.random.default_rng(d)
    X = rng.standard_normal((200, d))
    assert np.abs(tr.forward(spec, X) - X @ M.T).max() < 1e-12
    X32 = X.astype(np.float32)
    assert np.abs(tr.forward(spec, X32) - X32.astype(np.float64) @ M.T).max() < 1e-5


@pytest.mark.parametrize("kind", ["srft", "srht"])
@pytest.mark.parametrize("d", [4, 64, 128, 256])
def test_roundtrip_float32_and_float64(kind, d):
    spec = tr.make_spec(kind, d, 5)
    rng = np.random.default_rng(1)
    X = rng.standard_normal((1000, d))
    assert np.abs(tr.inverse(spec, tr.forward(spec, X)) - X).max() < 1e-12
    X32 = X.astype(np.float32)
    Y32 = tr.forward(spec, X32)
    assert Y32.dtype == np.float32
    assert np.abs(tr.inverse(spec, Y32) - X32).max() < 1e-5


@pytest.mark.parametrize("kind", ["srft", "srht"])
def test_inner_products_preserved(kind):
    d = 128
    spec = tr.make_spec(kind, d, 2)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((100, d)).astype(np.float32)
    y = rng.standard_normal((100, d)).astype(np.float32)
    tx, ty = tr.forward(spec, x), tr.forward(spec, y)
    lhs = np.sum(tx * ty, axis=1, dtype=np.float64)
    rhs = np.sum(x * y, axis=1, dtype=np.float64)
    bound = 1e-4 * np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)
    assert np.all(np.abs(lhs - rhs) <= bound)


def test_linearity():
    spec = tr.make_spec("srft", 64, 9)
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, 64))
    a, b = 1.7, -0.3
    lhs = tr.forward(spec, a * x + b * y)
    rhs = a * tr.forward(spec, x) + b * tr.forward(spec, y)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_sign_involution():
    s = tr.make_spec("srft", 64, 4).signs.astype(np.float64)
    x = np.random.default_rng(0).standard_normal(64)
    assert np.array_equal(x * s * s, x)


def test_batch_shapes_preserved():
    spec = tr.make_spec("srft", 16, 0)
    X = np.random.default_rng(0).standard_normal((2, 3, 16))
    Y = tr.forward(spec, X)
    assert Y.shape == X.shape
    assert np.allclose(Y[1, 2], tr.forward(spec, X[1, 2]))


def test_identity_kind_and_none():
    x = np.arange(8.0)
    assert np.array_equal(tr.forward(tr.make_spec("identity", 8, 0), x), x)
    assert np.array_equal(tr.inverse(None, x), x)


@settings(max_examples=60, deadline=None)
@given(
    logd=st.integers(2, 8),
    seed=st.integers(0, 2 ** 63),
    data=st.data(),
)
def test_norm_preservation_property(logd, seed, data):
    d = 2 ** logd
    x = data.draw(arrays(np.float64, d, elements=st.floats(-1e3, 1e3, allow_nan=False)))
    for kind in ("srft", "srht"):
        spec = tr.make_spec(kind, d, seed)
        y = tr.forward(spec, x)
        assert np.isclose(np.linalg.norm(y), np.linalg.norm(x), rtol=1e-10, atol=1e-9)
        assert np.allclose(tr.inverse(spec, y), x, atol=1e-9)


def test_gaussianization_gaussian_fixed_point():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((1000, 128))
    before, after = tr.gaussianization_score(tr.make_spec("srft", 128, 0), X)
    assert abs(before) < 0.3 and abs(after) < 0.3


def test_gaussianization_laplace():
    rng = np.random.default_rng(0)
    X = rng.laplace(0, 1 / np.sqrt(2), (2000, 128))
    before, after = tr.gaussianization_score(tr.make_spec("srft", 128, 0), X)
    assert abs(before - 3.0) < 0.3
    assert after < 0.5


def test_gaussianization_constant_batch():
    with pytest.raises(UndefinedMomentError):
        tr.gaussianization_score(tr.make_spec("srft", 8, 0), np.ones((10, 8)))
