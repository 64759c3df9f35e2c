import numpy as np
import pytest
from scipy.linalg import expm as scipy_expm

from srftkv import transform as tr
from srftkv.calibration import (
    CalibConfig,
    Pipeline,
    RotationKind,
    RotationParams,
    expm,
    expm_frechet_adjoint,
    expm_skew,
    fit,
    householder_compose,
    init_params,
    lambda_from_channel_max,
    param_count,
    reconstruction_mse,
    surrogate_loss,
)
from srftkv.diagnostics import synth_activations
from srftkv.errors import ConfigError, DataError, DegenerateReflectorError, DivergenceError, FormatError
from srftkv.quantizer import Granularity, QuantScheme


def test_expm_zero_is_identity():
    assert np.array_equal(expm_skew(np.zeros((5, 5))), np.eye(5))


def test_expm_plane_rotation():
    t = np.pi / 4
    U = np.array([[0.0, t], [0.0, 0.0]])  # U - U^T = [[0, t], [-t, 0]]
    R = expm_skew(U)
    assert np.allclose(R, [[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]], atol=1e-15)


def test_expm_matches_scipy():
    rng = np.random.default_rng(0)
    for scale in (0.01, 1.0, 5.0):
        M = scale * rng.standard_normal((7, 7))
        assert np.allclose(expm(M), scipy_expm(M), rtol=1e-11, atol=1e-11)


def test_expm_skew_orthogonal_d8():
    R = expm_skew(np.random.default_rng(1).standard_normal((8, 8)))
    assert np.abs(R.T @ R - np.eye(8)).max() < 1e-10
    assert np.isclose(np.linalg.det(R), 1.0)


def test_expm_nonfinite():
    U = np.zeros((3, 3))
    U[0, 1] = np.nan
    with pytest.raises(DataError):
        expm_skew(U)


def test_frechet_adjoint_finite_difference():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((5, 5)) * 0.7
    G = rng.standard_normal((5, 5))
    grad = expm_frechet_adjoint(A, G)
    h = 1e-6
    for i, j in [(0, 1), (3, 2), (4, 4)]:
        E = np.zeros_like(A)
        E[i, j] = h
        fd = (np.sum(G * expm(A + E)) - np.sum(G * expm(A - E))) / (2 * h)
        assert np.isclose(grad[i, j], fd, rtol=1e-6, atol=1e-8)


def test_householder_cases():
    assert np.array_equal(householder_compose(np.zeros((0, 4)), 4), np.eye(4))
    R = householder_compose(np.array([[1.0, 0, 0, 0]]))
    assert np.allclose(R, np.diag([-1.0, 1, 1, 1]))
    V = np.random.default_rng(3).standard_normal((2, 6))
    R = householder_compose(V)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-10)
    V3 = np.random.default_rng(4).standard_normal((3, 6))
    assert np.isclose(np.linalg.det(householder_compose(V3)), -1.0, atol=1e-10)
    assert np.abs(R.T @ R - np.eye(6)).max() < 1e-12


def test_householder_order():
    V = np.random.default_rng(5).standard_normal((2, 4))
    H = [np.eye(4) - 2 * np.outer(v, v) / (v @ v) for v in V]
    assert np.allclose(householder_compose(V), H[0] @ H[1])


def test_householder_degenerate():
    with pytest.raises(DegenerateReflectorError):
        householder_compose(np.zeros((1, 4)))


def test_lambda_from_channel_max():
    X = np.array([[2.0, -4.0, 0.25], [-1.0, 1.0, -0.5]])
    assert np.allclose(lambda_from_channel_max(X), [0.5, 0.25, 2.0])
    lam = lambda_from_channel_max(np.array([[1.0, 0.0]]))
    assert lam[1] == np.float32(1e6)
    rng = np.random.default_rng(0)
    Y = rng.standard_normal((50, 16))
    lam = lambda_from_channel_max(Y).astype(np.float64)
    assert np.allclose(np.abs(Y * lam).max(axis=0), 1.0, rtol=1e-6)


def test_reconstruction_mse_uniform_noise_model():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4000, 64))
    scheme = QuantScheme(8, Granularity.PER_TOKEN, 64)
    mse = reconstruction_mse(Pipeline(), scheme, X)
    lsb = np.abs(X).max(axis=1) / 127
    model = np.mean(lsb ** 2 / 12 * 64)
    assert abs(mse - model) / model < 0.2


def test_reconstruction_mse_rotation_invariance_gaussian():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((4000, 64))
    scheme = QuantScheme(4, Granularity.PER_TOKEN, 64)
    plain = reconstruction_mse(Pipeline(), scheme, X)
    rotated = reconstruction_mse(Pipeline(transform=tr.make_spec("srft", 64, 0)), scheme, X)
    assert abs(plain - rotated) / plain < 0.05


def test_reconstruction_mse_bit_monotone():
    X = np.random.default_rng(2).standard_normal((500, 64))
    pipe = Pipeline(transform=tr.make_spec("srft", 64, 0))
    m4 = reconstruction_mse(pipe, QuantScheme(4, "per_token", 64), X)
    m8 = reconstruction_mse(pipe, QuantScheme(8, "per_token", 64), X)
    assert m4 > m8


def test_reconstruction_mse_per_channel_scheme():
    X = np.random.default_rng(3).standard_normal((100, 32))
    lam = lambda_from_channel_max(X)
    m = reconstruction_mse(Pipeline(lam=lam), QuantScheme(4, "per_channel_group", 32, 8), X)
    assert m > 0
    with pytest.raises(ConfigError):
        reconstruction_mse(Pipeline(), QuantScheme(4, "per_channel_group", 32, 8), X)


def _gradcheck(kind, scheme, k=None, seed=0):
    d = scheme.d
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((40, d)) * (0.5 + rng.random(d))
    theta = init_params(kind, d, CalibConfig(seed=seed, k=k))
    theta["lam"] = 0.5 + rng.random(d)
    if "U" in theta:
        theta["U"] = 0.3 * rng.standard_normal((d, d))
    if "V" in theta:
        theta["V"] = rng.standard_normal(theta["V"].shape)
    loss, grads, offs = surrogate_loss(kind, theta, Y, scheme)
    h = 1e-6
    picks = []
    for name, arr in theta.items():
        for _ in range(20 // len(theta) + 1):
            picks.append((name, tuple(rng.integers(0, s) for s in arr.shape)))
    worst = 0.0
    for name, idx in picks[:20]:
        tp = {k2: v.copy() for k2, v in theta.items()}
        tm = {k2: v.copy() for k2, v in theta.items()}
        tp[name][idx] += h
        tm[name][idx] -= h
        fp = surrogate_loss(kind, tp, Y, scheme, offs)[0]
        fm = surrogate_loss(kind, tm, Y, scheme, offs)[0]
        fd = (fp - fm) / (2 * h)
        an = grads[name][idx]
        worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-8))
    return worst


@pytest.mark.parametrize("kind", list(RotationKind))
@pytest.mark.parametrize("gran,group", [("per_token", 0), ("per_group", 4), ("per_tensor", 0)])
def test_gradient_check(kind, gran, group):
    scheme = QuantScheme(4, gran, 8, group)
    assert _gradcheck(kind, scheme, k=3) < 1e-4


def test_surrogate_equals_true_loss_at_theta():
    d = 16
    rng = np.random.default_rng(0)
    Y = rng.standard_normal((64, d))
    scheme = QuantScheme(4, "per_token", d)
    theta = {"lam": 0.5 + rng.random(d), "U": 0.1 * rng.standard_normal((d, d))}
    loss = surrogate_loss("cayley", theta, Y, scheme)[0]
    R = expm_skew(theta["U"])
    true = reconstruction_mse(Pipeline(rotation=R, lam=theta["lam"]), scheme, Y)
    assert np.isclose(loss, true, rtol=1e-5)


def test_param_count():
    d = 16
    assert param_count(RotationParams(RotationKind.SCALE_ONLY, np.ones(d, np.float32))) == d
    assert param_count(RotationParams(RotationKind.CAYLEY, np.ones(d, np.float32),
                                      generator=np.zeros((d, d), np.float32))) == d * d
    hh = RotationParams(RotationKind.HOUSEHOLDER, np.ones(d, np.float32),
                        reflectors=np.eye(d, dtype=np.float32)[: d // 2])
    assert param_count(hh) == (d // 2 + 1) * d


@pytest.fixture(scope="module")
def hetero():
    return synth_activations("heteroscedastic_channels", 512, 64, seed=0).data


def test_scale_only_reduction(hetero):
    cfg = CalibConfig(transform_seed=None)
    params, report = fit("scale_only", cfg, hetero)
    assert report.reduction_pct > 30.0
    assert report.mse_final <= report.mse_initial
    # channels with std 1/8 get a larger gain than channels with std 1
    lam = params.lam.reshape(-1, 4)
    assert lam[:, 3].mean() > lam[:, 0].mean()


@pytest.mark.parametrize("kind", list(RotationKind))
def test_lr_zero_gives_zero_reduction(kind, hetero):
    params, report = fit(kind, CalibConfig(lr=0.0, steps=3), hetero)
    assert report.reduction_pct == 0.0


@pytest.mark.parametrize("kind", ["cayley", "householder", "no_srft_cayley"])
def test_fit_orthogonal_and_monotone(kind, hetero):
    params, report = fit(kind, CalibConfig(steps=40), hetero)
    R = params.rotation()
    assert np.abs(R.T @ R - np.eye(64)).max() <= 1e-5
    assert report.mse_final <= report.mse_initial


def test_fit_deterministic(hetero):
    _, a = fit("householder", CalibConfig(steps=10, seed=3), hetero)
    _, b = fit("householder", CalibConfig(steps=10, seed=3), hetero)
    assert a.as_dict() == b.as_dict()


def test_divergence_error():
    X = synth_activations("gaussian", 64, 16, seed=0).data
    with pytest.raises(DivergenceError) as err:
        fit("cayley", CalibConfig(steps=50, lr=5.0, divergence_factor=1.01), X)
    assert err.value.history


def test_config_validation():
    with pytest.raises(ConfigError):
        CalibConfig(steps=0)
    with pytest.raises(ConfigError):
        CalibConfig(granularity="per_channel_group", group=32)
    with pytest.raises(ConfigError):
        RotationKind.parse("spinquant")


@pytest.mark.parametrize("kind", list(RotationKind))
def test_params_serialization(kind, tmp_path, hetero):
    params, _ = fit(kind, CalibConfig(steps=5), hetero[:, :16])
    path = tmp_path / "p.bin"
    params.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"RKVC"
    back = RotationParams.load(path)
    assert back.to_bytes() == raw
    assert np.array_equal(back.rotation(), params.rotation())


def test_params_bad_payload():
    with pytest.raises(FormatError):
        RotationParams.from_bytes(b"RKVC" + bytes(12) + b"\x00")
    with pytest.raises(FormatError):
        RotationParams.from_bytes(b"NOPE" + bytes(12))
