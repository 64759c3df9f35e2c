"""Post-training calibration of per-coordinate scales and learned rotations.

The calibrated pipeline for one vector ``x`` is::

    y = T x            fixed transform (SRFT, or nothing for the no-SRFT kind)
    z = R y            learned rotation (identity for scale-only)
    w = lam * z        learned per-coordinate scale
    w_hat = Q(w)       uniform symmetric quantizer
    x_hat = T^T R^T (w_hat / lam)

and fitting minimizes the mean of ``||x_hat - x||^2`` over a calibration batch
with Adam. ``R`` is either ``expm(U - U^T)`` or a product of Householder
reflections.

Gradients through ``Q`` use the straight-through rule on the rounding only:
``Q(w) = s(w) * round(w / s(w))`` is differentiated as ``w + s(w) * delta``
with the rounding offset ``delta`` held fixed, so the abs-max scale ``s``
still receives gradient through its arg-max entry. The symmetric abs-max
quantizer never clips, so no clip mask is needed.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from . import transform as tr
from .errors import (
    ConfigError,
    DataError,
    DegenerateReflectorError,
    DivergenceError,
    FormatError,
    ShapeError,
)
from .quantizer import (
    LAMBDA_FLOOR,
    Granularity,
    QuantScheme,
    dequantize,
    quantize,
    round_half_away,
)

__all__ = [
    "RotationKind",
    "RotationParams",
    "CalibConfig",
    "Pipeline",
    "FitReport",
    "expm",
    "expm_skew",
    "expm_frechet_adjoint",
    "householder_compose",
    "reconstruction_mse",
    "surrogate_loss",
    "lambda_from_channel_max",
    "init_params",
    "fit",
    "param_count",
]

_PARAMS_MAGIC = b"RKVC"
_PARAMS_HEADER = struct.Struct("<4sIII")


class RotationKind(enum.Enum):
    SCALE_ONLY = "scale_only"
    CAYLEY = "cayley"
    HOUSEHOLDER = "householder"
    NO_SRFT_CAYLEY = "no_srft_cayley"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"scaleonly": "scale_only", "nosrftcayley": "no_srft_cayley"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown rotation kind {value!r}") from None

    @property
    def uses_generator(self):
        return self in (RotationKind.CAYLEY, RotationKind.NO_SRFT_CAYLEY)

    @property
    def uses_srft(self):
        return self is not RotationKind.NO_SRFT_CAYLEY

    @property
    def code(self):
        return list(RotationKind).index(self)


# ---------------------------------------------------------------------------
# matrix exponential and orthogonal parameterizations
# ---------------------------------------------------------------------------

def expm(M, max_terms=40):
    """Matrix exponential by scaling and squaring with a Taylor series (float64)."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"expm needs a square matrix, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DataError("expm input is not finite")
    n = M.shape[0]
    norm = np.linalg.norm(M, 1)
    squarings = 0
    if norm > 0.5:
        squarings = int(np.ceil(np.log2(norm / 0.5)))
    A = M / (2.0 ** squarings)
    E = np.eye(n) + A
    term = A
    for k in range(2, max_terms):
        term = term @ A / k
        E += term
        if np.linalg.norm(term, 1) <= np.finfo(np.float64).eps * np.linalg.norm(E, 1):
            break
    for _ in range(squarings):
        E = E @ E
    return E


def expm_skew(U):
    """``expm(U - U^T)``: an orthogonal matrix with determinant +1."""
    U = np.asarray(U, dtype=np.float64)
    return expm(U - U.T)


def expm_frechet_adjoint(A, G):
    """Gradient of ``<G, expm(A)>`` with respect to ``A``.

    Equals the Frechet derivative of expm at ``A^T`` in direction ``G``, read
    off the upper-right block of ``expm([[A^T, G], [0, A^T]])``.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = A.T
    big[n:, n:] = A.T
    big[:n, n:] = G
    return expm(big)[:n, n:]


def householder_compose(reflectors, d=None):
    """Product ``H_1 H_2 ... H_k`` with ``H_i = I - 2 v v^T / (v^T v)``."""
    V = np.asarray(reflectors, dtype=np.float64)
    if V.size == 0:
        if d is None:
            raise ShapeError("d is required when there are no reflectors")
        return np.eye(d)
    if V.ndim == 1:
        V = V[None, :]
    d = V.shape[1]
    R = np.eye(d)
    for v in V:
        nv = float(v @ v)
        if not nv > 0.0:
            raise DegenerateReflectorError("reflector has zero norm")
        R = R - (2.0 / nv) * np.outer(R @ v, v)
    return R


def _householder_prefixes(V):
    d = V.shape[1]
    prefixes = [np.eye(d)]
    for v in V:
        nv = float(v @ v)
        if not nv > 0.0:
            raise DegenerateReflectorError("reflector has zero norm")
        P = prefixes[-1]
        prefixes.append(P - (2.0 / nv) * np.outer(P @ v, v))
    return prefixes


def _householder_grad(V, G):
    """Gradient of ``<G, H_1...H_k>`` with respect to each reflector."""
    k, d = V.shape
    prefixes = _householder_prefixes(V)
    grads = np.zeros_like(V)
    suffix = np.eye(d)  # H_{i+1} ... H_k
    for i in range(k - 1, -1, -1):
        v = V[i]
        nv = float(v @ v)
        # dL/dH_i = P^T G S^T
        GH = prefixes[i].T @ G @ suffix.T
        vGv = float(v @ GH @ v)
        grads[i] = -(2.0 / nv) * ((GH + GH.T) @ v) + (4.0 * vGv / nv ** 2) * v
        suffix = suffix - (2.0 / nv) * np.outer(v, v @ suffix)
    return grads


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class RotationParams:
    """Learned calibration state for one K or V channel of one layer."""

    kind: RotationKind
    lam: np.ndarray
    generator: np.ndarray | None = None
    reflectors: np.ndarray | None = None
    cached_R: np.ndarray | None = None

    @property
    def d(self):
        return self.lam.shape[0]

    @property
    def k(self):
        return 0 if self.reflectors is None else self.reflectors.shape[0]

    def rotation(self):
        """Materialize ``R`` (identity for scale-only) and cache it."""
        if self.kind is RotationKind.SCALE_ONLY:
            R = np.eye(self.d)
        elif self.kind.uses_generator:
            R = expm_skew(self.generator)
        else:
            R = householder_compose(self.reflectors, self.d)
        self.cached_R = R
        return R

    def pipeline(self, transform=None):
        if self.cached_R is None:
            self.rotation()
        R = None if self.kind is RotationKind.SCALE_ONLY else self.cached_R
        spec = transform if self.kind.uses_srft else None
        return Pipeline(transform=spec, rotation=R, lam=self.lam)

    def to_bytes(self):
        parts = [_PARAMS_HEADER.pack(_PARAMS_MAGIC, self.kind.code, self.d, self.k)]
        parts.append(np.asarray(self.lam, dtype="<f4").tobytes())
        if self.kind.uses_generator:
            parts.append(np.asarray(self.generator, dtype="<f4").tobytes())
        elif self.kind is RotationKind.HOUSEHOLDER:
            parts.append(np.asarray(self.reflectors, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf):
        buf = bytes(buf)
        if len(buf) < _PARAMS_HEADER.size:
            raise FormatError("truncated rotation header")
        magic, code, d, k = _PARAMS_HEADER.unpack_from(buf)
        if magic != _PARAMS_MAGIC:
            raise FormatError(f"bad rotation magic {magic!r}")
        try:
            kind = list(RotationKind)[code]
        except IndexError:
            raise FormatError(f"unknown rotation kind code {code}") from None
        payload = buf[_PARAMS_HEADER.size:]
        if len(payload) % 4:
            raise FormatError("rotation payload is not a whole number of float32 values")
        body = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        expected = d + (d * d if kind.uses_generator else 0) + (k * d if kind is RotationKind.HOUSEHOLDER else 0)
        if body.size != expected:
            raise FormatError("rotation payload length does not match header")
        lam = body[:d].copy()
        gen = refl = None
        if kind.uses_generator:
            gen = body[d:].reshape(d, d).copy()
        elif kind is RotationKind.HOUSEHOLDER:
            refl = body[d:].reshape(k, d).copy()
        params = cls(kind=kind, lam=lam, generator=gen, reflectors=refl)
        params.rotation()
        return params

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def param_count(params):
    """Stored scalars per channel: d, d^2 or k*d + d (the lambda is not counted for Cayley)."""
    d = params.d
    if params.kind is RotationKind.SCALE_ONLY:
        return d
    if params.kind.uses_generator:
        return d * d
    return params.k * d + d


@dataclass
class CalibConfig:
    """Optimizer and quantizer settings for :func:`fit`.

    ``transform_seed`` selects the fixed SRFT applied before the learned
    stages; ``None`` means the batch is already in the transformed domain.
    The no-SRFT kind never applies a transform.
    """

    steps: int = 300
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    bits: int = 4
    granularity: Granularity = Granularity.PER_TOKEN
    group: int = 0
    seed: int = 0
    k: int | None = None
    transform_seed: int | None = 0
    init_noise: float = 1e-3
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        self.granularity = Granularity.parse(self.granularity)
        if self.granularity.needs_lambda:
            raise ConfigError("calibration learns its own lambda; use a non per-channel granularity")

    def scheme(self, d):
        return QuantScheme(self.bits, self.granularity, d, self.group)


@dataclass
class Pipeline:
    """Forward stages: optional transform, optional rotation, optional lambda."""

    transform: tr.TransformSpec | None = None
    rotation: np.ndarray | None = None
    lam: np.ndarray | None = None


@dataclass
class FitReport:
    kind: str
    steps: int
    mse_initial: float
    mse_final: float
    reduction_pct: float
    best_step: int
    history: list = field(default_factory=list)

    def as_dict(self):
        return {
            "kind": self.kind,
            "steps": self.steps,
            "mse_initial": self.mse_initial,
            "mse_final": self.mse_final,
            "reduction_pct": self.reduction_pct,
            "best_step": self.best_step,
        }


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def reconstruction_mse(pipeline, scheme, X):
    """Mean over the batch of ``||x_hat - x||^2`` through the real quantizer."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (n, d) batch, got {X.shape}")
    if X.shape[1] != scheme.d:
        raise ShapeError(f"batch dimension {X.shape[1]} != scheme d {scheme.d}")
    y = tr.forward(pipeline.transform, X) if pipeline.transform is not None else X
    z = y @ pipeline.rotation.T if pipeline.rotation is not None else y
    lam = None
    if pipeline.lam is not None:
        lam = np.maximum(np.asarray(pipeline.lam, dtype=np.float64), LAMBDA_FLOOR)
    if scheme.granularity.needs_lambda:
        if lam is None:
            raise ConfigError("per-channel scheme needs a lambda in the pipeline")
        z_hat = dequantize(quantize(scheme, z, lam)).astype(np.float64)
    else:
        w = z * lam if lam is not None else z
        w_hat = dequantize(quantize(scheme, w)).astype(np.float64)
        z_hat = w_hat / lam if lam is not None else w_hat
    y_hat = z_hat @ pipeline.rotation if pipeline.rotation is not None else z_hat
    x_hat = tr.inverse(pipeline.transform, y_hat) if pipeline.transform is not None else y_hat
    return float(np.mean(np.sum((x_hat - X) ** 2, axis=1)))


def _units(W, scheme):
    n, d = W.shape
    gran = scheme.granularity
    if gran is Granularity.PER_TOKEN:
        return W.reshape(n, 1, d)
    if gran.grouped:
        return W.reshape(n, d // scheme.group, scheme.group)
    return W.reshape(1, 1, n * d)


def _fake_quant(W, scheme, offsets=None):
    """Float64 fake quantizer ``w + s(w) * delta``; returns (Q, s, delta, argmax)."""
    qm = float(scheme.qmax)
    Wu = _units(W, scheme)
    absu = np.abs(Wu)
    arg = np.argmax(absu, axis=-1)
    s = np.take_along_axis(absu, arg[..., None], axis=-1) / qm
    if offsets is None:
        r = np.divide(Wu, s, out=np.zeros_like(Wu), where=s > 0)
        codes = np.clip(round_half_away(r), -qm, qm)
        delta = np.where(s > 0, codes - r, 0.0)
    else:
        delta = offsets.reshape(Wu.shape)
    Q = Wu + s * delta
    return Q.reshape(W.shape), s, delta, arg


def _fake_quant_backward(G_Q, W, scheme, s, delta, arg):
    qm = float(scheme.qmax)
    Gu = _units(G_Q, scheme)
    Wu = _units(W, scheme)
    g_s = np.sum(Gu * delta, axis=-1, keepdims=True)
    G_W = Gu.copy()
    w_arg = np.take_along_axis(Wu, arg[..., None], axis=-1)
    contrib = g_s * np.sign(w_arg) / qm
    idx = arg[..., None]
    np.put_along_axis(G_W, idx, np.take_along_axis(G_W, idx, axis=-1) + contrib, axis=-1)
    return G_W.reshape(W.shape)


def surrogate_loss(kind, theta, Y, scheme, offsets=None):
    """Straight-through surrogate loss and its analytic gradient.

    ``theta`` maps ``"lam"`` and, depending on ``kind``, ``"U"`` or ``"V"`` to
    float64 arrays. ``Y`` is the batch after any fixed transform. With
    ``offsets=None`` the rounding offsets are taken at ``theta`` (and the loss
    equals the true quantized loss there); pass the returned offsets back in
    to evaluate the smooth surrogate at nearby points, e.g. for finite
    differences.

    Returns ``(loss, grads, offsets)``.
    """
    kind = RotationKind.parse(kind)
    Y = np.asarray(Y, dtype=np.float64)
    n = Y.shape[0]
    lam = theta["lam"]
    if kind is RotationKind.SCALE_ONLY:
        R = None
    elif kind.uses_generator:
        U = theta["U"]
        A = U - U.T
        R = expm(A)
    else:
        R = householder_compose(theta["V"])

    Z = Y @ R.T if R is not None else Y
    W = Z * lam
    Q, s, delta, arg = _fake_quant(W, scheme, offsets)
    Zh = Q / lam
    Yh = Zh @ R if R is not None else Zh
    E = Yh - Y
    loss = float(np.sum(E * E) / n)

    G_Yh = (2.0 / n) * E
    grads = {}
    if R is not None:
        G_Zh = G_Yh @ R.T
        G_R = Zh.T @ G_Yh
    else:
        G_Zh = G_Yh
        G_R = None
    G_Q = G_Zh / lam
    g_lam = -np.sum(G_Zh * Q, axis=0) / (lam * lam)
    G_W = _fake_quant_backward(G_Q, W, scheme, s, delta, arg)
    g_lam += np.sum(G_W * Z, axis=0)
    grads["lam"] = g_lam
    if R is not None:
        G_Z = G_W * lam
        G_R = G_R + G_Z.T @ Y
        if kind.uses_generator:
            G_A = expm_frechet_adjoint(A, G_R)
            grads["U"] = G_A - G_A.T
        else:
            grads["V"] = _householder_grad(theta["V"], G_R)
    return loss, grads, delta


def lambda_from_channel_max(X_transformed):
    """Per-channel scale ``1 / max(|X[:, i]|)`` (channel max floored at 1e-6).

    After rescaling, every channel of the calibration batch peaks at 1.
    """
    X = np.asarray(X_transformed, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ShapeError("empty calibration batch")
    if not np.all(np.isfinite(X)):
        raise DataError("calibration batch contains non-finite values")
    cmax = np.max(np.abs(X), axis=0)
    lam = 1.0 / np.maximum(cmax, LAMBDA_FLOOR)
    return np.maximum(lam, LAMBDA_FLOOR).astype(np.float32)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def init_params(kind, d, config):
    """Near-identity start: lam = 1, U = 0, reflectors in nearly-parallel pairs."""
    kind = RotationKind.parse(kind)
    rng = np.random.default_rng(config.seed)
    theta = {"lam": np.ones(d)}
    if kind.uses_generator:
        theta["U"] = np.zeros((d, d))
    elif kind is RotationKind.HOUSEHOLDER:
        k = d // 2 if config.k is None else int(config.k)
        if not 0 <= k <= d:
            raise ConfigError(f"reflector count k={k} must be in [0, {d}]")
        V = np.zeros((k, d))
        for i in range(k):
            # Pairs (2j, 2j+1) share axis e_j so H_2j H_2j+1 ~ I.
            V[i, (i // 2) % d] = 1.0
        V += config.init_noise * rng.standard_normal((k, d))
        theta["V"] = V
    return theta


def _to_params(kind, theta):
    lam = np.maximum(theta["lam"], LAMBDA_FLOOR).astype(np.float32)
    gen = refl = None
    if kind.uses_generator:
        gen = theta["U"].astype(np.float32)
    elif kind is RotationKind.HOUSEHOLDER:
        refl = theta["V"].astype(np.float32)
    params = RotationParams(kind=kind, lam=lam, generator=gen, reflectors=refl)
    params.rotation()
    return params


def fit(kind, config, X):
    """Fit calibration parameters on a batch ``X`` of shape ``(n, d)``.

    Returns ``(params, report)``. The returned parameters are the best iterate
    seen (by surrogate loss) and fall back to the initialization if that does
    not lower the true reconstruction MSE, so ``mse_final <= mse_initial``.
    Raises :class:`~srftkv.errors.DivergenceError` if the loss exceeds
    ``divergence_factor`` times its initial value.
    """
    kind = RotationKind.parse(kind)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (n, d) batch, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("calibration batch contains non-finite values")
    d = X.shape[1]
    scheme = config.scheme(d)
    spec = None
    if kind.uses_srft and config.transform_seed is not None:
        spec = tr.make_spec(tr.TransformKind.SRFT, d, config.transform_seed)
    Y = tr.forward(spec, X) if spec is not None else X

    theta = init_params(kind, d, config)
    names = list(theta)
    m = {k: np.zeros_like(v) for k, v in theta.items()}
    v2 = {k: np.zeros_like(v) for k, v in theta.items()}
    b1, b2 = config.betas

    init_theta = {k: v.copy() for k, v in theta.items()}
    best_loss = None
    best_theta = init_theta
    best_step = 0
    history = []
    loss0 = None
    for step in range(config.steps):
        loss, grads, _ = surrogate_loss(kind, theta, Y, scheme)
        history.append(loss)
        if loss0 is None:
            loss0 = loss
        if not np.isfinite(loss) or loss > config.divergence_factor * max(loss0, 1e-300):
            raise DivergenceError(
                f"{kind.value} calibration diverged at step {step}: loss {loss:.4g} vs initial {loss0:.4g}",
                history)
        if best_loss is None or loss < best_loss:
            best_loss, best_step = loss, step
            best_theta = {k: v.copy() for k, v in theta.items()}
        t = step + 1
        for name in names:
            g = grads[name]
            m[name] = b1 * m[name] + (1 - b1) * g
            v2[name] = b2 * v2[name] + (1 - b2) * g * g
            mhat = m[name] / (1 - b1 ** t)
            vhat = v2[name] / (1 - b2 ** t)
            theta[name] = theta[name] - config.lr * mhat / (np.sqrt(vhat) + config.eps)
        theta["lam"] = np.maximum(theta["lam"], LAMBDA_FLOOR)

    loss, _, _ = surrogate_loss(kind, theta, Y, scheme)
    history.append(loss)
    if loss < best_loss:
        best_loss, best_step = loss, config.steps
        best_theta = {k: v.copy() for k, v in theta.items()}

    initial = _to_params(kind, init_theta)
    mse_initial = reconstruction_mse(initial.pipeline(spec), scheme, X)
    params = _to_params(kind, best_theta)
    mse_final = reconstruction_mse(params.pipeline(spec), scheme, X)
    if mse_final > mse_initial:
        params, mse_final, best_step = initial, mse_initial, 0
    reduction = 0.0 if mse_initial == 0 else 100.0 * (mse_initial - mse_final) / mse_initial
    report = FitReport(kind=kind.value, steps=config.steps, mse_initial=mse_initial,
                       mse_final=mse_final, reduction_pct=reduction, best_step=best_step,
                       history=history)
    return params, report
