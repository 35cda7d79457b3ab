"""Third-degree spherical-radial cubature machinery.

Every function here broadcasts over leading batch dimensions: a mean of
shape ``(..., n)`` pairs with a covariance of shape ``(..., n, n)``.  The
Monte Carlo harness relies on this to step many independent runs at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "CubatureRule",
    "MeasurementPrediction",
    "NoiseCovariances",
    "NonPsdError",
    "SingularError",
    "StateEstimate",
    "cross_covariance",
    "factor_psd",
    "innovation_covariance",
    "make_cubature_rule",
    "measurement_update",
    "predict_measurement",
    "symmetrize",
    "time_update",
    "wrap_angle",
]

JITTER_START = 1e-12
JITTER_MAX = 1e-6
PSD_TOL = 1e-9

Function = Callable[[np.ndarray], np.ndarray]


class NonPsdError(np.linalg.LinAlgError):
    """A covariance could not be factored, or fell below the PSD floor."""

    def __init__(self, message: str, failed: np.ndarray | None = None):
        super().__init__(message)
        self.failed = failed


class SingularError(np.linalg.LinAlgError):
    """The innovation covariance is not invertible to working precision."""

    def __init__(self, message: str, failed: np.ndarray | None = None):
        super().__init__(message)
        self.failed = failed


@dataclass(frozen=True)
class CubatureRule:
    """Signed-axis cubature points ``sqrt(L) * (+/- e_i)`` with uniform weight."""

    dimension: int
    points: np.ndarray  # (2L, L)
    weight: float

    @property
    def size(self) -> int:
        return 2 * self.dimension


@dataclass(frozen=True)
class StateEstimate:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.mean.shape[:-1]


@dataclass(frozen=True)
class NoiseCovariances:
    """Process (``q``, PSD) and measurement (``r``, PD) noise covariances."""

    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError(f"q must be square, got shape {q.shape}")
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError(f"r must be square, got shape {r.shape}")
        if not np.allclose(q, q.T) or not np.allclose(r, r.T):
            raise ValueError("noise covariances must be symmetric")
        if np.linalg.eigvalsh(q)[0] < -PSD_TOL * max(np.trace(q), 1.0):
            raise ValueError("q must be positive semi-definite")
        if np.linalg.eigvalsh(r)[0] <= 0.0:
            raise ValueError("r must be positive definite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)


class MeasurementPrediction(NamedTuple):
    mean: np.ndarray  # (..., m)
    points: np.ndarray  # (..., 2L, m)
    state_points: np.ndarray  # (..., 2L, n), the points that produced ``points``


def make_cubature_rule(L: int) -> CubatureRule:
    if int(L) != L or L < 1:
        raise ValueError(f"cubature dimension must be a positive integer, got {L!r}")
    L = int(L)
    eye = np.eye(L)
    points = np.sqrt(L) * np.vstack([eye, -eye])
    points.setflags(write=False)
    return CubatureRule(dimension=L, points=points, weight=1.0 / (2 * L))


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def wrap_angle(a):
    """Wrap angles into the half-open interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def _cholesky_jitter(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched Cholesky with escalating diagonal jitter.

    Returns the lower factor and a boolean mask of elements that factored.
    Failed elements get a NaN factor.
    """
    P = np.asarray(P, dtype=float)
    batch = P.shape[:-2]
    try:
        return np.linalg.cholesky(P), np.ones(batch, dtype=bool)
    except np.linalg.LinAlgError:
        pass

    n = P.shape[-1]
    flat = P.reshape(-1, n, n)
    out = np.full_like(flat, np.nan)
    ok = np.zeros(flat.shape[0], dtype=bool)
    eye = np.eye(n)
    for i, Pi in enumerate(flat):
        if not np.all(np.isfinite(Pi)):
            continue
        try:
            out[i] = np.linalg.cholesky(Pi)
            ok[i] = True
            continue
        except np.linalg.LinAlgError:
            pass
        scale = max(np.trace(Pi) / n, np.finfo(float).tiny)
        jitter = JITTER_START
        while jitter <= JITTER_MAX * (1 + 1e-9):
            try:
                out[i] = np.linalg.cholesky(Pi + jitter * scale * eye)
                ok[i] = True
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
    return out.reshape(P.shape), ok.reshape(batch)


def factor_psd(P: np.ndarray) -> np.ndarray:
    """Lower-triangular ``S`` with ``S @ S.T == P``.

    Falls back to jitter ``delta * mean(diag(P)) * I`` with ``delta`` running
    from 1e-12 up to 1e-6 when the plain factorization fails.
    """
    S, ok = _cholesky_jitter(P)
    if not np.all(ok):
        raise NonPsdError("covariance is not positive semi-definite even with maximum jitter", ~ok)
    return S


def _points(mean: np.ndarray, S: np.ndarray, rule: CubatureRule) -> np.ndarray:
    # X_i = mean + S xi_i, shape (..., 2L, n)
    return mean[..., None, :] + np.einsum("...ij,kj->...ki", S, rule.points)


def _mean(Y: np.ndarray, rule: CubatureRule) -> np.ndarray:
    return rule.weight * Y.sum(axis=-2)


def _spread(Y: np.ndarray, y_mean: np.ndarray, rule: CubatureRule) -> np.ndarray:
    D = Y - y_mean[..., None, :]
    return rule.weight * np.einsum("...ki,...kj->...ij", D, D)


def _cross(X, x_mean, Y, y_mean, rule: CubatureRule) -> np.ndarray:
    DX = X - x_mean[..., None, :]
    DY = Y - y_mean[..., None, :]
    return rule.weight * np.einsum("...ki,...kj->...ij", DX, DY)


def _propagate(mean, cov, fn: Function, rule: CubatureRule):
    """Push cubature points through ``fn``; returns (points, images, mean, spread, ok)."""
    S, ok = _cholesky_jitter(cov)
    X = _points(mean, S, rule)
    Y = fn(X)
    y_mean = _mean(Y, rule)
    return X, Y, y_mean, _spread(Y, y_mean, rule), ok


def time_update(prior: StateEstimate, f: Function, q: np.ndarray, rule: CubatureRule) -> StateEstimate:
    _, _, x_pred, spread, ok = _propagate(prior.mean, prior.cov, f, rule)
    if not np.all(ok):
        raise NonPsdError("prior covariance could not be factored", ~ok)
    return StateEstimate(x_pred, symmetrize(spread + q))


def _measurement_points(pred_mean, pred_cov, h: Function, rule: CubatureRule,
                        angle_indices: Sequence[int] = ()):
    S, ok = _cholesky_jitter(pred_cov)
    X = _points(pred_mean, S, rule)
    Z = h(X)
    if len(angle_indices):
        idx = list(angle_indices)
        Z = Z.copy()
        # average angles relative to the first point so a +/-pi seam does not split the cloud
        ref = Z[..., :1, idx]
        Z[..., idx] = ref + wrap_angle(Z[..., idx] - ref)
        z_mean = _mean(Z, rule)
        z_mean[..., idx] = wrap_angle(z_mean[..., idx])
        Z[..., idx] = z_mean[..., None, idx] + wrap_angle(Z[..., idx] - z_mean[..., None, idx])
    else:
        z_mean = _mean(Z, rule)
    return MeasurementPrediction(z_mean, Z, X), ok


def predict_measurement(pred: StateEstimate, h: Function, rule: CubatureRule,
                        angle_indices: Sequence[int] = ()) -> MeasurementPrediction:
    """Cubature estimate of the predicted measurement.

    Components listed in ``angle_indices`` are averaged on the circle; the
    returned points are unwrapped around the mean so that ``points - mean``
    is a valid small-angle deviation.
    """
    mp, ok = _measurement_points(pred.mean, pred.cov, h, rule, angle_indices)
    if not np.all(ok):
        raise NonPsdError("predicted covariance could not be factored", ~ok)
    return mp


def _is_pd(P: np.ndarray) -> np.ndarray:
    try:
        np.linalg.cholesky(P)
        return np.ones(P.shape[:-2], dtype=bool)
    except np.linalg.LinAlgError:
        pass
    flat = P.reshape(-1, *P.shape[-2:])
    ok = np.zeros(flat.shape[0], dtype=bool)
    for i, Pi in enumerate(flat):
        try:
            np.linalg.cholesky(Pi)
            ok[i] = True
        except np.linalg.LinAlgError:
            pass
    return ok.reshape(P.shape[:-2])


def innovation_covariance(z_points: np.ndarray, z_mean: np.ndarray, r_scaled: np.ndarray,
                          rule: CubatureRule) -> np.ndarray:
    P_zz = symmetrize(_spread(z_points, z_mean, rule) + r_scaled)
    ok = _is_pd(P_zz)
    if not np.all(ok):
        raise SingularError("innovation covariance is not invertible", ~ok)
    return P_zz


def cross_covariance(x_points, x_mean, z_points, z_mean, rule: CubatureRule) -> np.ndarray:
    return _cross(x_points, x_mean, z_points, z_mean, rule)


def _update(pred_mean, pred_cov, P_zz, P_xz, z, z_mean, angle_indices=()):
    """Gain and posterior without raising; returns (mean, cov, innovation, ok)."""
    batch = pred_mean.shape[:-1]
    innov = z - z_mean
    if len(angle_indices):
        idx = list(angle_indices)
        innov[..., idx] = wrap_angle(innov[..., idx])
    ok = np.all(np.isfinite(P_zz), axis=(-1, -2))
    ok &= _is_pd(np.where(ok[..., None, None], P_zz, np.eye(P_zz.shape[-1])))
    safe_zz = np.where(ok[..., None, None], P_zz, np.eye(P_zz.shape[-1]))
    # K = P_xz P_zz^-1, solved against the symmetric P_zz
    K = np.swapaxes(np.linalg.solve(safe_zz, np.swapaxes(P_xz, -1, -2)), -1, -2)
    mean = pred_mean + np.einsum("...ij,...j->...i", K, innov)
    cov = symmetrize(pred_cov - K @ P_zz @ np.swapaxes(K, -1, -2))
    finite = np.all(np.isfinite(cov), axis=(-1, -2)) & np.all(np.isfinite(mean), axis=-1)
    ok &= finite
    safe_cov = np.where(ok[..., None, None], cov, np.eye(cov.shape[-1]))
    floor = -PSD_TOL * np.abs(np.trace(safe_cov, axis1=-2, axis2=-1))
    ok &= np.linalg.eigvalsh(safe_cov)[..., 0] >= floor
    return mean, cov, innov, ok.reshape(batch)


def measurement_update(pred: StateEstimate, P_zz: np.ndarray, P_xz: np.ndarray, z: np.ndarray,
                       z_mean: np.ndarray, angle_indices: Sequence[int] = ()
                       ) -> tuple[StateEstimate, np.ndarray]:
    """Kalman gain update; returns the posterior and the innovation ``z - z_mean``."""
    z = np.asarray(z, dtype=float)
    if not np.all(_is_pd(P_zz)):
        raise SingularError("innovation covariance is not invertible")
    mean, cov, innov, ok = _update(pred.mean, pred.cov, P_zz, P_xz, z, z_mean, angle_indices)
    if not np.all(ok):
        raise NonPsdError("posterior covariance violates the PSD floor", ~ok)
    return StateEstimate(mean, cov), innov
