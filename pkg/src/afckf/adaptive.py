"""Adaptive fading on top of the cubature filter.

Two scalar transitive factors drive the adaptation:

* ``a1`` inflates the time-update spread of the predicted covariance when
  the windowed innovation covariance exceeds what the filter predicted;
* ``a2`` inflates the measurement-noise covariance inside ``P_zz``.

Windowed innovation/residual statistics also give the ``R*`` and
measurement-space ``h Q* h^T`` estimators.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .cubature import (
    CubatureRule,
    NoiseCovariances,
    NonPsdError,
    SingularError,
    StateEstimate,
    _cholesky_jitter,
    _cross,
    _measurement_points,
    _points,
    _propagate,
    _spread,
    _update,
    make_cubature_rule,
    symmetrize,
    wrap_angle,
)
from .models import SystemModel

log = logging.getLogger(__name__)

__all__ = [
    "AdaptiveConfig",
    "AdaptiveState",
    "DegenerateDenominator",
    "RankDeficient",
    "SlidingWindow",
    "StepResult",
    "Telemetry",
    "Variant",
    "apply_p_adaption",
    "apply_r_adaption",
    "compute_a1",
    "compute_a2",
    "estimate_q_star",
    "estimate_r_star",
    "floor_eigenvalues",
    "lift_q_star",
    "residual",
    "step_afckf",
    "windowed_covariance",
]

DENOM_EPS = 1e-12


class DegenerateDenominator(UserWarning):
    """A trace-ratio denominator was (near) zero; the factor fell back to 1."""


class RankDeficient(UserWarning):
    """The measurement map cannot recover a full-state Q*."""


class Variant(str, enum.Enum):
    CKF = "CKF"
    ACKF = "ACKF"
    AFCKF_SINGLE = "AFCKF_single"
    AFCKF_P = "AFCKF_P"
    AFCKF_R = "AFCKF_R"

    @classmethod
    def parse(cls, tag) -> "Variant":
        if isinstance(tag, cls):
            return tag
        key = str(tag).strip().replace("-", "_").upper()
        aliases = {"AFCKF": cls.AFCKF_SINGLE}
        if key in aliases:
            return aliases[key]
        for v in cls:
            if v.value.upper() == key:
                return v
        raise ValueError(f"unknown filter variant {tag!r}")

    @property
    def fades(self) -> bool:
        return self in (Variant.AFCKF_SINGLE, Variant.AFCKF_P, Variant.AFCKF_R)

    @property
    def estimates_r(self) -> bool:
        return self in (Variant.ACKF, Variant.AFCKF_R)


ALL_VARIANTS = tuple(Variant)


@dataclass(frozen=True)
class AdaptiveConfig:
    window: int = 30
    a_max: float = 25.0
    # eigenvalue floor for R*, relative to trace of the nominal R
    eps_r: float = 1e-8
    estimate_q: bool = False

    def __post_init__(self):
        if int(self.window) != self.window or self.window < 2:
            raise ValueError("window width must be an integer >= 2")
        if not self.a_max >= 1.0:
            raise ValueError("a_max must be >= 1")
        if not self.eps_r > 0.0:
            raise ValueError("eps_r must be positive")


class SlidingWindow:
    """Fixed-width history of innovation and residual vectors.

    Entries are stored oldest-first along axis ``-2``; every batch element
    keeps its own fill count so a masked push can skip failed epochs.
    """

    def __init__(self, width: int, dim: int, batch_shape: tuple[int, ...] = ()):
        if width < 1:
            raise ValueError("window width must be positive")
        self.width = int(width)
        self.dim = int(dim)
        self.innovations = np.zeros((*batch_shape, self.width, self.dim))
        self.residuals = np.zeros((*batch_shape, self.width, self.dim))
        self.count = np.zeros(batch_shape, dtype=int)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.count.shape

    @property
    def full(self) -> np.ndarray:
        return self.count >= self.width

    def copy(self) -> "SlidingWindow":
        new = SlidingWindow.__new__(SlidingWindow)
        new.width, new.dim = self.width, self.dim
        new.innovations = self.innovations.copy()
        new.residuals = self.residuals.copy()
        new.count = self.count.copy()
        return new

    def push(self, innovation, residual, mask=None) -> None:
        innovation = np.broadcast_to(innovation, (*self.batch_shape, self.dim))
        residual = np.broadcast_to(residual, (*self.batch_shape, self.dim))
        shifted_i = np.concatenate([self.innovations[..., 1:, :], innovation[..., None, :]], axis=-2)
        shifted_r = np.concatenate([self.residuals[..., 1:, :], residual[..., None, :]], axis=-2)
        grown = np.minimum(self.count + 1, self.width)
        if mask is None:
            self.innovations, self.residuals, self.count = shifted_i, shifted_r, grown
            return
        mask = np.asarray(mask, dtype=bool)
        sel = mask[..., None, None]
        self.innovations = np.where(sel, shifted_i, self.innovations)
        self.residuals = np.where(sel, shifted_r, self.residuals)
        self.count = np.where(mask, grown, self.count)

    def _valid(self) -> np.ndarray:
        return np.arange(self.width) >= (self.width - self.count)[..., None]

    def samples(self, which: str = "innovations") -> np.ndarray:
        """Stored vectors for an unbatched window, oldest first."""
        if self.batch_shape:
            raise ValueError("samples() needs an unbatched window")
        data = getattr(self, which)
        return data[self.width - int(self.count):]

    def covariance(self, which: str = "innovations", centered: bool = False) -> np.ndarray:
        """Windowed covariance of the stored vectors; zero where the window is empty."""
        if which == "difference":
            data = self.innovations - self.residuals
        else:
            data = getattr(self, which)
        valid = self._valid().astype(float)
        count = self.count.astype(float)
        if centered:
            denom = np.maximum(count - 1.0, 1.0)
            mean = np.einsum("...k,...ki->...i", valid, data) / np.maximum(count, 1.0)[..., None]
            data = data - mean[..., None, :]
        else:
            denom = np.maximum(count, 1.0)
        C = np.einsum("...k,...ki,...kj->...ij", valid, data, data)
        return C / denom[..., None, None]


class AdaptiveState(NamedTuple):
    a1: np.ndarray
    a2: np.ndarray
    q_star: np.ndarray  # measurement space, h Q* h^T
    r_star: np.ndarray

    @classmethod
    def initial(cls, r0: np.ndarray, batch_shape: tuple[int, ...] = ()) -> "AdaptiveState":
        r0 = np.asarray(r0, dtype=float)
        m = r0.shape[-1]
        return cls(
            a1=np.ones(batch_shape),
            a2=np.ones(batch_shape),
            q_star=np.zeros((*batch_shape, m, m)),
            r_star=np.broadcast_to(r0, (*batch_shape, m, m)).copy(),
        )


class Telemetry(NamedTuple):
    epoch: int
    variant: Variant
    a1: np.ndarray
    a2: np.ndarray
    trace_c_hat: np.ndarray
    trace_p_zz: np.ndarray
    floored: np.ndarray
    failed: np.ndarray


class StepResult(NamedTuple):
    state: StateEstimate
    window: SlidingWindow
    adaptive: AdaptiveState
    telemetry: Telemetry


def _scalar_or_array(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def _trace(M):
    return np.trace(M, axis1=-2, axis2=-1)


def residual(z, h_of_posterior, angle_indices=()) -> np.ndarray:
    """Post-fit residual ``z - h(x_post)``; angular components wrapped."""
    eta = np.asarray(z, dtype=float) - np.asarray(h_of_posterior, dtype=float)
    if len(angle_indices):
        eta = eta.copy()
        idx = list(angle_indices)
        eta[..., idx] = wrap_angle(eta[..., idx])
    return eta


def windowed_covariance(window, centered: bool = False) -> np.ndarray:
    """Sample covariance of a list of vectors.

    Uncentered: ``(1/N) sum v v^T``.  Centered: ``(1/(N-1)) sum (v - mean)(v - mean)^T``.
    """
    V = np.asarray(window, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    N = V.shape[0]
    if N == 0:
        raise ValueError("window is empty")
    if centered:
        if N < 2:
            raise ValueError("centered covariance needs at least two samples")
        D = V - V.mean(axis=0)
        return D.T @ D / (N - 1)
    return V.T @ V / N


def _clamp(ratio, a_max):
    return np.clip(ratio, 1.0, a_max)


def compute_a1(C_hat, P_zz, r, a_max: float = 25.0):
    """Fading factor for the predicted covariance.

    1 while ``tr(C_hat) <= tr(P_zz)``; otherwise ``tr(C_hat - R) / tr(P_zz - R)``
    clamped to ``[1, a_max]``.
    """
    tr_c = _trace(np.asarray(C_hat, dtype=float))
    tr_p = _trace(np.asarray(P_zz, dtype=float))
    tr_r = _trace(np.asarray(r, dtype=float))
    num = tr_c - tr_r
    den = tr_p - tr_r
    degenerate = den <= DENOM_EPS
    if np.any(degenerate & (tr_c > tr_p)):
        warnings.warn("tr(P_zz - R) is not positive; a1 held at 1", DegenerateDenominator, stacklevel=2)
        log.debug("degenerate a1 denominator: %s", den)
    ratio = num / np.where(degenerate, 1.0, den)
    a1 = np.where((tr_c <= tr_p) | degenerate, 1.0, _clamp(ratio, a_max))
    return _scalar_or_array(a1)


def compute_a2(C_hat, C_theory, a_max: float = 25.0):
    """Measurement-noise factor: ``tr(C_hat) / tr(C_theory)`` clamped to ``[1, a_max]``."""
    tr_c = _trace(np.asarray(C_hat, dtype=float))
    tr_t = _trace(np.asarray(C_theory, dtype=float))
    degenerate = tr_t <= DENOM_EPS
    if np.any(degenerate):
        warnings.warn("tr(C_theory) is not positive; a2 held at 1", DegenerateDenominator, stacklevel=2)
    ratio = tr_c / np.where(degenerate, 1.0, tr_t)
    a2 = np.where((tr_c <= tr_t) | degenerate, 1.0, _clamp(ratio, a_max))
    return _scalar_or_array(a2)


def apply_p_adaption(spread, q, a1) -> np.ndarray:
    a1 = np.asarray(a1, dtype=float)
    return symmetrize(a1[..., None, None] * spread + q)


def apply_r_adaption(r, a2) -> np.ndarray:
    a2 = np.asarray(a2, dtype=float)
    return a2[..., None, None] * np.asarray(r, dtype=float)


def floor_eigenvalues(M, floor) -> tuple[np.ndarray, np.ndarray]:
    """Clip eigenvalues of symmetric ``M`` at ``floor``; also returns which elements moved."""
    M = symmetrize(np.asarray(M, dtype=float))
    floor = np.asarray(floor, dtype=float)
    w, V = np.linalg.eigh(M)
    low = w < floor[..., None]
    floored = np.any(low, axis=-1)
    if not np.any(floored):
        return M, floored
    # reconstruction loses ~eps*max|w|; lift the target by that much so the floor holds afterwards
    margin = 8 * np.finfo(float).eps * np.max(np.abs(w), axis=-1, keepdims=True)
    w = np.where(low, floor[..., None] + margin, w)
    out = symmetrize(np.einsum("...ik,...k,...jk->...ij", V, w, V))
    return np.where(floored[..., None, None], out, M), floored


def _r_star(window: SlidingWindow, hph, floor):
    raw = window.covariance("innovations", centered=False) - np.asarray(hph, dtype=float)
    return floor_eigenvalues(raw, np.broadcast_to(floor, window.batch_shape))


def estimate_r_star(window: SlidingWindow, hph, floor: float = 1e-8, return_floored: bool = False):
    """Innovation-based measurement-noise estimate ``mean(v v^T) - hph``, floored to PD."""
    if np.any(window.count < 1):
        raise ValueError("R* needs at least one innovation sample")
    r_star, floored = _r_star(window, hph, floor)
    if return_floored:
        return r_star, (bool(floored) if floored.ndim == 0 else floored)
    return r_star


def estimate_q_star(window: SlidingWindow, spread_prev, hph_post) -> np.ndarray:
    """Measurement-space process-noise estimate ``h Q* h^T``.

    ``mean((v - eta)(v - eta)^T) - h spread h^T + h P h^T``, where ``spread``
    is the time-update point spread without Q and ``P`` the posterior.
    """
    if np.any(window.count < 1):
        raise ValueError("Q* needs at least one innovation/residual pair")
    D = window.covariance("difference", centered=False)
    return symmetrize(D - np.asarray(spread_prev, dtype=float) + np.asarray(hph_post, dtype=float))


def lift_q_star(hqh, H) -> np.ndarray:
    """State-space Q* from its measurement-space image.

    Exact two-sided inverse when ``H`` is square and full rank; otherwise the
    pseudo-inverse, which only recovers the observable sub-block.
    """
    H = np.asarray(H, dtype=float)
    m, n = H.shape
    if m == n and np.linalg.matrix_rank(H) == n:
        Hi = np.linalg.inv(H)
    else:
        warnings.warn(f"h Q* h^T with m={m} < n={n} only identifies the observable block of Q*",
                      RankDeficient, stacklevel=2)
        Hi = np.linalg.pinv(H)
    return symmetrize(Hi @ np.asarray(hqh, dtype=float) @ Hi.T)


def _select(ok, new, old):
    sel = ok.reshape(ok.shape + (1,) * (np.ndim(new) - ok.ndim))
    return np.where(sel, new, old)


def step_afckf(variant, state: StateEstimate, window: SlidingWindow, adaptive: AdaptiveState,
               model: SystemModel, noise: NoiseCovariances, z, config: AdaptiveConfig = AdaptiveConfig(),
               rule: CubatureRule | None = None, epoch: int = 0, on_failure: str = "raise") -> StepResult:
    """One filter epoch for any variant.

    time update -> R* refresh (ACKF, AFCKF_R) -> a2 (AFCKF_R) -> a1 and
    P-adaption (fading variants) -> measurement prediction -> gain/update ->
    window push -> optional Q* refresh.

    Factors stay at 1 until the window holds ``config.window`` samples.
    With ``on_failure="hold"`` elements whose factorization or update fails
    keep their prior state, window and adaptive state and are flagged in the
    telemetry; with ``"raise"`` the NonPsd/Singular error propagates.
    """
    variant = Variant.parse(variant)
    if on_failure not in ("raise", "hold"):
        raise ValueError("on_failure must be 'raise' or 'hold'")
    rule = rule or make_cubature_rule(model.n)
    z = np.asarray(z, dtype=float)
    batch = state.batch_shape
    q, r0 = noise.q, noise.r
    ang = model.angle_indices
    ones = np.ones(batch)

    active = window.full
    if variant is Variant.AFCKF_P:
        c_hat = window.covariance("innovations", centered=True)
    else:
        c_hat = window.covariance("innovations", centered=False)

    # time update
    S, ok = _cholesky_jitter(state.cov)
    X = _points(state.mean, S, rule)
    Xp = model.f(X)
    x_pred = rule.weight * Xp.sum(axis=-2)
    spread = _spread(Xp, x_pred, rule)
    ok = ok.copy()

    # unfaded prediction: the reference for both factors and for R*
    provisional = symmetrize(spread + q)
    mp0, ok0 = _measurement_points(x_pred, provisional, model.h, rule, ang)
    ok &= ok0
    s0 = np.where(ok0[..., None, None], _spread(mp0.points, mp0.mean, rule), 0.0)

    r_star = adaptive.r_star
    floored = np.zeros(batch, dtype=bool)
    if variant.estimates_r:
        if np.any(active):
            fresh, fl = _r_star(window, s0, config.eps_r * _trace(r0))
            r_star = _select(active, fresh, adaptive.r_star)
            floored = fl & active

    a1 = ones
    a2 = ones
    r_ref = r0
    if variant is Variant.AFCKF_R:
        # measurement noise claims the innovation excess first; a1 only sees what a2 cannot absorb
        a2 = np.where(active, np.asarray(compute_a2(r_star, r0, config.a_max)), 1.0)
        r_ref = apply_r_adaption(r0, a2)
    if variant.fades:
        raw_a1 = np.asarray(compute_a1(c_hat, s0 + r_ref, r_ref, config.a_max))
        a1 = np.where(active & ok0, raw_a1, 1.0)

    if variant is Variant.AFCKF_SINGLE:
        P_pred = symmetrize(a1[..., None, None] * (spread + q))
    elif variant.fades:
        P_pred = apply_p_adaption(spread, q, a1)
    else:
        P_pred = provisional
        mp, ok_m = mp0, ok0
    if variant.fades:
        mp, ok_m = _measurement_points(x_pred, P_pred, model.h, rule, ang)
        ok &= ok_m
    s_zz = _spread(mp.points, mp.mean, rule)

    if variant is Variant.ACKF:
        r_eff = r_star
    else:
        r_eff = r_ref
    P_zz = symmetrize(s_zz + r_eff)
    P_xz = _cross(mp.state_points, x_pred, mp.points, mp.mean, rule)

    ok_factor = ok.copy()
    mean, cov, innov, ok_u = _update(x_pred, P_pred, P_zz, P_xz, z, mp.mean, ang)
    ok &= ok_u

    if not np.all(ok) and on_failure == "raise":
        if not np.all(ok_factor):
            raise NonPsdError(f"epoch {epoch}: covariance factorization failed", ~ok_factor)
        raise SingularError(f"epoch {epoch}: measurement update failed", ~ok)

    safe_mean = _select(ok, mean, state.mean)
    eta = residual(z, model.h(safe_mean), ang)

    new_window = window.copy()
    new_window.push(innov, eta, mask=ok)

    q_star = adaptive.q_star
    if config.estimate_q:
        # h spread h^T from the propagated points, and h P h^T at the posterior
        Zs = model.h(Xp)
        Zs_mean = rule.weight * Zs.sum(axis=-2)
        hsh = _spread(Zs, Zs_mean, rule)
        post_safe = np.where(ok[..., None, None], cov, np.eye(model.n))
        _, _, _, hph_post, _ = _propagate(safe_mean, post_safe, model.h, rule)
        fresh_q = estimate_q_star(new_window, hsh, hph_post)
        q_star = _select(new_window.full & ok, fresh_q, adaptive.q_star)

    new_state = StateEstimate(safe_mean, _select(ok, cov, state.cov))
    new_adaptive = AdaptiveState(
        a1=_select(ok, a1, adaptive.a1),
        a2=_select(ok, a2, adaptive.a2),
        q_star=q_star,
        r_star=_select(ok, r_star, adaptive.r_star),
    )
    telemetry = Telemetry(
        epoch=epoch,
        variant=variant,
        a1=_scalar_or_array(a1),
        a2=_scalar_or_array(a2),
        trace_c_hat=_scalar_or_array(_trace(c_hat)),
        trace_p_zz=_scalar_or_array(_trace(P_zz)),
        floored=floored if batch else bool(floored),
        failed=~ok if batch else bool(~ok),
    )
    return StepResult(new_state, new_window, new_adaptive, telemetry)


def init_session(model: SystemModel, noise: NoiseCovariances, mean, cov,
                 config: AdaptiveConfig = AdaptiveConfig()):
    """Fresh (state, window, adaptive) triple; ``mean`` may carry batch dimensions."""
    mean = np.asarray(mean, dtype=float)
    batch = mean.shape[:-1]
    cov = np.broadcast_to(np.asarray(cov, dtype=float), (*batch, model.n, model.n)).copy()
    state = StateEstimate(mean.copy(), cov)
    window = SlidingWindow(config.window, model.m, batch)
    adaptive = AdaptiveState.initial(noise.r, batch)
    return state, window, adaptive
