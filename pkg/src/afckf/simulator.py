"""Truth generation, Monte Carlo execution and RMSE aggregation.

All runs of one (case, variant) pair are stepped together as a batch; every
run still owns its own random stream, derived from the master seed and the
run index, so adding runs never changes earlier runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .adaptive import (
    ALL_VARIANTS,
    AdaptiveConfig,
    Variant,
    init_session,
    step_afckf,
)
from .cubature import NoiseCovariances, make_cubature_rule, wrap_angle
from .models import (
    P0,
    Q0,
    R0,
    TS,
    X0_TRUE,
    InflationSchedule,
    NoiseCase,
    SystemModel,
    make_noise_case,
    tracking_model,
)

log = logging.getLogger(__name__)

POSITION = (0, 2)
VELOCITY = (1, 3)
ABORT_FRACTION = 0.10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    runs: int = 50
    steps: int = 500
    cases: tuple[str, ...] = ("A", "B")
    variants: tuple[Variant, ...] = ALL_VARIANTS
    ts: float = TS
    q0: np.ndarray = field(default_factory=lambda: Q0.copy())
    r0: np.ndarray = field(default_factory=lambda: R0.copy())
    q_true: np.ndarray | None = None
    x0: np.ndarray = field(default_factory=lambda: X0_TRUE.copy())
    p0: np.ndarray = field(default_factory=lambda: P0.copy())
    window: int = 30
    a_max: float = 25.0
    eps_r: float = 1e-8
    estimate_q: bool = False
    inflation_gamma: float = 5.0
    inflation_first: int | None = None
    inflation_last: int | None = None

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be positive")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        object.__setattr__(self, "cases", tuple(str(c).upper() for c in self.cases))
        object.__setattr__(self, "variants", tuple(Variant.parse(v) for v in self.variants))
        for name in ("q0", "r0", "x0", "p0"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.q_true is not None:
            object.__setattr__(self, "q_true", np.asarray(self.q_true, dtype=float))

    @property
    def adaptive(self) -> AdaptiveConfig:
        return AdaptiveConfig(window=self.window, a_max=self.a_max, eps_r=self.eps_r,
                              estimate_q=self.estimate_q)

    @property
    def noise(self) -> NoiseCovariances:
        return NoiseCovariances(self.q0, self.r0)

    def model(self) -> SystemModel:
        return tracking_model(self.ts)

    def schedule(self) -> InflationSchedule:
        default = InflationSchedule.middle_third(self.steps, self.inflation_gamma)
        return InflationSchedule(
            gamma=self.inflation_gamma,
            first=default.first if self.inflation_first is None else self.inflation_first,
            last=default.last if self.inflation_last is None else self.inflation_last,
        )

    def noise_case(self, case_id: str) -> NoiseCase:
        q_true = self.q0 if self.q_true is None else self.q_true
        return make_noise_case(case_id, self.r0, q_true, self.schedule(), self.steps)


class Truth(NamedTuple):
    states: np.ndarray  # (steps, n), epochs 1..steps
    measurements: np.ndarray  # (steps, m)
    initial_estimate: np.ndarray  # (n,), x0 perturbed by a P0 draw


def run_rng(seed: int, run_index: int) -> np.random.Generator:
    """Counter-based stream for one run; independent of how many runs exist."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(run_index),))
    return np.random.Generator(np.random.Philox(ss))


def _sqrtm_psd(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(M)
    return V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def generate_truth(config: RunConfig, run_index: int, case_id: str | NoiseCase | None = None,
                   model: SystemModel | None = None) -> Truth:
    """One trajectory with its measurements.

    ``case_id`` may also be a ready-made :class:`NoiseCase`, which bypasses
    the config's noise settings (used e.g. for noiseless checks).
    """
    if isinstance(case_id, NoiseCase):
        case = case_id
    else:
        case = config.noise_case(case_id or config.cases[0])
    model = model or config.model()
    rng = run_rng(config.seed, run_index)
    n, m, steps = model.n, model.m, config.steps

    e0 = rng.standard_normal(n)
    w = rng.standard_normal((steps, n)) @ _sqrtm_psd(case.q_true).T
    r_seq = case.r_sequence(steps)
    v = np.einsum("kij,kj->ki", _sqrtm_psd(r_seq), rng.standard_normal((steps, m)))

    states = np.empty((steps, n))
    x = config.x0
    for k in range(steps):
        x = model.f(x) + w[k]
        states[k] = x
    z = model.h(states) + v
    if model.angle_indices:
        idx = list(model.angle_indices)
        z[:, idx] = wrap_angle(z[:, idx])
    x_hat0 = config.x0 + _sqrtm_psd(config.p0) @ e0
    return Truth(states, z, x_hat0)


def generate_batch(config: RunConfig, case_id: str, model: SystemModel | None = None) -> Truth:
    truths = [generate_truth(config, i, case_id, model) for i in range(config.runs)]
    return Truth(*(np.stack(parts) for parts in zip(*truths)))


@dataclass
class VariantRun:
    """Per-run filter output for one variant: arrays are ``(runs, steps, ...)``."""

    variant: Variant
    estimates: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    trace_c_hat: np.ndarray
    trace_p_zz: np.ndarray
    floored: np.ndarray
    failed: np.ndarray

    @property
    def failed_epochs(self) -> np.ndarray:
        return self.failed.sum(axis=1)

    @property
    def aborted(self) -> np.ndarray:
        return self.failed_epochs > ABORT_FRACTION * self.failed.shape[1]


def run_variant(variant, truth: Truth, config: RunConfig,
                model: SystemModel | None = None, noise: NoiseCovariances | None = None) -> VariantRun:
    """Filter every run in ``truth`` (batched along axis 0) with one variant."""
    variant = Variant.parse(variant)
    model = model or config.model()
    noise = noise or config.noise
    acfg = config.adaptive
    rule = make_cubature_rule(model.n)
    runs, steps = truth.measurements.shape[:2]

    state, window, adaptive = init_session(model, noise, truth.initial_estimate, config.p0, acfg)
    est = np.empty((runs, steps, model.n))
    a1 = np.empty((runs, steps))
    a2 = np.empty((runs, steps))
    tr_c = np.empty((runs, steps))
    tr_p = np.empty((runs, steps))
    floored = np.zeros((runs, steps), dtype=bool)
    failed = np.zeros((runs, steps), dtype=bool)
    for k in range(steps):
        state, window, adaptive, tel = step_afckf(
            variant, state, window, adaptive, model, noise, truth.measurements[:, k],
            acfg, rule, epoch=k + 1, on_failure="hold")
        est[:, k] = state.mean
        a1[:, k], a2[:, k] = tel.a1, tel.a2
        tr_c[:, k], tr_p[:, k] = tel.trace_c_hat, tel.trace_p_zz
        floored[:, k], failed[:, k] = tel.floored, tel.failed
    out = VariantRun(variant, est, a1, a2, tr_c, tr_p, floored, failed)
    if np.any(out.aborted):
        log.warning("%s: %d run(s) aborted after >10%% failed epochs", variant.value, out.aborted.sum())
    return out


def rmse(estimates: np.ndarray, truth: np.ndarray, components: Sequence[int]) -> tuple[np.ndarray, float]:
    """Per-epoch RMSE over runs of the selected components, and its mean over epochs.

    ``estimates`` and ``truth`` are ``(runs, steps, n)`` (a single run may
    drop the leading axis).
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"estimate/truth shapes differ: {est.shape} vs {tru.shape}")
    if est.ndim == 2:
        est, tru = est[None], tru[None]
    idx = list(components)
    sq = np.sum((est[..., idx] - tru[..., idx]) ** 2, axis=-1)
    per_epoch = np.sqrt(sq.mean(axis=0))
    return per_epoch, float(per_epoch.mean())


@dataclass
class VariantResult:
    case: str
    variant: Variant
    rmse_position: np.ndarray
    rmse_velocity: np.ndarray
    avg_position: float
    avg_velocity: float
    failed_epochs: int
    aborted_runs: int
    run: VariantRun


@dataclass
class RunReport:
    config: RunConfig
    results: dict[tuple[str, Variant], VariantResult]

    def get(self, case: str, variant) -> VariantResult:
        return self.results[(case.upper(), Variant.parse(variant))]

    def summary_rows(self) -> list[tuple]:
        return [(r.variant.value, r.case, r.avg_position, r.avg_velocity, r.failed_epochs)
                for r in self.results.values()]


def _score(case: str, run: VariantRun, truth: Truth) -> VariantResult:
    keep = ~run.aborted
    pos, avg_pos = rmse(run.estimates[keep], truth.states[keep], POSITION)
    vel, avg_vel = rmse(run.estimates[keep], truth.states[keep], VELOCITY)
    return VariantResult(case, run.variant, pos, vel, avg_pos, avg_vel,
                         int(run.failed.sum()), int(run.aborted.sum()), run)


def monte_carlo(config: RunConfig) -> RunReport:
    """Run every configured case and variant; results keyed by ``(case, variant)``."""
    model = config.model()
    results: dict[tuple[str, Variant], VariantResult] = {}
    for case in config.cases:
        truth = generate_batch(config, case, model)
        for variant in config.variants:
            run = run_variant(variant, truth, config, model)
            results[(case, variant)] = _score(case, run, truth)
    return RunReport(config, results)
