"""End-to-end ensemble experiments built on the trajectory engine.

Each runner prepares the initial state and drift for one physical setup,
hands the heavy lifting to :func:`homodyne_sse.ensemble.run_ensemble`, and
repackages the per-batch sums as named curves with +/- one-sigma error bars:

* :func:`run_epr` — correlators of the two homodyne currents for a damped
  two-mode squeezed input, optionally through an exponential detection
  filter, together with wavefunction observables for density-matrix
  cross-checks;
* :func:`run_phase_switch` — time-binned current correlations under a
  mid-run change of one local-oscillator phase;
* :func:`run_cim` — success probabilities of a two-mode Ising machine,
  estimated from the filtered currents and from the wavefunction;
* :func:`short_time_correlation` — the equal-time correlator after a single
  step, at several step sizes, for step-size extrapolation;
* :func:`epr_inference` — inferred-variance product of time-binned records
  from an x-x run and a p-p run, with jackknife errors;
* :func:`oracle_triangle` — analytic curve vs density-matrix integrator vs
  trajectory ensemble, with worst-case gaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .detector import CurrentModel, PhaseSchedule
from .ensemble import (
    BinRequest,
    EnsembleRequest,
    EnsembleResult,
    ObservableSpec,
    SignRequest,
    run_ensemble,
)
from .fock import FockSpace, PhaseVector, StateVector, vacuum_state
from .hamiltonians import HamiltonianKind, HamiltonianSpec
from .oracle import (
    BinnedOutputMoments,
    DensityMatrix,
    binned_output_moments,
    ground_states,
    integrate_master,
    uniform_loss,
)
from .sde import Calculus, SseDrift, StepConfig
from .states import SqueezeParams, tmss

__all__ = [
    "ExperimentConfig",
    "SeriesStats",
    "EnsembleStats",
    "ShortTimeResult",
    "InferenceResult",
    "TriangleCheck",
    "run_epr",
    "run_phase_switch",
    "run_cim",
    "short_time_correlation",
    "epr_inference",
    "inferred_variance",
    "oracle_triangle",
    "ground_patterns",
]

WAVEFN_ESTIMATORS = ("quadrant", "mean_sign")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one ensemble run.

    ``kappa`` is the detection bandwidth; ``math.inf`` means no filtering.
    ``current`` of ``None`` picks the calculus default (midpoint-sampled for
    Stratonovich, same-time for Ito).  ``schedule`` of ``None`` means all
    local-oscillator phases stay at zero.
    """

    r: float = 0.5
    trajectories: int = 20_000
    batches: int = 100
    dt: float = 0.05
    horizon: float = 1.0
    calculus: Calculus = Calculus.STRATONOVICH
    current: CurrentModel | None = None
    kappa: float = math.inf
    schedule: PhaseSchedule | None = None
    master_seed: int = 0
    cutoff: int = 15
    hamiltonian: HamiltonianSpec = HamiltonianSpec.free()
    bin_width: float | None = None
    sign_stride: int | None = None
    wavefn_estimator: str = "quadrant"
    midpoint_iters: int = 4
    truncation_budget: float = 1e-6
    workers: int = 1
    chunk_size: int | None = None

    def __post_init__(self) -> None:
        if self.r < 0.0 or not np.isfinite(self.r):
            raise ValueError("squeezing parameter must be finite and nonnegative")
        if self.trajectories < 1:
            raise ValueError("need at least one trajectory")
        if self.batches < 2:
            raise ValueError("need at least two batches")
        if self.trajectories % self.batches:
            raise ValueError("trajectories must split into equal batches")
        if self.dt <= 0.0 or self.horizon <= 0.0:
            raise ValueError("step and horizon must be positive")
        if not self.kappa > 0.0:
            raise ValueError("bandwidth must be positive (or infinite)")
        if int(self.cutoff) < 1:
            raise ValueError("cutoff must be at least 1")
        if self.wavefn_estimator not in WAVEFN_ESTIMATORS:
            raise ValueError(
                f"unknown wavefunction estimator {self.wavefn_estimator!r}"
            )
        if self.workers < 1:
            raise ValueError("worker count must be positive")

    @property
    def filtered(self) -> bool:
        return math.isfinite(self.kappa)

    def step_config(self) -> StepConfig:
        return StepConfig(
            dt=self.dt,
            midpoint_iters=self.midpoint_iters,
            truncation_budget=self.truncation_budget,
        )


@dataclass(frozen=True)
class SeriesStats:
    """One named curve: grid times, means, and one-sigma error bars."""

    name: str
    taus: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray

    def __len__(self) -> int:
        return len(self.taus)


@dataclass(frozen=True)
class EnsembleStats:
    """Named curves from one ensemble, plus the underlying batch sums."""

    series: dict[str, SeriesStats]
    num_batches: int
    result: EnsembleResult = field(repr=False)

    def get(self, name: str) -> SeriesStats:
        if name not in self.series:
            raise KeyError(
                f"no series {name!r}; have {sorted(self.series)}"
            )
        return self.series[name]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.series)


def _series(
    result: EnsembleResult,
    key: str,
    taus: np.ndarray,
    name: str,
    column: int | None = None,
    scale: "np.ndarray | float" = 1.0,
) -> SeriesStats:
    mean, err = result.mean_and_stderr(key)
    if column is not None:
        mean = mean[..., column]
        err = err[..., column]
    return SeriesStats(name=name, taus=taus, mean=mean * scale, stderr=err * np.abs(scale))


def _zero_schedule(config: ExperimentConfig, num_modes: int) -> PhaseSchedule:
    if config.schedule is not None:
        return config.schedule
    return PhaseSchedule.constant(PhaseVector.of(*([0.0] * num_modes)))


def _epr_state(config: ExperimentConfig) -> tuple[FockSpace, StateVector]:
    space = FockSpace.uniform(2, config.cutoff)
    return space, tmss(SqueezeParams(r=config.r, cutoff=config.cutoff), space)


EPR_OBSERVABLES = (
    ObservableSpec("x1", (("x", 0),)),
    ObservableSpec("x1x2", (("x", 0), ("x", 1))),
    ObservableSpec("n1", (("n", 0),)),
)


def run_epr(config: ExperimentConfig) -> EnsembleStats:
    """Current-correlator curves for the damped two-mode squeezed input.

    Returns the raw equal-time pair product ``jj`` and a variance-reduced
    variant ``jj_reduced`` (same mean; the zero-mean product of the injected
    noises is subtracted), the per-mode mean currents, and the wavefunction
    observables ``x1``, ``x1x2``, ``n1`` on the step grid.  With a finite
    bandwidth the filtered-record curves ``JJ``, ``JJ_noise`` and the
    per-mode noise powers are included as well.
    """
    space, state = _epr_state(config)
    schedule = _zero_schedule(config, 2)
    drift = SseDrift(config.hamiltonian, schedule.phase_at(0.0), config.calculus)
    filters = (config.kappa,) if config.filtered else ()
    request = EnsembleRequest(
        n_traj=config.trajectories,
        master_seed=config.master_seed,
        num_batches=config.batches,
        pair=(0, 1),
        filters=filters,
        observables=EPR_OBSERVABLES,
        readout_stride=1,
        bins=BinRequest(config.bin_width) if config.bin_width is not None else None,
    )
    result = run_ensemble(
        state,
        drift,
        config.step_config(),
        config.horizon,
        request,
        current_model=config.current,
        schedule=schedule,
        workers=config.workers,
        chunk_size=config.chunk_size,
    )
    curves = {
        "jj": _series(result, "jj_raw", result.taus, "jj"),
        "jj_reduced": _series(result, "jj_reduced", result.taus, "jj_reduced"),
        "j1": _series(result, "j_mean", result.taus, "j1", column=0),
        "j2": _series(result, "j_mean", result.taus, "j2", column=1),
    }
    for spec in EPR_OBSERVABLES:
        curves[spec.name] = _series(
            result, f"obs[{spec.name}]", result.readout_taus, spec.name
        )
    if config.filtered:
        key = format(config.kappa, "g")
        curves["JJ"] = _series(result, f"filt_jj[{key}]", result.taus, "JJ")
        curves["JJ_noise"] = _series(
            result, f"filt_jj_noise[{key}]", result.taus, "JJ_noise"
        )
        curves["J1_noise_sq"] = _series(
            result, f"filt_noise_sq[{key}]", result.taus, "J1_noise_sq", column=0
        )
        curves["J2_noise_sq"] = _series(
            result, f"filt_noise_sq[{key}]", result.taus, "J2_noise_sq", column=1
        )
    return EnsembleStats(series=curves, num_batches=config.batches, result=result)


def bin_layout(
    steps: int, dt: float, width: float, midpoint: bool, horizon: float
) -> tuple[np.ndarray, np.ndarray]:
    """Centers and effective (horizon-clipped) widths of the centered bins.

    Mirrors the bin assignment used by the trajectory engine: sample ``n``
    lands in ``floor(tau_n / width + 1/2)`` with ``tau_n`` at step midpoints
    for midpoint-sampled records and at step starts otherwise.
    """
    offsets = (np.arange(steps) + 0.5) * dt if midpoint else np.arange(steps) * dt
    edges = np.floor(offsets / width + 0.5 + 1e-12).astype(int)
    n_bins = int(edges[-1]) + 1
    centers = width * np.arange(n_bins)
    lo = np.maximum(centers - 0.5 * width, 0.0)
    hi = np.minimum(centers + 0.5 * width, horizon)
    return centers, hi - lo


def run_phase_switch(config: ExperimentConfig) -> EnsembleStats:
    """Binned correlations under a single mid-run local-oscillator change.

    ``config.schedule`` must switch exactly once.  The record of each mode
    is integrated over centered time bins; the curves are the bin-averaged
    pair correlation ``bin_corr`` = <(I1/w)(I2/w)> plus per-mode marginals
    (bin-averaged means and second moments of channel 2 double as a
    no-signaling check across schedule variants).
    """
    if config.schedule is None or len(config.schedule.switch_times) != 1:
        raise ValueError("phase-switch run needs a schedule with exactly one switch")
    width = config.bin_width if config.bin_width is not None else 0.2
    space, state = _epr_state(config)
    drift = SseDrift(
        config.hamiltonian, config.schedule.phase_at(0.0), config.calculus
    )
    request = EnsembleRequest(
        n_traj=config.trajectories,
        master_seed=config.master_seed,
        num_batches=config.batches,
        pair=(0, 1),
        bins=BinRequest(width),
    )
    result = run_ensemble(
        state,
        drift,
        config.step_config(),
        config.horizon,
        request,
        current_model=config.current,
        schedule=config.schedule,
        workers=config.workers,
        chunk_size=config.chunk_size,
    )
    steps = len(result.taus)
    midpoint = result.taus[0] != 0.0
    centers, widths = bin_layout(steps, config.dt, width, midpoint, config.horizon)
    curves = {
        "bin_corr": _series(
            result, "bin_cross", centers, "bin_corr", scale=1.0 / widths**2
        ),
        "J1_avg": _series(
            result, "bin_sum", centers, "J1_avg", column=0, scale=1.0 / widths
        ),
        "J2_avg": _series(
            result, "bin_sum", centers, "J2_avg", column=1, scale=1.0 / widths
        ),
        "J2_avg_sq": _series(
            result, "bin_sq", centers, "J2_avg_sq", column=1, scale=1.0 / widths**2
        ),
    }
    return EnsembleStats(series=curves, num_batches=config.batches, result=result)


def ground_patterns(coupling) -> tuple[tuple[int, ...], ...]:
    """Spin patterns reaching the minimum Ising energy (both flips included)."""
    return ground_states(np.asarray(coupling, dtype=float))[1]


def run_cim(config: ExperimentConfig) -> EnsembleStats:
    """Success probabilities of the two-mode Ising machine from vacuum.

    Three estimators are reported on the sign-readout grid: the sign
    pattern of the filtered currents against the ground-state patterns
    (``success_current``), the state's exact probability that both
    quadratures share a sign (``success_quadrant``), and the sign pattern
    of the per-mode quadrature means (``success_mean_sign``).  The mean
    photon number of mode 1 (``n1``) is included as a saturation
    diagnostic.
    """
    ham = config.hamiltonian
    if ham.kind is not HamiltonianKind.CIM:
        raise ValueError("run_cim needs a CIM Hamiltonian")
    if not config.filtered:
        raise ValueError("the current-based estimator needs a finite bandwidth")
    coupling = ham.coupling_matrix()
    if coupling.shape[0] != 2:
        raise ValueError("the sign readout is implemented for two modes")
    space = FockSpace.uniform(2, config.cutoff)
    state = vacuum_state(space)
    schedule = _zero_schedule(config, 2)
    drift = SseDrift(ham, schedule.phase_at(0.0), config.calculus)
    steps = round(config.horizon / config.dt)
    stride = config.sign_stride if config.sign_stride is not None else max(1, steps // 50)
    if steps % stride:
        raise ValueError("sign stride must divide the step count")
    request = EnsembleRequest(
        n_traj=config.trajectories,
        master_seed=config.master_seed,
        num_batches=config.batches,
        filters=(config.kappa,),
        observables=(ObservableSpec("n1", (("n", 0),)),),
        readout_stride=stride,
        signs=SignRequest(stride=stride, patterns=ground_patterns(coupling)),
    )
    result = run_ensemble(
        state,
        drift,
        config.step_config(),
        config.horizon,
        request,
        current_model=config.current,
        schedule=schedule,
        workers=config.workers,
        chunk_size=config.chunk_size,
    )
    key = format(config.kappa, "g")
    curves = {
        "success_current": _series(
            result, f"sign_success[{key}]", result.sign_taus, "success_current"
        ),
        "success_quadrant": _series(
            result, "same_sign_exact", result.sign_taus, "success_quadrant"
        ),
        "success_mean_sign": _series(
            result, "sign_mean_x", result.sign_taus, "success_mean_sign"
        ),
        "n1": _series(result, "obs[n1]", result.readout_taus, "n1"),
    }
    return EnsembleStats(series=curves, num_batches=config.batches, result=result)


def wavefunction_success(stats: EnsembleStats, config: ExperimentConfig) -> SeriesStats:
    """The state-based success curve selected by ``config.wavefn_estimator``."""
    name = (
        "success_quadrant"
        if config.wavefn_estimator == "quadrant"
        else "success_mean_sign"
    )
    return stats.get(name)


@dataclass(frozen=True)
class ShortTimeResult:
    """Single-step correlator estimates at several step sizes."""

    dts: tuple[float, ...]
    estimates: np.ndarray
    stderrs: np.ndarray

    def deviations(self, target: float) -> np.ndarray:
        """|magnitude - target| per step size."""
        return np.abs(np.abs(self.estimates) - target)


def short_time_correlation(
    config: ExperimentConfig, dts: tuple[float, ...] = (0.05, 0.02, 0.01)
) -> ShortTimeResult:
    """Variance-reduced pair correlator after one midpoint-sampled step.

    Runs a fresh single-step ensemble per step size with a shared master
    seed; the first-step noise of a trajectory is then the same standard
    normal scaled by sqrt(dt), so the estimates at different step sizes are
    strongly correlated and their differences expose the step-size bias.
    """
    if config.calculus is not Calculus.STRATONOVICH:
        raise ValueError("the short-time limit uses the midpoint-sampled model")
    estimates = []
    errors = []
    for dt in dts:
        stats = run_epr(replace(config, dt=dt, horizon=dt, bin_width=None))
        curve = stats.get("jj_reduced")
        estimates.append(curve.mean[0])
        errors.append(curve.stderr[0])
    return ShortTimeResult(
        dts=tuple(dts),
        estimates=np.array(estimates),
        stderrs=np.array(errors),
    )


def inferred_variance(variance: float, other_variance: float, covariance: float) -> float:
    """Residual variance of channel 1 after the best linear guess from channel 2."""
    if other_variance <= 0.0:
        raise ValueError("the conditioning record must have positive variance")
    return variance - covariance**2 / other_variance


@dataclass(frozen=True)
class InferenceResult:
    """Inferred-variance product of binned records, with jackknife error."""

    window: float
    x_moments: tuple[float, float, float]
    p_moments: tuple[float, float, float]
    inferred_x: float
    inferred_p: float
    product: float
    product_stderr: float
    vacuum_product: float
    oracle: BinnedOutputMoments

    @property
    def below_vacuum(self) -> bool:
        """True when the product sits below the vacuum limit beyond 3 sigma."""
        return self.product + 3.0 * self.product_stderr < self.vacuum_product


def _bin_moment_sums(result: EnsembleResult) -> np.ndarray:
    """Per-batch sums (I1, I2, I1^2, I2^2, I1*I2) of the first bin."""
    return np.stack(
        [
            result.sums["bin_sum"][:, 0, 0],
            result.sums["bin_sum"][:, 0, 1],
            result.sums["bin_sq"][:, 0, 0],
            result.sums["bin_sq"][:, 0, 1],
            result.sums["bin_cross"][:, 0],
        ],
        axis=1,
    )


def _moments_from_sums(sums: np.ndarray, count: int) -> tuple[float, float, float]:
    s1, s2, q1, q2, c12 = (sums[k] / count for k in range(5))
    return q1 - s1 * s1, q2 - s2 * s2, c12 - s1 * s2


def epr_inference(config: ExperimentConfig) -> InferenceResult:
    """Inferred-variance product of the full-horizon record integrals.

    Two independent ensembles are run: an x-x one at the configured master
    seed and a p-p one at master seed + 1.  Each record is integrated over
    the whole horizon (a single centered bin clipped to the run window);
    the variance of channel 1's integral minus the optimally inferred part
    from channel 2 is multiplied across the two runs and compared against
    the same product for vacuum input.  The error bar is a delete-one-batch
    jackknife over paired batch deletions.
    """
    window = config.horizon
    width = 2.0 * window
    runs = []
    for offset, phase in ((0, 0.0), (1, math.pi / 2.0)):
        schedule = PhaseSchedule.constant(PhaseVector.of(phase, phase))
        stats = run_epr(
            replace(
                config,
                schedule=schedule,
                master_seed=config.master_seed + offset,
                bin_width=width,
            )
        )
        runs.append(_bin_moment_sums(stats.result))
    x_sums, p_sums = runs
    n = config.trajectories
    bs = n // config.batches

    def product_of(xs: np.ndarray, ps: np.ndarray, count: int) -> tuple:
        xm = _moments_from_sums(xs, count)
        pm = _moments_from_sums(ps, count)
        dx = inferred_variance(xm[0], xm[1], xm[2])
        dp = inferred_variance(pm[0], pm[1], pm[2])
        return xm, pm, dx, dp, dx * dp

    x_total = x_sums.sum(axis=0)
    p_total = p_sums.sum(axis=0)
    xm, pm, dx, dp, product = product_of(x_total, p_total, n)
    drops = np.array(
        [
            product_of(x_total - x_sums[d], p_total - p_sums[d], n - bs)[4]
            for d in range(config.batches)
        ]
    )
    nb = config.batches
    jack = math.sqrt((nb - 1) / nb * np.sum((drops - drops.mean()) ** 2))
    oracle = binned_output_moments(config.r, window)
    return InferenceResult(
        window=window,
        x_moments=xm,
        p_moments=pm,
        inferred_x=dx,
        inferred_p=dp,
        product=product,
        product_stderr=jack,
        vacuum_product=binned_output_moments(0.0, window).vacuum_product,
        oracle=oracle,
    )


@dataclass(frozen=True)
class TriangleCheck:
    """Three-way comparison: analytic curve, density-matrix run, ensemble."""

    taus: np.ndarray
    analytic_x1x2: np.ndarray
    master: dict[str, np.ndarray]
    sse_mean: dict[str, np.ndarray]
    sse_stderr: dict[str, np.ndarray]
    master_gap: float
    worst_sigma: dict[str, float]

    def passed(self, master_tol: float = 1e-6, sigmas: float = 3.0) -> bool:
        return self.master_gap < master_tol and all(
            worst < sigmas for worst in self.worst_sigma.values()
        )


def oracle_triangle(
    config: ExperimentConfig, stats: EnsembleStats | None = None
) -> TriangleCheck:
    """Close the loop between the analytic decay law, the density-matrix
    integrator, and the trajectory ensemble.

    The master equation is integrated from the same truncated initial state
    on the ensemble readout grid; the analytic reference for the cross
    correlation is e^{-tau} sinh(2 r).  ``worst_sigma`` holds, per
    observable, the largest |ensemble - master| in units of the ensemble
    error bar (floored at 1e-12); its scale is meaningful only where the
    error bar is.
    """
    if stats is None:
        stats = run_epr(config)
    space, state = _epr_state(config)
    grid = stats.get("x1x2").taus
    out_dt = float(grid[1] - grid[0])
    run = integrate_master(
        DensityMatrix.from_state(state),
        config.hamiltonian,
        uniform_loss(space),
        out_dt,
        float(grid[-1]),
        observables={spec.name: spec.ops for spec in EPR_OBSERVABLES},
    )
    assert np.allclose(run.taus, grid, atol=1e-12)
    analytic = np.exp(-grid) * math.sinh(2.0 * config.r)
    master_gap = float(np.max(np.abs(run.observables["x1x2"] - analytic)))
    sse_mean = {}
    sse_stderr = {}
    worst = {}
    for spec in EPR_OBSERVABLES:
        curve = stats.get(spec.name)
        sse_mean[spec.name] = curve.mean
        sse_stderr[spec.name] = curve.stderr
        gap = np.abs(curve.mean - run.observables[spec.name])
        worst[spec.name] = float(np.max(gap / np.maximum(curve.stderr, 1e-12)))
    return TriangleCheck(
        taus=grid,
        analytic_x1x2=analytic,
        master=run.observables,
        sse_mean=sse_mean,
        sse_stderr=sse_stderr,
        master_gap=master_gap,
        worst_sigma=worst,
    )
