"""Vectorized trajectory ensembles with reproducible batch statistics.

Trajectories are integrated in contiguous chunks, each chunk stepping a
``(chunk, dimension)`` amplitude array at once.  All statistics are
accumulated as per-batch sums (the ensemble is split into ``num_batches``
equal batches); the final reduction over batches happens in a fixed order,
so results are bit-for-bit independent of the chunk size and of how chunks
are distributed over worker processes.  Error bars are the spread of batch
means divided by sqrt(num_batches).

Accumulator families (all optional):

* per-step means of the monitored currents and, for a chosen mode pair,
  the raw product ``j1 j2`` plus a variance-reduced variant that drops the
  zero-mean product of the injected noises;
* a bank of exponential low-pass filters (one per requested bandwidth),
  tracking the filtered record, its per-mode second moment, the pair
  product, and the same quantities for the noise-only part of the record;
* wavefunction observables (ladder-monomial expectations) on a subsampled
  readout grid;
* centered time-bin integrals of the record per mode, with squares and the
  pair cross product;
* spin-readout success estimators: the sign pattern of the filtered record
  against a target pattern set, next to two state-based variants — the
  exact probability of the two monitored quadratures sharing a sign, and
  the sign pattern of the per-mode quadrature means.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .detector import MIDPOINT_MODELS, CurrentModel, PhaseSchedule
from .fock import (
    FockSpace,
    StateVector,
    apply_operator_product,
    batch_vdot,
    lower_amps,
    tail_population,
)
from .oracle import same_sign_probability
from .sde import (
    IntegrationError,
    NoiseStream,
    SseDrift,
    StepConfig,
    TruncationBudgetError,
    _abs2,
    _resolve_model,
    num_channels,
    step_euler,
    step_midpoint,
    steps_for_horizon,
)

__all__ = [
    "ObservableSpec",
    "BinRequest",
    "SignRequest",
    "EnsembleRequest",
    "EnsembleResult",
    "run_ensemble",
]


@dataclass(frozen=True)
class ObservableSpec:
    """A named ladder-monomial expectation, e.g. ``(("x", 0), ("x", 1))``."""

    name: str
    ops: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class BinRequest:
    """Centered time bins of the record (midpoint/rectangle quadrature)."""

    width: float


@dataclass(frozen=True)
class SignRequest:
    """Spin-pattern readout every ``stride`` steps.

    ``patterns`` lists the sign patterns counted as success (include both
    global flips explicitly).  Success is evaluated from the sign of each
    filter-bank record, and independently from the state itself via the
    exact probability that all monitored quadratures share a sign.
    """

    stride: int
    patterns: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class EnsembleRequest:
    n_traj: int
    master_seed: int
    num_batches: int = 100
    pair: tuple[int, int] | None = None
    filters: tuple[float, ...] = ()
    observables: tuple[ObservableSpec, ...] = ()
    readout_stride: int = 1
    bins: BinRequest | None = None
    signs: SignRequest | None = None

    def __post_init__(self) -> None:
        if self.n_traj < 1:
            raise ValueError("need at least one trajectory")
        if self.num_batches < 2:
            raise ValueError("need at least two batches for error bars")
        if self.n_traj % self.num_batches:
            raise ValueError(
                f"{self.n_traj} trajectories do not split into "
                f"{self.num_batches} equal batches"
            )
        if self.readout_stride < 1:
            raise ValueError("readout stride must be positive")
        if len(set(self.filters)) != len(self.filters):
            raise ValueError("filter bandwidths must be distinct")
        if any(k <= 0.0 for k in self.filters):
            raise ValueError("filter bandwidths must be positive")
        if self.signs is not None and not self.filters:
            raise ValueError("sign readout needs at least one filter bandwidth")

    @property
    def batch_size(self) -> int:
        return self.n_traj // self.num_batches


@dataclass
class ChunkTask:
    initial_amps: np.ndarray
    space: FockSpace
    drift: SseDrift
    cfg: StepConfig
    horizon: float
    model: CurrentModel
    schedule: PhaseSchedule | None
    request: EnsembleRequest
    start: int
    stop: int


def _fkey(kappa: float) -> str:
    return format(kappa, "g")


def _readout_steps(steps: int, stride: int) -> np.ndarray:
    return np.arange(stride, steps + 1, stride)


def _run_chunk(task: ChunkTask) -> dict:
    """Integrate trajectories [start, stop) and return per-batch sums."""
    req = task.request
    space = task.space
    cfg = task.cfg
    bs = req.batch_size
    count = task.stop - task.start
    nb = count // bs
    steps = steps_for_horizon(task.horizon, cfg.dt)
    channels = num_channels(space, task.drift)
    num_modes = space.num_modes
    midpoint = task.model in MIDPOINT_MODELS
    dt = cfg.dt

    blocks = np.empty((count, steps + 1, channels))
    for i in range(count):
        stream = NoiseStream(req.master_seed, task.start + i, channels, dt)
        blocks[i] = stream.block(steps + 1)
    xi_rows = blocks / dt

    amps = np.tile(task.initial_amps, (count, 1))

    def batch_sum(values: np.ndarray) -> np.ndarray:
        return values.reshape((nb, bs) + values.shape[1:]).sum(axis=1)

    sums: dict[str, np.ndarray] = {}
    if req.pair is not None:
        sums["j_mean"] = np.zeros((nb, steps, num_modes))
        sums["jj_raw"] = np.zeros((nb, steps))
        sums["jj_reduced"] = np.zeros((nb, steps))
    bank: dict[float, tuple[np.ndarray, np.ndarray]] = {}
    for kappa in req.filters:
        bank[kappa] = (np.zeros((count, num_modes)), np.zeros((count, num_modes)))
        key = _fkey(kappa)
        sums[f"filt_mean[{key}]"] = np.zeros((nb, steps, num_modes))
        sums[f"filt_sq[{key}]"] = np.zeros((nb, steps, num_modes))
        sums[f"filt_noise_sq[{key}]"] = np.zeros((nb, steps, num_modes))
        if req.pair is not None:
            sums[f"filt_jj[{key}]"] = np.zeros((nb, steps))
            sums[f"filt_jj_noise[{key}]"] = np.zeros((nb, steps))
    readout = _readout_steps(steps, req.readout_stride)
    if req.observables:
        for spec in req.observables:
            sums[f"obs[{spec.name}]"] = np.zeros((nb, len(readout) + 1))
    if req.bins is not None:
        offsets = np.arange(steps) + 0.5 if midpoint else np.arange(steps)
        edges = np.floor(offsets * dt / req.bins.width + 0.5 + 1e-12).astype(int)
        n_bins = int(edges[-1]) + 1
        bin_acc = np.zeros((count, n_bins, num_modes))
        sums["bin_sum"] = np.zeros((nb, n_bins, num_modes))
        sums["bin_sq"] = np.zeros((nb, n_bins, num_modes))
        if req.pair is not None:
            sums["bin_cross"] = np.zeros((nb, n_bins))
    if req.signs is not None:
        sign_steps = _readout_steps(steps, req.signs.stride)
        codes = _pattern_codes(req.signs.patterns, num_modes)
        for kappa in req.filters:
            sums[f"sign_success[{_fkey(kappa)}]"] = np.zeros((nb, len(sign_steps)))
        sums["same_sign_exact"] = np.zeros((nb, len(sign_steps)))
        sums["sign_mean_x"] = np.zeros((nb, len(sign_steps)))

    def record_observables(slot: int) -> None:
        norm_sq = np.maximum(_abs2(amps).sum(axis=-1), 1e-300)
        for spec in req.observables:
            applied = apply_operator_product(space, amps, spec.ops)
            values = np.einsum("bi,bi->b", amps.conj(), applied).real / norm_sq
            sums[f"obs[{spec.name}]"][:, slot] += batch_sum(values)

    if req.observables:
        record_observables(0)

    dropped = np.zeros(count)
    bad_steps = 0
    worst_residual = 0.0
    stepper = step_midpoint if midpoint else step_euler
    active = task.drift
    obs_slot = 1
    sign_slot = 0

    for n in range(steps):
        if task.schedule is not None:
            tau_eval = (n + 0.5) * dt if midpoint else n * dt
            phases = task.schedule.phase_at(tau_eval)
            if phases != active.phases:
                active = active.with_phases(phases)
        xi = xi_rows[:, n, :]
        result = stepper(space, active, amps, xi, cfg)
        if result.rel_change is not None:
            over = result.rel_change > cfg.convergence_tol
            if np.any(over):
                bad_steps += int(np.count_nonzero(over))
                worst_residual = max(worst_residual, float(result.rel_change.max()))
        if midpoint or task.model is CurrentModel.ITO_SAME:
            noise_part = xi[:, :num_modes]
        else:
            prev = xi_rows[:, steps, :] if n == 0 else xi_rows[:, n - 1, :]
            noise_part = prev[:, :num_modes]
        expect = result.expect_x[:, :num_modes]
        currents = expect + noise_part

        if req.pair is not None:
            k1, k2 = req.pair
            sums["j_mean"][:, n, :] = batch_sum(currents)
            raw = currents[:, k1] * currents[:, k2]
            sums["jj_raw"][:, n] = batch_sum(raw)
            sums["jj_reduced"][:, n] = batch_sum(
                raw - noise_part[:, k1] * noise_part[:, k2]
            )
        for kappa in req.filters:
            full, noisy = bank[kappa]
            decay = math.exp(-kappa * dt)
            gain = 1.0 - decay
            full *= decay
            full += gain * currents
            noisy *= decay
            noisy += gain * noise_part
            key = _fkey(kappa)
            sums[f"filt_mean[{key}]"][:, n, :] = batch_sum(full)
            sums[f"filt_sq[{key}]"][:, n, :] = batch_sum(full * full)
            sums[f"filt_noise_sq[{key}]"][:, n, :] = batch_sum(noisy * noisy)
            if req.pair is not None:
                k1, k2 = req.pair
                sums[f"filt_jj[{key}]"][:, n] = batch_sum(full[:, k1] * full[:, k2])
                sums[f"filt_jj_noise[{key}]"][:, n] = batch_sum(
                    noisy[:, k1] * noisy[:, k2]
                )
        if req.bins is not None:
            bin_acc[:, edges[n], :] += dt * currents

        amps = result.amps
        raw_norm = result.raw_norm
        if not np.all(np.isfinite(raw_norm)) or np.any(raw_norm == 0.0):
            raise IntegrationError(
                f"non-finite state norm at step {n} "
                f"(trajectories {task.start}..{task.stop})"
            )
        for k in range(num_modes):
            dropped += dt * tail_population(space, amps, k)
        worst = float(dropped.max())
        if worst > cfg.truncation_budget:
            raise TruncationBudgetError(
                f"cutoff leakage {worst:.3e} exceeded the budget "
                f"{cfg.truncation_budget:.3e} at step {n}; raise the cutoff"
            )

        done = n + 1
        if req.observables and done % req.readout_stride == 0:
            record_observables(obs_slot)
            obs_slot += 1
        if req.signs is not None and done % req.signs.stride == 0:
            for kappa in req.filters:
                full, _ = bank[kappa]
                hit = _match_patterns(full, codes)
                sums[f"sign_success[{_fkey(kappa)}]"][:, sign_slot] += batch_sum(
                    hit.astype(float)
                )
            prob = same_sign_probability(space, amps)
            sums["same_sign_exact"][:, sign_slot] += batch_sum(prob)
            xmeans = np.empty((count, num_modes))
            for k in range(num_modes):
                low = lower_amps(space, amps, k)
                xmeans[:, k] = 2.0 * batch_vdot(amps, low).real
            hit_x = _match_patterns(xmeans, codes)
            sums["sign_mean_x"][:, sign_slot] += batch_sum(hit_x.astype(float))
            sign_slot += 1

    if req.bins is not None:
        sums["bin_sum"] += batch_sum(bin_acc)
        sums["bin_sq"] += batch_sum(bin_acc * bin_acc)
        if req.pair is not None:
            k1, k2 = req.pair
            sums["bin_cross"] += batch_sum(bin_acc[:, :, k1] * bin_acc[:, :, k2])

    return {
        "sums": sums,
        "first_batch": task.start // bs,
        "num_batches": nb,
        "bad_steps": bad_steps,
        "worst_residual": worst_residual,
        "max_dropped": float(dropped.max()),
    }


def _pattern_codes(patterns: tuple[tuple[int, ...], ...], num_modes: int) -> np.ndarray:
    codes = []
    for pattern in patterns:
        if len(pattern) != num_modes or any(s not in (-1, 1) for s in pattern):
            raise ValueError(f"bad sign pattern {pattern!r}")
        codes.append(sum((1 << k) for k, s in enumerate(pattern) if s > 0))
    return np.unique(np.array(codes, dtype=np.int64))


def _match_patterns(values: np.ndarray, codes: np.ndarray) -> np.ndarray:
    bits = (values > 0.0).astype(np.int64)
    weights = (1 << np.arange(values.shape[1], dtype=np.int64))
    return np.isin(bits @ weights, codes)


@dataclass
class EnsembleResult:
    """Per-batch sums plus enough metadata to interpret them."""

    request: EnsembleRequest
    model: CurrentModel
    dt: float
    horizon: float
    taus: np.ndarray
    readout_taus: np.ndarray
    sign_taus: np.ndarray | None
    bin_width: float | None
    sums: dict[str, np.ndarray]
    nonconverged_steps: int
    worst_residual: float
    max_dropped: float

    @property
    def n_traj(self) -> int:
        return self.request.n_traj

    def batch_means(self, key: str) -> np.ndarray:
        return self.sums[key] / self.request.batch_size

    def mean(self, key: str) -> np.ndarray:
        return self.sums[key].sum(axis=0) / self.request.n_traj

    def stderr(self, key: str) -> np.ndarray:
        means = self.batch_means(key)
        return means.std(axis=0, ddof=1) / math.sqrt(self.request.num_batches)

    def mean_and_stderr(self, key: str) -> tuple[np.ndarray, np.ndarray]:
        return self.mean(key), self.stderr(key)


def _auto_chunk(request: EnsembleRequest, space: FockSpace, steps: int, channels: int) -> int:
    bs = request.batch_size
    target = max(1, 2_000_000 // space.dimension)
    noise_cap = max(1, 150_000_000 // (8 * (steps + 1) * channels))
    per_chunk = max(bs, (min(target, noise_cap) // bs) * bs)
    return min(per_chunk, request.n_traj)


def run_ensemble(
    initial: StateVector,
    drift: SseDrift,
    cfg: StepConfig,
    horizon: float,
    request: EnsembleRequest,
    *,
    current_model: CurrentModel | None = None,
    schedule: PhaseSchedule | None = None,
    workers: int = 1,
    chunk_size: int | None = None,
) -> EnsembleResult:
    """Integrate the requested ensemble and gather per-batch statistics."""
    space = initial.space
    model = _resolve_model(drift, current_model)
    steps = steps_for_horizon(horizon, cfg.dt)
    channels = num_channels(space, drift)
    if schedule is not None:
        if schedule.num_modes != space.num_modes:
            raise ValueError("schedule and space disagree on the mode count")
        if schedule.horizon is not None and schedule.horizon < horizon:
            raise ValueError("schedule ends before the integration horizon")
    if request.pair is not None:
        k1, k2 = request.pair
        if not (0 <= k1 < space.num_modes and 0 <= k2 < space.num_modes):
            raise ValueError("current pair indexes a missing mode")
    if request.signs is not None and space.num_modes != 2:
        raise ValueError("sign readout is implemented for two modes")
    if request.bins is not None:
        ratio = request.bins.width / cfg.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) % 2:
            raise ValueError("bin width must be an even multiple of dt")

    bs = request.batch_size
    if chunk_size is None:
        chunk_size = _auto_chunk(request, space, steps, channels)
    chunk_size = max(bs, (chunk_size // bs) * bs)
    tasks = [
        ChunkTask(
            initial_amps=initial.amplitudes,
            space=space,
            drift=drift,
            cfg=cfg,
            horizon=horizon,
            model=model,
            schedule=schedule,
            request=request,
            start=start,
            stop=min(start + chunk_size, request.n_traj),
        )
        for start in range(0, request.n_traj, chunk_size)
    ]

    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_chunk, tasks))
    else:
        outputs = [_run_chunk(task) for task in tasks]

    merged: dict[str, np.ndarray] = {}
    for key, arr in outputs[0]["sums"].items():
        merged[key] = np.zeros((request.num_batches,) + arr.shape[1:])
    bad_steps = 0
    worst_residual = 0.0
    max_dropped = 0.0
    for out in outputs:
        b0 = out["first_batch"]
        b1 = b0 + out["num_batches"]
        for key, arr in out["sums"].items():
            merged[key][b0:b1] = arr
        bad_steps += out["bad_steps"]
        worst_residual = max(worst_residual, out["worst_residual"])
        max_dropped = max(max_dropped, out["max_dropped"])

    if bad_steps:
        warnings.warn(
            f"midpoint iteration stayed above tolerance in {bad_steps} "
            f"trajectory-steps (worst residual {worst_residual:.2e})",
            RuntimeWarning,
            stacklevel=2,
        )

    midpoint = model in MIDPOINT_MODELS
    taus = (np.arange(steps) + 0.5) * cfg.dt if midpoint else np.arange(steps) * cfg.dt
    readout_taus = np.concatenate(
        ([0.0], _readout_steps(steps, request.readout_stride) * cfg.dt)
    )
    sign_taus = (
        _readout_steps(steps, request.signs.stride) * cfg.dt
        if request.signs is not None
        else None
    )
    return EnsembleResult(
        request=request,
        model=model,
        dt=cfg.dt,
        horizon=horizon,
        taus=taus,
        readout_taus=readout_taus,
        sign_taus=sign_taus,
        bin_width=request.bins.width if request.bins is not None else None,
        sums=merged,
        nonconverged_steps=bad_steps,
        worst_residual=worst_residual,
        max_dropped=max_dropped,
    )
