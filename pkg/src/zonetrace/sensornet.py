"""Incremental collaborative sensor network.

A deployment of concentration sensors reports once per minute with 1%
multiplicative noise. When a reading crosses the detection threshold the
protocol runs inference in widening stages: first the single detecting
sensor, then the detecting sensor plus up to two adjacent zones carrying
posterior mass, then the whole deployment. Each stage sees only its own
observation window and starts from the previous stage's posterior,
approximated by smoothed categorical and histogram marginals.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import inference
from .errors import ConfigError, NoDetection
from .inference import (InferenceSettings, ObservationSet, PosteriorChain,
                        PosteriorSummaries, StateSpace)

SENSOR_NOISE_FRACTION = 0.01
SENSOR_NOISE_FLOOR = 1e-6        # g/kg; keeps zero readings honestly uncertain
PRIOR_SMOOTHING = 1e-3           # additive mass on categorical marginals
PRIOR_FLOOR = 1e-6               # density floor on histogram marginals
PRIOR_BINS = 50


@dataclasses.dataclass(frozen=True)
class SensorDeployment:
    """Which zones carry sensors and how their readings behave."""

    zones: Tuple[int, ...]
    detection_threshold: Optional[float] = None   # g/kg; default 10x floor
    cadence_min: float = 1.0
    noise_fraction: float = SENSOR_NOISE_FRACTION
    noise_floor: float = SENSOR_NOISE_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "zones", tuple(sorted(self.zones)))
        if not self.zones:
            raise ConfigError("deployment needs at least one sensor zone")
        if self.cadence_min <= 0:
            raise ConfigError("cadence must be positive")
        if self.noise_floor <= 0:
            raise ConfigError("noise floor must be positive")
        if self.detection_threshold is None:
            object.__setattr__(self, "detection_threshold",
                               10.0 * self.noise_floor)
        if self.detection_threshold <= 0:
            raise ConfigError("detection threshold must be positive")


@dataclasses.dataclass(frozen=True)
class SensorLog:
    """One noisy reading per sensor per cadence minute.

    The same log backs detection and every stage window, the way a physical
    sensor reports each value once.
    """

    zones: Tuple[int, ...]
    times: np.ndarray                      # minutes, shared by all sensors
    values: Dict[int, np.ndarray]          # noisy g/kg
    noise_sd: Dict[int, np.ndarray]        # g/kg
    truth: Dict[int, np.ndarray]           # noise-free g/kg

    def window(self, zones: Sequence[int], t_lo: float,
               t_hi: float) -> ObservationSet:
        """Observations from the given zones in [t_lo, t_hi] inclusive."""
        if t_hi > self.times[-1] + 1e-9:
            raise ConfigError(
                f"window end {t_hi:.1f} min is past the logged horizon "
                f"{self.times[-1]:.1f} min")
        mask = (self.times >= t_lo - 1e-9) & (self.times <= t_hi + 1e-9)
        records = []
        for z in zones:
            if z not in self.values:
                raise ConfigError(f"zone {z} has no sensor in this log")
            for t, v, s in zip(self.times[mask], self.values[z][mask],
                               self.noise_sd[z][mask]):
                records.append((z, float(t), float(v), float(s)))
        return inference.observations_from_records(records)


def record_sensor_log(trace, deployment: SensorDeployment,
                      seed: int) -> SensorLog:
    """Sample every sensor reading for a simulated transient.

    Readings are truth * (1 + fraction * xi) with standard normal xi drawn
    per (zone, minute) in sorted-zone, increasing-time order, so a seed
    pins the whole log. The reported uncertainty is fraction * truth plus
    the additive floor.
    """
    rng = np.random.default_rng(seed)
    horizon = float(trace.times_min[-1])
    n_steps = int(np.floor(horizon / deployment.cadence_min + 1e-9))
    times = deployment.cadence_min * np.arange(1, n_steps + 1)
    values, sds, truth = {}, {}, {}
    for z in deployment.zones:
        clean = trace.at(z, times)
        xi = rng.standard_normal(len(times))
        values[z] = clean * (1.0 + deployment.noise_fraction * xi)
        sds[z] = deployment.noise_fraction * clean + deployment.noise_floor
        truth[z] = clean
    return SensorLog(zones=deployment.zones, times=times, values=values,
                     noise_sd=sds, truth=truth)


@dataclasses.dataclass(frozen=True)
class Detection:
    zone: int
    time_min: float


def detect(log: SensorLog, deployment: SensorDeployment) -> Detection:
    """Earliest minute with a noisy reading at or above threshold.

    Ties within a minute go to the lowest zone id.
    """
    threshold = deployment.detection_threshold
    for i, t in enumerate(log.times):
        for z in log.zones:
            if log.values[z][i] >= threshold:
                return Detection(zone=z, time_min=float(t))
    raise NoDetection(
        f"no sensor reached {threshold:.2e} g/kg within "
        f"{log.times[-1]:.0f} min")


@dataclasses.dataclass(frozen=True)
class Stage:
    """One inference round: sensors, inclusive window, prior source."""

    index: int
    zones: Tuple[int, ...]
    window: Tuple[float, float]
    prior_source: str            # "initial" or "previous"

    def __post_init__(self):
        object.__setattr__(self, "zones", tuple(sorted(self.zones)))
        if self.prior_source not in ("initial", "previous"):
            raise ConfigError("prior_source must be initial or previous")
        if self.window[1] < self.window[0]:
            raise ConfigError("stage window must not be empty")


@dataclasses.dataclass(frozen=True)
class StagePlan:
    detection: Detection
    stages: Tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("plan needs at least one stage")
        first = self.stages[0]
        if first.prior_source == "initial" \
                and first.zones != (self.detection.zone,) \
                and len(self.stages) > 1:
            raise ConfigError("stage 1 must use only the detecting sensor")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if cur.window[0] <= prev.window[1]:
                raise ConfigError("stage windows must be disjoint and "
                                  "increasing")


def plan_stages(detection: Detection, deployment: SensorDeployment,
                adjacency: Dict[int, List[int]],
                stage1_p_zone: Dict[int, float]) -> StagePlan:
    """Full three-stage plan once the stage-1 posterior over zones is known.

    Stage 2 adds at most two zones adjacent to the detecting zone that hold
    sensors and nonzero stage-1 probability, the two highest probabilities
    winning and ties going to the lower zone id.
    """
    t = detection.time_min
    stage1 = Stage(index=1, zones=(detection.zone,), window=(t + 1, t + 1),
                   prior_source="initial")
    candidates = [z for z in adjacency.get(detection.zone, [])
                  if z in deployment.zones
                  and stage1_p_zone.get(z, 0.0) > 0.0]
    joined = sorted(candidates,
                    key=lambda z: (-stage1_p_zone[z], z))[:2]
    stage2 = Stage(index=2, zones=tuple({detection.zone, *joined}),
                   window=(t + 2, t + 4), prior_source="previous")
    stage3 = Stage(index=3, zones=deployment.zones, window=(t + 5, t + 9),
                   prior_source="previous")
    return StagePlan(detection=detection, stages=(stage1, stage2, stage3))


class ChainedPrior:
    """Stage k-1 posterior approximated by independent marginals.

    Source count and zone become smoothed categorical distributions; every
    continuous normalized coordinate becomes a floored piecewise-constant
    density on PRIOR_BINS bins. Smoothing and the floor keep the support
    full, so no scenario is ruled out by the approximation alone.
    """

    def __init__(self, chain: PosteriorChain, space: StateSpace,
                 smoothing: float = PRIOR_SMOOTHING,
                 floor: float = PRIOR_FLOOR):
        kept = chain.kept
        if kept.shape[0] == 0:
            raise ConfigError("cannot chain a prior from an empty chain")
        self.space = space
        counts = np.zeros(space.n_sources_max)
        zones = np.zeros(len(space.zone_ids))
        zone_pos = {z: i for i, z in enumerate(space.zone_ids)}
        for phi in kept:
            cand = space.decode(phi)
            counts[cand.a - 1] += 1
            zones[zone_pos[cand.b]] += 1
        counts = counts / counts.sum() + smoothing
        zones = zones / zones.sum() + smoothing
        self.log_p_count = np.log(counts / counts.sum())
        self.log_p_zone = np.log(zones / zones.sum())
        self._zone_pos = zone_pos
        cont = kept[:, 2:]
        edges = np.linspace(0.0, 1.0, PRIOR_BINS + 1)
        densities = np.empty((cont.shape[1], PRIOR_BINS))
        for j in range(cont.shape[1]):
            dens, _ = np.histogram(cont[:, j], bins=edges, density=True)
            dens = np.maximum(dens, floor)
            densities[j] = dens / (dens.sum() / PRIOR_BINS)
        self.log_density = np.log(densities)

    def __call__(self, candidate, phi: np.ndarray) -> float:
        bins = np.minimum((phi[2:] * PRIOR_BINS).astype(int), PRIOR_BINS - 1)
        cols = np.arange(len(bins))
        return (float(self.log_p_count[candidate.a - 1])
                + float(self.log_p_zone[self._zone_pos[candidate.b]])
                + float(self.log_density[cols, bins].sum()))


@dataclasses.dataclass
class StageResult:
    stage: Stage
    observations: ObservationSet
    chain: PosteriorChain
    summaries: PosteriorSummaries


@dataclasses.dataclass
class StagedPosterior:
    plan: StagePlan
    results: List[StageResult]

    def final(self) -> StageResult:
        return self.results[-1]


def run_staged_inference(plan: StagePlan, log: SensorLog, space: StateSpace,
                         predictor: Callable, seed: int,
                         settings: InferenceSettings = InferenceSettings(),
                         carry: Optional[StageResult] = None
                         ) -> StagedPosterior:
    """Execute the plan's stages sequentially with posterior-as-prior.

    Stage k samples with seed + (index - 1), so a degenerate one-stage plan
    reproduces a plain inference run exactly. carry supplies the previous
    result when the plan continues an earlier call.
    """
    results: List[StageResult] = []
    prev = carry
    for stage in plan.stages:
        obs = log.window(stage.zones, *stage.window)
        if obs.peak() <= 0.0:
            raise NoDetection(
                f"stage {stage.index} window holds only zero readings")
        if stage.prior_source == "previous":
            if prev is None:
                raise ConfigError(
                    f"stage {stage.index} chains from a previous posterior "
                    f"but none is available")
            prior_fn = ChainedPrior(prev.chain, space)
            target = inference.make_log_posterior(space, obs, predictor,
                                                  log_prior_fn=prior_fn)
            init = prev.chain.samples[-1]
        else:
            prior_fn = None
            target = inference.make_log_posterior(space, obs, predictor,
                                                  log_prior_fn=prior_fn)
            init = inference.probe_initial_state(space, obs, target)
        chain = inference.mh_sample(target, init, settings.total,
                                    settings.burn_in, settings.step_scale,
                                    seed + stage.index - 1)
        summaries = inference.posterior_summaries(chain, space)
        result = StageResult(stage=stage, observations=obs, chain=chain,
                             summaries=summaries)
        results.append(result)
        prev = result
    return StagedPosterior(plan=plan, results=results)


def dynamic_protocol(trace, deployment: SensorDeployment, space: StateSpace,
                     predictor: Callable, seed: int,
                     settings: InferenceSettings = InferenceSettings(),
                     adjacency: Optional[Dict[int, List[int]]] = None
                     ) -> StagedPosterior:
    """Detect, then run the three widening stages against one sensor log."""
    log = record_sensor_log(trace, deployment, seed)
    detection = detect(log, deployment)
    stage1_plan = StagePlan(
        detection=detection,
        stages=(Stage(index=1, zones=(detection.zone,),
                      window=(detection.time_min + 1, detection.time_min + 1),
                      prior_source="initial"),))
    first = run_staged_inference(stage1_plan, log, space, predictor, seed,
                                 settings)
    plan = plan_stages(detection, deployment,
                       adjacency if adjacency is not None
                       else space.net.adjacency(),
                       first.results[0].summaries.p_zone)
    rest = StagePlan(detection=detection, stages=plan.stages[1:])
    tail = run_staged_inference(rest, log, space, predictor, seed, settings,
                                carry=first.results[0])
    return StagedPosterior(plan=plan,
                           results=first.results + tail.results)
