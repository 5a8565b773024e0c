"""Gaussian-process surrogate of the transient transport simulator.

One surrogate covers one (source count, source zone, sensed zone) combination.
Inputs are normalized to the unit cube: source coordinates by the zone
footprint, release rate and start time by their declared ranges. Outputs are
zone concentrations at fixed knot times measured from activation, split into
an early dense stage and a late sparse stage.

The regression core is universal kriging with a linear mean h = [1, theta],
a squared-exponential correlation with per-dimension precisions lambda, and
generalized-least-squares estimates of the mean coefficients and the
between-output covariance. The precisions maximize the profiled posterior

    -(q/2) log|A| - (q/2) log|H' A^-1 H| - ((n - m)/2) log|(n - m) Sigma|

over a log-space box. Both stages share the design and the stage-one
precisions. Transient values at arbitrary times come from a small kriging
pass over the knot predictions with a per-stage squared-exponential time
kernel whose marginal deviations follow the fitted output covariance; mean
weights are normalized to sum to one so a level signal reconstructs level.
"""

from __future__ import annotations

import dataclasses
import json
import math
import pathlib
import warnings
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from . import boxopt
from .errors import ConfigError, IllConditioned, MissingArtifact, OutOfRange

KNOTS_STAGE1 = (1.0, 2.0, 3.0, 4.0, 5.0)     # min after activation
KNOTS_STAGE2 = (6.0, 10.0, 14.0, 18.0, 22.0)
JITTER = 1e-8
# Precisions above ~12 in unit coordinates decorrelate neighboring design
# points at feasible design sizes, leaving the surrogate no predictive power;
# the search box caps them there while leaving near-flat directions free.
LAMBDA_LOG_BOUNDS = (math.log(1e-3), math.log(12.0))
CV_TARGET = 0.05          # correlation-variance stopping level for design growth
SIGMA_REL_FLOOR = 1e-6    # floor on knot deviations, relative to the largest
RECON_JITTER = 1e-10      # relative jitter on the reconstruction kernel


def correlation(theta_a: np.ndarray, theta_b: np.ndarray,
                lam: np.ndarray) -> np.ndarray:
    """exp(-sum_d lam_d (a_d - b_d)^2) for all row pairs."""
    a = np.atleast_2d(np.asarray(theta_a, dtype=float))
    b = np.atleast_2d(np.asarray(theta_b, dtype=float))
    lam = np.asarray(lam, dtype=float)
    diff = a[:, None, :] - b[None, :, :]
    return np.exp(-np.einsum("ijd,d->ij", diff * diff, lam))


def regressors(theta: np.ndarray) -> np.ndarray:
    """Linear mean basis h(theta) = [1, theta] as rows."""
    t = np.atleast_2d(np.asarray(theta, dtype=float))
    return np.hstack([np.ones((t.shape[0], 1)), t])


@dataclasses.dataclass(frozen=True)
class GlsFit:
    """Fitted kriging state for one design and one block of outputs."""

    design: np.ndarray        # (n, d), normalized inputs
    lam: np.ndarray           # (d,)
    outputs: np.ndarray       # (n, q)
    jitter: float
    chol: np.ndarray          # Cholesky factor of A, lower triangular
    beta: np.ndarray          # (m, q) mean coefficients
    alpha: np.ndarray         # (n, q) = A^-1 (D - H beta)
    ainv_h: np.ndarray        # (n, m) = A^-1 H
    m_chol: np.ndarray        # Cholesky of H' A^-1 H, lower
    sigma: np.ndarray         # (q, q) output covariance estimate

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def m(self) -> int:
        return self.design.shape[1] + 1

    @property
    def q(self) -> int:
        return self.outputs.shape[1]

    def predict(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior means (k, q) and correlation variances (k,).

        The correlation variance is the unit-scale predictive variance
        1 - r' A^-1 r + u' (H' A^-1 H)^-1 u, clamped at zero; multiply by
        sigma to get output-specific variances.
        """
        stars = np.atleast_2d(np.asarray(theta, dtype=float))
        if np.any(stars < -1e-12) or np.any(stars > 1.0 + 1e-12):
            warnings.warn("prediction point outside the unit box; "
                          "the surrogate is extrapolating", stacklevel=2)
        r = correlation(stars, self.design, self.lam)          # (k, n)
        # The stabilizing jitter is part of the observed-process covariance,
        # so a query that lands exactly on a design row carries it in the
        # cross term too; this keeps design outputs exactly reproducible.
        exact = (stars[:, None, :] == self.design[None, :, :]).all(axis=2)
        if exact.any():
            r = r + self.jitter * exact
        h = regressors(stars)                                  # (k, m)
        mean = h @ self.beta + r @ self.alpha
        ainv_r = scipy.linalg.cho_solve((self.chol, True), r.T)    # (n, k)
        quad_r = np.einsum("kn,nk->k", r, ainv_r)
        u = h.T - self.ainv_h.T @ r.T                          # (m, k)
        minv_u = scipy.linalg.cho_solve((self.m_chol, True), u)
        quad_u = np.einsum("mk,mk->k", u, minv_u)
        cvar = np.maximum(1.0 - quad_r + quad_u, 0.0)
        return mean, cvar


def fit_gls(design: np.ndarray, outputs: np.ndarray, lam: np.ndarray,
            jitter: float = JITTER) -> GlsFit:
    """Generalized-least-squares kriging fit with fixed precisions."""
    design = np.asarray(design, dtype=float)
    outputs = np.asarray(outputs, dtype=float)
    if outputs.ndim == 1:
        outputs = outputs[:, None]
    n, d = design.shape
    m = d + 1
    if n <= m:
        raise ConfigError(
            f"need more design points ({n}) than mean coefficients ({m})")
    a = correlation(design, design, lam)
    a[np.diag_indices_from(a)] += jitter
    try:
        chol = scipy.linalg.cholesky(a, lower=True)
    except scipy.linalg.LinAlgError as err:
        raise IllConditioned(
            f"correlation matrix is not positive definite: {err}") from err
    h = regressors(design)
    ainv_h = scipy.linalg.cho_solve((chol, True), h)
    mmat = h.T @ ainv_h
    try:
        m_chol = scipy.linalg.cholesky(mmat, lower=True)
    except scipy.linalg.LinAlgError as err:
        raise IllConditioned(
            f"regression normal matrix is not positive definite: {err}") from err
    beta = scipy.linalg.cho_solve((m_chol, True), ainv_h.T @ outputs)
    resid = outputs - h @ beta
    alpha = scipy.linalg.cho_solve((chol, True), resid)
    sigma = resid.T @ alpha / (n - m)
    return GlsFit(design=design, lam=np.asarray(lam, dtype=float),
                  outputs=outputs, jitter=jitter, chol=chol, beta=beta,
                  alpha=alpha, ainv_h=ainv_h, m_chol=m_chol, sigma=sigma)


def lambda_log_posterior(design: np.ndarray, outputs: np.ndarray,
                         lam: np.ndarray, jitter: float = JITTER) -> float:
    """Profiled log posterior of the precisions (larger is better).

    Returns -inf when the proposed precisions make the system numerically
    singular, which lets optimizers treat such points as simply bad.
    """
    design = np.asarray(design, dtype=float)
    outputs = np.asarray(outputs, dtype=float)
    if outputs.ndim == 1:
        outputs = outputs[:, None]
    n, d = design.shape
    m = d + 1
    q = outputs.shape[1]
    try:
        fit = fit_gls(design, outputs, lam, jitter)
    except IllConditioned:
        return -np.inf
    logdet_a = 2.0 * float(np.sum(np.log(np.diag(fit.chol))))
    logdet_m = 2.0 * float(np.sum(np.log(np.diag(fit.m_chol))))
    sign, logdet_s = np.linalg.slogdet((n - m) * fit.sigma)
    if sign <= 0:
        return -np.inf
    return (-0.5 * q * logdet_a - 0.5 * q * logdet_m
            - 0.5 * (n - m) * logdet_s)


def estimate_lambda_mpe(design: np.ndarray, outputs: np.ndarray,
                        rng: Optional[np.random.Generator] = None,
                        restarts: int = 10,
                        jitter: float = JITTER) -> np.ndarray:
    """Precisions maximizing the profiled posterior over a log-space box."""
    design = np.asarray(design, dtype=float)
    d = design.shape[1]
    bounds = np.tile(LAMBDA_LOG_BOUNDS, (d, 1))

    def objective(log_lam: np.ndarray) -> float:
        return lambda_log_posterior(design, outputs, np.exp(log_lam), jitter)

    result = boxopt.maximize_in_box(
        objective, bounds, x0=np.zeros(d), restarts=restarts,
        rng=rng or np.random.default_rng(0))
    return np.exp(result.x)


def select_next_design(fits: Sequence[GlsFit],
                       pool: np.ndarray) -> Tuple[int, float]:
    """Pick the pool point with the worst coverage across fits.

    Returns (pool index, score) where score is the largest correlation
    variance any fit assigns to that point.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    worst = np.zeros(pool.shape[0])
    for fit in fits:
        _, cvar = fit.predict(pool)
        np.maximum(worst, cvar, out=worst)
    idx = int(np.argmax(worst))
    return idx, float(worst[idx])


def _standardize(columns: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-wise (values - mean) / scale with degenerate columns left as 0."""
    means = columns.mean(axis=0)
    scales = columns.std(axis=0)
    scales = np.where(scales > 1e-300, scales, 1.0)
    return (columns - means) / scales, means, scales


def _knot_sigmas(fit: GlsFit, scales: np.ndarray) -> np.ndarray:
    """Physical-scale posterior deviations per knot, floored to stay usable."""
    raw = np.sqrt(np.maximum(np.diag(fit.sigma), 0.0)) * scales
    top = float(raw.max())
    if top <= 0.0:
        return np.ones_like(raw)
    return np.maximum(raw, SIGMA_REL_FLOOR * top)


@dataclasses.dataclass(frozen=True)
class StagePack:
    """One stage of knot outputs: fit in standardized space plus the maps
    back to physical units and the deviations driving reconstruction."""

    knots: np.ndarray       # (q,) minutes after activation
    fit: GlsFit
    means: np.ndarray       # (q,) physical offsets
    scales: np.ndarray      # (q,) physical scales
    sigmas: np.ndarray      # (q,) floored physical deviations

    @property
    def spacing(self) -> float:
        return float(self.knots[1] - self.knots[0])

    @property
    def lengthscale(self) -> float:
        """Time-kernel lengthscale: twice the local knot spacing."""
        return 2.0 * self.spacing

    def predict_knots(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        mean_std, cvar = self.fit.predict(theta)
        return self.means + self.scales * mean_std, cvar


def fit_stage(design: np.ndarray, knots: Sequence[float],
              outputs: np.ndarray, lam: np.ndarray,
              jitter: float = JITTER) -> StagePack:
    standardized, means, scales = _standardize(np.asarray(outputs, dtype=float))
    fit = fit_gls(design, standardized, lam, jitter)
    return StagePack(knots=np.asarray(knots, dtype=float), fit=fit,
                     means=means, scales=scales,
                     sigmas=_knot_sigmas(fit, scales))


def reconstruct_series(t_rel: np.ndarray, knots: np.ndarray,
                       knot_means: np.ndarray, knot_sigmas: np.ndarray,
                       lengthscale: float) -> Tuple[np.ndarray, np.ndarray]:
    """Kriging pass over knot values for one stage.

    t_rel values must lie inside the stage's reach; callers handle stage
    assignment, the pre-knot ramp, and the tail clamp. Returns means and
    variances at the requested times.
    """
    t = np.asarray(t_rel, dtype=float)
    sig_t = np.interp(t, knots, knot_sigmas)
    cov = np.outer(knot_sigmas, knot_sigmas) * np.exp(
        -((knots[:, None] - knots[None, :]) / lengthscale) ** 2)
    cov[np.diag_indices_from(cov)] += RECON_JITTER * float(
        np.max(knot_sigmas)) ** 2
    cross = (sig_t[:, None] * knot_sigmas[None, :]
             * np.exp(-((t[:, None] - knots[None, :]) / lengthscale) ** 2))
    chol = scipy.linalg.cholesky(cov, lower=True)
    weights = scipy.linalg.cho_solve((chol, True), cross.T)      # (q, k)
    sums = weights.sum(axis=0)
    safe = np.abs(sums) > 1e-12
    norm = np.where(safe, sums, 1.0)
    mean = (weights / norm).T @ knot_means
    var = np.maximum(sig_t ** 2 - np.einsum("kq,qk->k", cross, weights), 0.0)
    return mean, var


@dataclasses.dataclass(frozen=True)
class ZoneEmulator:
    """Surrogate for one (source count, source zone, sensed zone) combo."""

    source_count: int
    source_zone: int
    sensed_zone: int
    design: np.ndarray         # (n, d), normalized
    lam: np.ndarray            # (d,), shared by both stages
    stage1: StagePack
    stage2: StagePack

    @property
    def dim(self) -> int:
        return self.design.shape[1]

    @property
    def t_max(self) -> float:
        """Latest supported time after activation (last knot + one spacing)."""
        return float(self.stage2.knots[-1] + self.stage2.spacing)

    def knot_predictions(self, theta: np.ndarray
                         ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Posterior knot means (k, 10), and correlation variances per stage."""
        m1, c1 = self.stage1.predict_knots(theta)
        m2, c2 = self.stage2.predict_knots(theta)
        return np.hstack([m1, m2]), c1, c2

    def predict_series(self, theta: np.ndarray,
                       t_rel: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Concentration mean and variance at times measured from activation.

        Times at or before activation return zero. Times before the first
        knot ramp linearly from zero to the first-knot value. Times beyond
        the last knot plus one late-stage spacing are out of range; up to
        that point the value clamps to the last knot's reconstruction.
        """
        theta = np.asarray(theta, dtype=float).reshape(-1)
        t = np.asarray(t_rel, dtype=float)
        if np.any(t > self.t_max):
            raise OutOfRange(
                f"requested time {t.max():.2f} min after activation exceeds "
                f"the supported window of {self.t_max:.2f} min")
        knot_means, _, _ = self.knot_predictions(theta)
        knot_means = knot_means[0]
        mean = np.zeros_like(t)
        var = np.zeros_like(t)
        first = float(self.stage1.knots[0])
        split = float(self.stage1.knots[-1])
        last = float(self.stage2.knots[-1])

        q1 = len(self.stage1.knots)
        stages = (
            (self.stage1, knot_means[:q1], (t >= first) & (t <= split)),
            (self.stage2, knot_means[q1:], (t > split)),
        )
        for pack, means_k, mask in stages:
            if not np.any(mask):
                continue
            t_eval = np.minimum(t[mask], last)
            m, v = reconstruct_series(
                t_eval, pack.knots, means_k, pack.sigmas, pack.lengthscale)
            mean[mask] = m
            var[mask] = v

        ramp = (t > 0.0) & (t < first)
        if np.any(ramp):
            m0, v0 = reconstruct_series(
                np.array([first]), self.stage1.knots, knot_means[:q1],
                self.stage1.sigmas, self.stage1.lengthscale)
            frac = t[ramp] / first
            mean[ramp] = frac * m0[0]
            var[ramp] = frac ** 2 * v0[0]
        return mean, var


def reconstruct_transient(model: ZoneEmulator, theta: np.ndarray,
                          t_rel: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Transient mean and variance strictly inside the supported window.

    Unlike predict_series this refuses times before the first knot instead
    of ramping, so it exposes the raw two-stage reconstruction.
    """
    t = np.atleast_1d(np.asarray(t_rel, dtype=float))
    first = float(model.stage1.knots[0])
    if np.any(t < first) or np.any(t > model.t_max):
        raise OutOfRange(
            f"time must lie within [{first:.1f}, {model.t_max:.1f}] min "
            "after activation")
    return model.predict_series(np.asarray(theta, dtype=float), t)


def build_zone_emulator(source_count: int, source_zone: int, sensed_zone: int,
                        design: np.ndarray, lam: np.ndarray,
                        outputs_stage1: np.ndarray,
                        outputs_stage2: np.ndarray,
                        jitter: float = JITTER) -> ZoneEmulator:
    return ZoneEmulator(
        source_count=source_count, source_zone=source_zone,
        sensed_zone=sensed_zone,
        design=np.asarray(design, dtype=float),
        lam=np.asarray(lam, dtype=float),
        stage1=fit_stage(design, KNOTS_STAGE1, outputs_stage1, lam, jitter),
        stage2=fit_stage(design, KNOTS_STAGE2, outputs_stage2, lam, jitter))


def _model_filename(a: int, b: int, c: int) -> str:
    return f"em_a{a}_b{b}_c{c}.npz"


def save_zone_emulator(directory: pathlib.Path, model: ZoneEmulator) -> pathlib.Path:
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / _model_filename(
        model.source_count, model.source_zone, model.sensed_zone)
    payload = {
        "meta": np.array([model.source_count, model.source_zone,
                          model.sensed_zone], dtype=np.int64),
        "design": model.design,
        "lam": model.lam,
    }
    for tag, pack in (("s1", model.stage1), ("s2", model.stage2)):
        payload[f"{tag}_knots"] = pack.knots
        payload[f"{tag}_outputs"] = pack.fit.outputs
        payload[f"{tag}_means"] = pack.means
        payload[f"{tag}_scales"] = pack.scales
        payload[f"{tag}_sigmas"] = pack.sigmas
        payload[f"{tag}_chol"] = pack.fit.chol
        payload[f"{tag}_beta"] = pack.fit.beta
        payload[f"{tag}_alpha"] = pack.fit.alpha
        payload[f"{tag}_ainv_h"] = pack.fit.ainv_h
        payload[f"{tag}_m_chol"] = pack.fit.m_chol
        payload[f"{tag}_sigma"] = pack.fit.sigma
        payload[f"{tag}_jitter"] = np.array([pack.fit.jitter])
    np.savez(path, **payload)
    return path


def load_zone_emulator(directory: pathlib.Path, source_count: int,
                       source_zone: int, sensed_zone: int) -> ZoneEmulator:
    path = pathlib.Path(directory) / _model_filename(
        source_count, source_zone, sensed_zone)
    if not path.exists():
        raise MissingArtifact(
            f"no stored surrogate for sources={source_count} "
            f"zone={source_zone} sensor={sensed_zone}",
            path=str(path),
            hint="run the training step for this building first")
    with np.load(path) as data:
        design = data["design"]
        lam = data["lam"]
        packs = {}
        for tag in ("s1", "s2"):
            fit = GlsFit(
                design=design, lam=lam,
                outputs=data[f"{tag}_outputs"],
                jitter=float(data[f"{tag}_jitter"][0]),
                chol=data[f"{tag}_chol"],
                beta=data[f"{tag}_beta"],
                alpha=data[f"{tag}_alpha"],
                ainv_h=data[f"{tag}_ainv_h"],
                m_chol=data[f"{tag}_m_chol"],
                sigma=data[f"{tag}_sigma"])
            packs[tag] = StagePack(
                knots=data[f"{tag}_knots"], fit=fit,
                means=data[f"{tag}_means"],
                scales=data[f"{tag}_scales"],
                sigmas=data[f"{tag}_sigmas"])
    return ZoneEmulator(source_count=source_count, source_zone=source_zone,
                        sensed_zone=sensed_zone, design=design, lam=lam,
                        stage1=packs["s1"], stage2=packs["s2"])


@dataclasses.dataclass
class EmulatorFamily:
    """All sensed-zone surrogates sharing one (count, zone) design."""

    source_count: int
    source_zone: int
    models: Dict[int, ZoneEmulator]

    @property
    def design(self) -> np.ndarray:
        return next(iter(self.models.values())).design

    def zone_ids(self) -> List[int]:
        return sorted(self.models)


def save_family(directory: pathlib.Path, family: EmulatorFamily) -> List[str]:
    return [save_zone_emulator(directory, model).name
            for model in family.models.values()]


def load_family(directory: pathlib.Path, source_count: int, source_zone: int,
                zone_ids: Sequence[int]) -> EmulatorFamily:
    models = {c: load_zone_emulator(directory, source_count, source_zone, c)
              for c in zone_ids}
    return EmulatorFamily(source_count=source_count, source_zone=source_zone,
                          models=models)


def write_manifest(directory: pathlib.Path, manifest: Dict) -> pathlib.Path:
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory: pathlib.Path) -> Dict:
    path = pathlib.Path(directory) / "manifest.json"
    if not path.exists():
        raise MissingArtifact("no surrogate manifest found", path=str(path),
                              hint="train surrogates before loading them")
    return json.loads(path.read_text())
