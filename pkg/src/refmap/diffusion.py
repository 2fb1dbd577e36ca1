"""Material-coordinate scheduling, the noisy forward process, and the
annealed stochastic sampler recovering illumination from raw maps.

The schedule drives every object's material linearly from the shared
smooth-metal state (1, 0, 1) at step 0 to its endpoint at step K, where K
grows with the average squared distance of the endpoints from that state.
The forward process renders each scheduled material under one environment
and adds i.i.d. Gaussian pixel noise from counter-keyed streams.

Inversion works in SH coefficient space: rendering is linear in radiance,
so for fixed materials the data term of the joint negative log-likelihood
is a clamped convex quadratic with a closed-form gradient. The sampler
anneals independent chains along the schedule from near-mirror materials
to the true endpoints, taking exact line-search gradient steps at each
step and adding jitter that shrinks as the anneal proceeds; the last
steps descend the true likelihood, so the returned NLL reflects the data.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import envmap as em
from .brdf import MIRROR, ReflectanceParams, distance_to_mirror
from .errors import ConfigError, InsufficientDataError
from .render import (
    ReflectanceMap,
    binned_weight_matrices,
    cell_sample_normals,
    disk_normals,
    grid_footprint_sq,
    weight_matrices,
)
from .sh import ShCoefficients, sh_basis

DEFAULT_SIGMA = 0.1
DEFAULT_DELTA = 0.125
DEFAULT_K_MAX = 150


# ---------------------------------------------------------------------------
# schedule


def compute_K(psis: list[ReflectanceParams], k_max: int = DEFAULT_K_MAX) -> int:
    """Schedule length: k_max times the mean squared mirror distance.

    Rounded to nearest and clamped to [1, k_max]; a mirror-only scene still
    gets one step.
    """
    if not psis:
        raise ValueError("need at least one material")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    mean_dist = sum(distance_to_mirror(p) for p in psis) / len(psis)
    k = int(math.floor(k_max * mean_dist + 0.5))
    return min(max(k, 1), k_max)


def schedule_psi(endpoint: ReflectanceParams, k: int, total: int) -> ReflectanceParams:
    """Exact convex combination (k/K) endpoint + (1 - k/K) mirror."""
    if not 0 <= k <= total:
        raise ValueError(f"step {k} outside [0, {total}]")
    if k == 0:
        return MIRROR
    if k == total:
        return endpoint
    t = k / total
    mixed = t * endpoint.as_array() + (1.0 - t) * MIRROR.as_array()
    return ReflectanceParams.from_array(np.clip(mixed, 0.0, 1.0))


@dataclass
class Schedule:
    """Per-object material table over steps 0..K."""

    k_total: int
    k_max: int
    endpoints: list[ReflectanceParams]
    table: list[list[ReflectanceParams]]  # [m][k]

    @property
    def n_objects(self) -> int:
        return len(self.endpoints)


def build_schedule(psis: list[ReflectanceParams], k_max: int = DEFAULT_K_MAX) -> Schedule:
    k_total = compute_K(psis, k_max)
    table = [[schedule_psi(p, k, k_total) for k in range(k_total + 1)] for p in psis]
    return Schedule(k_total=k_total, k_max=k_max, endpoints=list(psis), table=table)


# ---------------------------------------------------------------------------
# forward process


@dataclass
class ForwardTrajectory:
    """Noisy rendered maps for every object and schedule step."""

    maps: list[list[ReflectanceMap]]  # [m][k]
    schedule: Schedule
    sigma: float
    seed: int


def forward_sample(
    env: em.EnvironmentMap,
    psis: list[ReflectanceParams],
    sigma: float = DEFAULT_SIGMA,
    seed: int = 0,
    resolution: int = 32,
    k_max: int = DEFAULT_K_MAX,
    diffuse_model: str = "burley",
) -> ForwardTrajectory:
    """Render every (object, step) map and add keyed Gaussian noise.

    The noise stream is keyed on (seed, m, k), so any slice can be
    regenerated in isolation and results do not depend on evaluation order.
    """
    from .render import render_reflectance_map
    from .rng import keyed_rng

    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    schedule = build_schedule(psis, k_max)
    white = np.ones(3)
    maps: list[list[ReflectanceMap]] = []
    for m in range(schedule.n_objects):
        row = []
        for k in range(schedule.k_total + 1):
            clean = render_reflectance_map(
                schedule.table[m][k], white, env, resolution, diffuse_model
            )
            values = clean.values
            if sigma > 0.0:
                noise = keyed_rng(seed, m, k).normal(0.0, sigma, size=values.shape)
                values = values + noise
                values[~clean.mask] = 0.0
            row.append(ReflectanceMap(values=values, mask=clean.mask))
        maps.append(row)
    return ForwardTrajectory(maps=maps, schedule=schedule, sigma=sigma, seed=seed)


# ---------------------------------------------------------------------------
# joint likelihood


class JointLikelihood:
    """Negative log-likelihood of SH illumination given raw maps.

    Precomputes, per object, the quadrature weight matrix turning grid
    radiance into predicted map values, and the SH basis on the grid. The
    data term is || W max(Y c, 0) - obs ||^2 / (2 sigma^2) summed over
    objects, plus the Gaussian normalization constant per masked value.

    ``cell_subdiv`` > 1 averages predictions over a sub-grid of each map
    cell instead of its center, matching observations that were binned from
    an image ``cell_subdiv`` times the map resolution.
    """

    def __init__(
        self,
        observations: list[ReflectanceMap],
        psis: list[ReflectanceParams],
        sigma: float = DEFAULT_SIGMA,
        degree: int = 8,
        env_height: int = 24,
        diffuse_model: str = "burley",
        cell_subdiv: int = 1,
    ):
        if not observations:
            raise ValueError("need at least one observation")
        if len(observations) != len(psis):
            raise ValueError("one material per observation required")
        if sigma <= 0:
            raise ValueError("sigma must be positive for a likelihood")
        if cell_subdiv < 1:
            raise ValueError("cell_subdiv must be >= 1")
        self.psis = list(psis)
        self.sigma = float(sigma)
        self.degree = int(degree)
        self.env_height = int(env_height)
        self.diffuse_model = diffuse_model
        self.cell_subdiv = int(cell_subdiv)

        h, w = env_height, 2 * env_height
        self.dirs = em.grid_directions(h, w).reshape(-1, 3)
        self.omega = em.solid_angles(h, w).reshape(-1)
        theta, phi = em.directions_to_angles(self.dirs)
        self.basis = sh_basis(degree, theta, phi)  # (D, n)
        self.footprint_sq = grid_footprint_sq(h)

        self.normals = []
        self.obs = []
        self._sub = []  # per object (sub_normals, inside) when cell_subdiv > 1
        for rmap in observations:
            size = rmap.size
            cell_normals, disk = disk_normals(size)
            valid = rmap.mask & disk
            self.normals.append(cell_normals[valid])
            self.obs.append(rmap.values[valid])
            if self.cell_subdiv > 1:
                sub_normals, inside = cell_sample_normals(size, self.cell_subdiv)
                self._sub.append((sub_normals[valid], inside[valid]))
            else:
                self._sub.append(None)
        self.n_values = int(sum(o.size for o in self.obs))
        self.const_term = 0.5 * self.n_values * math.log(2.0 * math.pi * self.sigma**2)

    @property
    def n_coeffs(self) -> int:
        return (self.degree + 1) ** 2

    def weights_for(self, psis: list[ReflectanceParams]) -> list[np.ndarray]:
        """Per-object (P, D) map from grid radiance to predicted values."""
        out = []
        for psi, normals, sub in zip(psis, self.normals, self._sub):
            if sub is None:
                a_w, c_w = weight_matrices(
                    psi, normals, self.dirs, self.omega, self.diffuse_model, self.footprint_sq
                )
            else:
                a_w, c_w = binned_weight_matrices(
                    psi, sub[0], sub[1], self.dirs, self.omega, self.diffuse_model,
                    self.footprint_sq,
                )
            out.append(a_w + c_w)  # white albedo during inversion
        return out

    def _check(self, coeffs: ShCoefficients) -> np.ndarray:
        if coeffs.degree != self.degree:
            raise ValueError(f"candidate degree {coeffs.degree} != configured {self.degree}")
        return coeffs.coeffs

    def nll(self, coeffs: ShCoefficients, weights: list[np.ndarray] | None = None) -> float:
        c = self._check(coeffs)
        if weights is None:
            weights = self.weights_for(self.psis)
        y = np.clip(c @ self.basis.T, 0.0, None)  # (3, D)
        data = 0.0
        for w_m, obs in zip(weights, self.obs):
            r = y @ w_m.T - obs.T  # (3, P)
            data += float(np.sum(r * r))
        return data / (2.0 * self.sigma**2) + self.const_term

    def nll_and_grad(
        self, coeffs: ShCoefficients, weights: list[np.ndarray] | None = None
    ) -> tuple[float, np.ndarray]:
        """NLL and its (3, n) gradient; exact on the active clamp pattern."""
        c = self._check(coeffs)
        if weights is None:
            weights = self.weights_for(self.psis)
        y_lin = c @ self.basis.T  # (3, D)
        active = y_lin > 0.0
        y = np.where(active, y_lin, 0.0)
        data = 0.0
        grad_y = np.zeros_like(y)
        for w_m, obs in zip(weights, self.obs):
            r = y @ w_m.T - obs.T
            data += float(np.sum(r * r))
            grad_y += r @ w_m
        grad = ((grad_y * active) @ self.basis) / self.sigma**2
        return data / (2.0 * self.sigma**2) + self.const_term, grad


def joint_nll(
    candidate: ShCoefficients,
    observations: list[ReflectanceMap],
    psis: list[ReflectanceParams],
    sigma: float = DEFAULT_SIGMA,
    env_height: int = 24,
    diffuse_model: str = "burley",
    cell_subdiv: int = 1,
) -> float:
    """One-shot joint NLL at the endpoint materials."""
    lik = JointLikelihood(
        observations, psis, sigma, candidate.degree, env_height, diffuse_model,
        cell_subdiv,
    )
    return lik.nll(candidate)


# ---------------------------------------------------------------------------
# baseline reflectance estimator

METALLIC_GRID = (0.0, 1.0)
ROUGHNESS_GRID = tuple(np.round(np.arange(1, 21) * 0.05, 2))
SPECULAR_GRID = (0.0, 0.5, 1.0)


def estimate_reflectance(
    obs: ReflectanceMap,
    env_guess: ShCoefficients | None = None,
    env_height: int = 16,
    min_valid: int = 32,
    diffuse_model: str = "burley",
    cell_subdiv: int = 1,
) -> ReflectanceParams:
    """Grid search for the material whose render best explains one map.

    With ``env_guess`` the candidate illumination is fixed; without it each
    candidate material gets the best-fitting degree-2 illumination by ridge
    least squares. Residual ties go to the largest roughness (the smoother
    explanation). ``cell_subdiv`` > 1 averages candidate predictions over a
    sub-grid of each cell, matching maps binned from a finer image.
    """
    size = obs.size
    cell_normals, disk = disk_normals(size)
    valid = obs.mask & disk
    if valid.sum() < min_valid:
        raise InsufficientDataError(
            f"reflectance fit needs >= {min_valid} valid cells, got {int(valid.sum())}"
        )
    normals = cell_normals[valid]
    target = obs.values[valid]  # (P, 3)
    sub = None
    if cell_subdiv > 1:
        sub_normals, inside = cell_sample_normals(size, cell_subdiv)
        sub = (sub_normals[valid], inside[valid])

    h, w = env_height, 2 * env_height
    dirs = em.grid_directions(h, w).reshape(-1, 3)
    omega = em.solid_angles(h, w).reshape(-1)
    fp_sq = grid_footprint_sq(h)
    theta, phi = em.directions_to_angles(dirs)
    if env_guess is not None:
        radiance = np.clip(
            env_guess.coeffs @ sh_basis(env_guess.degree, theta, phi).T, 0.0, None
        )  # (3, D)
    else:
        basis2 = sh_basis(2, theta, phi)  # (D, 9)

    best: tuple[float, ReflectanceParams] | None = None
    for metallic in METALLIC_GRID:
        # specular is inert for metals (F0 is the albedo), so search it once
        specs = SPECULAR_GRID[:1] if metallic == 1.0 else SPECULAR_GRID
        for specular in specs:
            for roughness in ROUGHNESS_GRID:
                psi = ReflectanceParams(metallic, roughness, specular)
                if sub is None:
                    a_w, c_w = weight_matrices(psi, normals, dirs, omega, diffuse_model, fp_sq)
                else:
                    a_w, c_w = binned_weight_matrices(
                        psi, sub[0], sub[1], dirs, omega, diffuse_model, fp_sq
                    )
                w_m = a_w + c_w
                if env_guess is not None:
                    resid = float(np.sum((w_m @ radiance.T - target) ** 2))
                else:
                    a = w_m @ basis2  # (P, 9)
                    gram = a.T @ a
                    gram += 1e-9 * np.trace(gram) / gram.shape[0] * np.eye(gram.shape[0])
                    sol = np.linalg.solve(gram, a.T @ target)
                    fitted = np.clip(basis2 @ sol, 0.0, None)  # clamp like the sampler
                    resid = float(np.sum((w_m @ fitted - target) ** 2))
                if best is None:
                    best = (resid, psi)
                    continue
                best_resid, best_psi = best
                tol = 1e-9 * max(best_resid, resid) + 1e-18
                if resid < best_resid - tol:
                    best = (resid, psi)
                elif abs(resid - best_resid) <= tol and roughness > best_psi.roughness:
                    best = (resid, psi)
    return best[1]


# ---------------------------------------------------------------------------
# sampler


@dataclass
class SamplerConfig:
    """Knobs of the annealed illumination sampler.

    ``steps_per_k`` line-search gradient steps run at every schedule step;
    ``step_size`` scales the exact line-search step; jitter of std
    ``delta * k / K`` is added after each schedule step except the last.
    """

    degree: int = 8
    n_samples: int = 10
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    delta: float = DEFAULT_DELTA
    k_max: int = DEFAULT_K_MAX
    steps_per_k: int = 6
    step_size: float = 1.0
    env_height: int = 24

    def to_json(self) -> str:
        return json.dumps({
            "degree": self.degree,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "sigma": self.sigma,
            "delta": self.delta,
            "K_max": self.k_max,
            "steps_per_k": self.steps_per_k,
            "step_size": self.step_size,
            "env_height": self.env_height,
        }, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "SamplerConfig":
        mapping = {
            "degree": "degree",
            "n_samples": "n_samples",
            "seed": "seed",
            "sigma": "sigma",
            "delta": "delta",
            "K_max": "k_max",
            "steps_per_k": "steps_per_k",
            "step_size": "step_size",
            "env_height": "env_height",
        }
        kwargs = {}
        for key, value in data.items():
            if key not in mapping:
                raise ConfigError(f"unknown sampler config key {key!r}")
            kwargs[mapping[key]] = value
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.degree < 0 or cfg.n_samples < 1 or cfg.sigma <= 0 or cfg.k_max < 1:
            raise ConfigError("sampler config out of range")
        return cfg


@dataclass
class IlluminationSample:
    """One chain's final SH illumination and its joint NLL."""

    coefficients: ShCoefficients
    nll: float
    chain: int
    seed: int
    failed: bool = False


def _ridge_init(lik: JointLikelihood, weights_end: list[np.ndarray]) -> np.ndarray:
    """Degree-2 least-squares illumination embedded in the full basis."""
    n2 = 9 if lik.degree >= 2 else lik.n_coeffs
    basis2 = lik.basis[:, :n2]
    rows = []
    targets = []
    for w_m, obs in zip(weights_end, lik.obs):
        rows.append(w_m @ basis2)
        targets.append(obs)
    a = np.vstack(rows)
    t = np.vstack(targets)
    gram = a.T @ a
    gram += 1e-9 * np.trace(gram) / gram.shape[0] * np.eye(gram.shape[0])
    sol = np.linalg.solve(gram, a.T @ t)  # (n2, 3)
    init = np.zeros((3, lik.n_coeffs))
    init[:, :n2] = sol.T
    return init


def _line_search_step(lik, weights, c_all, step_size):
    """One exact line-search gradient step for every chain in lockstep."""
    y_lin = np.einsum("qcn,dn->qcd", c_all, lik.basis, optimize=True)
    active = y_lin > 0.0
    y = np.where(active, y_lin, 0.0)
    grad_y = np.zeros_like(y)
    data = np.zeros(c_all.shape[0])
    for w_m, obs in zip(weights, lik.obs):
        r = np.einsum("pd,qcd->qcp", w_m, y, optimize=True) - obs.T[None]
        data += np.einsum("qcp,qcp->q", r, r, optimize=True)
        grad_y += np.einsum("qcp,pd->qcd", r, w_m, optimize=True)
    grad = np.einsum("qcd,dn->qcn", grad_y * active, lik.basis, optimize=True)

    # curvature of the active quadratic along the gradient direction
    v = np.einsum("qcn,dn->qcd", grad, lik.basis, optimize=True) * active
    curv = np.zeros(c_all.shape[0])
    for w_m in weights:
        u = np.einsum("pd,qcd->qcp", w_m, v, optimize=True)
        curv += np.einsum("qcp,qcp->q", u, u, optimize=True)
    gnorm = np.einsum("qcn,qcn->q", grad, grad, optimize=True)
    t = np.where(curv > 0.0, gnorm / np.maximum(curv, 1e-300), 0.0)
    return c_all - (step_size * t)[:, None, None] * grad, data


def _run_chains(lik, schedule, chain_ids, seed, config, init_base):
    """Anneal a batch of chains in lockstep along the schedule.

    Materials traverse the schedule from near-mirror to the endpoints, so
    the final gradient steps act on the true likelihood; jitter shrinks as
    the remaining steps do and none is added after the last step.
    """
    from .rng import keyed_rng

    n = lik.n_coeffs
    c_all = np.empty((len(chain_ids), 3, n))
    for idx, (chain, restart) in enumerate(chain_ids):
        jitter = keyed_rng(seed, chain, restart, 0).normal(0.0, config.delta, size=(3, n))
        c_all[idx] = init_base + jitter
    k_total = schedule.k_total
    for k in range(1, k_total + 1):
        psis_k = [schedule.table[m][k] for m in range(schedule.n_objects)]
        weights = lik.weights_for(psis_k)
        for _ in range(config.steps_per_k):
            c_all, _ = _line_search_step(lik, weights, c_all, config.step_size)
        if k < k_total:
            scale = config.delta * (k_total - k) / k_total
            for idx, (chain, _) in enumerate(chain_ids):
                c_all[idx] += keyed_rng(seed, chain, k, 1).normal(0.0, scale, size=(3, n))
    return c_all


def sample_illumination(
    observations: list[ReflectanceMap],
    psis: list[ReflectanceParams],
    n_samples: int | None = None,
    seed: int | None = None,
    config: SamplerConfig | None = None,
    cell_subdiv: int = 1,
) -> list[IlluminationSample]:
    """Draw illumination samples from independent annealed chains.

    Chains share the per-step weight matrices and advance in lockstep, so
    wall time is dominated by the schedule, not the chain count. A chain
    whose NLL turns non-finite is restarted with fresh initial jitter up to
    three times, then reported with ``failed=True`` and zero coefficients.
    ``cell_subdiv`` is forwarded to the likelihood for observations that
    were binned from a finer image.
    """
    config = config or SamplerConfig()
    n_samples = config.n_samples if n_samples is None else int(n_samples)
    seed = config.seed if seed is None else int(seed)
    if n_samples < 1:
        raise ValueError("need at least one sample")
    lik = JointLikelihood(
        observations, psis, config.sigma, config.degree, config.env_height,
        cell_subdiv=cell_subdiv,
    )
    schedule = build_schedule(psis, config.k_max)
    weights_end = lik.weights_for(schedule.endpoints)
    init_base = _ridge_init(lik, weights_end)

    pending = [(chain, 0) for chain in range(n_samples)]
    results: dict[int, IlluminationSample] = {}
    while pending:
        c_all = _run_chains(lik, schedule, pending, seed, config, init_base)
        retry = []
        for idx, (chain, restart) in enumerate(pending):
            coeffs_arr = c_all[idx]
            if np.all(np.isfinite(coeffs_arr)):
                coeffs = ShCoefficients(config.degree, coeffs_arr)
                nll = lik.nll(coeffs, weights_end)
            else:
                nll = math.nan
            if math.isfinite(nll):
                results[chain] = IlluminationSample(coeffs, float(nll), chain, seed)
            elif restart < 3:
                retry.append((chain, restart + 1))
            else:
                zero = ShCoefficients.zeros(config.degree)
                results[chain] = IlluminationSample(
                    zero, float(lik.nll(zero, weights_end)), chain, seed, failed=True
                )
        pending = retry
    return [results[chain] for chain in range(n_samples)]


def save_trajectory(dirpath: str | os.PathLike, trajectory: ForwardTrajectory) -> None:
    """Dump every slice as ``m{m}_k{k}.pfm`` in the given directory."""
    dirpath = os.fspath(dirpath)
    os.makedirs(dirpath, exist_ok=True)
    for m, row in enumerate(trajectory.maps):
        for k, rmap in enumerate(row):
            em.write_pfm(os.path.join(dirpath, f"m{m}_k{k}.pfm"), rmap.values)
