"""Interacting particle systems with backward valuations and their limits.

Scalar state throughout (the experiment oracles are one-dimensional).
Measure dependence enters coefficients through declared empirical features
(mean, second moment, optionally the sorted sample). The mean-field limit
is computed as a fixed point of the feature flow with a frozen cloud and
common noise per iteration; the propagation-of-chaos experiment couples
each particle to a limit copy driven by the same Brownian rows.

The fluctuation solver integrates the linear limit system with derivative
callbacks supplied by the caller. By default it is the homogeneous system
(exactly linear in the initial fluctuations). Measure-coupled coefficients
also inject a Gaussian forcing coming from the empirical sampling
fluctuation of i.i.d. copies; that term is reproduced on request through
per-world ghost copies (`include_sampling_noise`), with world members
sharing one forcing realization so that the mean-field coupling term keeps
its conditional meaning.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .engine import BsdeProblem, BsdeSolution, RegressionBasis, SolveOptions, _regress, solve_bsde_lsmc
from .errors import IncompleteCoefficientsError, NoFixedPointError
from .stochastic import (
    BrownianBundle,
    PathEnsemble,
    TimeGrid,
    sample_brownian,
    split_seed,
)

__all__ = [
    "EmpiricalFeatures",
    "MeanFieldModel",
    "ParticleRun",
    "McKeanVlasovResult",
    "FluctuationCoefficients",
    "FluctuationResult",
    "compute_features",
    "simulate_particles",
    "solve_mckean_vlasov",
    "lln_experiment",
    "clt_experiment",
    "solve_fluctuation_system",
    "independent_model",
    "mean_reversion_to_crowd_model",
    "linear_gaussian_model",
    "linear_gaussian_fluctuation_coefficients",
    "MODEL_REGISTRY",
    "LlnResult",
    "CltResult",
    "export_lln_csv",
    "export_clt_csv",
]


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalFeatures:
    mean: float = 0.0
    second_moment: float = 0.0
    sorted_sample: np.ndarray | None = None


def compute_features(x: np.ndarray, names: tuple) -> EmpiricalFeatures:
    # Reductions run in sorted order so every statistic is bitwise invariant
    # under particle permutations (the exchangeability contract).
    x = np.asarray(x, dtype=np.float64).ravel()
    return EmpiricalFeatures(
        mean=float(np.mean(np.sort(x))) if "mean" in names else 0.0,
        second_moment=float(np.mean(np.sort(x * x))) if "second_moment" in names else 0.0,
        sorted_sample=np.sort(x) if "sorted_sample" in names else None,
    )


def _flow_distance(a: list, b: list) -> float:
    gap = 0.0
    for fa, fb in zip(a, b):
        gap = max(gap, abs(fa.mean - fb.mean), abs(fa.second_moment - fb.second_moment))
        if fa.sorted_sample is not None and fb.sorted_sample is not None:
            gap = max(gap, float(np.max(np.abs(fa.sorted_sample - fb.sorted_sample))))
    return gap


# ---------------------------------------------------------------------------
# model and runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeanFieldModel:
    """Scalar interacting-particle model.

    drift(t, x, feats) and diffusion(t, x, feats) map a cross-section
    x (N,) to per-particle values; terminal(x, feats) gives the claim;
    driver(t, x, y, z, feats) is the backward non-linearity (None = 0);
    initial_sampler(n, seed) draws from the initial law.
    """

    drift: Callable
    diffusion: Callable
    terminal: Callable
    initial_sampler: Callable
    driver: Callable | None = None
    feature_names: tuple = ("mean", "second_moment")


@dataclass(frozen=True)
class ParticleRun:
    states: np.ndarray            # (N, n_steps + 1)
    y: np.ndarray                 # (N, n_steps + 1)
    z: np.ndarray                 # (N, n_steps)
    features: list                # per node, length n_steps + 1
    grid: TimeGrid
    seed: int

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]


def _broadcast(vals, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(vals, dtype=np.float64), (n,))


def _simulate_cloud(model: MeanFieldModel, grid: TimeGrid, increments: np.ndarray,
                    x0: np.ndarray, flow: list | None = None):
    """Euler stepping of the cloud; live features when flow is None."""
    n_particles = x0.size
    n = grid.n_steps
    dt = grid.dt
    nodes = grid.nodes
    states = np.empty((n_particles, n + 1))
    states[:, 0] = x0
    flow_out = []
    for k in range(n):
        feats = compute_features(states[:, k], model.feature_names) if flow is None else flow[k]
        flow_out.append(feats)
        b = _broadcast(model.drift(nodes[k], states[:, k], feats), n_particles)
        s = _broadcast(model.diffusion(nodes[k], states[:, k], feats), n_particles)
        states[:, k + 1] = states[:, k] + b * dt + s * increments[:, k, 0]
    feats_T = compute_features(states[:, n], model.feature_names) if flow is None else flow[n]
    flow_out.append(feats_T)
    return states, flow_out


class _FlowDriver:
    """Adapts a feature-dependent driver to the engine's (t, x, y, z) call."""

    params = np.zeros(0)

    def __init__(self, model: MeanFieldModel, flow: list, grid: TimeGrid):
        self._model = model
        self._flow = flow
        self._dt = grid.dt

    def value(self, t, x, y, z):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        m = x.shape[0]
        if self._model.driver is None:
            return np.zeros(m)
        k = int(round(float(np.min(t)) / self._dt))
        z = np.asarray(z, dtype=np.float64).reshape(m, -1)
        y = _broadcast(y, m)
        out = self._model.driver(float(np.min(t)), x[:, 0], y, z[:, 0], self._flow[k])
        return _broadcast(out, m).copy()


def _solve_cloud_backward(model: MeanFieldModel, grid: TimeGrid, states: np.ndarray,
                          increments: np.ndarray, flow: list,
                          basis: RegressionBasis, opts: SolveOptions) -> BsdeSolution:
    ens = PathEnsemble(
        states=states[:, :, None],
        grid=grid,
        bundle=BrownianBundle(increments=increments, dt=grid.dt, seed=0),
    )
    problem = BsdeProblem(
        driver=_FlowDriver(model, flow, grid),
        terminal=lambda e: _broadcast(model.terminal(e.states[:, -1, 0], flow[-1]),
                                      e.n_paths).copy(),
        ensemble=ens,
    )
    return solve_bsde_lsmc(problem, basis, opts)


def simulate_particles(
    model: MeanFieldModel,
    n_particles: int,
    grid: TimeGrid,
    seed: int,
    basis: RegressionBasis = RegressionBasis(),
    opts: SolveOptions = SolveOptions(),
    increments: np.ndarray | None = None,
    initial_states: np.ndarray | None = None,
) -> ParticleRun:
    """Joint forward pass with per-step empirical features, then pooled
    backward valuation with the frozen feature flow.

    increments and initial_states override the seeded draws; couplings and
    exchangeability experiments rely on passing permuted or shared rows.
    """
    if n_particles < 2:
        raise ValueError("n_particles must be >= 2")
    if increments is None:
        increments = sample_brownian(grid, n_particles, 1,
                                     split_seed(seed, "particles")).increments
    if initial_states is None:
        initial_states = model.initial_sampler(n_particles, split_seed(seed, "initial"))
    states, flow = _simulate_cloud(model, grid, increments, np.asarray(initial_states), None)
    sol = _solve_cloud_backward(model, grid, states, increments, flow, basis, opts)
    return ParticleRun(states=states, y=sol.y, z=sol.z[:, :, 0], features=flow,
                       grid=grid, seed=int(seed))


# ---------------------------------------------------------------------------
# mean-field fixed point
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McKeanVlasovResult:
    flow: list
    run: ParticleRun | None
    residuals: list
    iterations: int
    model: MeanFieldModel
    grid: TimeGrid


def solve_mckean_vlasov(
    model: MeanFieldModel,
    n_cloud: int,
    grid: TimeGrid,
    seed: int,
    max_iters: int = 40,
    tol: float = 1e-6,
    basis: RegressionBasis = RegressionBasis(),
    opts: SolveOptions = SolveOptions(),
    solve_backward: bool = True,
) -> McKeanVlasovResult:
    """Fixed point of the measure-feature flow with a frozen cloud.

    The flow is initialized from the run with features frozen at their
    initial values; each iteration re-simulates the same noise with the
    previous flow and recomputes features until the sup-over-time change
    drops below tol.
    """
    if n_cloud < 100:
        raise ValueError("n_cloud must be >= 100 for a usable feature flow")
    increments = sample_brownian(grid, n_cloud, 1, split_seed(seed, "mkv-cloud")).increments
    x0 = np.asarray(model.initial_sampler(n_cloud, split_seed(seed, "mkv-initial")))

    feats0 = compute_features(x0, model.feature_names)
    states, _ = _simulate_cloud(model, grid, increments, x0,
                                flow=[feats0] * (grid.n_steps + 1))
    flow = [compute_features(states[:, k], model.feature_names)
            for k in range(grid.n_steps + 1)]

    residuals = []
    converged = False
    iterations = 0
    for iteration in range(1, max_iters + 1):
        states, _ = _simulate_cloud(model, grid, increments, x0, flow=flow)
        new_flow = [compute_features(states[:, k], model.feature_names)
                    for k in range(grid.n_steps + 1)]
        residual = _flow_distance(new_flow, flow)
        residuals.append(residual)
        flow = new_flow
        iterations = iteration
        if residual < tol:
            converged = True
            break
    if not converged:
        raise NoFixedPointError(residuals)

    run = None
    if solve_backward:
        sol = _solve_cloud_backward(model, grid, states, increments, flow, basis, opts)
        run = ParticleRun(states=states, y=sol.y, z=sol.z[:, :, 0], features=flow,
                          grid=grid, seed=int(seed))
    return McKeanVlasovResult(flow=flow, run=run, residuals=residuals,
                              iterations=iterations, model=model, grid=grid)


# ---------------------------------------------------------------------------
# law of large numbers experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LlnResult:
    n_values: np.ndarray
    err_x: np.ndarray            # mean over trials and particles, per N
    err_y: np.ndarray
    err_z: np.ndarray
    slope: float
    per_trial_x: np.ndarray      # (n_trials, len(n_values))
    per_trial_y: np.ndarray
    per_trial_z: np.ndarray


def _coupled_errors(model, grid, inc, x0_particles, x0_copies, ref_flow, basis, opts):
    """Particle system versus limit copies on the same Brownian rows."""
    states_p, flow_p = _simulate_cloud(model, grid, inc, x0_particles, None)
    sol_p = _solve_cloud_backward(model, grid, states_p, inc, flow_p, basis, opts)
    states_c, _ = _simulate_cloud(model, grid, inc, x0_copies, flow=ref_flow)
    sol_c = _solve_cloud_backward(model, grid, states_c, inc, ref_flow, basis, opts)

    dx = states_p - states_c
    dy = sol_p.y - sol_c.y
    dz = sol_p.z[:, :, 0] - sol_c.z[:, :, 0]
    err_x = float(np.mean(np.max(dx * dx, axis=1)))
    err_y = float(np.mean(np.max(dy * dy, axis=1)))
    err_z = float(np.mean(np.sum(dz * dz, axis=1) * grid.dt))
    return (err_x, err_y, err_z), (states_p, sol_p, states_c, sol_c)


def lln_experiment(
    model: MeanFieldModel,
    n_list: list,
    grid: TimeGrid,
    n_trials: int,
    seed: int,
    basis: RegressionBasis = RegressionBasis(),
    opts: SolveOptions = SolveOptions(),
    n_reference: int = 65536,
) -> LlnResult:
    """Mean-square sup errors between the N-particle system and i.i.d. limit
    copies driven by the same per-particle Brownian rows, per N.

    The reference feature flow comes from a large-cloud fixed point computed
    once; prefixes of a common bundle give common random numbers across N.
    """
    n_values = sorted(int(n) for n in n_list)
    if len(n_values) < 2:
        raise ValueError("n_list needs at least two entries")
    ref = solve_mckean_vlasov(model, n_reference, grid, split_seed(seed, "lln-reference"),
                              solve_backward=False)
    n_max = n_values[-1]

    per_x = np.empty((n_trials, len(n_values)))
    per_y = np.empty((n_trials, len(n_values)))
    per_z = np.empty((n_trials, len(n_values)))
    for trial in range(n_trials):
        inc_full = sample_brownian(grid, n_max, 1,
                                   split_seed(seed, "lln-noise", trial)).increments
        x0_full = np.asarray(model.initial_sampler(n_max, split_seed(seed, "lln-x0", trial)))
        for j, n_particles in enumerate(n_values):
            inc = inc_full[:n_particles]
            x0 = x0_full[:n_particles]
            (ex, ey, ez), _ = _coupled_errors(model, grid, inc, x0, x0, ref.flow,
                                              basis, opts)
            per_x[trial, j], per_y[trial, j], per_z[trial, j] = ex, ey, ez

    err_x = per_x.mean(axis=0)
    err_y = per_y.mean(axis=0)
    err_z = per_z.mean(axis=0)
    total = err_x + err_y + err_z
    if np.all(total > 0):
        slope = float(np.polyfit(np.log(n_values), np.log(total), 1)[0])
    else:
        slope = 0.0
    return LlnResult(n_values=np.array(n_values), err_x=err_x, err_y=err_y, err_z=err_z,
                     slope=slope, per_trial_x=per_x, per_trial_y=per_y, per_trial_z=per_z)


def export_lln_csv(result: LlnResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "trial", "error_X", "error_Y", "error_Z", "slope"])
        for trial in range(result.per_trial_x.shape[0]):
            for j, n in enumerate(result.n_values):
                writer.writerow([int(n), trial,
                                 repr(float(result.per_trial_x[trial, j])),
                                 repr(float(result.per_trial_y[trial, j])),
                                 repr(float(result.per_trial_z[trial, j])),
                                 repr(result.slope)])


# ---------------------------------------------------------------------------
# central limit theorem experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CltResult:
    n_values: np.ndarray
    var_u: np.ndarray            # pooled variance of sqrt(N)(X - Xbar) at T
    var_v: np.ndarray            # pooled variance of sqrt(N)(Y - Ybar) at T
    var_u_se: np.ndarray         # jackknife (over trials) standard errors
    var_v_se: np.ndarray
    u0_std: float
    n_trials: int

    def stabilized(self, sigmas: float = 3.0) -> bool:
        """Cauchy check with a Monte Carlo floor: successive variance gaps
        shrink, or the last gap is within the estimator resolution."""
        if self.n_values.size < 3:
            return True
        gaps = np.abs(np.diff(self.var_u))
        floor = sigmas * np.sqrt(self.var_u_se[1:] ** 2 + self.var_u_se[:-1] ** 2)
        return bool(np.all((np.diff(gaps) <= 0) | (gaps[1:] <= floor[1:])))


def clt_experiment(
    model: MeanFieldModel,
    n_list: list,
    grid: TimeGrid,
    n_trials: int,
    seed: int,
    basis: RegressionBasis = RegressionBasis(),
    opts: SolveOptions = SolveOptions(),
    n_reference: int = 65536,
    u0_std: float = 0.0,
) -> CltResult:
    """Variance of the sqrt(N)-scaled terminal fluctuations per N.

    u0_std injects i.i.d. initial fluctuations: the particle system starts
    at the copy positions perturbed by u0_std * zeta / sqrt(N). With
    u0_std = 0 the coupling has exactly equal initial data and a
    non-interacting model fluctuates by exactly zero.
    """
    n_values = sorted(int(n) for n in n_list)
    ref = solve_mckean_vlasov(model, n_reference, grid, split_seed(seed, "clt-reference"),
                              solve_backward=False)
    n_max = n_values[-1]

    var_u = np.empty(len(n_values))
    var_v = np.empty(len(n_values))
    samples_u = {n: [] for n in n_values}
    samples_v = {n: [] for n in n_values}
    for trial in range(n_trials):
        inc_full = sample_brownian(grid, n_max, 1,
                                   split_seed(seed, "clt-noise", trial)).increments
        x0_full = np.asarray(model.initial_sampler(n_max, split_seed(seed, "clt-x0", trial)))
        zeta_full = sample_brownian(TimeGrid(1.0, 1), n_max, 1,
                                    split_seed(seed, "clt-zeta", trial)).increments[:, 0, 0]
        for n_particles in n_values:
            inc = inc_full[:n_particles]
            x0_c = x0_full[:n_particles]
            x0_p = x0_c + u0_std * zeta_full[:n_particles] / np.sqrt(n_particles)
            _, (states_p, sol_p, states_c, sol_c) = _coupled_errors(
                model, grid, inc, x0_p, x0_c, ref.flow, basis, opts
            )
            root_n = np.sqrt(n_particles)
            samples_u[n_particles].append(root_n * (states_p[:, -1] - states_c[:, -1]))
            samples_v[n_particles].append(root_n * (sol_p.y[:, -1] - sol_c.y[:, -1]))

    var_u_se = np.empty(len(n_values))
    var_v_se = np.empty(len(n_values))
    for j, n_particles in enumerate(n_values):
        pooled_u = np.concatenate(samples_u[n_particles])
        pooled_v = np.concatenate(samples_v[n_particles])
        var_u[j] = float(np.var(pooled_u, ddof=1))
        var_v[j] = float(np.var(pooled_v, ddof=1))
        var_u_se[j] = _jackknife_var_se(samples_u[n_particles])
        var_v_se[j] = _jackknife_var_se(samples_v[n_particles])
    return CltResult(n_values=np.array(n_values), var_u=var_u, var_v=var_v,
                     var_u_se=var_u_se, var_v_se=var_v_se,
                     u0_std=u0_std, n_trials=n_trials)


def _jackknife_var_se(per_trial: list) -> float:
    """Leave-one-trial-out standard error of the pooled variance."""
    k = len(per_trial)
    if k < 2:
        return float("nan")
    leave_out = np.empty(k)
    for i in range(k):
        pooled = np.concatenate([s for j, s in enumerate(per_trial) if j != i])
        leave_out[i] = np.var(pooled, ddof=1)
    return float(np.sqrt((k - 1) / k * np.sum((leave_out - leave_out.mean()) ** 2)))


def export_clt_csv(result: CltResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "var_U_T", "var_V_T", "u0_std", "n_trials"])
        for j, n in enumerate(result.n_values):
            writer.writerow([int(n), repr(float(result.var_u[j])),
                             repr(float(result.var_v[j])),
                             repr(result.u0_std), result.n_trials])


# ---------------------------------------------------------------------------
# fluctuation system
# ---------------------------------------------------------------------------

_REQUIRED_COEFFS = ("dx_b", "dmu_b", "dx_sigma", "dmu_sigma",
                    "dx_f", "dy_f", "dz_f", "dmu_f", "dx_g", "dmu_g")


@dataclass(frozen=True)
class FluctuationCoefficients:
    """Derivative callbacks of the mean-field coefficients.

    State derivatives map (t, x, feats) -> (M,); measure derivatives are the
    Lions derivatives and map (t, x, feats, x_tilde) -> (M, M') against the
    copy positions (broadcast allowed). Terminal derivatives drop the time
    argument: dx_g(x, feats) and dmu_g(x, feats, x_tilde). The optional
    sampling_* callbacks are the linear functional derivatives (delta/dm)
    used to realize the empirical-sampling Gaussian forcing; they are
    centered internally and follow the same signatures as their dmu twins.
    """

    dx_b: Callable = None
    dmu_b: Callable = None
    dx_sigma: Callable = None
    dmu_sigma: Callable = None
    dx_f: Callable = None
    dy_f: Callable = None
    dz_f: Callable = None
    dmu_f: Callable = None
    dx_g: Callable = None
    dmu_g: Callable = None
    sampling_b: Callable | None = None
    sampling_sigma: Callable | None = None
    sampling_f: Callable | None = None
    sampling_g: Callable | None = None

    def validate(self):
        missing = [name for name in _REQUIRED_COEFFS if getattr(self, name) is None]
        if missing:
            raise IncompleteCoefficientsError(f"missing derivative callbacks: {missing}")


@dataclass(frozen=True)
class FluctuationResult:
    u: np.ndarray                # (n_paths, n_steps + 1)
    v: np.ndarray                # (n_paths, n_steps + 1)
    z: np.ndarray                # (n_paths, n_steps)
    grid: TimeGrid
    n_worlds: int

    @property
    def v0_mean(self) -> float:
        """Cross-path mean of the backward fluctuation at time zero.

        V conditions on the initial fluctuation pathwise; the ensemble mean
        is the unconditional value (equal to mean V_T by the regression's
        mean preservation)."""
        return float(np.mean(self.v[:, 0]))


def _pair_term(callback, t, x, feats, x_tilde, u_tilde):
    """mean_j callback(t, x_i, x_tilde_j) * u_tilde_j, vectorized."""
    mat = np.asarray(callback(t, x, feats, x_tilde), dtype=np.float64)
    mat = np.broadcast_to(mat, (x.size, x_tilde.size))
    return mat @ u_tilde / x_tilde.size


def _centered_forcing(callback, t, x, feats, ghost, cloud):
    """Functional derivative at the ghost copy, centered by the cloud mean."""
    at_ghost = np.asarray(callback(t, x, feats, np.atleast_1d(ghost)), dtype=np.float64)
    at_ghost = np.broadcast_to(at_ghost, (x.size, 1))[:, 0]
    at_cloud = np.asarray(callback(t, x, feats, cloud), dtype=np.float64)
    at_cloud = np.broadcast_to(at_cloud, (x.size, cloud.size))
    return at_ghost - at_cloud.mean(axis=1)


def _augmented_design(basis: RegressionBasis, x: np.ndarray, u: np.ndarray):
    """State features plus u-interaction columns, with u standardized so the
    design is invariant under rescaling of the fluctuations."""
    a, _ = basis.fit_design(x[:, None])
    u_std = u.std()
    if u_std > 0:
        us = (u - u.mean()) / u_std
        return np.concatenate([a, a * us[:, None]], axis=1)
    return a


def solve_fluctuation_system(
    coeffs: FluctuationCoefficients,
    mean_field: McKeanVlasovResult,
    u0_sampler: Callable,
    n_paths: int,
    seed: int,
    basis: RegressionBasis = RegressionBasis(),
    opts: SolveOptions = SolveOptions(),
    n_worlds: int = 1,
    include_sampling_noise: bool = False,
) -> FluctuationResult:
    """Integrate the linear fluctuation system along fresh mean-field copies.

    Forward: dU = (dx_b U + E'[dmu_b U'] + G_b) dt + (dx_sigma U +
    E'[dmu_sigma U'] + G_sigma) dW, with E' approximated by the within-world
    cloud average and G the optional sampling forcing (one ghost realization
    per world, shared by its members). Backward: the linear BSDE for (V, Z)
    with terminal dx_g U_T + E'[dmu_g U'_T] + G_g, solved by regression on
    state features augmented with standardized-U columns.
    """
    coeffs.validate()
    if include_sampling_noise and n_worlds < 2:
        raise ValueError("sampling noise needs n_worlds >= 2 to estimate variances")
    model = mean_field.model
    grid = mean_field.grid
    flow = mean_field.flow
    dt = grid.dt
    nodes = grid.nodes
    n = grid.n_steps
    per_world = n_paths // n_worlds
    if per_world < 8:
        raise ValueError("too few paths per world")

    all_u = []
    all_v = []
    all_z = []
    for w in range(n_worlds):
        inc = sample_brownian(grid, per_world, 1,
                              split_seed(seed, "fluct-noise", w)).increments
        x0 = np.asarray(model.initial_sampler(per_world, split_seed(seed, "fluct-x0", w)))
        states, _ = _simulate_cloud(model, grid, inc, x0, flow=flow)

        ghost = None
        if include_sampling_noise:
            g_inc = sample_brownian(grid, 1, 1, split_seed(seed, "fluct-ghost", w)).increments
            g_x0 = np.asarray(model.initial_sampler(1, split_seed(seed, "fluct-ghost-x0", w)))
            ghost, _ = _simulate_cloud(model, grid, g_inc, g_x0, flow=flow)

        u = np.empty((per_world, n + 1))
        u[:, 0] = u0_sampler(per_world, split_seed(seed, "fluct-u0", w))
        for k in range(n):
            x_k = states[:, k]
            f_k = flow[k]
            drift = (_broadcast(coeffs.dx_b(nodes[k], x_k, f_k), per_world) * u[:, k]
                     + _pair_term(coeffs.dmu_b, nodes[k], x_k, f_k, x_k, u[:, k]))
            diff = (_broadcast(coeffs.dx_sigma(nodes[k], x_k, f_k), per_world) * u[:, k]
                    + _pair_term(coeffs.dmu_sigma, nodes[k], x_k, f_k, x_k, u[:, k]))
            if ghost is not None and coeffs.sampling_b is not None:
                drift = drift + _centered_forcing(coeffs.sampling_b, nodes[k], x_k, f_k,
                                                  ghost[0, k], x_k)
            if ghost is not None and coeffs.sampling_sigma is not None:
                diff = diff + _centered_forcing(coeffs.sampling_sigma, nodes[k], x_k, f_k,
                                                ghost[0, k], x_k)
            u[:, k + 1] = u[:, k] + drift * dt + diff * inc[:, k, 0]

        v = np.empty((per_world, n + 1))
        zv = np.zeros((per_world, n))
        x_t = states[:, n]
        g_mat = np.broadcast_to(
            np.asarray(coeffs.dmu_g(x_t, flow[n], x_t), dtype=np.float64),
            (per_world, per_world),
        )
        v[:, n] = (_broadcast(coeffs.dx_g(x_t, flow[n]), per_world) * u[:, n]
                   + g_mat @ u[:, n] / per_world)
        if ghost is not None and coeffs.sampling_g is not None:
            at_ghost = np.broadcast_to(
                np.asarray(coeffs.sampling_g(x_t, flow[n], np.atleast_1d(ghost[0, n]))),
                (per_world, 1),
            )[:, 0]
            at_cloud = np.broadcast_to(
                np.asarray(coeffs.sampling_g(x_t, flow[n], x_t)), (per_world, per_world)
            )
            v[:, n] = v[:, n] + (at_ghost - at_cloud.mean(axis=1))
        passes = max(1, opts.inner_picard_iters)
        for k in range(n - 1, -1, -1):
            x_k = states[:, k]
            f_k = flow[k]
            design = _augmented_design(basis, x_k, u[:, k])
            coef_c, _ = _regress(design, v[:, k + 1], k, opts.cond_limit)
            cont = design @ coef_c
            coef_z, _ = _regress(design, (v[:, k + 1] - cont) * inc[:, k, 0], k,
                                 opts.cond_limit)
            z_k = design @ coef_z / dt

            source = (_broadcast(coeffs.dx_f(nodes[k], x_k, f_k), per_world) * u[:, k]
                      + _broadcast(coeffs.dz_f(nodes[k], x_k, f_k), per_world) * z_k
                      + _pair_term(coeffs.dmu_f, nodes[k], x_k, f_k, x_k, u[:, k]))
            if ghost is not None and coeffs.sampling_f is not None:
                source = source + _centered_forcing(coeffs.sampling_f, nodes[k], x_k, f_k,
                                                    ghost[0, k], x_k)
            dy = _broadcast(coeffs.dy_f(nodes[k], x_k, f_k), per_world)
            v_k = cont
            for _ in range(passes):
                v_k = cont + (source + dy * v_k) * dt
            v[:, k] = v_k
            zv[:, k] = z_k

        all_u.append(u)
        all_v.append(v)
        all_z.append(zv)

    return FluctuationResult(
        u=np.concatenate(all_u), v=np.concatenate(all_v), z=np.concatenate(all_z),
        grid=grid, n_worlds=n_worlds,
    )


# ---------------------------------------------------------------------------
# built-in test models
# ---------------------------------------------------------------------------

def independent_model(rate: float = 0.5, sigma: float = 0.5,
                      m0: float = 0.0, s0: float = 1.0) -> MeanFieldModel:
    """No measure dependence: particles are independent copies."""
    return MeanFieldModel(
        drift=lambda t, x, feats: -rate * x,
        diffusion=lambda t, x, feats: sigma,
        terminal=lambda x, feats: x,
        initial_sampler=_gaussian_sampler(m0, s0),
        feature_names=("mean", "second_moment"),
    )


def mean_reversion_to_crowd_model(sigma: float = 0.1, m0: float = 0.0,
                                  s0: float = 1.0) -> MeanFieldModel:
    """Drift toward the empirical mean; the crowd mean itself is driftless."""
    return MeanFieldModel(
        drift=lambda t, x, feats: feats.mean - x,
        diffusion=lambda t, x, feats: sigma,
        terminal=lambda x, feats: x,
        initial_sampler=_gaussian_sampler(m0, s0),
        feature_names=("mean",),
    )


def linear_gaussian_model(a: float = 0.4, c: float = -0.5, sigma: float = 0.4,
                          m0: float = 0.3, s0: float = 0.3) -> MeanFieldModel:
    """b = a mean + c x with constant diffusion; fully solvable oracle model."""
    return MeanFieldModel(
        drift=lambda t, x, feats: a * feats.mean + c * x,
        diffusion=lambda t, x, feats: sigma,
        terminal=lambda x, feats: x,
        initial_sampler=_gaussian_sampler(m0, s0),
        feature_names=("mean",),
    )


def linear_gaussian_fluctuation_coefficients(a: float = 0.4, c: float = -0.5):
    """Derivative callbacks of the linear-Gaussian model in the solver's
    conventions, including the sampling functional derivative of the drift."""
    zero_state = lambda t, x, feats: np.zeros_like(x)
    zero_pair = lambda t, x, feats, xt: np.zeros((np.size(x), np.size(xt)))
    return FluctuationCoefficients(
        dx_b=lambda t, x, feats: np.full_like(x, c),
        dmu_b=lambda t, x, feats, xt: np.full((np.size(x), np.size(xt)), a),
        dx_sigma=zero_state,
        dmu_sigma=zero_pair,
        dx_f=zero_state,
        dy_f=zero_state,
        dz_f=zero_state,
        dmu_f=zero_pair,
        dx_g=lambda x, feats: np.ones_like(x),
        dmu_g=lambda x, feats, xt: np.zeros((np.size(x), np.size(xt))),
        sampling_b=lambda t, x, feats, xt: np.broadcast_to(
            a * np.asarray(xt)[None, :], (np.size(x), np.size(xt))
        ),
    )


def _gaussian_sampler(mean: float, std: float) -> Callable:
    def sampler(n: int, seed: int) -> np.ndarray:
        draw = sample_brownian(TimeGrid(1.0, 1), n, 1, split_seed(seed, "initial-law"))
        return mean + std * draw.increments[:, 0, 0]
    return sampler


MODEL_REGISTRY = {
    "independent": independent_model,
    "mean-reversion-to-crowd": mean_reversion_to_crowd_model,
    "linear-gaussian-clt": linear_gaussian_model,
}
