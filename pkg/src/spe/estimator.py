"""Two-stage maximum likelihood estimation.

Stage one maximizes the observation term of the likelihood over the dynamics
parameters with a quasi-Newton method on an unconstrained reparameterization,
refiltering beliefs at every trial point. Stage two freezes the filtered
beliefs at the stage-one estimate and climbs the resulting pseudo-likelihood
in the reward parameters by gradient ascent, with the gradient assembled from
the solved Q table and its parameter derivative.

A family object supplies the parameterization: build_kernel / reward_tensor /
reward_grad / reward_bounds, the unconstrained chart for the dynamics, and
defaults (see spe.engine for the two shipped families).
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .bellman import BellmanSolver, QTable
from .errors import NonFiniteObjective
from .grid import BeliefGrid
from .model import Belief, History
from .likelihood import (
    ChoicePoints,
    DatasetBlocks,
    LogLikelihood,
    filter_dataset,
    grad_q,
    log_likelihood,
    observation_loglik,
    smoothness_constants,
)

ARMIJO_SLOPE = 1e-4
STEP_FLOOR = 1e-18


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings shared by both stages.

    step_size None selects backtracking line search seeded at
    min(1e-2, 1/L) and doubled after each accepted step; a float runs plain
    fixed-step ascent (with a warning when it exceeds the guaranteed stable
    range). grad_norm_tol applies to the gradient norm scaled by the total
    number of decisions. seed is reserved; both stages are deterministic.
    """

    grid_resolution: int = 101
    bellman_tol: float = 1e-9
    grad_q_tol: float = 1e-8
    grad_norm_tol: float = 1e-3
    step_size: float | None = None
    max_stage2_iters: int = 300
    stage1_max_iters: int = 300
    theta1_init: tuple | None = None
    theta2_init: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if not (self.grad_norm_tol > 0.0):
            raise ValueError("grad_norm_tol must be positive")
        if self.step_size is not None and not (self.step_size > 0.0):
            raise ValueError("step_size must be positive when fixed")
        for name in ("bellman_tol", "grad_q_tol"):
            if not (getattr(self, name) > 0.0):
                raise ValueError(f"{name} must be positive")


@dataclass(eq=False)
class Stage1Result:
    theta2: np.ndarray
    unconstrained: np.ndarray
    obs_loglik: float
    trace: list
    converged: bool
    n_evals: int
    message: str
    filtered: list | None = None    # frozen belief paths at theta2


@dataclass(eq=False)
class Stage2Result:
    theta1: np.ndarray
    pseudo_loglik: float
    loglik_trace: list
    grad_norm_trace: list
    step_sizes: list
    converged: bool
    n_iters: int
    diagnostics: dict


@dataclass(eq=False)
class EstimateReport:
    theta1: np.ndarray
    theta2: np.ndarray
    labeled: dict
    loglik: LogLikelihood
    stage1: Stage1Result
    stage2: Stage2Result
    config: EstimatorConfig
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "theta1": np.asarray(self.theta1).tolist(),
            "theta2": np.asarray(self.theta2).tolist(),
            "labeled": self.labeled,
            "loglik": {
                "obs_term": self.loglik.obs_term,
                "choice_term": self.loglik.choice_term,
                "prior_term": self.loglik.prior_term,
                "total": self.loglik.total,
            },
            "stage1": {
                "obs_loglik": self.stage1.obs_loglik,
                "trace": list(self.stage1.trace),
                "converged": self.stage1.converged,
                "n_evals": self.stage1.n_evals,
                "message": self.stage1.message,
            },
            "stage2": {
                "pseudo_loglik": self.stage2.pseudo_loglik,
                "loglik_trace": list(self.stage2.loglik_trace),
                "grad_norm_trace": list(self.stage2.grad_norm_trace),
                "step_sizes": list(self.stage2.step_sizes),
                "converged": self.stage2.converged,
                "n_iters": self.stage2.n_iters,
                "diagnostics": self.stage2.diagnostics,
            },
            "config": {
                "grid_resolution": self.config.grid_resolution,
                "bellman_tol": self.config.bellman_tol,
                "grad_q_tol": self.config.grad_q_tol,
                "grad_norm_tol": self.config.grad_norm_tol,
                "step_size": self.config.step_size,
                "max_stage2_iters": self.config.max_stage2_iters,
                "stage1_max_iters": self.config.stage1_max_iters,
                "seed": self.config.seed,
            },
            "diagnostics": self.diagnostics,
        }


def stage1_fit_theta2(
    histories,
    family,
    config: EstimatorConfig,
    burn_in: int = 0,
    x0_override: np.ndarray | None = None,
    u0: np.ndarray | None = None,
    with_filtered: bool = True,
) -> Stage1Result:
    """Maximize the observation term over the dynamics parameters.

    Quasi-Newton (L-BFGS) with central finite differences on the
    unconstrained chart; every trial point refilters the whole dataset.
    Vanished observation probabilities are floored inside the search so the
    objective stays finite. burn_in drops the first steps of each history
    from the objective and x0_override replaces every initial belief; both
    serve the initial-belief sensitivity sweep. with_filtered=False skips the
    final strict filtering pass when the caller only needs the estimate.
    """
    theta2_0 = (
        np.asarray(config.theta2_init, dtype=np.float64)
        if config.theta2_init is not None
        else family.default_theta2()
    )
    probe = family.build_model(family.default_theta1(), theta2_0)
    blocks = DatasetBlocks.from_histories(histories, probe)

    def negative_obs(u):
        kernel = family.build_kernel(family.theta2_from_unconstrained(u))
        return -observation_loglik(
            kernel, blocks, burn_in=burn_in, penalize=True, x0_override=x0_override
        )

    trace: list[float] = []

    def record(uk):
        trace.append(-negative_obs(uk))

    if u0 is None:
        u0 = family.theta2_to_unconstrained(theta2_0)
    res = minimize(
        negative_obs,
        u0,
        method="L-BFGS-B",
        jac="3-point",
        callback=record,
        options={"maxiter": config.stage1_max_iters},
    )
    theta2 = family.theta2_from_unconstrained(res.x)
    filtered = None
    if with_filtered:
        model_hat = family.build_model(family.default_theta1(), theta2)
        if x0_override is None:
            fit_histories = histories
        else:
            x0 = Belief(np.asarray(x0_override, dtype=np.float64))
            fit_histories = [History(x0, h.obs, h.acts) for h in histories]
        filtered = filter_dataset(model_hat, fit_histories)
    return Stage1Result(
        theta2=theta2,
        unconstrained=np.asarray(res.x),
        obs_loglik=float(-res.fun),
        trace=trace,
        converged=bool(res.success),
        n_evals=int(res.nfev),
        message=str(res.message),
        filtered=filtered,
    )


def stage2_policy_gradient(
    histories,
    family,
    theta2: np.ndarray,
    config: EstimatorConfig,
    filtered=None,
) -> Stage2Result:
    """Gradient ascent on the choice term with beliefs frozen at theta2."""
    theta1 = (
        np.asarray(config.theta1_init, dtype=np.float64)
        if config.theta1_init is not None
        else family.default_theta1()
    )
    model = family.build_model(theta1, theta2)
    if filtered is None:
        filtered = filter_dataset(model, histories)
    grid = BeliefGrid.create(family.n_states, config.grid_resolution)
    solver = BellmanSolver(model, grid)
    points = ChoicePoints.from_filtered(grid, histories, filtered)
    n_steps = max(points.n_steps, 1)

    grad_bound, hess_bound = family.reward_bounds()
    # Lipschitz constant of the pseudo-likelihood gradient: one decision
    # contributes the Q and soft-value Hessian bounds, so scale by the count.
    unit = smoothness_constants(grad_bound, hess_bound, family.discount, 1, 1)
    lipschitz = unit.grad_lipschitz * points.n_steps
    fixed_step = config.step_size
    if fixed_step is not None and lipschitz > 0.0 and fixed_step >= 2.0 / lipschitz:
        warnings.warn(
            f"step size {fixed_step:.3e} is outside the guaranteed range "
            f"(< {2.0 / lipschitz:.3e}); ascent may diverge",
            stacklevel=2,
        )

    key = model.content_key()

    def pseudo(theta1_try, q_warm):
        rbar = solver.expected_rewards(family.reward_tensor(theta1_try))
        q, _, _ = solver.solve(rbar, tol=config.bellman_tol, q0=q_warm)
        return points.sum_log_pi(q), q

    def predict(q_base, delta):
        # First-order warm start: Q moves by roughly grad_Q . delta, which
        # leaves only the curvature remainder for the solver to absorb.
        if g_warm is None:
            return q_base
        return q_base + g_warm @ delta

    loglik_trace: list[float] = []
    grad_norm_trace: list[float] = []
    step_sizes: list[float] = []
    q_cur = None
    g_warm = None
    converged = False
    step = min(1e-2, 1.0 / lipschitz) if lipschitz > 0 else 1e-2

    k = 0
    while k < config.max_stage2_iters:
        ll_cur, q_cur = pseudo(theta1, q_cur)
        if not np.isfinite(ll_cur):
            raise NonFiniteObjective(f"pseudo-likelihood is {ll_cur!r} at iterate {k}")
        qtable = QTable(q_cur, grid, key, model.euler_gamma)
        gtable = grad_q(
            model,
            family.reward_grad(theta1),
            qtable,
            tol=config.grad_q_tol,
            solver=solver,
            g0=g_warm,
        )
        g_warm = gtable.values
        _, grad = points.grad_sum_log_pi(q_cur, gtable.values)
        gnorm = float(np.linalg.norm(grad))
        loglik_trace.append(float(ll_cur))
        grad_norm_trace.append(gnorm)
        if gnorm / n_steps <= config.grad_norm_tol:
            converged = True
            break
        if fixed_step is not None:
            theta1 = theta1 + fixed_step * grad
            q_cur = predict(q_cur, fixed_step * grad)
            step_sizes.append(fixed_step)
            k += 1
            continue
        # Backtracking: accept a strict Armijo improvement, halve otherwise.
        accepted = False
        while step * gnorm > STEP_FLOOR:
            trial = theta1 + step * grad
            ll_try, q_try = pseudo(trial, predict(q_cur, step * grad))
            if np.isfinite(ll_try) and ll_try >= ll_cur + ARMIJO_SLOPE * step * gnorm**2:
                theta1 = trial
                q_cur = q_try
                step_sizes.append(step)
                step *= 2.0
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # No improving step exists at this scale; the gradient signal is
            # below the numerical floor.
            break
        k += 1

    # When the loop exits right after a step, evaluate the final iterate so
    # the trace covers it; grad norms stay aligned with the update steps.
    if not loglik_trace or (step_sizes and len(step_sizes) == len(loglik_trace)):
        ll_cur, q_cur = pseudo(theta1, q_cur)
        loglik_trace.append(float(ll_cur))

    diagnostics: dict = {
        "grad_lipschitz": lipschitz,
        "mode": "fixed" if fixed_step is not None else "backtracking",
        "n_decisions": points.n_steps,
    }
    if fixed_step is not None and len(loglik_trace) >= 2:
        n_updates = len(loglik_trace) - 1
        denom = fixed_step * (1.0 - fixed_step * lipschitz / 2.0)
        if denom > 0:
            diagnostics["stationarity_bound"] = (
                (max(loglik_trace) - loglik_trace[0]) / (n_updates * denom)
            )
            diagnostics["min_sq_grad_norm"] = float(
                min(g**2 for g in grad_norm_trace[:n_updates])
            )
    return Stage2Result(
        theta1=theta1,
        pseudo_loglik=float(loglik_trace[-1]),
        loglik_trace=loglik_trace,
        grad_norm_trace=grad_norm_trace,
        step_sizes=step_sizes,
        converged=converged,
        n_iters=len(step_sizes),
        diagnostics=diagnostics,
    )


def estimate(histories, family, config: EstimatorConfig | None = None) -> EstimateReport:
    """Two-stage fit; deterministic for a given dataset and configuration."""
    if config is None:
        config = EstimatorConfig()
    start = time.perf_counter()
    stage1 = stage1_fit_theta2(histories, family, config)
    stage2 = stage2_policy_gradient(
        histories, family, stage1.theta2, config, stage1.filtered
    )
    grid = BeliefGrid.create(family.n_states, config.grid_resolution)
    final_model = family.build_model(stage2.theta1, stage1.theta2)
    loglik = log_likelihood(final_model, histories, grid=grid, tol=config.bellman_tol)
    elapsed = time.perf_counter() - start
    return EstimateReport(
        theta1=stage2.theta1,
        theta2=stage1.theta2,
        labeled=family.describe(stage2.theta1, stage1.theta2),
        loglik=loglik,
        stage1=stage1,
        stage2=stage2,
        config=config,
        diagnostics={
            "runtime_seconds": elapsed,
            "stage2_grad_lipschitz": stage2.diagnostics.get("grad_lipschitz"),
        },
    )


def empirical_increments(histories, n_bins: int, n_increments: int = 4) -> np.ndarray:
    """Empirical usage-increment frequencies over keep decisions.

    Steps whose start bin could censor the increment against the top of the
    range are excluded so the counts match the uncapped distribution.
    """
    counts = np.zeros(n_increments)
    for h in histories:
        if h.horizon == 0:
            continue
        keep = h.acts == 0
        safe = h.obs[:-1] <= n_bins - 1 - n_increments
        use = keep & safe
        deltas = (h.obs[1:] - h.obs[:-1])[use]
        if deltas.size:
            if deltas.min() < 0 or deltas.max() >= n_increments:
                raise ValueError("usage decreased or jumped beyond the increment range")
            counts += np.bincount(deltas, minlength=n_increments)
    total = counts.sum()
    if total == 0:
        return np.full(n_increments, 1.0 / n_increments)
    return counts / total


def fit_mdp_baseline(
    histories,
    config: EstimatorConfig | None = None,
    n_mileage_bins: int = 120,
    discount: float = 0.95,
) -> EstimateReport:
    """Fit the fully observed baseline on the same dataset.

    The increment distribution is the closed-form frequency estimate (the
    observation term is separable); the reward parameters then go through the
    same policy-gradient stage as the hidden-state model.
    """
    from .engine import MdpEngineFamily

    if config is None:
        config = EstimatorConfig()
    family = MdpEngineFamily(n_mileage_bins, discount)
    start = time.perf_counter()
    theta2 = empirical_increments(histories, n_mileage_bins)
    # Histories carry two-state initial beliefs; the baseline ignores them.
    flat = [History(Belief(np.ones(1)), h.obs, h.acts) for h in histories]
    model_hat2 = family.build_model(family.default_theta1(), theta2)
    blocks = DatasetBlocks.from_histories(flat, model_hat2)
    obs_ll = observation_loglik(model_hat2.kernel, blocks)
    filtered = filter_dataset(model_hat2, flat)
    stage1 = Stage1Result(
        theta2=theta2,
        unconstrained=family.theta2_to_unconstrained(theta2),
        obs_loglik=float(obs_ll),
        trace=[float(obs_ll)],
        converged=True,
        n_evals=1,
        message="closed form: empirical increment frequencies",
        filtered=filtered,
    )
    stage2 = stage2_policy_gradient(flat, family, theta2, config, filtered)
    grid = BeliefGrid.create(1, config.grid_resolution)
    final_model = family.build_model(stage2.theta1, theta2)
    loglik = log_likelihood(final_model, flat, grid=grid, tol=config.bellman_tol)
    elapsed = time.perf_counter() - start
    return EstimateReport(
        theta1=stage2.theta1,
        theta2=theta2,
        labeled=family.describe(stage2.theta1, theta2),
        loglik=loglik,
        stage1=stage1,
        stage2=stage2,
        config=config,
        diagnostics={"runtime_seconds": elapsed, "baseline": "fully observed"},
    )
