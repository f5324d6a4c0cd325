"""Machine replacement benchmark with a hidden condition state.

The observable is a discretized cumulative-usage reading z; the hidden state
s is binary (0 good, 1 bad). Keeping the machine (a = 0) costs an amount
linear in z with a slope that depends on s, usage advances by a random
increment of 0..3 bins whose distribution depends on s, and the condition
evolves with given persistence probabilities. Replacing (a = 1) pays a fixed
cost and resets both usage and condition.

The module also carries the fully observed baseline family (no hidden state)
used for misspecification comparisons, a simulator for synthetic datasets,
and JSONL dataset IO.

Field data note: fits on the historical bus-fleet maintenance records that
motivated this benchmark reached a log likelihood of about -3819 for the
hidden-state model against -4495 for the fully observed baseline (17.7%
worse). Those records are not distributed here; load_fleet_records is a stub
documenting the expected interface.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from .bellman import BeliefGrid, solve as bellman_solve
from .errors import InvalidParams, ParseError, SchemaError
from .model import Belief, History, PomdpModel

_ROW_TOL = 1e-9
N_INCREMENTS = 4


@dataclass(frozen=True, eq=False)
class EngineParams:
    """Parameters of the hidden-condition replacement model.

    persistence[s] is the probability the condition stays at s when keeping;
    increments[s] is the usage-increment distribution (4 bins) in condition s;
    cost_slopes[s] scales the per-bin operating cost; replacement_cost is the
    price of a reset.
    """

    persistence: np.ndarray
    increments: np.ndarray
    cost_slopes: np.ndarray
    replacement_cost: float
    n_mileage_bins: int = 120

    def __post_init__(self):
        pers = np.asarray(self.persistence, dtype=np.float64)
        inc = np.asarray(self.increments, dtype=np.float64)
        slopes = np.asarray(self.cost_slopes, dtype=np.float64)
        if pers.shape != (2,) or np.any(pers < 0.0) or np.any(pers > 1.0):
            raise InvalidParams("persistence must be two probabilities")
        if inc.shape != (2, N_INCREMENTS) or np.any(inc < 0.0):
            raise InvalidParams(f"increments must be nonnegative with shape (2, {N_INCREMENTS})")
        if np.max(np.abs(inc.sum(axis=1) - 1.0)) > _ROW_TOL:
            raise InvalidParams("increment rows must sum to 1")
        if slopes.shape != (2,) or not np.all(np.isfinite(slopes)):
            raise InvalidParams("cost_slopes must be two finite numbers")
        if not (self.replacement_cost > 0.0):
            raise InvalidParams("replacement_cost must be positive")
        if self.n_mileage_bins < N_INCREMENTS:
            raise InvalidParams(f"need at least {N_INCREMENTS} usage bins")
        for name, arr in (("persistence", pers), ("increments", inc), ("cost_slopes", slopes)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def reference_params() -> EngineParams:
    """Ground truth used throughout the synthetic experiments."""
    return EngineParams(
        persistence=np.array([0.949, 0.988]),
        increments=np.array(
            [
                [0.039, 0.333, 0.590, 0.038],
                [0.181, 0.757, 0.061, 0.001],
            ]
        ),
        cost_slopes=np.array([0.2, 1.2]),
        replacement_cost=9.243,
    )


def save_params(params: EngineParams, path) -> None:
    payload = {
        "persistence": params.persistence.tolist(),
        "increments": params.increments.tolist(),
        "cost_slopes": params.cost_slopes.tolist(),
        "replacement_cost": params.replacement_cost,
        "n_mileage_bins": params.n_mileage_bins,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_params(path) -> EngineParams:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"parameter file is not valid JSON: {e.msg}", line=e.lineno)
    allowed = {"persistence", "increments", "cost_slopes", "replacement_cost", "n_mileage_bins"}
    unknown = set(payload) - allowed
    if unknown:
        raise InvalidParams(f"unknown parameter fields: {sorted(unknown)}")
    missing = {"persistence", "increments", "cost_slopes", "replacement_cost"} - set(payload)
    if missing:
        raise InvalidParams(f"missing parameter fields: {sorted(missing)}")
    return EngineParams(
        persistence=np.asarray(payload["persistence"], dtype=np.float64),
        increments=np.asarray(payload["increments"], dtype=np.float64),
        cost_slopes=np.asarray(payload["cost_slopes"], dtype=np.float64),
        replacement_cost=float(payload["replacement_cost"]),
        n_mileage_bins=int(payload.get("n_mileage_bins", 120)),
    )


def _increment_mass(increments_row: np.ndarray, n_bins: int) -> np.ndarray:
    """Usage transition matrix (z, z') for one condition; the top bin saturates."""
    out = np.zeros((n_bins, n_bins))
    for z in range(n_bins):
        for d in range(N_INCREMENTS):
            out[z, min(z + d, n_bins - 1)] += increments_row[d]
    return out


def build_engine_model(params: EngineParams, discount: float = 0.95) -> PomdpModel:
    """Assemble the joint kernel and reward table for the replacement model."""
    nz = params.n_mileage_bins
    stay = np.array(
        [
            [params.persistence[0], 1.0 - params.persistence[0]],
            [1.0 - params.persistence[1], params.persistence[1]],
        ]
    )
    kernel = np.zeros((2, nz, 2, nz, 2))
    for s in range(2):
        usage = _increment_mass(params.increments[s], nz)
        kernel[0, :, s, :, :] = usage[:, :, None] * stay[s][None, None, :]
    kernel[1, :, :, 0, 0] = 1.0
    reward = np.empty((2, nz, 2))
    z_axis = np.arange(nz, dtype=np.float64)
    reward[0] = -0.001 * z_axis[:, None] * params.cost_slopes[None, :]
    reward[1] = -params.replacement_cost
    return PomdpModel(
        n_states=2, n_obs=nz, n_actions=2, kernel=kernel, reward=reward, discount=discount
    )


def _anchored_softmax(logits: np.ndarray) -> np.ndarray:
    """Probabilities from free logits with the last category pinned at 0."""
    full = np.concatenate([logits, [0.0]])
    return softmax(full)


def _anchored_logits(probs: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-12, None)
    logs = np.log(p)
    return (logs - logs[-1])[:-1]


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return np.log(p) - np.log1p(-p)


class EngineFamily:
    """Parametric family for the hidden-condition model.

    Reward parameters theta1 = (slope_good, slope_bad, replacement_cost) enter
    the reward table linearly. Dynamics parameters theta2 stack the two
    persistence probabilities and the two increment rows:
    (p_good, p_bad, inc_good[0..3], inc_bad[0..3]), 10 entries with each
    increment row summing to 1. The unconstrained chart uses logits for the
    persistences and anchored log-ratios for the increment rows (8 free
    coordinates).
    """

    n_states = 2
    n_actions = 2
    theta1_dim = 3
    theta2_unconstrained_dim = 2 + 2 * (N_INCREMENTS - 1)

    def __init__(self, n_mileage_bins: int = 120, discount: float = 0.95):
        self.n_mileage_bins = n_mileage_bins
        self.discount = discount

    @property
    def n_obs(self) -> int:
        return self.n_mileage_bins

    def params_to_theta(self, params: EngineParams) -> tuple[np.ndarray, np.ndarray]:
        theta1 = np.array([params.cost_slopes[0], params.cost_slopes[1], params.replacement_cost])
        theta2 = np.concatenate([params.persistence, params.increments.ravel()])
        return theta1, theta2

    def theta_to_params(self, theta1: np.ndarray, theta2: np.ndarray) -> EngineParams:
        return EngineParams(
            persistence=np.asarray(theta2[:2]),
            increments=np.asarray(theta2[2:]).reshape(2, N_INCREMENTS),
            cost_slopes=np.asarray(theta1[:2]),
            replacement_cost=float(theta1[2]),
            n_mileage_bins=self.n_mileage_bins,
        )

    def default_theta1(self) -> np.ndarray:
        return np.zeros(self.theta1_dim)

    def default_theta2(self) -> np.ndarray:
        uniform = np.full(N_INCREMENTS, 1.0 / N_INCREMENTS)
        return np.concatenate([[0.5, 0.5], uniform, uniform])

    def theta2_to_unconstrained(self, theta2: np.ndarray) -> np.ndarray:
        inc = np.asarray(theta2[2:]).reshape(2, N_INCREMENTS)
        return np.concatenate(
            [_logit(theta2[:2]), _anchored_logits(inc[0]), _anchored_logits(inc[1])]
        )

    def theta2_from_unconstrained(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        k = N_INCREMENTS - 1
        return np.concatenate(
            [
                expit(u[:2]),
                _anchored_softmax(u[2 : 2 + k]),
                _anchored_softmax(u[2 + k : 2 + 2 * k]),
            ]
        )

    def build_kernel(self, theta2: np.ndarray) -> np.ndarray:
        nz = self.n_mileage_bins
        pers = theta2[:2]
        inc = np.asarray(theta2[2:]).reshape(2, N_INCREMENTS)
        stay = np.array([[pers[0], 1.0 - pers[0]], [1.0 - pers[1], pers[1]]])
        kernel = np.zeros((2, nz, 2, nz, 2))
        for s in range(2):
            usage = _increment_mass(inc[s], nz)
            kernel[0, :, s, :, :] = usage[:, :, None] * stay[s][None, None, :]
        kernel[1, :, :, 0, 0] = 1.0
        return kernel

    def reward_tensor(self, theta1: np.ndarray) -> np.ndarray:
        nz = self.n_mileage_bins
        reward = np.empty((2, nz, 2))
        z_axis = np.arange(nz, dtype=np.float64)
        reward[0] = -0.001 * z_axis[:, None] * np.asarray(theta1[:2])[None, :]
        reward[1] = -float(theta1[2])
        return reward

    def reward_grad(self, theta1: np.ndarray) -> np.ndarray:
        nz = self.n_mileage_bins
        grad = np.zeros((2, nz, 2, self.theta1_dim))
        z_axis = np.arange(nz, dtype=np.float64)
        grad[0, :, 0, 0] = -0.001 * z_axis
        grad[0, :, 1, 1] = -0.001 * z_axis
        grad[1, :, :, 2] = -1.0
        return grad

    def reward_bounds(self) -> tuple[float, float]:
        """Sup-norm bounds on the reward gradient and Hessian in theta1."""
        return max(1.0, 0.001 * (self.n_mileage_bins - 1)), 0.0

    def build_model(self, theta1: np.ndarray, theta2: np.ndarray) -> PomdpModel:
        return PomdpModel(
            n_states=self.n_states,
            n_obs=self.n_obs,
            n_actions=self.n_actions,
            kernel=self.build_kernel(theta2),
            reward=self.reward_tensor(theta1),
            discount=self.discount,
        )

    def describe(self, theta1: np.ndarray, theta2: np.ndarray) -> dict:
        return {
            "cost_slope_good": float(theta1[0]),
            "cost_slope_bad": float(theta1[1]),
            "replacement_cost": float(theta1[2]),
            "persistence_good": float(theta2[0]),
            "persistence_bad": float(theta2[1]),
            "increments_good": [float(v) for v in theta2[2 : 2 + N_INCREMENTS]],
            "increments_bad": [float(v) for v in theta2[2 + N_INCREMENTS :]],
        }


class MdpEngineFamily:
    """Fully observed baseline: one latent state, usage dynamics only.

    theta1 = (cost_slope, replacement_cost); theta2 is the single increment
    distribution (4 entries summing to 1).
    """

    n_states = 1
    n_actions = 2
    theta1_dim = 2
    theta2_unconstrained_dim = N_INCREMENTS - 1

    def __init__(self, n_mileage_bins: int = 120, discount: float = 0.95):
        self.n_mileage_bins = n_mileage_bins
        self.discount = discount

    @property
    def n_obs(self) -> int:
        return self.n_mileage_bins

    def default_theta1(self) -> np.ndarray:
        return np.zeros(self.theta1_dim)

    def default_theta2(self) -> np.ndarray:
        return np.full(N_INCREMENTS, 1.0 / N_INCREMENTS)

    def theta2_to_unconstrained(self, theta2: np.ndarray) -> np.ndarray:
        return _anchored_logits(np.asarray(theta2))

    def theta2_from_unconstrained(self, u: np.ndarray) -> np.ndarray:
        return _anchored_softmax(np.asarray(u, dtype=np.float64))

    def build_kernel(self, theta2: np.ndarray) -> np.ndarray:
        nz = self.n_mileage_bins
        usage = _increment_mass(np.asarray(theta2), nz)
        kernel = np.zeros((2, nz, 1, nz, 1))
        kernel[0, :, 0, :, 0] = usage
        kernel[1, :, 0, 0, 0] = 1.0
        return kernel

    def reward_tensor(self, theta1: np.ndarray) -> np.ndarray:
        nz = self.n_mileage_bins
        reward = np.empty((2, nz, 1))
        reward[0, :, 0] = -0.001 * float(theta1[0]) * np.arange(nz)
        reward[1, :, 0] = -float(theta1[1])
        return reward

    def reward_grad(self, theta1: np.ndarray) -> np.ndarray:
        nz = self.n_mileage_bins
        grad = np.zeros((2, nz, 1, self.theta1_dim))
        grad[0, :, 0, 0] = -0.001 * np.arange(nz)
        grad[1, :, 0, 1] = -1.0
        return grad

    def reward_bounds(self) -> tuple[float, float]:
        return max(1.0, 0.001 * (self.n_mileage_bins - 1)), 0.0

    def build_model(self, theta1: np.ndarray, theta2: np.ndarray) -> PomdpModel:
        return PomdpModel(
            n_states=1,
            n_obs=self.n_obs,
            n_actions=2,
            kernel=self.build_kernel(theta2),
            reward=self.reward_tensor(theta1),
            discount=self.discount,
        )

    def describe(self, theta1: np.ndarray, theta2: np.ndarray) -> dict:
        return {
            "cost_slope": float(theta1[0]),
            "replacement_cost": float(theta1[1]),
            "increments": [float(v) for v in theta2],
        }


@dataclass(frozen=True)
class SimConfig:
    """Synthetic data generation settings.

    x0 is either the string "uniform" (good-state weight drawn uniformly per
    history) or a fixed two-entry belief. Per-history draw order from a
    spawned seed stream: initial belief, initial state, then one action draw
    and one transition draw per period.
    """

    n_histories: int
    horizon: int
    seed: int
    x0: object = "uniform"
    z0: int = 0
    grid_resolution: int = 101
    discount: float = 0.95

    def __post_init__(self):
        if self.n_histories < 1 or self.horizon < 1:
            raise InvalidParams("n_histories and horizon must be at least 1")
        if isinstance(self.x0, str):
            if self.x0 != "uniform":
                raise InvalidParams(f"unknown x0 policy {self.x0!r}")
        else:
            probs = np.asarray(self.x0, dtype=np.float64)
            if probs.shape != (2,) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
                raise InvalidParams("fixed x0 must be a two-entry belief")


@dataclass(frozen=True, eq=False)
class SimResult:
    """Histories plus the latent draws behind them (debugging sidecar)."""

    histories: list
    states: np.ndarray       # (n, horizon + 1) hidden condition paths
    beliefs: np.ndarray      # (n, horizon, 2) decision-time beliefs


def _transition_tables(kernel: np.ndarray):
    """Per (a, z, s) cdf over reachable (z', s') pairs, padded to equal width."""
    n_a, n_z, n_s = kernel.shape[:3]
    flat = kernel.reshape(n_a, n_z, n_s, -1)
    width = int((flat > 0).sum(axis=-1).max())
    cdf = np.ones((n_a, n_z, n_s, width))
    dz = np.zeros((n_a, n_z, n_s, width), dtype=np.int64)
    ds = np.zeros((n_a, n_z, n_s, width), dtype=np.int64)
    for a in range(n_a):
        for z in range(n_z):
            for s in range(n_s):
                nz_idx = np.flatnonzero(flat[a, z, s])
                c = np.cumsum(flat[a, z, s, nz_idx])
                k = nz_idx.size
                cdf[a, z, s, :k] = c
                dz[a, z, s, :k] = nz_idx // n_s
                ds[a, z, s, :k] = nz_idx % n_s
                dz[a, z, s, k:] = nz_idx[-1] // n_s
                ds[a, z, s, k:] = nz_idx[-1] % n_s
    return cdf, dz, ds


def simulate(params: EngineParams, config: SimConfig) -> SimResult:
    """Generate histories by sampling actions from the model's own policy.

    The action at each period is drawn from the conditional choice
    probabilities of the solved model at the current (z, belief); the latent
    condition then evolves under the joint kernel and the belief is updated by
    Bayes' rule. Output is byte-identical for a given (params, config).
    """
    model = build_engine_model(params, config.discount)
    grid = BeliefGrid.create(2, config.grid_resolution)
    qtable = bellman_solve(model, grid).qtable
    qflat = qtable.values.reshape(-1, model.n_actions)
    g = grid.n_nodes

    n, horizon = config.n_histories, config.horizon
    draws_per = 2 * horizon + 2
    streams = np.random.SeedSequence(config.seed).spawn(n)
    u = np.stack([np.random.default_rng(s).random(draws_per) for s in streams])

    if isinstance(config.x0, str):
        good = u[:, 0]
    else:
        good = np.full(n, float(np.asarray(config.x0)[0]))
    x = np.stack([good, 1.0 - good], axis=1)
    s = (u[:, 1] >= good).astype(np.int64)      # hidden condition, 0 good
    z = np.full(n, config.z0, dtype=np.int64)

    cdf, dz, ds = _transition_tables(model.kernel)
    obs = np.empty((n, horizon + 1), dtype=np.int64)
    acts = np.empty((n, horizon), dtype=np.int64)
    states = np.empty((n, horizon + 1), dtype=np.int64)
    beliefs = np.empty((n, horizon, 2))
    obs[:, 0] = z
    states[:, 0] = s
    x0_beliefs = x.copy()

    for t in range(horizon):
        beliefs[:, t, :] = x
        idx, w = grid.interpolate_many(x)
        q_rows = np.einsum("mn,mna->ma", w, qflat[z[:, None] * g + idx])
        pis = softmax(q_rows, axis=1)
        cum = np.cumsum(pis, axis=1)
        a = np.minimum((u[:, 2 + 2 * t, None] >= cum).sum(axis=1), model.n_actions - 1)
        rows = cdf[a, z, s]
        k = np.minimum((u[:, 3 + 2 * t, None] >= rows).sum(axis=1), rows.shape[1] - 1)
        z_next = dz[a, z, s, k]
        s_next = ds[a, z, s, k]
        trans = model.kernel[a, z, :, z_next, :]
        numer = np.einsum("ms,mst->mt", x, trans)
        sig = numer.sum(axis=1)
        x = numer / sig[:, None]
        x = np.maximum(x, 0.0)
        x /= x.sum(axis=1, keepdims=True)
        acts[:, t] = a
        obs[:, t + 1] = z_next
        states[:, t + 1] = s_next
        z, s = z_next, s_next

    histories = [
        History(Belief(x0_beliefs[i]), obs[i], acts[i]) for i in range(n)
    ]
    return SimResult(histories, states, beliefs)


def emit_dataset(histories: list, path) -> None:
    """Write histories as JSON lines: {"x0": [...], "z": [...], "a": [...]}."""
    with open(path, "w") as fh:
        for h in histories:
            fh.write(
                json.dumps(
                    {"x0": h.x0.probs.tolist(), "z": h.obs.tolist(), "a": h.acts.tolist()}
                )
            )
            fh.write("\n")


def emit_debug_sidecar(result: SimResult, path) -> None:
    """Latent conditions and decision-time beliefs, aligned with the dataset."""
    with open(path, "w") as fh:
        for i in range(len(result.histories)):
            fh.write(
                json.dumps(
                    {"s": result.states[i].tolist(), "x": result.beliefs[i].tolist()}
                )
            )
            fh.write("\n")


def load_dataset(path) -> list:
    """Read a JSONL dataset. ParseError carries the 1-based line number."""
    histories = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc}", line=lineno) from None
            if not isinstance(rec, dict) or not {"x0", "z", "a"} <= set(rec):
                raise SchemaError(f"line {lineno}: record must carry x0, z, and a")
            obs = np.asarray(rec["z"], dtype=np.int64)
            acts = np.asarray(rec["a"], dtype=np.int64)
            if obs.size != acts.size + 1:
                raise SchemaError(
                    f"line {lineno}: got {obs.size} observations and {acts.size} actions"
                )
            try:
                histories.append(History(Belief(np.asarray(rec["x0"], dtype=np.float64)), obs, acts))
            except InvalidParams as exc:
                raise SchemaError(f"line {lineno}: {exc}") from None
    return histories


def load_fleet_records(path=None):
    """Placeholder for the historical maintenance records; not distributed.

    Reference fits on those records: hidden-state model log likelihood about
    -3819 versus -4495 for the fully observed baseline, a 17.7 percent fit
    improvement. Those two numbers are documented targets, not outputs this
    package can regenerate.
    """
    raise NotImplementedError(
        "the field maintenance records are not distributed with this package; "
        "supply your own JSONL dataset via load_dataset instead"
    )
