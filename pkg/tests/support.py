"""Shared builders for the test suite."""
from __future__ import annotations

import numpy as np

from spe import Belief, PomdpModel


def random_kernel(rng: np.random.Generator, n_states: int, n_obs: int, n_actions: int) -> np.ndarray:
    flat = rng.dirichlet(np.ones(n_obs * n_states), size=(n_actions, n_obs, n_states))
    return flat.reshape(n_actions, n_obs, n_states, n_obs, n_states)


def random_model(
    seed: int = 0,
    n_states: int = 2,
    n_obs: int = 4,
    n_actions: int = 2,
    discount: float = 0.9,
    reward_scale: float = 1.0,
) -> PomdpModel:
    rng = np.random.default_rng(seed)
    kernel = random_kernel(rng, n_states, n_obs, n_actions)
    reward = reward_scale * rng.standard_normal((n_actions, n_obs, n_states))
    return PomdpModel(n_states, n_obs, n_actions, kernel, reward, discount)


def random_belief(rng: np.random.Generator, n_states: int) -> Belief:
    return Belief(rng.dirichlet(np.ones(n_states)))


def two_state_hand_model(discount: float = 0.9) -> PomdpModel:
    """One action, two observations; the worked Bayes-update numbers.

    From observation 0: hidden state 0 moves to observation 1 with mass 0.7
    split (0.6, 0.1) over next hidden states, hidden state 1 with mass 0.4
    split (0.2, 0.2). At belief (0.5, 0.5) the observation probability of 1
    is 0.55 and the posterior is (8/11, 3/11).
    """
    kernel = np.zeros((1, 2, 2, 2, 2))
    kernel[0, 0, 0] = [[0.2, 0.1], [0.6, 0.1]]
    kernel[0, 0, 1] = [[0.3, 0.3], [0.2, 0.2]]
    kernel[0, 1, :] = [[0.25, 0.25], [0.25, 0.25]]
    reward = np.zeros((1, 2, 2))
    return PomdpModel(2, 2, 1, kernel, reward, discount)
