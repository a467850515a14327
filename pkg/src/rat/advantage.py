"""Rollout post-processing: GAE, advantage and observation normalisation, PopArt."""

from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import ShapeError

OBS_CLIP = 5.0
VAR_EPS = 1e-8
SIGMA_FLOOR = 1e-6


@dataclass
class RolloutBatch:
    """On-policy transitions laid out as ``(T, E, ...)`` arrays.

    ``dones[t, e]`` marks the last step of an episode.  For episodes cut by a
    time limit, ``timeout_values[t, e]`` holds the critic's value of the state
    reached, which GAE uses as the bootstrap; it is zero for true terminations.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    behavior_log_probs: np.ndarray
    values: np.ndarray
    bootstrap_values: np.ndarray
    timeout_values: np.ndarray = None
    raw_states: np.ndarray = None
    episode_returns: list = field(default_factory=list)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.ndim == 1:
            self.rewards = self.rewards[:, None]
        T, E = self.rewards.shape
        self.dones = np.asarray(self.dones, dtype=bool).reshape(T, E)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(T, E)
        self.bootstrap_values = np.asarray(self.bootstrap_values, dtype=np.float64).reshape(E)
        self.behavior_log_probs = np.asarray(self.behavior_log_probs, dtype=np.float64).reshape(T, E)
        if self.timeout_values is None:
            self.timeout_values = np.zeros((T, E))
        self.timeout_values = np.asarray(self.timeout_values, dtype=np.float64).reshape(T, E)
        if len(self.states) != T or len(self.actions) != T:
            raise ShapeError("states, actions and rewards must share the time dimension")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    @property
    def n_steps(self):
        return self.rewards.shape[0]

    @property
    def n_envs(self):
        return self.rewards.shape[1]

    def flat(self):
        """Return ``(states, actions, log_probs)`` flattened over time and env."""
        n = self.n_steps * self.n_envs
        states = np.asarray(self.states).reshape(n, -1)
        actions = np.asarray(self.actions)
        actions = actions.reshape(n) if actions.ndim == 2 else actions.reshape(n, -1)
        return states, actions, self.behavior_log_probs.reshape(n)


def gae(batch, gamma=0.99, lam=0.95):
    """Generalised advantage estimation with done masking.

    Returns ``(advantages, returns)`` shaped ``(T, E)``; returns are
    ``advantages + values``.
    """
    T, E = batch.rewards.shape
    if batch.values.shape != (T, E):
        raise ShapeError(f"values shape {batch.values.shape} does not match rewards {(T, E)}")
    adv = np.zeros((T, E))
    last = np.zeros(E)
    next_value = batch.bootstrap_values
    for t in range(T - 1, -1, -1):
        done = batch.dones[t]
        nv = np.where(done, batch.timeout_values[t], next_value)
        delta = batch.rewards[t] + gamma * nv - batch.values[t]
        last = delta + gamma * lam * np.where(done, 0.0, last)
        adv[t] = last
        next_value = batch.values[t]
    return adv, adv + batch.values


def normalize_advantages(adv):
    """Zero mean and unit (divide-by-N) standard deviation.

    Near-constant inputs (std below 1e-8) are only centred.
    """
    a = np.asarray(adv, dtype=np.float64)
    if a.size < 2:
        raise ShapeError("need at least two advantages to normalise")
    centred = a - a.mean()
    std = centred.std()
    if std < 1e-8:
        return centred
    return centred / std


@dataclass
class RunningMoments:
    """Per-dimension running mean and variance (parallel Welford update)."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0

    @classmethod
    def zeros(cls, dim):
        return cls(mean=np.zeros(dim), var=np.ones(dim), count=0.0)

    def update(self, batch):
        x = np.asarray(batch, dtype=np.float64).reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        if n == 0:
            return self
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, float(n)
            return self
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta * delta * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total
        return self

    def normalize(self, obs):
        z = (np.asarray(obs, dtype=np.float64) - self.mean) / np.sqrt(self.var + VAR_EPS)
        return np.clip(z, -OBS_CLIP, OBS_CLIP)


def obs_normalize(moments, obs, update=True):
    """Normalise observations, updating the running moments first when asked."""
    if update:
        moments.update(obs)
    return moments.normalize(obs)


@dataclass(frozen=True)
class PopArtState:
    """Exponentially decayed first/second moments of value targets.

    ``mu`` and ``sigma`` are the bias-corrected statistics, i.e. the raw
    moments divided by ``1 - decay**step``.
    """

    decay: float = 0.99999
    first: float = 0.0
    second: float = 0.0
    step: int = 0

    @property
    def mu(self):
        if self.step == 0:
            return 0.0
        return self.first / (1.0 - self.decay ** self.step)

    @property
    def sigma(self):
        if self.step == 0:
            return 1.0
        nu = self.second / (1.0 - self.decay ** self.step)
        return float(np.sqrt(max(nu - self.mu ** 2, SIGMA_FLOOR ** 2)))

    def normalize(self, targets):
        return (np.asarray(targets, dtype=np.float64) - self.mu) / self.sigma

    def denormalize(self, values):
        return np.asarray(values, dtype=np.float64) * self.sigma + self.mu


def popart_rescale(state, targets, final_layer):
    """Update the target statistics and rewrite the final value layer.

    ``final_layer`` is ``(weights, bias)`` of the linear output producing the
    normalised prediction.  The returned layer keeps
    ``sigma * prediction + mu`` unchanged for every input.
    """
    t = np.asarray(targets, dtype=np.float64).ravel()
    weights, bias = final_layer
    d = state.decay
    new = replace(
        state,
        first=d * state.first + (1.0 - d) * t.mean(),
        second=d * state.second + (1.0 - d) * np.mean(t * t),
        step=state.step + 1,
    )
    mu_old, sigma_old = state.mu, state.sigma
    mu_new, sigma_new = new.mu, new.sigma
    scale = sigma_old / sigma_new
    new_weights = np.asarray(weights, dtype=np.float64) * scale
    new_bias = (sigma_old * np.asarray(bias, dtype=np.float64) + mu_old - mu_new) / sigma_new
    return new, (new_weights, new_bias)
