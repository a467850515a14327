"""Desk-scale environments, rollout collection and exact tabular oracles."""

from dataclasses import dataclass

import numpy as np

from . import policy as pol
from .advantage import RolloutBatch
from .linalg import SingularMatrixError, damped, solve_spd, sym_eigvalsh


@dataclass(frozen=True)
class TabularMdp:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    p0: np.ndarray  # (S,)
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        p0 = np.asarray(self.p0, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or r.shape != P.shape[:2] or p0.shape != P.shape[:1]:
            raise ValueError("inconsistent MDP shapes")
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must be distributions")
        if np.any(p0 < 0) or abs(p0.sum() - 1.0) > 1e-12:
            raise ValueError("p0 must be a distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "p0", p0)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def features(self, states):
        return np.eye(self.n_states)[np.asarray(states, dtype=np.int64)]


def chain_mdp(n_states=5, slip=0.1, gamma=0.99):
    """Chain walk: action 0 moves left, action 1 moves right.

    With probability ``slip`` the move goes the other way.  Pushing right at
    the right end pays 1; every other transition pays 0.  Episodes start at
    the left end.
    """
    P = np.zeros((n_states, 2, n_states))
    for s in range(n_states):
        left, right = max(s - 1, 0), min(s + 1, n_states - 1)
        P[s, 0, left] += 1.0 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1.0 - slip
        P[s, 1, left] += slip
    r = np.zeros((n_states, 2))
    r[n_states - 1, 1] = 1.0
    p0 = np.zeros(n_states)
    p0[0] = 1.0
    return TabularMdp(P, r, p0, gamma)


def symmetric_two_state(gamma=0.9):
    """Two states, two actions; both actions behave identically."""
    P = np.full((2, 2, 2), 0.5)
    r = np.ones((2, 2))
    return TabularMdp(P, r, np.array([0.5, 0.5]), gamma)


def tabular_policy_spec(mdp, anchor_logit=False):
    """Softmax policy on one-hot state features (one logit table, no bias)."""
    out = mdp.n_actions - 1 if anchor_logit else mdp.n_actions
    return pol.MlpSpec((mdp.n_states, out), head="categorical", bias=False, anchor_logit=anchor_logit)


def policy_table(mdp, spec, theta):
    return pol.action_probs(spec, theta, mdp.features(np.arange(mdp.n_states)))


def policy_value(mdp, pi):
    """``V_pi`` by a direct Bellman solve."""
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.sum(pi * mdp.reward, axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def discounted_occupancy(mdp, pi):
    """``d_pi = (1 - gamma) sum_t gamma^t P(s_t = s)`` from ``(I - gamma P_pi)^T d = (1 - gamma) p0``."""
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    return np.linalg.solve((np.eye(mdp.n_states) - mdp.gamma * P_pi).T, (1.0 - mdp.gamma) * mdp.p0)


def stationary_distribution(mdp, pi):
    """Stationary state distribution of the undiscounted chain under ``pi``."""
    S = mdp.n_states
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    A = np.vstack([P_pi.T - np.eye(S), np.ones((1, S))])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


def optimal_value(mdp, tol=1e-12, max_iter=100_000):
    """Value iteration; returns ``(V*, greedy_policy_table)``."""
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = mdp.reward + mdp.gamma * mdp.transition @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    greedy = np.eye(mdp.n_actions)[np.argmax(mdp.reward + mdp.gamma * mdp.transition @ V, axis=1)]
    return V, greedy


@dataclass
class ExactQuantities:
    pi: np.ndarray
    d_pi: np.ndarray
    q: np.ndarray
    v: np.ndarray
    adv: np.ndarray
    Sigma: np.ndarray
    H_full: np.ndarray
    fisher: np.ndarray
    pg: np.ndarray
    npg_exact: np.ndarray
    tnpg_exact: np.ndarray
    J: float


def exact_quantities(mdp, spec, theta, lam=0.1):
    """Enumerate every (s, a) pair and compute the exact gradient family.

    Rows of ``H_full`` and entries of ``Sigma``/``adv`` follow the order
    ``s * n_actions + a``.  ``npg_exact`` is ``None`` when the Fisher matrix
    is singular.  With ``lam == 0`` a singular Fisher raises
    :class:`SingularMatrixError` instead.
    """
    S, A = mdp.n_states, mdp.n_actions
    if S * A > 4096:
        raise ValueError("state-action space too large to enumerate")
    pi = policy_table(mdp, spec, theta)
    v = policy_value(mdp, pi)
    q = mdp.reward + mdp.gamma * mdp.transition @ v
    adv = q - v[:, None]
    d = discounted_occupancy(mdp, pi)
    Sigma = (d[:, None] * pi).ravel()
    states = np.repeat(np.arange(S), A)
    actions = np.tile(np.arange(A), S)
    H = pol.per_sample_scores(spec, theta, mdp.features(states), actions)
    fisher = H.T @ (Sigma[:, None] * H)
    fisher = 0.5 * (fisher + fisher.T)
    pg = H.T @ (Sigma * adv.ravel())
    eig = sym_eigvalsh(fisher)
    full_rank = eig[0] > 1e-10 * max(eig[-1], 1e-300)
    npg = solve_spd(fisher, pg) if full_rank else None
    if lam == 0:
        if npg is None:
            raise SingularMatrixError("Fisher matrix is singular and no damping was given")
        tnpg = npg
    else:
        tnpg = solve_spd(damped(fisher, lam), pg)
    return ExactQuantities(
        pi=pi, d_pi=d, q=q, v=v, adv=adv, Sigma=Sigma, H_full=H, fisher=fisher,
        pg=pg, npg_exact=npg, tnpg_exact=tnpg, J=float(mdp.p0 @ v),
    )


def sample_state_actions(mdp, pi, n, rng):
    """Draw ``n`` i.i.d. pairs from ``d_pi(s) pi(a|s)``; returns flat indices ``s * A + a``."""
    d = discounted_occupancy(mdp, pi)
    joint = np.clip((d[:, None] * pi).ravel(), 0.0, None)
    return rng.choice(joint.size, size=n, p=joint / joint.sum())


class TabularEnv:
    """Vectorised episodic wrapper around a :class:`TabularMdp`.

    The state array holds ``[s, t]`` per environment.  ``horizon=None`` means
    episodes never end.
    """

    discrete = True

    def __init__(self, mdp, horizon=None):
        self.mdp = mdp
        self.horizon = horizon

    @property
    def obs_dim(self):
        return self.mdp.n_states

    def reset(self, rng, n):
        s = rng.choice(self.mdp.n_states, size=n, p=self.mdp.p0)
        return np.stack([s, np.zeros(n, dtype=np.int64)], axis=1)

    def observe(self, state):
        return self.mdp.features(state[:, 0])

    def step(self, state, action, rng):
        s = state[:, 0]
        a = np.asarray(action, dtype=np.int64)
        probs = self.mdp.transition[s, a]
        u = rng.random(s.shape[0])
        s_next = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), self.mdp.n_states - 1)
        reward = self.mdp.reward[s, a]
        new = np.stack([s_next, state[:, 1] + 1], axis=1)
        return new, reward, np.zeros(s.shape[0], dtype=bool)

    def truncated(self, state):
        if self.horizon is None:
            return np.zeros(state.shape[0], dtype=bool)
        return state[:, 1] >= self.horizon


@dataclass(frozen=True)
class PointMassState:
    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    t: int = 0


POINT_MASS_DT = 0.05
POINT_MASS_DAMPING = 0.95
POINT_MASS_STEP_LIMIT = 100


def point_mass_step(state, action, dt=POINT_MASS_DT, damping=POINT_MASS_DAMPING,
                    step_limit=POINT_MASS_STEP_LIMIT):
    """Advance the 2-D point mass by one step.

    The pre-squash action is mapped through ``tanh`` to a force in (-1, 1).
    Velocity is damped then accelerated, position moves with the new
    velocity, and the reward is the negative distance to the goal afterwards.
    """
    force = np.tanh(np.asarray(action, dtype=np.float64))
    vel = damping * state.velocity + dt * force
    pos = state.position + dt * vel
    reward = -float(np.linalg.norm(pos - state.goal))
    t = state.t + 1
    return PointMassState(pos, vel, state.goal, t), reward, t >= step_limit


class PointMassEnv:
    """Vectorised point mass.  State rows are ``[px, py, vx, vy, t]``."""

    discrete = False
    obs_dim = 4
    action_dim = 2

    def __init__(self, goal=(0.0, 0.0), step_limit=POINT_MASS_STEP_LIMIT,
                 dt=POINT_MASS_DT, damping=POINT_MASS_DAMPING, start_range=1.0):
        self.goal = np.asarray(goal, dtype=np.float64)
        self.step_limit = step_limit
        self.dt = dt
        self.damping = damping
        self.start_range = start_range

    def reset(self, rng, n):
        state = np.zeros((n, 5))
        state[:, :2] = rng.uniform(-self.start_range, self.start_range, size=(n, 2))
        return state

    def observe(self, state):
        obs = state[:, :4].copy()
        obs[:, :2] -= self.goal
        return obs

    def step(self, state, action, rng):
        force = np.tanh(np.asarray(action, dtype=np.float64))
        new = state.copy()
        new[:, 2:4] = self.damping * state[:, 2:4] + self.dt * force
        new[:, :2] = state[:, :2] + self.dt * new[:, 2:4]
        new[:, 4] = state[:, 4] + 1
        reward = -np.linalg.norm(new[:, :2] - self.goal, axis=1)
        return new, reward, np.zeros(state.shape[0], dtype=bool)

    def truncated(self, state):
        return state[:, 4] >= self.step_limit


def _greedy_actions(spec, theta, obs):
    out = pol.forward(spec, theta, obs)["out"]
    if spec.head == "gaussian":
        return out
    logits = np.concatenate([np.zeros((out.shape[0], 1)), out], axis=1) if spec.anchor_logit else out
    return np.argmax(logits, axis=1)


def collect_rollouts(env, spec, theta, n_steps, n_envs, rng_seed, value_fn=None,
                     obs_moments=None, greedy=False, rng=None):
    """Run ``n_envs`` copies of ``env`` for ``n_steps`` steps under the policy.

    Observations are normalised with ``obs_moments`` frozen for the whole
    rollout (the caller updates them afterwards from ``batch.raw_states``).
    ``value_fn`` maps observations to value estimates; without it values are
    zero.  Deterministic given the seed (or the ``rng`` passed in).
    """
    if rng is None:
        rng = np.random.default_rng(rng_seed)
    value_fn = value_fn or (lambda obs: np.zeros(obs.shape[0]))
    norm = obs_moments.normalize if obs_moments is not None else (lambda o: o)
    state = env.reset(rng, n_envs)
    T, E = n_steps, n_envs
    states = np.empty((T, E, env.obs_dim))
    raw_states = np.empty((T, E, env.obs_dim))
    actions = np.empty((T, E), dtype=np.int64) if env.discrete else np.empty((T, E, spec.out_dim))
    rewards = np.empty((T, E))
    dones = np.zeros((T, E), dtype=bool)
    logps = np.empty((T, E))
    vals = np.empty((T, E))
    timeout_values = np.zeros((T, E))
    ep_ret = np.zeros(E)
    finished = []
    for t in range(T):
        raw = env.observe(state)
        obs = norm(raw)
        if greedy:
            act = _greedy_actions(spec, theta, obs)
            logp = pol.log_probs(spec, theta, obs, act)
        else:
            act, logp = pol.sample_actions(spec, theta, obs, rng)
        states[t], raw_states[t], actions[t], logps[t] = obs, raw, act, logp
        vals[t] = value_fn(obs)
        state, reward, terminated = env.step(state, act, rng)
        rewards[t] = reward
        ep_ret += reward
        truncated = env.truncated(state) & ~terminated
        done = terminated | truncated
        dones[t] = done
        if np.any(truncated):
            timeout_values[t, truncated] = value_fn(norm(env.observe(state[truncated])))
        if np.any(done):
            finished.extend(ep_ret[done].tolist())
            ep_ret[done] = 0.0
            state[done] = env.reset(rng, int(done.sum()))
    bootstrap = value_fn(norm(env.observe(state)))
    return RolloutBatch(
        states=states, actions=actions, rewards=rewards, dones=dones,
        behavior_log_probs=logps, values=vals, bootstrap_values=bootstrap,
        timeout_values=timeout_values, raw_states=raw_states, episode_returns=finished,
    )


def evaluate_returns(env, spec, theta, n_episodes, rng_seed, obs_moments=None, max_steps=None):
    """Mean undiscounted episodic return over ``n_episodes`` stochastic episodes."""
    rng = np.random.default_rng(rng_seed)
    norm = obs_moments.normalize if obs_moments is not None else (lambda o: o)
    state = env.reset(rng, n_episodes)
    totals = np.zeros(n_episodes)
    active = np.ones(n_episodes, dtype=bool)
    limit = max_steps or getattr(env, "step_limit", None) or env.horizon
    for _ in range(limit):
        act, _ = pol.sample_actions(spec, theta, norm(env.observe(state)), rng)
        state, reward, terminated = env.step(state, act, rng)
        totals += np.where(active, reward, 0.0)
        active &= ~(terminated | env.truncated(state))
        if not active.any():
            break
    return float(totals.mean())
