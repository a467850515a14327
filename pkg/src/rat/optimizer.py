"""Interleaved RAT policy updates.

One update consumes an on-policy batch collected under ``theta_old``.  The
batch is cut into random minibatches; for each minibatch the transformed
advantage is computed against the running Kaczmarz iterate ``g``, the
parameter direction is the gradient of the ratio-weighted surrogate, and the
step length is ``alpha = min(lr, clip / ||direction||)``.

``surrogate="log_prob"`` drops the importance ratio and differentiates
``mean(log pi(a|s) * adv)`` instead.  Both give the same direction at
``theta_old``; away from it the ratio-free form keeps the exact cancellation
of the Kaczmarz increment ``H^T adv`` at the current parameters.

Score rows are scaled by ``1/sqrt(B)`` before the block step so that the
Gram matrix is the minibatch *average* ``H H^T / B``.  With that scaling the
Kaczmarz increment ``H_s^T adv_s`` equals the surrogate gradient at
``theta_old`` when the per-sample transformed advantage is
``sqrt(B) * adv_s``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import policy as pol
from .kaczmarz import BlockPartition, rat_block_step


@dataclass(frozen=True)
class RatConfig:
    lam: float = 0.1
    pi_lr: float = 0.05
    vf_lr: float = 0.001
    shared_lr: float = 0.1
    pi_clip: float = 0.5
    vf_clip: float = 5.0
    batch_size: int = 1024
    epochs_per_update: int = 8
    inner_iters: int = 0
    mode: str = "interleaved"
    advantage_source: str = "pre_normalized"
    average_gram: bool = True
    persist_g: bool = False
    transform: bool = True
    clip: bool = True
    clip_mode: str = "min"
    surrogate: str = "ratio"

    def __post_init__(self):
        for name in ("lam", "pi_lr", "vf_lr", "shared_lr", "pi_clip", "vf_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs_per_update < 1 or self.inner_iters < 0:
            raise ValueError("batch_size and epochs_per_update must be at least 1")
        if self.mode not in ("interleaved", "fixed_policy"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.advantage_source not in ("pre_normalized", "raw"):
            raise ValueError(f"unknown advantage_source {self.advantage_source!r}")
        if self.clip_mode not in ("min", "lr_times_clip"):
            raise ValueError(f"unknown clip_mode {self.clip_mode!r}")
        if self.surrogate not in ("ratio", "log_prob"):
            raise ValueError(f"unknown surrogate {self.surrogate!r}")


@dataclass
class StepRecord:
    grad_norm: float
    alpha: float
    step_norm: float
    residual: float


@dataclass
class OptimizerState:
    theta: np.ndarray
    theta_old: np.ndarray = None
    g: np.ndarray = None
    update_counter: int = 0
    steps: list = field(default_factory=list)
    g_history: list = field(default_factory=list)


@dataclass
class UpdateData:
    """Flat per-sample arrays for one policy update."""

    states: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray = None

    def __len__(self):
        return self.advantages.shape[0]


def clip_gradient(g, lr, clip):
    """Step scale ``min(lr, clip / ||g||)``; ``lr`` when ``g`` is zero."""
    if not (lr > 0 and clip > 0):
        raise ValueError("lr and clip must be positive")
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        return lr
    return min(lr, clip / norm)


def step_scale(direction, lr, clip, cfg):
    if not cfg.clip:
        return lr
    if cfg.clip_mode == "lr_times_clip":
        # clip the direction to norm `clip`, then apply the learning rate
        return lr * min(1.0, clip_gradient(direction, 1.0, clip))
    return clip_gradient(direction, lr, clip)


def _begin_update(state, spec, cfg):
    theta = np.array(state.theta, dtype=np.float64)
    g = state.g
    if g is None or not cfg.persist_g:
        g = np.zeros(spec.n_params)
    return OptimizerState(theta=theta, theta_old=theta.copy(), g=g,
                          update_counter=state.update_counter)


def _targets(data, cfg):
    return np.asarray(data.advantages, dtype=np.float64)


def _policy_minibatch(st, spec, data, rows, cfg):
    theta = st.theta
    s, a = data.states[rows], data.actions[rows]
    lp_old = data.old_log_probs[rows]
    y = _targets(data, cfg)[rows]
    b = rows.size
    scale = 1.0 / np.sqrt(b) if cfg.average_gram else 1.0
    residual = float("nan")
    S = pol.per_sample_scores(spec, theta, s, a)
    if cfg.transform:
        H = S * scale
        y_s = y * scale
        residual = float(np.linalg.norm(y_s - H @ st.g))
        g_next, adv_s = rat_block_step(st.g, H, y_s, cfg.lam)
        adv = adv_s * scale * b
    else:
        g_next, adv = st.g, y
    if cfg.mode == "fixed_policy" and cfg.transform:
        direction = g_next - st.g
    elif cfg.surrogate == "log_prob":
        direction = S.T @ adv / b
    else:
        direction = pol.surrogate_gradient(spec, theta, None, s, a, adv, old_log_probs=lp_old)
    return g_next, direction, residual


def _shared_minibatch(st, spec, data, rows, cfg):
    theta = st.theta
    s, a = data.states[rows], data.actions[rows]
    lp_old = data.old_log_probs[rows]
    y = _targets(data, cfg)[rows]
    b = rows.size
    scale = 1.0 / np.sqrt(b) if cfg.average_gram else 1.0
    resid = data.value_targets[rows] - pol.values(spec, theta, s)
    H_v = pol.value_scores(spec, theta, s, resid)
    residual = float("nan")
    H_pi = pol.per_sample_scores(spec, theta, s, a)
    if cfg.transform:
        H = np.vstack([H_pi, H_v]) * scale
        y_s = np.concatenate([y, np.ones(b)]) * scale
        residual = float(np.linalg.norm(y_s - H @ st.g))
        g_next, adv_s = rat_block_step(st.g, H, y_s, cfg.lam)
        adv_all = adv_s * scale * b
        adv, w = adv_all[:b], adv_all[b:]
    else:
        g_next, adv, w = st.g, y, np.ones(b)
    if cfg.surrogate == "log_prob":
        direction = H_pi.T @ adv / b
    else:
        direction = pol.surrogate_gradient(spec, theta, None, s, a, adv, old_log_probs=lp_old)
    direction = direction + H_v.T @ w / b
    return g_next, direction, residual


def _run(state, spec, data, cfg, rng, partition, n_steps, minibatch, lr, clip):
    st = _begin_update(state, spec, cfg)
    n = len(data)
    if partition is None:
        partition = BlockPartition.random(n, min(cfg.batch_size, n), rng)
    if n_steps is None:
        n_steps = cfg.inner_iters or cfg.epochs_per_update * partition.n_blocks
    st.g_history.append(st.g.copy())
    for k in partition.schedule(n_steps, rng):
        rows = partition.blocks[k]
        g_next, direction, residual = minibatch(st, spec, data, rows, cfg)
        alpha = step_scale(direction, lr, clip, cfg)
        step = alpha * direction
        if cfg.mode == "interleaved":
            st.theta = st.theta + step
        else:
            step = np.zeros_like(step)
        st.g = g_next
        st.g_history.append(g_next.copy())
        st.steps.append(StepRecord(
            grad_norm=float(np.linalg.norm(direction)), alpha=float(alpha),
            step_norm=float(np.linalg.norm(step)), residual=residual,
        ))
    st.update_counter += 1
    return st


def rat_epoch(state, data, spec, cfg, rng, partition=None, n_steps=None):
    """One RAT policy update over ``data``.

    ``theta_old`` is refreshed from ``state.theta``; the running iterate is
    reset to zero unless ``cfg.persist_g``.  Runs ``epochs_per_update``
    passes over a random partition unless ``n_steps`` or ``cfg.inner_iters``
    says otherwise.
    """
    return _run(state, spec, data, cfg, rng, partition, n_steps, _policy_minibatch,
                cfg.pi_lr, cfg.pi_clip)


def vanilla_pg_epoch(state, data, spec, cfg, rng, partition=None, n_steps=None):
    """Same pipeline as :func:`rat_epoch` with the untransformed advantage."""
    return rat_epoch(state, data, spec, replace(cfg, transform=False), rng, partition, n_steps)


def shared_ac_epoch(state, data, spec, cfg, rng, partition=None, n_steps=None):
    """RAT for a shared actor-critic trunk.

    Each minibatch stacks the policy score rows (targets: advantages) on
    top of the value-likelihood rows (targets: all-ones pseudo advantage)
    and transforms both jointly; the direction is the gradient of the joint
    surrogate ``E[ratio * A] - E[w * (v - V)^2 / 2]``.
    """
    if data.value_targets is None:
        raise ValueError("shared actor-critic updates need value targets")
    return _run(state, spec, data, cfg, rng, partition, n_steps, _shared_minibatch,
                cfg.shared_lr, cfg.pi_clip)


def rat_direction(spec, theta, states, actions, y, lam, average_gram=True):
    """First RAT step from ``g = 0`` using the whole batch as one block."""
    H = pol.per_sample_scores(spec, theta, states, actions)
    scale = 1.0 / np.sqrt(H.shape[0]) if average_gram else 1.0
    g, _ = rat_block_step(np.zeros(H.shape[1]), H * scale, np.asarray(y) * scale, lam)
    return g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(theta, grad, adam, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam descent step; returns ``(theta, adam)``."""
    t = adam.t + 1
    m = beta1 * adam.m + (1 - beta1) * grad
    v = beta2 * adam.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def critic_update(spec, theta, adam, states, targets, cfg, rng, n_epochs=None):
    """Minibatch Adam regression of ``V`` onto (normalised) targets.

    Gradients are clipped to norm ``cfg.vf_clip`` before the Adam step.
    """
    n = states.shape[0]
    partition = BlockPartition.random(n, min(cfg.batch_size, n), rng)
    n_epochs = n_epochs or cfg.epochs_per_update
    for k in partition.schedule(n_epochs * partition.n_blocks, rng):
        rows = partition.blocks[k]
        grad = pol.value_loss_grad(spec, theta, states[rows], targets[rows])
        norm = np.linalg.norm(grad)
        if cfg.clip and norm > cfg.vf_clip:
            grad = grad * (cfg.vf_clip / norm)
        theta, adam = adam_step(theta, grad, adam, cfg.vf_lr)
    return theta, adam
