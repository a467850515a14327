"""Small MLP policies and critics with exact per-sample score gradients.

Parameters live in one flat float64 vector.  The layout is, in order: for
each dense layer its weight matrix (``out x in``, row-major) followed by its
bias, then the state-independent Gaussian log-std entries (Gaussian head
only), then the scalar value head ``(w_v, b_v)`` when the network has a
shared trunk.

Three heads are supported:

``gaussian``
    network output is the action mean; actions are the *pre-squash* samples.
``categorical``
    network output is the logit vector.  With ``anchor_logit`` a fixed zero
    logit is prepended, which removes the softmax shift redundancy.
``value``
    a single linear output used as a critic.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
RATIO_MIN = 0.1
RATIO_MAX = 10.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class ConfigurationError(ValueError):
    """Raised when a network spec does not support the requested operation."""


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    activation: str = "tanh"
    head: str = "gaussian"
    bias: bool = True
    anchor_logit: bool = False
    value_head: bool = False

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least an input and an output layer")
        if min(sizes) < 1:
            raise ConfigurationError(f"layer widths must be positive, got {sizes}")
        if self.activation not in ("tanh", "relu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.head not in ("gaussian", "categorical", "value"):
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.head == "value" and sizes[-1] != 1:
            raise ConfigurationError("a value head must have a single output")
        if self.anchor_logit and self.head != "categorical":
            raise ConfigurationError("anchor_logit only applies to categorical heads")

    @property
    def obs_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    @property
    def n_actions(self):
        return self.out_dim + 1 if self.anchor_logit else self.out_dim

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def layer_slices(self):
        """Return ``[(w_slice, w_shape, b_slice_or_None), ...]`` per dense layer."""
        out = []
        pos = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(pos, pos + fan_in * fan_out)
            pos += fan_in * fan_out
            b = None
            if self.bias:
                b = slice(pos, pos + fan_out)
                pos += fan_out
            out.append((w, (fan_out, fan_in), b))
        return out

    @property
    def n_dense(self):
        sizes = self.layer_sizes
        total = sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))
        if self.bias:
            total += sum(sizes[1:])
        return total

    @property
    def log_std_slice(self):
        if self.head != "gaussian":
            return None
        return slice(self.n_dense, self.n_dense + self.out_dim)

    @property
    def value_slices(self):
        if not self.value_head:
            return None
        start = self.n_dense + (self.out_dim if self.head == "gaussian" else 0)
        width = self.layer_sizes[-2]
        return slice(start, start + width), slice(start + width, start + width + 1)

    @property
    def n_params(self):
        n = self.n_dense
        if self.head == "gaussian":
            n += self.out_dim
        if self.value_head:
            n += self.layer_sizes[-2] + 1
        return n


def init_params(spec, rng, log_std=0.0, output_scale=0.01):
    """Scaled-normal initialisation; the output layer is shrunk by ``output_scale``."""
    theta = np.zeros(spec.n_params)
    slices = spec.layer_slices()
    for i, (w, shape, _) in enumerate(slices):
        scale = 1.0 / np.sqrt(shape[1])
        if i == len(slices) - 1:
            scale *= output_scale
        theta[w] = rng.normal(0.0, scale, size=shape[0] * shape[1])
    if spec.head == "gaussian":
        theta[spec.log_std_slice] = log_std
    if spec.value_head:
        wv, _ = spec.value_slices
        theta[wv] = rng.normal(0.0, 1.0 / np.sqrt(spec.layer_sizes[-2]), size=wv.stop - wv.start)
    return theta


def _check_theta(spec, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {theta.shape}")
    return theta


def _check_states(spec, states):
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != spec.obs_dim:
        raise ShapeError(f"states must have {spec.obs_dim} columns, got shape {x.shape}")
    return x


def _activate(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def forward(spec, theta, states):
    """Run the network on a batch; returns a cache consumed by the backward pass."""
    theta = _check_theta(spec, theta)
    x = _check_states(spec, states)
    acts = [x]
    pre = []
    slices = spec.layer_slices()
    for i, (w, shape, b) in enumerate(slices):
        z = acts[-1] @ theta[w].reshape(shape).T
        if b is not None:
            z = z + theta[b]
        pre.append(z)
        if i < len(slices) - 1:
            acts.append(_activate(spec.activation, z))
    cache = {"acts": acts, "pre": pre, "out": pre[-1]}
    if spec.value_head:
        wv, bv = spec.value_slices
        cache["value"] = acts[-1] @ theta[wv] + theta[bv][0]
    elif spec.head == "value":
        cache["value"] = pre[-1][:, 0]
    return cache


def _backward(spec, theta, cache, d_out, d_value=None, per_sample=True):
    """Backpropagate output cotangents into parameter gradients.

    ``d_out`` is ``(N, out_dim)`` and ``d_value`` (shared trunk only) is
    ``(N,)``.  Returns an ``(N, p)`` matrix of per-sample gradients, or their
    sum over samples when ``per_sample`` is false.  Log-std columns are left
    at zero; heads fill them in.
    """
    acts = cache["acts"]
    pre = cache["pre"]
    n = acts[0].shape[0]
    grads = np.zeros((n, spec.n_params)) if per_sample else np.zeros(spec.n_params)
    slices = spec.layer_slices()
    delta = np.asarray(d_out, dtype=np.float64)
    for i in range(len(slices) - 1, -1, -1):
        w, shape, b = slices[i]
        a_prev = acts[i]
        if per_sample:
            grads[:, w] = np.einsum("no,ni->noi", delta, a_prev).reshape(n, -1)
            if b is not None:
                grads[:, b] = delta
        else:
            grads[w] = (delta.T @ a_prev).ravel()
            if b is not None:
                grads[b] = delta.sum(axis=0)
        if i == 0:
            break
        back = delta @ theta[w].reshape(shape)
        if i == len(slices) - 1 and d_value is not None:
            wv, bv = spec.value_slices
            if per_sample:
                grads[:, wv] = d_value[:, None] * a_prev
                grads[:, bv] = d_value[:, None]
            else:
                grads[wv] = d_value @ a_prev
                grads[bv] = d_value.sum()
            back = back + d_value[:, None] * theta[wv]
        delta = back * _activation_grad(spec.activation, pre[i - 1], acts[i])
    if len(slices) == 1 and d_value is not None:
        # no hidden layer: the value head reads the input directly
        wv, bv = spec.value_slices
        if per_sample:
            grads[:, wv] = d_value[:, None] * acts[0]
            grads[:, bv] = d_value[:, None]
        else:
            grads[wv] = d_value @ acts[0]
            grads[bv] = d_value.sum()
    return grads


def _log_std(spec, theta):
    raw = theta[spec.log_std_slice]
    inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
    return np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), inside


def _logits(spec, out):
    if spec.anchor_logit:
        return np.concatenate([np.zeros((out.shape[0], 1)), out], axis=1)
    return out


def _log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_actions(spec, actions, n):
    if spec.head == "gaussian":
        a = np.asarray(actions, dtype=np.float64).reshape(n, -1)
        if a.shape[1] != spec.out_dim:
            raise ShapeError(f"actions must have {spec.out_dim} columns, got shape {a.shape}")
        return a
    if spec.head == "categorical":
        a = np.asarray(actions).reshape(n)
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(a == np.round(a)):
                raise ShapeError("categorical actions must be integers")
            a = a.astype(np.int64)
        if a.min() < 0 or a.max() >= spec.n_actions:
            raise ShapeError(f"action index out of range [0, {spec.n_actions})")
        return a
    raise ConfigurationError("a value network has no action distribution")


def _head(spec, theta, cache, actions):
    """Log-likelihoods and their cotangents w.r.t. the network output."""
    out = cache["out"]
    n = out.shape[0]
    a = _check_actions(spec, actions, n)
    if spec.head == "gaussian":
        log_std, inside = _log_std(spec, theta)
        inv_var = np.exp(-2.0 * log_std)
        diff = a - out
        z2 = diff * diff * inv_var
        logp = np.sum(-0.5 * z2 - log_std - _HALF_LOG_2PI, axis=1)
        d_out = diff * inv_var
        d_log_std = (z2 - 1.0) * inside
        return logp, d_out, d_log_std
    logp_all = _log_softmax(_logits(spec, out))
    logp = logp_all[np.arange(n), a]
    d_logits = -np.exp(logp_all)
    d_logits[np.arange(n), a] += 1.0
    if spec.anchor_logit:
        d_logits = d_logits[:, 1:]
    return logp, d_logits, None


def log_probs(spec, theta, states, actions):
    """Vector of ``log pi(a_i | s_i)``."""
    cache = forward(spec, theta, states)
    return _head(spec, theta, cache, actions)[0]


def log_prob(spec, theta, state, action):
    """Exact log density (Gaussian) or log mass (categorical) of one sample."""
    state = np.asarray(state, dtype=np.float64).reshape(1, -1)
    action = np.asarray(action).reshape(1, -1) if spec.head == "gaussian" else np.asarray([action]).ravel()
    return float(log_probs(spec, theta, state, action)[0])


def per_sample_scores(spec, theta, states, actions):
    """Score matrix ``H``: row ``i`` is the gradient of ``log pi(a_i|s_i)``."""
    theta = _check_theta(spec, theta)
    cache = forward(spec, theta, states)
    _, d_out, d_log_std = _head(spec, theta, cache, actions)
    h = _backward(spec, theta, cache, d_out, per_sample=True)
    if d_log_std is not None:
        h[:, spec.log_std_slice] = d_log_std
    return h


def mean_score(spec, theta, states, actions):
    """Gradient of the mean log-likelihood computed in one batched pass."""
    theta = _check_theta(spec, theta)
    cache = forward(spec, theta, states)
    _, d_out, d_log_std = _head(spec, theta, cache, actions)
    n = d_out.shape[0]
    g = _backward(spec, theta, cache, d_out, per_sample=False)
    if d_log_std is not None:
        g[spec.log_std_slice] = d_log_std.sum(axis=0)
    return g / n


def values(spec, theta, states):
    """Critic output ``V(s)``; requires a value head."""
    if not (spec.value_head or spec.head == "value"):
        raise ConfigurationError("network has no value output")
    return forward(spec, theta, states)["value"]


def value_scores(spec, theta, states, residuals):
    """Per-sample gradients of ``log N(v_i; V(s_i), 1)`` with ``v_i = V(s_i) + residual_i``."""
    if not (spec.value_head or spec.head == "value"):
        raise ConfigurationError("network has no value output")
    theta = _check_theta(spec, theta)
    cache = forward(spec, theta, states)
    r = np.asarray(residuals, dtype=np.float64).ravel()
    n = cache["acts"][0].shape[0]
    if r.shape != (n,):
        raise ShapeError(f"need {n} residuals, got {r.shape}")
    if spec.head == "value":
        return _backward(spec, theta, cache, r[:, None], per_sample=True)
    zeros = np.zeros_like(cache["out"])
    return _backward(spec, theta, cache, zeros, d_value=r, per_sample=True)


def value_log_likelihood(spec, theta, states, targets):
    """``log N(v; V(s), 1)`` per sample."""
    diff = np.asarray(targets, dtype=np.float64) - values(spec, theta, states)
    return -0.5 * diff * diff - _HALF_LOG_2PI


def joint_scores_shared_ac(spec, theta, states, actions, value_noise):
    """Joint actor-critic scores for a shared trunk.

    Row ``i`` is ``grad log pi(a_i|s_i) + grad log p(v_i|s_i)`` where the
    critic output is modelled as a unit-variance Gaussian and ``v_i`` is the
    prediction perturbed by ``value_noise[i]``.
    """
    if not spec.value_head:
        raise ConfigurationError("joint scores need a shared trunk with a value head")
    theta = _check_theta(spec, theta)
    cache = forward(spec, theta, states)
    _, d_out, d_log_std = _head(spec, theta, cache, actions)
    noise = np.asarray(value_noise, dtype=np.float64).ravel()
    if noise.shape != (d_out.shape[0],):
        raise ShapeError(f"value_noise must have length {d_out.shape[0]}")
    h = _backward(spec, theta, cache, d_out, d_value=noise, per_sample=True)
    if d_log_std is not None:
        h[:, spec.log_std_slice] = d_log_std
    return h


def surrogate_objective(spec, theta, states, actions, adv, old_log_probs):
    """``mean(clip(pi/pi_old, 0.1, 10) * adv)``."""
    ratio = np.exp(log_probs(spec, theta, states, actions) - old_log_probs)
    return float(np.mean(np.clip(ratio, RATIO_MIN, RATIO_MAX) * adv))


def surrogate_gradient(spec, theta, theta_old, states, actions, adv, old_log_probs=None):
    """Gradient of :func:`surrogate_objective` (an ascent direction).

    Clamped ratios are constant, so saturated samples contribute nothing.
    At ``theta == theta_old`` this is exactly ``H.T @ adv / B``.
    """
    theta = _check_theta(spec, theta)
    cache = forward(spec, theta, states)
    logp, d_out, d_log_std = _head(spec, theta, cache, actions)
    if old_log_probs is None:
        old_log_probs = log_probs(spec, theta_old, states, actions)
    adv = np.asarray(adv, dtype=np.float64).ravel()
    n = logp.shape[0]
    if adv.shape != (n,):
        raise ShapeError(f"advantages must have length {n}")
    ratio = np.exp(logp - old_log_probs)
    live = (ratio > RATIO_MIN) & (ratio < RATIO_MAX)
    weight = np.where(live, ratio, 0.0) * adv / n
    g = _backward(spec, theta, cache, d_out * weight[:, None], per_sample=False)
    if d_log_std is not None:
        g[spec.log_std_slice] = weight @ d_log_std
    return g


def value_loss_grad(spec, theta, states, targets):
    """Gradient of ``mean(0.5 * (V(s) - target)^2)`` (a descent direction)."""
    theta = _check_theta(spec, theta)
    cache = forward(spec, theta, states)
    diff = cache["value"] - np.asarray(targets, dtype=np.float64)
    n = diff.shape[0]
    if spec.head == "value":
        return _backward(spec, theta, cache, diff[:, None] / n, per_sample=False)
    zeros = np.zeros_like(cache["out"])
    return _backward(spec, theta, cache, zeros, d_value=diff / n, per_sample=False)


def value_layer(spec, theta):
    """Return copies of the final value layer ``(weights, bias)``."""
    if spec.value_head:
        wv, bv = spec.value_slices
        return theta[wv].copy(), theta[bv].copy()
    if spec.head == "value":
        w, _, b = spec.layer_slices()[-1]
        if b is None:
            raise ConfigurationError("PopArt needs a bias on the value layer")
        return theta[w].copy(), theta[b].copy()
    raise ConfigurationError("network has no value output")


def with_value_layer(spec, theta, weights, bias):
    theta = np.array(theta, dtype=np.float64, copy=True)
    if spec.value_head:
        wv, bv = spec.value_slices
    else:
        wv, _, bv = spec.layer_slices()[-1]
    theta[wv] = weights
    theta[bv] = bias
    return theta


def sample_actions(spec, theta, states, rng):
    """Draw actions and return ``(actions, log_probs)``."""
    cache = forward(spec, theta, states)
    out = cache["out"]
    if spec.head == "gaussian":
        log_std, _ = _log_std(spec, theta)
        actions = out + np.exp(log_std) * rng.standard_normal(out.shape)
    elif spec.head == "categorical":
        probs = np.exp(_log_softmax(_logits(spec, out)))
        u = rng.random(out.shape[0])
        actions = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
        actions = np.minimum(actions, spec.n_actions - 1)
    else:
        raise ConfigurationError("a value network has no action distribution")
    return actions, _head(spec, theta, cache, actions)[0]


def action_probs(spec, theta, states):
    """Categorical probabilities ``(N, n_actions)``."""
    if spec.head != "categorical":
        raise ConfigurationError("action_probs needs a categorical head")
    out = forward(spec, theta, states)["out"]
    return np.exp(_log_softmax(_logits(spec, out)))
