"""Seeded experiment drivers: training, ablation sweeps, solver verification, the Gaussian field."""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import policy as pol
from .advantage import PopArtState, RunningMoments, gae, normalize_advantages, popart_rescale
from .config import (STREAM_DATA, STREAM_EVAL, STREAM_INIT, STREAM_OPTIMIZER, STREAM_ROLLOUT,
                     stream_rng)
from .envs import (PointMassEnv, TabularEnv, chain_mdp, collect_rollouts, evaluate_returns,
                   policy_table, policy_value, tabular_policy_spec)
from .kaczmarz import (BlockPartition, DampedSystem, cg_normal_equations, estimate_mu,
                       exact_primal, kaczmarz_ensemble, noise_gain)
from .likelihood import METHODS as FIELD_METHODS
from .likelihood import gradient_field
from .linalg import cosine
from .optimizer import (AdamState, OptimizerState, StepRecord, UpdateData, critic_update,
                        rat_epoch, shared_ac_epoch, step_scale, vanilla_pg_epoch)

RUN_COLUMNS = ("update", "env_steps", "mean_return", "grad_norm", "alpha", "residual",
               "max_step_norm")
ABLATION_COLUMNS = ("axis", "value", "seed", "final_return", "failed")
FIELD_COLUMNS = ("theta1", "theta2", "method", "g1", "g2")


@dataclass
class RunRecord:
    seed: int
    rows: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    failed: bool = False
    error: str = ""

    @property
    def final_return(self):
        if self.failed or not self.rows:
            return float("nan")
        return self.rows[-1]["mean_return"]


@dataclass
class _Setup:
    env: object
    spec: pol.MlpSpec
    critic_spec: pol.MlpSpec
    mdp: object = None


def _setup(cfg):
    if cfg.env == "chain":
        mdp = chain_mdp(cfg.chain_states, cfg.chain_slip, cfg.gamma)
        env = TabularEnv(mdp, horizon=cfg.chain_horizon)
        if cfg.shared_network:
            spec = pol.MlpSpec((mdp.n_states, mdp.n_actions), head="categorical", bias=False,
                               value_head=True)
            return _Setup(env, spec, spec, mdp)
        return _Setup(env, tabular_policy_spec(mdp), pol.MlpSpec((mdp.n_states, 1), head="value"), mdp)
    env = PointMassEnv(step_limit=cfg.pm_step_limit, dt=cfg.pm_dt, damping=cfg.pm_damping)
    sizes = (env.obs_dim, *cfg.hidden_sizes)
    if cfg.shared_network:
        spec = pol.MlpSpec((*sizes, env.action_dim), head="gaussian", value_head=True)
        return _Setup(env, spec, spec)
    return _Setup(env, pol.MlpSpec((*sizes, env.action_dim), head="gaussian"),
                  pol.MlpSpec((env.obs_dim, *cfg.critic_hidden_sizes, 1), head="value"))


def _metric(cfg, setup, theta, moments, rng_eval):
    """Exact discounted return on the chain; mean evaluation return on the point mass."""
    if setup.mdp is not None:
        pi = policy_table(setup.mdp, setup.spec, theta)
        return float(setup.mdp.p0 @ policy_value(setup.mdp, pi))
    return evaluate_returns(setup.env, setup.spec, theta, cfg.eval_episodes,
                            int(rng_eval.integers(2**31)), obs_moments=moments)


def _param_space_update(cfg, rcfg, setup, st, data):
    """Full-batch baselines: one damped natural-gradient step per rollout.

    The direction is the exact (``exact_tnpg``) or conjugate-gradient
    (``cg_fvp``) solution of the full-batch damped least-squares problem at
    ``theta_old``, i.e. the point RAT's inner Kaczmarz loop converges
    towards.  The step rule is the same clipped ``alpha`` as RAT's.
    """
    theta = np.array(st.theta)
    n = len(data)
    scale = 1.0 / np.sqrt(n)
    H = pol.per_sample_scores(setup.spec, theta, data.states, data.actions) * scale
    system = DampedSystem(H, data.advantages * scale, rcfg.lam)
    if cfg.method == "exact_tnpg":
        direction = exact_primal(system)
    else:
        direction = cg_normal_equations(system, max_iter=cfg.cg_iters).x
    residual = float(np.linalg.norm(system.y - H @ direction))
    alpha = step_scale(direction, rcfg.pi_lr, rcfg.pi_clip, rcfg)
    out = OptimizerState(theta=theta + alpha * direction, theta_old=theta, g=direction,
                         update_counter=st.update_counter + 1)
    out.steps.append(StepRecord(float(np.linalg.norm(direction)), float(alpha),
                                float(np.linalg.norm(alpha * direction)), residual))
    return out


def train_seed(cfg, seed):
    """Train one seed; never raises for numerical failure (the record is marked failed)."""
    rng_init = stream_rng(seed, STREAM_INIT)
    rng_roll = stream_rng(seed, STREAM_ROLLOUT)
    rng_opt = stream_rng(seed, STREAM_OPTIMIZER)
    rng_eval = stream_rng(seed, STREAM_EVAL)
    setup = _setup(cfg)
    spec, vspec = setup.spec, setup.critic_spec
    shared = cfg.shared_network
    theta = pol.init_params(spec, rng_init, log_std=cfg.log_std_init)
    vtheta = theta if shared else pol.init_params(vspec, rng_init)
    adam = AdamState(np.zeros(vspec.n_params), np.zeros(vspec.n_params))
    popart = PopArtState(decay=cfg.popart_decay)
    moments = None
    if cfg.normalize_obs and setup.mdp is None:
        moments = RunningMoments.zeros(setup.env.obs_dim)
    rcfg = cfg.rat_config()
    state = OptimizerState(theta=theta)
    record = RunRecord(seed=seed)
    env_steps = 0
    for k in range(cfg.n_updates):
        t0 = time.perf_counter()
        try:
            vt = state.theta if shared else vtheta
            pa = popart

            def value_fn(obs, vt=vt, pa=pa):
                return pa.denormalize(pol.values(vspec, vt, obs))

            batch = collect_rollouts(setup.env, spec, state.theta, cfg.n_steps, cfg.n_envs, None,
                                     value_fn=value_fn, obs_moments=moments, rng=rng_roll)
            env_steps += cfg.n_steps * cfg.n_envs
            adv, ret = gae(batch, cfg.gamma, cfg.gae_lambda)
            adv = adv.ravel()
            y = normalize_advantages(adv) if rcfg.advantage_source == "pre_normalized" else adv
            states, actions, logp = batch.flat()
            if moments is not None:
                moments.update(batch.raw_states.reshape(-1, setup.env.obs_dim))
            targets = ret.ravel()
            if cfg.popart:
                target_theta = state.theta if shared else vtheta
                popart, layer = popart_rescale(popart, targets, pol.value_layer(vspec, target_theta))
                target_theta = pol.with_value_layer(vspec, target_theta, *layer)
                if shared:
                    state.theta = target_theta
                else:
                    vtheta = target_theta
                targets = popart.normalize(targets)
            data = UpdateData(states, actions, logp, y, value_targets=targets)
            if cfg.method in ("exact_tnpg", "cg_fvp"):
                state = _param_space_update(cfg, rcfg, setup, state, data)
            elif shared:
                r = rcfg if cfg.method == "rat" else replace(rcfg, transform=False)
                state = shared_ac_epoch(state, data, spec, r, rng_opt)
            elif cfg.method == "rat":
                state = rat_epoch(state, data, spec, rcfg, rng_opt)
            else:
                state = vanilla_pg_epoch(state, data, spec, rcfg, rng_opt)
            if not shared:
                vtheta, adam = critic_update(vspec, vtheta, adam, states, targets, rcfg, rng_opt)
            if not (np.all(np.isfinite(state.theta)) and np.all(np.isfinite(vtheta))):
                raise FloatingPointError("non-finite parameters")
            ret_metric = _metric(cfg, setup, state.theta, moments, rng_eval)
            if not np.isfinite(ret_metric):
                raise FloatingPointError("non-finite return")
        except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            record.failed = True
            record.error = f"update {k}: {exc}"
            break
        steps = state.steps
        record.step_norms.extend(s.step_norm for s in steps)
        record.alphas.extend(s.alpha for s in steps)
        record.grad_norms.extend(s.grad_norm for s in steps)
        residuals = [s.residual for s in steps]
        record.rows.append({
            "update": k,
            "env_steps": env_steps,
            "mean_return": ret_metric,
            "grad_norm": float(np.mean([s.grad_norm for s in steps])),
            "alpha": float(np.mean([s.alpha for s in steps])),
            "residual": float(np.mean(residuals)) if residuals else float("nan"),
            "max_step_norm": float(max(s.step_norm for s in steps)),
        })
        record.wall_time.append(time.perf_counter() - t0)
        state = OptimizerState(theta=state.theta, g=state.g, update_counter=state.update_counter)
    return record


def train(cfg):
    return [train_seed(cfg, s) for s in cfg.seed_list]


def summarize(records):
    finals = np.array([r.final_return for r in records if not r.failed])
    out = {
        "final_returns": {str(r.seed): (None if r.failed else r.final_return) for r in records},
        "failed_seeds": [r.seed for r in records if r.failed],
        "mean_final_return": float(finals.mean()) if finals.size else None,
        "stderr_final_return": float(finals.std(ddof=1) / np.sqrt(finals.size)) if finals.size > 1 else 0.0,
        "max_step_norm": float(max((max(r.step_norms) for r in records if r.step_norms), default=0.0)),
    }
    return out


def ablation_config(cfg, axis, value):
    """Apply one sweep point to a config."""
    if axis == "batch_size":
        return replace(cfg, batch_size=int(value))
    if axis == "kaczmarz_iters":
        return replace(cfg, inner_iters=int(value))
    if axis == "damping":
        return replace(cfg, lam=float(value))
    if axis == "no_transform":
        return replace(cfg, transform=not bool(value), method="rat")
    if axis == "no_clip":
        return replace(cfg, clip=not bool(value))
    raise ValueError(f"unknown ablation axis {axis!r}")


def ablate(cfg):
    """Long-format rows ``(axis, value, seed, final_return, failed)``."""
    rows = []
    for value in cfg.ablate_values:
        point = ablation_config(cfg, cfg.ablate_axis, value)
        for rec in train(point):
            rows.append({"axis": cfg.ablate_axis, "value": value, "seed": rec.seed,
                         "final_return": rec.final_return, "failed": rec.failed})
    return rows


def _low_rank_block_system(rng, n_rows, n_params, block, rank):
    blocks = [rng.standard_normal((block, rank)) @ rng.standard_normal((rank, n_params))
              for _ in range(n_rows // block)]
    return np.vstack(blocks)


def verify_kaczmarz(cfg, seed):
    """Check the linear-rate and error-floor bounds on random systems.

    Consistent systems ``y = H g*`` are solved from ``g0 = 0`` with
    ``n_runs`` seeded runs each.  The seed-averaged squared error must stay
    below ``1.1 (1 - mu)^j ||g*||^2``.  With block noise of standard
    deviation ``noise_std`` the averaged error over the second half of the
    run must stay below ``1.2 eta^2 / mu``.
    """
    rng = stream_rng(seed, STREAM_DATA)
    lam = cfg.sys_lam
    systems = []
    for i in range(cfg.n_systems):
        H = rng.standard_normal((cfg.sys_rows, cfg.sys_params))
        g_star = rng.standard_normal(cfg.sys_params)
        part = BlockPartition.contiguous(cfg.sys_rows, cfg.sys_block, "uniform_with_replacement")
        system = DampedSystem(H, H @ g_star, lam)
        mu = estimate_mu(H, lam, part, rng_seed=seed)
        run_seeds = [[seed, i, r] for r in range(cfg.n_runs)]
        it = kaczmarz_ensemble(system, part, run_seeds, cfg.n_iters)
        err = np.mean(np.sum((it - g_star) ** 2, axis=2), axis=0)
        bound = (1.0 - mu) ** np.arange(cfg.n_iters + 1) * err[0]
        ok = bool(np.all(err <= 1.1 * bound))
        tail = err > 1e-24 * err[0]
        slope = np.polyfit(np.arange(cfg.n_iters + 1)[tail], np.log(err[tail]), 1)[0]
        entry = {"system": i, "mu_hat": mu, "rate_fit": float(1.0 - np.exp(slope)),
                 "bound_satisfied": ok, "max_ratio": float(np.max(err / bound))}
        if cfg.noise_std > 0:
            eta2 = noise_gain(H, lam, part, cfg.noise_std, rng_seed=seed)
            noisy = kaczmarz_ensemble(system, part, run_seeds, cfg.n_iters, noise_std=cfg.noise_std)
            nerr = np.sum((noisy - g_star) ** 2, axis=2)
            floor_avg = float(np.mean(nerr[:, cfg.n_iters // 2:]))
            entry.update(eta2_hat=eta2, floor_avg=floor_avg, noise_floor_ratio=floor_avg / (eta2 / mu))
        else:
            entry.update(eta2_hat=0.0, floor_avg=0.0, noise_floor_ratio=0.0)
        entry["floor_satisfied"] = bool(entry["noise_floor_ratio"] <= 1.2)
        systems.append(entry)
    H_lr = _low_rank_block_system(rng, cfg.sys_rows, cfg.sys_params, cfg.sys_block, cfg.sweep_rank)
    part = BlockPartition.contiguous(cfg.sys_rows, cfg.sys_block, "uniform_with_replacement")
    sweep = [{"lam": float(l), "mu_hat": estimate_mu(H_lr, l, part, rng_seed=seed)}
             for l in cfg.sweep_lams]
    mus = [s["mu_hat"] for s in sweep]
    lams = list(cfg.sweep_lams)
    order = np.argsort(lams)
    decreasing = bool(all(mus[order[i]] > mus[order[i + 1]] for i in range(len(order) - 1)))
    return {
        "systems": systems,
        "mu_hat": [s["mu_hat"] for s in systems],
        "rate_fit": [s["rate_fit"] for s in systems],
        "bound_satisfied": [s["bound_satisfied"] for s in systems],
        "noise_floor_ratio": [s["noise_floor_ratio"] for s in systems],
        "lam_sweep": sweep,
        "mu_decreasing_in_lam": decreasing,
        "all_bounds_satisfied": all(s["bound_satisfied"] and s["floor_satisfied"] for s in systems),
    }


def illustrate_gaussian(cfg, seed):
    """Gradient-field rows plus the per-point RAT / empirical-natural cosine summary."""
    rng = stream_rng(seed, STREAM_DATA)
    samples = cfg.sample_mean + cfg.sample_std * rng.standard_normal(cfg.n_samples)
    rows = gradient_field(samples, cfg.illus_lam, cfg.illus_batch_size, cfg.illus_steps, seed=seed)
    by_point = {}
    for t1, t2, name, g1, g2 in rows:
        by_point.setdefault((t1, t2), {})[name] = np.array([g1, g2])
    cos = [cosine(d["rat"], d["natural_empirical"]) for d in by_point.values()]
    summary = {
        "n_points": len(by_point),
        "methods": list(FIELD_METHODS),
        "fraction_cosine_ge_0.95": float(np.mean(np.array(cos) >= 0.95)),
        "min_cosine": float(np.min(cos)),
    }
    return rows, summary
