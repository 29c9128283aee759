"""MAPPO: shared decentralized actor, centralized critic, numpy only.

The actor sees one agent's local observation (which carries an agent-index
flag); the critic sees the global state plus a one-hot of the agent whose
augmented reward it is valuing. Each iteration collects a fixed number of
complete episodes with the stochastic policy, then runs several epochs of
clipped-surrogate minibatch updates.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .diagnostics import RolloutTrace
from .dsl import CompiledProgram
from .env import DELIVERY_REWARD, N_ACTIONS, Layout, Overcooked
from .nn import MLP, Adam, clip_grad_norm

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    actor_lr: float = 5e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    ppo_clip: float = 0.2
    entropy_coef: float = 0.01
    minibatch: int = 256
    epochs: int = 10
    hidden: tuple[int, ...] = (64, 64)
    iterations: int = 21
    episodes_per_iteration: int = 8
    shaping_scale: float = 0.1
    max_grad_norm: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        for name in ("actor_lr", "critic_lr", "minibatch", "epochs", "iterations", "episodes_per_iteration"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.shaping_scale < 0:
            raise ValueError("shaping_scale must be >= 0")

    def total_env_steps(self, horizon: int) -> int:
        return self.iterations * self.episodes_per_iteration * horizon

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# advantages


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0):
    """Generalized advantage estimates and value targets for one sequence.

    ``values[t]`` estimates the state at step t; the state after the final
    step is valued ``last_value`` unless that step is terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise LengthMismatch(f"shapes differ: {rewards.shape}, {values.shape}, {dones.shape}")
    T = len(rewards)
    adv = np.zeros_like(rewards)
    next_value = last_value
    running = 0.0
    for t in range(T - 1, -1, -1):
        notdone = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * notdone - values[t]
        running = delta + gamma * lam * notdone * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / max(float(x.std()), 1e-8)


# ---------------------------------------------------------------------------
# policy and losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_actions(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(logp))
    return np.minimum((np.cumsum(np.exp(logp), axis=1) < u[:, None]).sum(axis=1), N_ACTIONS - 1)


class Policy:
    """Actor and critic networks together with their optimizers."""

    def __init__(self, obs_dim: int, state_dim: int, n_agents: int, config: TrainConfig, rng: np.random.Generator):
        self.n_agents = n_agents
        self.actor = MLP((obs_dim, *config.hidden, N_ACTIONS), rng, out_gain=0.01)
        self.critic = MLP((state_dim + n_agents, *config.hidden, 1), rng, out_gain=1.0)
        self.actor_opt = Adam(self.actor.params, config.actor_lr)
        self.critic_opt = Adam(self.critic.params, config.critic_lr)

    def critic_input(self, states: np.ndarray, agent: np.ndarray) -> np.ndarray:
        return np.concatenate([states, np.eye(self.n_agents)[agent]], axis=-1)

    def values(self, states: np.ndarray, agent: np.ndarray) -> np.ndarray:
        return self.critic(self.critic_input(states, agent))[:, 0]

    def greedy(self, obs: np.ndarray) -> np.ndarray:
        # np.argmax returns the lowest index on ties
        return np.argmax(self.actor(obs), axis=-1)

    def sampler(self, rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
        def act(obs):
            return sample_actions(log_softmax(self.actor(obs)), rng)

        return act

    def flat_params(self) -> np.ndarray:
        return np.concatenate(
            [v.ravel() for net in (self.actor, self.critic) for _, v in sorted(net.params.items())]
        )


def actor_loss(actor: MLP, obs, actions, old_logp, adv, clip_eps: float, ent_coef: float, grad: bool = True):
    """Clipped-surrogate loss minus entropy bonus; returns (loss, grads, stats)."""
    logits, acts = actor.forward(obs)
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    n = len(actions)
    rows = np.arange(n)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_logp)
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    entropy = -(p * logp_all).sum(axis=1)
    loss = float(-np.minimum(s1, s2).mean() - ent_coef * entropy.mean())
    stats = {
        "entropy": float(entropy.mean()),
        "clipfrac": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "approx_kl": float(np.mean(old_logp - logp)),
    }
    if not grad:
        return loss, None, stats
    # d(-mean min(s1, s2))/d logp is nonzero only where the unclipped term is selected
    g_logp = -(adv * ratio * (s1 <= s2)) / n
    g_logits = -g_logp[:, None] * p
    g_logits[rows, actions] += g_logp
    g_logits += (ent_coef / n) * p * (logp_all + entropy[:, None])
    return loss, actor.backward(acts, g_logits), stats


def critic_loss(critic: MLP, inputs, returns, grad: bool = True):
    v, acts = critic.forward(inputs)
    err = v[:, 0] - returns
    loss = float(np.mean(err * err))
    if not grad:
        return loss, None
    g = (2.0 / len(returns)) * err[:, None]
    return loss, critic.backward(acts, g)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBuffer:
    """One iteration of experience, arrays indexed (episode, step, agent)."""

    obs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray  # augmented: sparse + scale * shaping
    shaping: np.ndarray
    sparse: np.ndarray  # (episode, step)
    dones: np.ndarray  # (episode, step)
    values: np.ndarray | None = None
    features: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return int(self.sparse.size)


def collect(
    env: Overcooked,
    policy: Policy,
    program: CompiledProgram | None,
    episodes: int,
    scale: float,
    rng: np.random.Generator,
    keep_features: bool = False,
) -> RolloutBuffer:
    H, n = env.horizon, env.n_agents
    obs = np.zeros((episodes, H, n, env.obs_dim))
    states = np.zeros((episodes, H, env.state_dim))
    actions = np.zeros((episodes, H, n), dtype=np.int64)
    logp = np.zeros((episodes, H, n))
    shaping = np.zeros((episodes, H, n))
    sparse = np.zeros((episodes, H))
    dones = np.zeros((episodes, H))
    feats = []
    for ep in range(episodes):
        s = env.reset(ep)
        for t in range(H):
            o = np.stack([env.observe(s, i) for i in range(n)])
            obs[ep, t] = o
            states[ep, t] = env.global_state(s)
            lp = log_softmax(policy.actor(o))
            a = sample_actions(lp, rng)
            actions[ep, t] = a
            logp[ep, t] = lp[np.arange(n), a]
            out = env.step(s, a)
            sparse[ep, t] = out.sparse_reward
            if program is not None:
                shaping[ep, t] = program.evaluate_list(out.features, out.sparse_reward)
            if keep_features:
                feats.append(out.features)
            dones[ep, t] = float(out.done)
            s = out.next_state
    rewards = sparse[:, :, None] + scale * shaping
    return RolloutBuffer(obs, states, actions, logp, rewards, shaping, sparse, dones, None, feats)


def ppo_update(policy: Policy, buffer: RolloutBuffer, config: TrainConfig, rng: np.random.Generator) -> dict:
    """In-place clipped PPO update of actor and critic from one on-policy buffer."""
    E, H, n = buffer.actions.shape
    agent_ids = np.broadcast_to(np.arange(n), (E, H, n))
    crit_in = policy.critic_input(
        np.broadcast_to(buffer.states[:, :, None, :], (E, H, n, buffer.states.shape[-1])).reshape(E * H * n, -1),
        agent_ids.reshape(-1),
    )
    if buffer.values is None:
        buffer.values = policy.critic(crit_in)[:, 0].reshape(E, H, n)
    adv = np.zeros((E, H, n))
    ret = np.zeros((E, H, n))
    for ep in range(E):
        for i in range(n):
            adv[ep, :, i], ret[ep, :, i] = compute_gae(
                buffer.rewards[ep, :, i], buffer.values[ep, :, i], buffer.dones[ep], config.gamma, config.gae_lambda
            )
    obs = buffer.obs.reshape(E * H * n, -1)
    actions = buffer.actions.reshape(-1)
    old_logp = buffer.logp.reshape(-1)
    adv_n = normalize(adv.reshape(-1))
    returns = ret.reshape(-1)
    N = len(actions)
    totals = {"actor_loss": 0.0, "critic_loss": 0.0, "entropy": 0.0, "clipfrac": 0.0, "approx_kl": 0.0}
    count = 0
    for _ in range(config.epochs):
        perm = rng.permutation(N)
        for start in range(0, N, config.minibatch):
            idx = perm[start : start + config.minibatch]
            a_loss, a_grads, st = actor_loss(
                policy.actor, obs[idx], actions[idx], old_logp[idx], adv_n[idx], config.ppo_clip, config.entropy_coef
            )
            c_loss, c_grads = critic_loss(policy.critic, crit_in[idx], returns[idx])
            if not (np.isfinite(a_loss) and np.isfinite(c_loss)):
                raise NonFiniteLoss(f"non-finite loss (actor={a_loss}, critic={c_loss})")
            clip_grad_norm(a_grads, config.max_grad_norm)
            clip_grad_norm(c_grads, config.max_grad_norm)
            policy.actor_opt.step(policy.actor.params, a_grads)
            policy.critic_opt.step(policy.critic.params, c_grads)
            totals["actor_loss"] += a_loss
            totals["critic_loss"] += c_loss
            for k in ("entropy", "clipfrac", "approx_kl"):
                totals[k] += st[k]
            count += 1
    return {k: v / count for k, v in totals.items()}


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class TrainResult:
    policy: Policy
    curve: list[dict]
    env_steps: int


def train_candidate(
    layout: Layout | str,
    program: CompiledProgram | None,
    config: TrainConfig = TrainConfig(),
    curve_path: str | Path | None = None,
    on_buffer: Callable[[int, RolloutBuffer], None] | None = None,
) -> TrainResult:
    """Train fresh policies for ``config.iterations`` collect-then-update cycles.

    ``program=None`` trains on the sparse reward alone. ``on_buffer`` sees
    every collected buffer (after its update), e.g. for auditing rewards.
    """
    env = Overcooked(layout)
    rng = np.random.default_rng(config.seed)
    policy = Policy(env.obs_dim, env.state_dim, env.n_agents, config, rng)
    curve = []
    steps = 0
    fh = open(curve_path, "w") if curve_path else None
    try:
        for it in range(config.iterations):
            buf = collect(env, policy, program, config.episodes_per_iteration, config.shaping_scale, rng)
            steps += buf.n_steps
            stats = ppo_update(policy, buf, config, rng)
            if on_buffer is not None:
                on_buffer(it, buf)
            greedy = run_episode(env, policy.greedy, program)
            rec = {
                "iteration": it + 1,
                "env_steps": steps,
                "mean_sparse_return": float(buf.sparse.sum(axis=1).mean()),
                "deliveries": float(buf.sparse.sum(axis=1).mean() / DELIVERY_REWARD),
                "greedy_return": float(greedy.sparse.sum()),
                **stats,
            }
            curve.append(rec)
            log.debug("iteration %d: %s", it + 1, rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    expected = config.total_env_steps(env.horizon)
    if steps != expected:
        raise AssertionError(f"budget violated: {steps} != {expected}")
    return TrainResult(policy, curve, steps)


@dataclass
class EpisodeRecord(RolloutTrace):
    invalid: int = 0


def run_episode(env: Overcooked, act: Callable[[np.ndarray], np.ndarray], program: CompiledProgram | None = None, seed: int = 0):
    """Play one episode with ``act(obs_batch) -> actions``; returns a RolloutTrace."""
    H, n = env.horizon, env.n_agents
    s = env.reset(seed)
    shaping = np.zeros((H, n))
    actions = np.zeros((H, n), dtype=np.int64)
    sparse = np.zeros(H)
    invalid = 0
    for t in range(H):
        o = np.stack([env.observe(s, i) for i in range(n)])
        a = np.asarray(act(o))
        out = env.step(s, a)
        actions[t] = a
        sparse[t] = out.sparse_reward
        invalid += sum(out.features["invalid_delivery"])
        if program is not None:
            shaping[t] = program.evaluate_list(out.features, out.sparse_reward)
        s = out.next_state
    return EpisodeRecord(shaping, actions, sparse, invalid)


def random_policy(rng: np.random.Generator, n_agents: int = 2) -> Callable[[np.ndarray], np.ndarray]:
    return lambda obs: rng.integers(0, N_ACTIONS, n_agents)


@dataclass
class EvalResult:
    J_hat: float  # mean discounted sparse return
    J_std: float
    J_undiscounted: float
    J_undiscounted_std: float
    deliveries_mean: float
    invalid_deliveries_mean: float
    returns: list[float]
    traces: list[RolloutTrace]

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("traces")
        return d


def discounted_return(sparse: np.ndarray, gamma: float) -> float:
    return float(np.dot(gamma ** np.arange(len(sparse)), sparse))


def evaluate_sparse(
    policy: Policy | Callable,
    layout: Layout | str,
    episodes: int = 20,
    seed: int = 0,
    program: CompiledProgram | None = None,
    gamma: float = 0.99,
    greedy: bool = False,
) -> EvalResult:
    """Score a policy on the task reward alone.

    ``policy`` may be a trained Policy or any callable mapping an
    observation batch to actions. A Policy samples its actions from a
    generator seeded with ``seed`` unless ``greedy`` is set. The shaping
    program, if given, is evaluated only to fill the traces.
    """
    env = Overcooked(layout)
    if isinstance(policy, Policy):
        act = policy.greedy if greedy else policy.sampler(np.random.default_rng(seed))
    else:
        act = policy
    eps = [run_episode(env, act, program, seed + k) for k in range(episodes)]
    disc = np.array([discounted_return(e.sparse, gamma) for e in eps])
    undisc = np.array([float(e.sparse.sum()) for e in eps])
    deliveries = undisc / DELIVERY_REWARD
    return EvalResult(
        J_hat=float(disc.mean()),
        J_std=float(disc.std()),
        J_undiscounted=float(undisc.mean()),
        J_undiscounted_std=float(undisc.std()),
        deliveries_mean=float(deliveries.mean()),
        invalid_deliveries_mean=float(np.mean([e.invalid for e in eps])),
        returns=[float(v) for v in disc],
        traces=[RolloutTrace(e.shaping, e.actions, e.sparse) for e in eps],
    )
