"""Mean-field PPO: centralised training of the upper-level policy on the N-agent system.

Each environment step samples ONE xi from the upper policy given the mean-field
features; every agent then acts with the lower-level policy built from it.

Random streams are counter-based: iteration ``n`` of a run with seed ``s``
draws its rollouts from ``SeedSequence([s, 1, n])`` (one child per env
instance) and shuffles minibatches with ``[s, 2, n]``.  A checkpoint therefore
only needs the iteration counter to resume bit-exactly.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import envs, nn
from .envs import EnvConfig
from .features import FeatureSpec, featurize
from .policies import XiSpec, act, lower_from_xi, upper_act

log = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "iteration", "env_steps", "mean_return", "mean_final_R",
    "policy_loss", "value_loss", "approx_kl", "clip_frac",
]


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 1.0
    kl_coeff: float = 0.03
    clip: float = 0.2
    lr: float = 5e-5
    critic_lr: float | None = None
    batch_size: int = 4000
    minibatch_size: int = 1000
    n_epochs: int = 5
    iterations: int = 100
    num_envs: int = 4
    num_workers: int = 1
    normalize_advantages: bool = True
    optimizer: str = "adam"
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.batch_size % self.minibatch_size:
            raise ValueError("minibatch_size must divide batch_size")
        if self.batch_size % self.num_envs:
            raise ValueError("num_envs must divide batch_size")
        if not self.clip > 0:
            raise ValueError("clip must be > 0")
        if not 0 < self.gamma < 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("need gamma in (0, 1) and gae_lambda in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")
        if self.lr <= 0 or self.n_epochs < 1 or self.iterations < 0 or self.num_workers < 1:
            raise ValueError("invalid lr / n_epochs / iterations / num_workers")


@dataclass(frozen=True)
class Setup:
    """Everything needed to run the environment with a policy."""

    env: EnvConfig
    features: FeatureSpec
    xi: XiSpec


@dataclass
class RolloutBatch:
    features: np.ndarray
    xi_raw: np.ndarray
    logprob: np.ndarray
    old_mean: np.ndarray
    old_log_std: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    truncated: np.ndarray
    value: np.ndarray
    next_value: np.ndarray
    episode_returns: list[float] = field(default_factory=list)
    episode_final_R: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return self.reward.shape[0]

    @staticmethod
    def concat(parts: list["RolloutBatch"]) -> "RolloutBatch":
        arrays = {
            k: np.concatenate([getattr(p, k) for p in parts])
            for k in ("features", "xi_raw", "logprob", "old_mean", "old_log_std", "reward",
                      "done", "truncated", "value", "next_value")
        }
        rets = [r for p in parts for r in p.episode_returns]
        fin = [r for p in parts for r in p.episode_final_R]
        return RolloutBatch(**arrays, episode_returns=rets, episode_final_R=fin)


def _final_metric(state: envs.SwarmState) -> float:
    return envs.polar_order(state) if state.headings is not None else math.nan


def run_segment(setup: Setup, policy: nn.Mlp, critic: nn.Mlp, steps: int,
                seed: np.random.SeedSequence) -> RolloutBatch:
    """Collect ``steps`` transitions from one environment instance."""
    cfg, fspec, xspec = setup.env, setup.features, setup.xi
    rng = np.random.default_rng(seed)
    kind = cfg.space
    state, obs = envs.reset(cfg, rng)
    feats = np.empty((steps + 1, fspec.size))
    xi_raw = np.empty((steps, xspec.dim))
    means = np.empty((steps, xspec.dim))
    log_stds = np.empty((steps, xspec.dim))
    logp = np.empty(steps)
    rew = np.empty(steps)
    done = np.zeros(steps, dtype=bool)
    ep_ret, rets, finals = 0.0, [], []
    terminal_feats = {}
    for t in range(steps):
        f = featurize(state, fspec, kind, cfg.horizon)
        feats[t] = f
        s = upper_act(policy, f, rng)
        xi_raw[t], logp[t] = s.xi_raw, s.logprob
        means[t], log_stds[t] = s.head.mean, s.head.log_std
        actions, _ = act(lower_from_xi(s.xi, xspec), obs, rng)
        out = envs.step(state, actions, cfg, rng)
        if not math.isfinite(out.reward):
            raise FloatingPointError(f"non-finite reward at step {t}")
        rew[t] = out.reward
        ep_ret += out.reward
        if out.done:
            done[t] = True
            rets.append(ep_ret)
            finals.append(_final_metric(out.state))
            ep_ret = 0.0
            state, obs = envs.reset(cfg, rng)
        else:
            state, obs = out.state, out.observations
            if t == steps - 1:
                terminal_feats[t] = featurize(state, fspec, kind, cfg.horizon)
    feats[steps] = terminal_feats.get(steps - 1, feats[steps - 1])
    if not np.all(np.isfinite(feats)):
        raise FloatingPointError("non-finite features during rollout")
    values = nn.forward(critic, feats)[0][:, 0]
    truncated = np.zeros(steps, dtype=bool)
    truncated[-1] = not done[-1]
    return RolloutBatch(
        features=feats[:-1], xi_raw=xi_raw, logprob=logp, old_mean=means, old_log_std=log_stds,
        reward=rew, done=done, truncated=truncated, value=values[:-1], next_value=values[1:],
        episode_returns=rets, episode_final_R=finals,
    )


def _segment_job(args):
    return run_segment(*args)


def collect_rollouts(setup: Setup, policy: nn.Mlp, critic: nn.Mlp, cfg: PpoConfig,
                     seed: np.random.SeedSequence) -> RolloutBatch:
    """Fill a batch of ``cfg.batch_size`` steps from ``cfg.num_envs`` instances.

    Instance ``k`` uses child ``k`` of ``seed``; parts are merged in instance
    order so the batch does not depend on ``num_workers``.
    """
    steps = cfg.batch_size // cfg.num_envs
    jobs = [(setup, policy, critic, steps, child) for child in seed.spawn(cfg.num_envs)]
    if cfg.num_workers > 1:
        with ProcessPoolExecutor(cfg.num_workers) as pool:
            parts = list(pool.map(_segment_job, jobs))
    else:
        parts = [_segment_job(j) for j in jobs]
    return RolloutBatch.concat(parts)


def compute_gae(reward, value, next_value, done, truncated, gamma: float, lam: float):
    """Advantages and value targets.

    delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t); the recursion
    A_t = delta_t + gamma * lam * A_{t+1} is cut at terminals and at batch
    segment ends (where V(s_{t+1}) bootstraps the tail).
    """
    n = len(reward)
    adv = np.zeros(n)
    carry = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if done[t] else 1.0
        if done[t] or truncated[t]:
            carry = 0.0
        delta = reward[t] + gamma * next_value[t] * nonterminal - value[t]
        carry = delta + gamma * lam * carry
        adv[t] = carry
    return adv, adv + value


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    approx_kl: float
    clip_frac: float
    aborted: bool = False


def policy_loss_grads(policy: nn.Mlp, features, xi_raw, logp_old, old_mean, old_log_std,
                      adv, clip: float, kl_coeff: float):
    """Clipped surrogate + KL penalty on one minibatch; returns (loss, grads, kl, clip_frac)."""
    b = features.shape[0]
    out, cache = nn.forward(policy, features)
    head, mask = nn.split_head(out)
    old = nn.GaussianHead(old_mean, old_log_std)
    logp = nn.gaussian_logprob(head, xi_raw)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surr1 = ratio * adv
    surr2 = clipped * adv
    kl = nn.gaussian_kl(old, head)
    loss = -np.mean(np.minimum(surr1, surr2)) + kl_coeff * np.mean(kl)
    # gradient flows through the ratio wherever the unclipped term is the active minimum
    active = (surr1 <= surr2) | ((ratio >= 1.0 - clip) & (ratio <= 1.0 + clip))
    g_logp = np.where(active, -adv * ratio, 0.0) / b
    dm, ds = nn.gaussian_logprob_grad(head, xi_raw)
    km, ks = nn.gaussian_kl_grad(old, head)
    g_mean = g_logp[:, None] * dm + (kl_coeff / b) * km
    g_log_std = (g_logp[:, None] * ds + (kl_coeff / b) * ks) * mask
    grads, _ = nn.backward(policy, cache, np.concatenate([g_mean, g_log_std], axis=1))
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip))
    return float(loss), grads, float(np.mean(kl)), clip_frac


def value_loss_grads(critic: nn.Mlp, features, targets):
    out, cache = nn.forward(critic, features)
    err = out[:, 0] - targets
    loss = float(np.mean(err * err))
    grads, _ = nn.backward(critic, cache, (2.0 * err / features.shape[0])[:, None])
    return loss, grads


def make_optimizer(net: nn.Mlp, cfg: PpoConfig, lr: float | None = None):
    lr = cfg.lr if lr is None else lr
    return nn.Adam(net.params(), lr) if cfg.optimizer == "adam" else nn.Sgd(net.params(), lr)


def ppo_update(policy: nn.Mlp, critic: nn.Mlp, batch: RolloutBatch, adv: np.ndarray,
               targets: np.ndarray, cfg: PpoConfig, opt_pi, opt_v,
               rng: np.random.Generator) -> UpdateStats:
    """N_PPO passes of shuffled minibatches; updates the networks in place.

    A non-finite loss restores the parameters (and optimiser moments) seen on
    entry and marks the update as aborted.
    """
    saved = (policy.copy(), critic.copy(), _opt_snapshot(opt_pi), _opt_snapshot(opt_v))
    if cfg.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(batch)
    stats = []
    for _ in range(cfg.n_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            pl, pg, kl, cf = policy_loss_grads(
                policy, batch.features[idx], batch.xi_raw[idx], batch.logprob[idx],
                batch.old_mean[idx], batch.old_log_std[idx], adv[idx], cfg.clip, cfg.kl_coeff)
            vl, vg = value_loss_grads(critic, batch.features[idx], targets[idx])
            if not (math.isfinite(pl) and math.isfinite(vl)):
                policy.set_params(saved[0].params())
                critic.set_params(saved[1].params())
                _opt_restore(opt_pi, saved[2])
                _opt_restore(opt_v, saved[3])
                log.warning("non-finite PPO loss; update aborted and parameters restored")
                return UpdateStats(math.nan, math.nan, math.nan, math.nan, aborted=True)
            policy.set_params(opt_pi.step(policy.params(), pg))
            critic.set_params(opt_v.step(critic.params(), vg))
            stats.append((pl, vl, kl, cf))
    s = np.mean(np.array(stats), axis=0)
    return UpdateStats(float(s[0]), float(s[1]), float(s[2]), float(s[3]))


def _opt_snapshot(opt):
    return [a.copy() for a in opt.state_arrays()]


def _opt_restore(opt, arrays):
    opt.load_state_arrays(arrays)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def build_networks(setup: Setup, hidden: list[int], seed: int,
                   init_log_std: float = 0.0) -> tuple[nn.Mlp, nn.Mlp]:
    rng = np.random.default_rng([seed, 0])
    k = setup.xi.dim
    policy = nn.init_mlp([setup.features.size, *hidden, 2 * k], rng, out_gain=0.01)
    policy.biases[-1][k:] = init_log_std
    critic = nn.init_mlp([setup.features.size, *hidden, 1], rng, out_gain=1.0)
    return policy, critic


class Trainer:
    """Collect -> GAE -> update loop with counter-based randomness."""

    def __init__(self, setup: Setup, cfg: PpoConfig, seed: int, hidden=(256, 256),
                 init_log_std: float = 0.0):
        self.setup, self.cfg, self.seed = setup, cfg, seed
        self.policy, self.critic = build_networks(setup, list(hidden), seed, init_log_std)
        self.opt_pi = make_optimizer(self.policy, cfg)
        self.opt_v = make_optimizer(self.critic, cfg, cfg.critic_lr)
        self.iteration = 0

    def step(self) -> tuple[dict, RolloutBatch]:
        n = self.iteration + 1
        t0 = time.perf_counter()
        batch = collect_rollouts(self.setup, self.policy, self.critic, self.cfg,
                                 np.random.SeedSequence([self.seed, 1, n]))
        adv, targets = compute_gae(batch.reward, batch.value, batch.next_value, batch.done,
                                   batch.truncated, self.cfg.gamma, self.cfg.gae_lambda)
        stats = ppo_update(self.policy, self.critic, batch, adv, targets, self.cfg,
                           self.opt_pi, self.opt_v, np.random.default_rng([self.seed, 2, n]))
        self.iteration = n
        metrics = {
            "iteration": n,
            "env_steps": n * self.cfg.batch_size,
            "mean_return": float(np.mean(batch.episode_returns)) if batch.episode_returns else math.nan,
            "mean_final_R": float(np.mean(batch.episode_final_R)) if batch.episode_final_R else math.nan,
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "approx_kl": stats.approx_kl,
            "clip_frac": stats.clip_frac,
            "wall_time_s": time.perf_counter() - t0,
        }
        return metrics, batch

    # checkpoints ----------------------------------------------------------

    def save(self, directory) -> None:
        from pathlib import Path
        import json

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nn.save_mlp(d / "policy.bin", self.policy, self.opt_pi.state_arrays())
        nn.save_mlp(d / "critic.bin", self.critic, self.opt_v.state_arrays())
        meta = {"format": 1, "iteration": self.iteration, "seed": self.seed,
                "rng": "counter-based SeedSequence([seed, stream, iteration])"}
        (d / "state.json").write_text(json.dumps(meta, indent=2))

    def load(self, directory) -> None:
        from pathlib import Path
        import json

        d = Path(directory)
        meta = json.loads((d / "state.json").read_text())
        policy, opt_pi = nn.load_mlp(d / "policy.bin")
        critic, opt_v = nn.load_mlp(d / "critic.bin")
        if policy.sizes != self.policy.sizes or critic.sizes != self.critic.sizes:
            raise ValueError(f"checkpoint shapes {policy.sizes} do not match configuration {self.policy.sizes}")
        self.policy, self.critic = policy, critic
        self.opt_pi.load_state_arrays(opt_pi)
        self.opt_v.load_state_arrays(opt_v)
        self.iteration = int(meta["iteration"])
        self.seed = int(meta["seed"])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeResult:
    ret: float
    final_R: float
    xis: np.ndarray  # (T, k) lower-level parameters actually applied


def run_episode(setup: Setup, policy: nn.Mlp, rng: np.random.Generator, greedy: bool = True,
                xi_schedule: np.ndarray | None = None) -> EpisodeResult:
    """One episode; undiscounted return.

    With ``xi_schedule`` (T, k) the swarm runs open loop: the mean field is
    never featurised and step t applies ``xi_schedule[t]``.
    """
    cfg, fspec, xspec = setup.env, setup.features, setup.xi
    if xi_schedule is not None:
        xi_schedule = np.asarray(xi_schedule, dtype=float)
        if xi_schedule.shape != (cfg.horizon, xspec.dim):
            raise ValueError(f"xi schedule has shape {xi_schedule.shape}, "
                             f"expected ({cfg.horizon}, {xspec.dim}) for this horizon")
    state, obs = envs.reset(cfg, rng)
    total = 0.0
    xis = np.empty((cfg.horizon, xspec.dim))
    for t in range(cfg.horizon):
        if xi_schedule is None:
            xi = upper_act(policy, featurize(state, fspec, cfg.space, cfg.horizon), rng, greedy=greedy).xi
        else:
            xi = xi_schedule[t]
        xis[t] = xi
        actions, _ = act(lower_from_xi(xi, xspec), obs, rng)
        out = envs.step(state, actions, cfg, rng)
        total += out.reward
        state, obs = out.state, out.observations
    return EpisodeResult(total, _final_metric(state), xis)


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 3, episode]))


def evaluate(setup: Setup, policy: nn.Mlp, episodes: int, seed: int, greedy: bool = True,
             mode: str = "closed_loop") -> list[EpisodeResult]:
    """Closed-loop or open-loop evaluation.

    ``replay_sequence`` records xi_t from one extra closed-loop greedy episode
    and replays it on every evaluation episode; ``freeze_t0`` repeats its xi_0.
    """
    if mode not in ("closed_loop", "replay_sequence", "freeze_t0"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    schedule = None
    if mode != "closed_loop":
        ref = run_episode(setup, policy, np.random.default_rng(np.random.SeedSequence([seed, 4])), greedy=True)
        schedule = ref.xis if mode == "replay_sequence" else np.repeat(ref.xis[:1], setup.env.horizon, axis=0)
    return [run_episode(setup, policy, episode_rng(seed, k), greedy, schedule) for k in range(episodes)]


def mean_ci95(values) -> tuple[float, float]:
    """Mean and half-width of the Student-t 95% interval."""
    from scipy import stats

    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()) if v.size else math.nan, math.nan
    half = stats.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size)
    return float(v.mean()), float(half)
