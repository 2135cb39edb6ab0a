"""Safe-MADDPG: per-agent actors, centralised critics, a safety filter on
every executed joint action, and (EI variant) RND exploration reward plus an
AVFT-predicted critic target.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..approximator import (
    ApproximatorSpec,
    Network,
    Optimizer,
    apply_step,
    load_checkpoint,
    mse,
    save_checkpoint,
    soft_update,
)
from ..constraints import N_ACTIONS, safety_filter
from ..env import WarehouseEnv
from ..metrics import episode_metrics
from ..scenario import Scenario
from .avft import AvftModel, rtg_update
from .replay import ReplayBuffer
from .rnd import RndPair, combined_reward

VARIANTS = ("EI", "C", "base")
VARIANT_ALIASES = {
    "EI-Safe-MADDPG": "EI",
    "C-Safe-MADDPG": "C",
    "Safe-MADDPG": "base",
}


def canonical_variant(name: str) -> str:
    v = VARIANT_ALIASES.get(name, name)
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return v


@dataclass
class TrainConfig:
    variant: str = "EI"
    episodes: int = 100
    seed: int = 0
    gamma: float = 0.95
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_size: int = 50_000
    tau: float = 0.01
    K: int = 8
    rnd_k: int = 16
    rnd_lr: float = 1e-3
    eta: float = 1.0
    hidden: int = 64
    avft_embed: int = 16
    train_every: int = 8
    warmup: int = 256
    noise_start: float = 1.0
    noise_end: float = 0.05
    noise_decay: float = 0.5  # fraction of episodes over which noise anneals
    reward_scale: float = 0.1  # applied to what the learners see, not to metrics
    logit_reg: float = 1e-3  # L2 penalty on actor scores keeps the softmax from saturating

    def validate(self) -> "TrainConfig":
        self.variant = canonical_variant(self.variant)
        ints = ("episodes", "batch_size", "buffer_size", "K", "rnd_k", "hidden", "avft_embed", "train_every", "warmup")
        for name in ints:
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ValueError(f"{name} must be an integer")
        if self.episodes < 0 or self.warmup < 0:
            raise ValueError("episodes and warmup must be non-negative")
        for name in ("batch_size", "buffer_size", "K", "rnd_k", "hidden", "avft_embed", "train_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        for name in ("actor_lr", "critic_lr", "rnd_lr", "reward_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.logit_reg < 0:
            raise ValueError("logit_reg must be non-negative")
        if self.eta < 0 or self.noise_start < 0 or self.noise_end < 0 or not 0 < self.noise_decay <= 1:
            raise ValueError("bad exploration settings")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d).validate()

    def noise(self, episode: int) -> float:
        span = max(1.0, self.noise_decay * self.episodes)
        frac = min(1.0, episode / span)
        return self.noise_start + frac * (self.noise_end - self.noise_start)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, dp):
    """Gradient w.r.t. logits given dL/dp for p = softmax(logits)."""
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def one_hot(a, n: int = N_ACTIONS) -> np.ndarray:
    a = np.asarray(a)
    out = np.zeros(a.shape + (n,))
    np.put_along_axis(out, a[..., None], 1.0, axis=-1)
    return out


class AgentNets:
    """Online and target actor/critic per agent."""

    def __init__(self, n_agents: int, obs_dim: int, hidden: int = 64, actor_lr: float = 1e-3,
                 critic_lr: float = 1e-3, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_agents, self.obs_dim = n_agents, obs_dim
        a_spec = ApproximatorSpec(obs_dim, ((hidden, "relu"), (hidden, "relu"), (N_ACTIONS, "identity")))
        c_spec = ApproximatorSpec(n_agents * (obs_dim + N_ACTIONS), ((hidden, "relu"), (hidden, "relu"), (1, "identity")))
        self.actors = [Network(a_spec, rng=rng) for _ in range(n_agents)]
        self.critics = [Network(c_spec, rng=rng) for _ in range(n_agents)]
        self.target_actors = [n.copy() for n in self.actors]
        self.target_critics = [n.copy() for n in self.critics]
        self.actor_opts = [Optimizer("adam", lr=actor_lr) for _ in range(n_agents)]
        self.critic_opts = [Optimizer("adam", lr=critic_lr) for _ in range(n_agents)]

    def logits(self, obs) -> np.ndarray:
        """(k, A) action scores for one joint observation (k, obs_dim)."""
        return np.stack([self.actors[i](obs[i]) for i in range(self.n_agents)])

    def target_policy(self, next_obs) -> np.ndarray:
        """Softmax of target actors, (B, k, A) for a batch (B, k, obs_dim)."""
        return np.stack([softmax(self.target_actors[i](next_obs[:, i])) for i in range(self.n_agents)], axis=1)

    def soft_update(self, tau: float) -> None:
        for t, o in zip(self.target_actors + self.target_critics, self.actors + self.critics):
            soft_update(t, o, tau)

    def checkpoint_entries(self) -> dict:
        out = {}
        for i in range(self.n_agents):
            out[f"actor{i}"] = (self.actors[i], self.actor_opts[i])
            out[f"critic{i}"] = (self.critics[i], self.critic_opts[i])
            out[f"target_actor{i}"] = self.target_actors[i]
            out[f"target_critic{i}"] = self.target_critics[i]
        return out


def critic_input(obs, u) -> np.ndarray:
    """Joint state and joint (relaxed) action, (B, k*obs_dim + k*A)."""
    B = obs.shape[0]
    return np.concatenate([obs.reshape(B, -1), u.reshape(B, -1)], axis=1)


def critic_update(batch: dict, nets: AgentNets, gamma: float, next_q: Optional[np.ndarray] = None) -> float:
    """One regression step per centralised critic toward
    z_i = R'_i + gamma * (1 - terminal) * Q'_i(S', u').

    ``next_q`` (B, k) overrides the target-critic bootstrap; the EI variant
    passes AVFT predictions here. Returns the mean loss over agents.
    """
    obs, nobs = batch["obs"], batch["next_obs"]
    if obs.shape[0] == 0:
        raise ValueError("empty batch")
    x = critic_input(obs, one_hot(batch["actions"]))
    cont = 1.0 - batch["terminal"].astype(np.float64)
    if next_q is None and gamma > 0:
        x_next = critic_input(nobs, nets.target_policy(nobs))
        next_q = np.stack([nets.target_critics[i](x_next)[:, 0] for i in range(nets.n_agents)], axis=1)
    losses = []
    for i in range(nets.n_agents):
        z = batch["rewards"][:, i]
        if gamma > 0:
            z = z + gamma * cont * next_q[:, i]
        q, cache = nets.critics[i].forward(x)
        loss, dq = mse(q[:, 0], z)
        grad, _ = nets.critics[i].backward(cache, dq[:, None])
        apply_step(nets.critic_opts[i], nets.critics[i], grad)
        losses.append(loss)
    return float(np.mean(losses))


def actor_gradient(batch: dict, nets: AgentNets, i: int, logit_reg: float = 0.0):
    """(J, flat gradient of -J + logit_reg * mean(logits^2)) for agent i's
    actor, J = mean Q_i(S, u) with u_i replaced by the actor's softmax and the
    other actions taken from the batch."""
    obs = batch["obs"]
    B, k = obs.shape[0], nets.n_agents
    logits, acache = nets.actors[i].forward(obs[:, i])
    p = softmax(logits)
    u = one_hot(batch["actions"])
    u[:, i] = p
    q, ccache = nets.critics[i].forward(critic_input(obs, u))
    _, dx = nets.critics[i].backward(ccache, np.full((B, 1), -1.0 / B))
    du = dx[:, k * nets.obs_dim :].reshape(B, k, N_ACTIONS)[:, i]
    dlogits = softmax_backward(p, du)
    if logit_reg:
        dlogits = dlogits + 2.0 * logit_reg * logits / logits.size
    grad, _ = nets.actors[i].backward(acache, dlogits)
    return float(q.mean()), grad


def actor_update(batch: dict, nets: AgentNets, logit_reg: float = 0.0) -> float:
    """One ascent step on every actor; returns the mean gradient norm."""
    if batch["obs"].shape[0] == 0:
        raise ValueError("empty batch")
    norms = []
    for i in range(nets.n_agents):
        _, grad = actor_gradient(batch, nets, i, logit_reg)
        apply_step(nets.actor_opts[i], nets.actors[i], grad)
        norms.append(float(np.linalg.norm(grad)))
    return float(np.mean(norms))


# ---------------------------------------------------------------------------
# AVFT windows from the replay buffer
# ---------------------------------------------------------------------------

def avft_windows(buf: ReplayBuffer, idx, K: int, next_u=None):
    """Per-agent (rtg, s, u) windows, agents folded into the batch axis.

    Without ``next_u`` the window ends at step t with the stored action.
    With ``next_u`` (B, k, A) it ends at t+1: the step-t+1 token uses the
    post-reward return-to-go, S' and the supplied action.
    """
    idx = np.asarray(idx)
    B, k, D = idx.size, buf.obs.shape[1], buf.obs.shape[2]
    shifted = next_u is not None
    hist = buf.history(idx, K - 1 if shifted else K)
    rtg = np.zeros((K, B, k))
    s = np.zeros((K, B, k, D))
    u = np.zeros((K, B, k, N_ACTIONS))
    for pos in range(hist.shape[0]):
        j = hist[pos]
        ok = j >= 0
        if ok.any():
            rtg[pos, ok] = buf.rtg[j[ok]]
            s[pos, ok] = buf.obs[j[ok]]
            u[pos, ok] = one_hot(buf.actions[j[ok]])
    if shifted:
        rtg[-1] = rtg_update(buf.rtg[idx], buf.rewards[idx])
        s[-1] = buf.next_obs[idx]
        u[-1] = next_u
    return rtg.reshape(K, B * k), s.reshape(K, B * k, D), u.reshape(K, B * k, N_ACTIONS)


# ---------------------------------------------------------------------------
# constraint sources
# ---------------------------------------------------------------------------

def constraint_source(variant: str, extractor=None) -> Callable:
    """Callable env -> (m_c (k,n,n), h_c (k,)) for the variant."""
    from ..extractor import LiveExtractor, label_oracle

    if variant == "EI":
        if extractor is None:
            raise ValueError("the EI variant needs a fitted constraint extractor")
        return LiveExtractor(extractor)
    if variant == "C":
        def oracle(env):
            labels = [label_oracle(env, i) for i in range(env.n_agents)]
            return np.stack([m for m, _ in labels]), np.array([h for _, h in labels])
        return oracle

    def base(env):
        n = env.window
        return np.ones((env.n_agents, n, n), dtype=np.int64), np.zeros(env.n_agents, dtype=np.int64)
    return base


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    nets: AgentNets
    metrics: list
    rnd: Optional[RndPair] = None
    avft: Optional[AvftModel] = None
    config: Optional[TrainConfig] = None


class Trainer:
    """Owns the env, learners and buffer for one seeded run."""

    def __init__(self, config: TrainConfig, scenario: Scenario, extractor=None):
        self.cfg = config.validate()
        self.scenario = scenario
        self.env = WarehouseEnv(scenario)
        self.env.reset(scenario.rng_seed)
        ss = np.random.SeedSequence(self.cfg.seed)
        init_ss, noise_ss, buf_ss, env_ss = ss.spawn(4)
        init_rng = np.random.default_rng(init_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.env_rng = np.random.default_rng(env_ss)
        k, D, c = self.env.n_agents, self.env.obs_dim, self.cfg
        self.nets = AgentNets(k, D, c.hidden, c.actor_lr, c.critic_lr, rng=init_rng)
        self.buffer = ReplayBuffer(c.buffer_size, k, D, self.env.window, rng=np.random.default_rng(buf_ss))
        self.full = c.variant == "EI"
        self.rnd = RndPair(D, c.rnd_k, c.hidden, c.rnd_lr, rng=init_rng) if self.full else None
        self.avft = AvftModel(D, N_ACTIONS, c.K, c.avft_embed, c.hidden, c.critic_lr, rng=init_rng) if self.full else None
        self.avft_target = self.avft.copy() if self.full else None
        self.constraints = constraint_source(c.variant, extractor)
        self.best_return = np.zeros(k)
        self.total_steps = 0
        self.episode = 0

    def _set_constraints(self) -> None:
        m, h = self.constraints(self.env)
        self.env.set_constraints(m, h)

    def train_step(self) -> dict:
        c, buf, nets = self.cfg, self.buffer, self.nets
        batch = buf.sample(c.batch_size)
        next_q = None
        out = {}
        if self.full:
            idx = batch["idx"]
            u_next = nets.target_policy(batch["next_obs"])
            B, k = idx.size, nets.n_agents
            q_next = self.avft_target(*avft_windows(buf, idx, c.K, u_next)).reshape(B, k)
            cont = 1.0 - batch["terminal"].astype(np.float64)
            y = batch["rewards"] + c.gamma * cont[:, None] * q_next
            out["avft_loss"] = self.avft.update(*avft_windows(buf, idx, c.K), y.reshape(-1))
            out["rnd_loss"] = self.rnd.update(batch["next_obs"].reshape(B * k, -1))
            next_q = q_next
        out["critic_loss"] = critic_update(batch, nets, c.gamma, next_q)
        out["actor_grad"] = actor_update(batch, nets, c.logit_reg)
        nets.soft_update(c.tau)
        if self.full:
            for t, o in zip(self.avft_target.networks, self.avft.networks):
                soft_update(t, o, c.tau)
        return out

    def run_episode(self) -> tuple[dict, dict]:
        """One training episode; returns (metrics row, run-log record)."""
        c, env, nets = self.cfg, self.env, self.nets
        env_seed = int(self.env_rng.integers(2**63))
        env.reset(env_seed)
        if hasattr(self.constraints, "reset"):
            self.constraints.reset()
        self._set_constraints()
        obs = env.observe_all()
        k = env.n_agents
        ep_id = self.episode
        noise = c.noise(ep_id)
        rtg = self.best_return.copy()
        returns = np.zeros(k)
        shaped = np.zeros(k)
        actions_log = []
        done, t = False, 0
        while not done:
            scores = nets.logits(obs) + noise * self.noise_rng.gumbel(size=(k, N_ACTIONS))
            proposed = np.argmax(scores, axis=1)
            s = env.state
            m_c, b, h_c = s.m_c.copy(), s.budget(), s.h_c.copy()
            safe = safety_filter(proposed, env.snapshot(), m_c, b)
            _, e, done, _ = env.step(safe)
            if not done:
                self._set_constraints()
            next_obs = env.observe_all()
            r = e * c.reward_scale
            if self.full:
                r = combined_reward(r, self.rnd.intrinsic_reward(next_obs), c.eta)
            self.buffer.add(obs, safe, r, next_obs, done and env.state.tick < env.const.horizon,
                            m_c, b, h_c, ep_id, t, rtg)
            rtg = rtg_update(rtg, r)
            returns += e
            shaped += r
            actions_log.append([int(a) for a in safe])
            obs = next_obs
            t += 1
            self.total_steps += 1
            if len(self.buffer) >= max(c.warmup, 1) and self.total_steps % c.train_every == 0:
                self.train_step()
        self.best_return = np.maximum(self.best_return, shaped) if ep_id else shaped.copy()
        row = episode_metrics(ep_id, env.episode_summary(returns))
        record = {"episode": ep_id, "env_seed": env_seed, "actions": actions_log, "metrics": row}
        self.episode += 1
        return row, record

    def result(self, metrics) -> TrainResult:
        return TrainResult(self.nets, metrics, self.rnd, self.avft, self.cfg)


def train(config: TrainConfig, scenario: Scenario, extractor=None, on_episode: Optional[Callable] = None) -> TrainResult:
    """Run ``config.episodes`` training episodes.

    ``on_episode(row, record)`` is called after each episode; ``record`` holds
    the env seed and executed joint actions needed to replay it.
    """
    trainer = Trainer(config, scenario, extractor)
    metrics = []
    for _ in range(trainer.cfg.episodes):
        row, record = trainer.run_episode()
        metrics.append(row)
        if on_episode is not None:
            on_episode(row, record)
    return trainer.result(metrics)


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class SafeMADDPG(BaseEstimator):
    """Estimator wrapper around :func:`train`.

    ``fit(scenario)`` trains; ``predict(obs)`` returns greedy (unfiltered)
    actions for a joint observation; ``act(env)`` adds the safety filter.
    """

    def __init__(self, variant="EI", episodes=100, seed=0, gamma=0.95, actor_lr=1e-3, critic_lr=1e-3,
                 batch_size=64, buffer_size=50_000, tau=0.01, K=8, rnd_k=16, eta=1.0, hidden=64,
                 train_every=8, warmup=256, reward_scale=0.1, logit_reg=1e-3):
        self.variant = variant
        self.episodes = episodes
        self.seed = seed
        self.gamma = gamma
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.batch_size = batch_size
        self.buffer_size = buffer_size
        self.tau = tau
        self.K = K
        self.rnd_k = rnd_k
        self.eta = eta
        self.hidden = hidden
        self.train_every = train_every
        self.warmup = warmup
        self.reward_scale = reward_scale
        self.logit_reg = logit_reg

    def config(self) -> TrainConfig:
        return TrainConfig(**self.get_params()).validate()

    def fit(self, scenario: Scenario, y=None, extractor=None, on_episode=None):
        res = train(self.config(), scenario, extractor, on_episode)
        self.nets_ = res.nets
        self.metrics_ = res.metrics
        self.rnd_ = res.rnd
        self.avft_ = res.avft
        return self

    def predict(self, obs) -> np.ndarray:
        check_is_fitted(self, "nets_")
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 2
        if single:
            obs = obs[None]
        acts = np.stack([np.argmax(self.nets_.actors[i](obs[:, i]), axis=-1) for i in range(self.nets_.n_agents)], axis=1)
        return acts[0] if single else acts

    def act(self, env: WarehouseEnv) -> list:
        s = env.state
        return safety_filter(self.predict(env.observe_all()), env.snapshot(), s.m_c, s.budget())

    def save(self, path) -> None:
        check_is_fitted(self, "nets_")
        entries = self.nets_.checkpoint_entries()
        if self.rnd_ is not None:
            entries["rnd_target"] = self.rnd_.target
            entries["rnd_predictor"] = (self.rnd_.predictor, self.rnd_.opt)
        if self.avft_ is not None:
            for name, net, opt in zip(("avft_r", "avft_s", "avft_u", "avft_agg"), self.avft_.networks, self.avft_.opts):
                entries[name] = (net, opt)
        meta = {"kind": "safe_maddpg", "params": self.get_params(), "n_agents": self.nets_.n_agents,
                "obs_dim": self.nets_.obs_dim}
        save_checkpoint(path, entries, meta)

    @classmethod
    def load(cls, path) -> "SafeMADDPG":
        entries, meta = load_checkpoint(path)
        if meta.get("kind") != "safe_maddpg":
            raise ValueError("checkpoint does not hold a Safe-MADDPG model")
        est = cls(**meta["params"])
        k, D = meta["n_agents"], meta["obs_dim"]
        nets = AgentNets(k, D, est.hidden, est.actor_lr, est.critic_lr)
        for i in range(k):
            nets.actors[i], nets.actor_opts[i] = entries[f"actor{i}"]
            nets.critics[i], nets.critic_opts[i] = entries[f"critic{i}"]
            nets.target_actors[i] = entries[f"target_actor{i}"][0]
            nets.target_critics[i] = entries[f"target_critic{i}"][0]
        est.nets_, est.metrics_ = nets, []
        est.rnd_ = est.avft_ = None
        if "rnd_target" in entries:
            rnd = RndPair(D, est.rnd_k, est.hidden)
            rnd.target = entries["rnd_target"][0]
            rnd.predictor, rnd.opt = entries["rnd_predictor"]
            est.rnd_ = rnd
        if "avft_agg" in entries:
            av = AvftModel(D, N_ACTIONS, est.K, hidden=est.hidden)
            av.emb_r, av.emb_s, av.emb_u, av.agg = (entries[n][0] for n in ("avft_r", "avft_s", "avft_u", "avft_agg"))
            av.opts = [entries[n][1] for n in ("avft_r", "avft_s", "avft_u", "avft_agg")]
            est.avft_ = av
        return est
