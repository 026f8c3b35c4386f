"""Episodes, baselines, policy training and evaluation.

Episodes run in lockstep batches: every step, each episode observes its
scene, the recognizer turns the batch of features into evidence, the
evidence becomes per-step opinions, and then each agent picks its next
action. Every episode draws from three private random streams derived from
``(seed, episode_id)`` (observation noise, action sampling and feature
perturbation), so results do not depend on batching.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .bench import TRAIN_DOMAIN, LEVELS, TestSet, derive_seed, sample_instance
from .edl import TrainConfig, TrainResult, make_noise_inputs, train_recognizer
from .errors import NonFiniteLoss, StageDependencyError
from .fusion import KINDS as FUSION_KINDS, canonical, fuse_batch, prefix_success
from .opinion import beliefs_from_evidence, fuse_running, rank_classes
from .policy import N_ACTIONS, PolicyNet, PPOConfig, gae_advantages, ppo_update, state_features
from .world import (
    EpisodeInstance,
    WorldConfig,
    fixation_shortest_path_action,
    generate_scene,
    observe,
    step,
    visibility_stats,
)

log = logging.getLogger(__name__)

AGENT_KINDS = ("ours", "fixation", "random", "singleview")
_AGENT_ALIASES = {"ours": "ours", "policy": "ours", "fixation": "fixation", "random": "random",
                  "singleview": "singleview", "single-view": "singleview", "single": "singleview"}


def canonical_agent(kind: str) -> str:
    try:
        return _AGENT_ALIASES[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown agent {kind!r}; choose from {AGENT_KINDS}") from None


def compute_reward(beliefs, true_class) -> float:
    """Belief mass on the true class: in [0, 1], zero for a vacuous opinion."""
    b = getattr(beliefs, "beliefs", beliefs)
    return float(b[true_class])


class OracleRecognizer:
    """Stand-in recognizer that reads the ground truth.

    Puts ``strength`` evidence on the true class whenever the target is
    visible and no evidence otherwise. Used for upper-bound runs.
    """

    uses_ground_truth = True

    def __init__(self, n_classes, strength=1e6):
        self.n_classes = n_classes
        self.strength = strength

    def evidence_from_truth(self, true_class, visible):
        e = np.zeros((len(true_class), self.n_classes))
        rows = np.flatnonzero(visible)
        e[rows, np.asarray(true_class)[rows]] = self.strength
        return e


def _streams(seed, episode_id):
    ss = np.random.SeedSequence([int(seed) & ((1 << 63) - 1), int(episode_id)])
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def feature_noise_unit(cfg: WorldConfig) -> float:
    """Scale of one unit of feature perturbation: sensor noise at q = 1."""
    return cfg.sigma_min


@dataclass
class EpisodeBatch:
    beliefs: np.ndarray       # (N, T, K) per-step opinions
    uncertainty: np.ndarray   # (N, T)
    labels: np.ndarray        # (N,)
    quality: np.ndarray       # (N, T)
    visible: np.ndarray       # (N, T)
    actions: np.ndarray       # (N, T-1), -1 where no action was taken
    rewards: np.ndarray       # (N, T-1), reward for the observation after each action
    logp: np.ndarray          # (N, T-1)
    values: np.ndarray        # (N, T-1)
    inputs: Optional[np.ndarray] = None  # (N, T-1, I) policy inputs

    @property
    def horizon(self):
        return self.beliefs.shape[1]

    def fused(self):
        return fuse_running(self.beliefs, self.uncertainty)


def run_episodes(instances: Sequence[EpisodeInstance], agent: str, recognizer, cfg: WorldConfig,
                 horizon: int = 10, seed: int = 0, episode_ids=None, policy: PolicyNet = None,
                 sigma: float = 0.0, reward: str = "belief", greedy: bool = True) -> EpisodeBatch:
    """Roll out a batch of episodes in lockstep."""
    agent = canonical_agent(agent)
    if agent == "ours" and policy is None:
        raise ValueError("agent 'ours' needs a policy")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = len(instances)
    T = 1 if agent == "singleview" else horizon
    ids = range(n) if episode_ids is None else episode_ids
    streams = [_streams(seed, i) for i in ids]
    scenes = [generate_scene(inst.scene_seed, cfg) for inst in instances]
    poses = [inst.start for inst in instances]
    labels = np.array([sc.target_class for sc in scenes], dtype=int)
    K, D = cfg.n_classes, cfg.feature_dim
    B = np.zeros((n, T, K))
    U = np.zeros((n, T))
    Q = np.zeros((n, T))
    V = np.zeros((n, T), dtype=bool)
    L = max(T - 1, 0)
    actions = np.full((n, L), -1, dtype=int)
    rewards = np.zeros((n, L))
    logps = np.zeros((n, L))
    values = np.zeros((n, L))
    inputs = np.zeros((n, L, policy.n_inputs)) if agent == "ours" else None
    h = policy.initial_state(n) if agent == "ours" else None
    prev = np.full(n, -1, dtype=int)
    noise_scale = sigma * feature_noise_unit(cfg)
    oracle = getattr(recognizer, "uses_ground_truth", False)

    for t in range(T):
        feats = np.empty((n, D))
        cue_vis = np.zeros(n, dtype=bool)
        cue_visibility = np.zeros(n)
        cue_dist = np.zeros(n)
        cue_bearing = np.full(n, np.nan)
        for i in range(n):
            stats = visibility_stats(scenes[i], poses[i], cfg)
            obs = observe(scenes[i], poses[i], streams[i][0], cfg, stats)
            feats[i] = obs.feature
            if noise_scale > 0:
                feats[i] += noise_scale * streams[i][2].standard_normal(D)
            Q[i, t] = obs.quality
            V[i, t] = stats.visible
            cue = obs.cue
            cue_vis[i] = cue.visible
            cue_visibility[i] = cue.visibility
            cue_dist[i] = cue.distance_m
            if cue.bearing_deg is not None:
                cue_bearing[i] = cue.bearing_deg
        if oracle:
            ev = recognizer.evidence_from_truth(labels, V[:, t])
        else:
            ev = recognizer.predict_evidence(feats)
        b, u = beliefs_from_evidence(ev)
        B[:, t], U[:, t] = b, u
        if t >= 1:
            if reward == "binary":
                rewards[:, t - 1] = (rank_classes(b)[:, 0] == labels).astype(float)
            else:
                rewards[:, t - 1] = b[np.arange(n), labels]
        if t == T - 1:
            break
        if agent == "ours":
            x = state_features(b, u, cue_vis, cue_visibility, cue_dist, cue_bearing, prev)
            logp_all, val, h = policy.step(x, h)
            if greedy:
                a = rank_classes(logp_all)[:, 0]
            else:
                cdf = np.cumsum(np.exp(logp_all), axis=1)
                draws = np.array([s[1].random() for s in streams])
                a = np.minimum((draws[:, None] > cdf).sum(axis=1), N_ACTIONS - 1)
            inputs[:, t] = x
            logps[:, t] = logp_all[np.arange(n), a]
            values[:, t] = val
        elif agent == "fixation":
            a = np.array([fixation_shortest_path_action(scenes[i], poses[i]) for i in range(n)])
        elif agent == "random":
            a = np.array([int(s[1].integers(N_ACTIONS)) for s in streams])
        actions[:, t] = a
        poses = [step(scenes[i], poses[i], int(a[i])) for i in range(n)]
        prev = a
    return EpisodeBatch(B, U, labels, Q, V, actions, rewards, logps, values, inputs)


def baseline_action(kind: str, scene=None, pose=None, rng=None):
    """Next action of a heuristic baseline; None means 'stop' (single view)."""
    kind = canonical_agent(kind)
    if kind == "singleview":
        return None
    if kind == "random":
        return int(rng.integers(N_ACTIONS))
    if kind == "fixation":
        return fixation_shortest_path_action(scene, pose)
    raise ValueError("the learned agent has no baseline action")


def rollout(instance: EpisodeInstance, policy: PolicyNet, recognizer, cfg: WorldConfig,
            horizon: int = 10, seed: int = 0, episode_id: int = 0, greedy=False, reward="belief"):
    """Single-episode convenience wrapper around :func:`run_episodes`."""
    return run_episodes([instance], "ours", recognizer, cfg, horizon, seed, [episode_id],
                        policy=policy, greedy=greedy, reward=reward)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    agent: str
    sigma: float
    batch: EpisodeBatch
    levels: np.ndarray

    def rankings(self, fusion):
        return fuse_batch(fusion, self.batch.beliefs, self.batch.uncertainty)[0]

    def success(self, fusion="evidential", topk=1):
        r = self.rankings(fusion)
        return (r[:, :topk] == self.batch.labels[:, None]).any(axis=1)

    def table(self, fusions=FUSION_KINDS):
        """Rows of (agent, fusion, sigma, level, top1, top3, n), levels then All."""
        rows = []
        for f in fusions:
            f = canonical(f)
            s1, s3 = self.success(f, 1), self.success(f, 3)
            for lvl in LEVELS + ("All",):
                m = np.ones(len(s1), bool) if lvl == "All" else self.levels == lvl
                cnt = int(m.sum())
                rows.append({
                    "agent": self.agent, "fusion": f, "sigma": self.sigma, "level": lvl,
                    "top1": float(s1[m].mean()) if cnt else float("nan"),
                    "top3": float(s3[m].mean()) if cnt else float("nan"),
                    "n": cnt,
                })
        return rows

    def step_curve(self, fusion="evidential"):
        """Per-step success of the fused-so-far prediction and mean uncertainties."""
        b, u = self.batch.beliefs, self.batch.uncertainty
        succ = prefix_success(fusion, b, u, self.batch.labels, 1)
        _, fu = fuse_running(b, u)
        return [
            {"step": t + 1, "success": float(succ[t]), "mean_u_prefuse": float(u[:, t].mean()),
             "mean_u_fused": float(fu[:, t].mean())}
            for t in range(b.shape[1])
        ]

    def change_by_level(self, fusion="evidential"):
        """Top-1 success at the final step minus at the first step, per level."""
        b, u = self.batch.beliefs, self.batch.uncertainty
        first = rank_classes(b[:, 0])[:, 0] == self.batch.labels
        last = self.success(fusion, 1)
        out = {}
        for lvl in LEVELS + ("All",):
            m = np.ones(len(first), bool) if lvl == "All" else self.levels == lvl
            out[lvl] = float(last[m].mean() - first[m].mean()) if m.any() else float("nan")
        return out

    def uncertainty_by_level(self):
        """Mean per-step (pre-fusion) uncertainty for each difficulty level."""
        u = self.batch.uncertainty
        return {lvl: float(u[self.levels == lvl].mean()) for lvl in LEVELS if np.any(self.levels == lvl)}


def evaluate(agent: str, recognizer, test_set: TestSet, sigma: float = 0.0, seed: int = 0,
             policy: PolicyNet = None, horizon: int = 10, greedy: bool = True,
             chunk: int = 500) -> EvalResult:
    """Run ``agent`` on every test instance; episode ids are test-set indices."""
    agent = canonical_agent(agent)
    items = test_set.items
    parts = []
    for start in range(0, len(items), chunk):
        sub = items[start:start + chunk]
        parts.append(run_episodes([it.instance for it in sub], agent, recognizer, test_set.world,
                                  horizon, seed, range(start, start + len(sub)), policy=policy,
                                  sigma=sigma, greedy=greedy))
    batch = _concat(parts)
    return EvalResult(agent, float(sigma), batch, np.array(test_set.levels()))


def _concat(parts):
    if len(parts) == 1:
        return parts[0]
    fields = {}
    for name in EpisodeBatch.__dataclass_fields__:
        vals = [getattr(p, name) for p in parts]
        fields[name] = None if vals[0] is None else np.concatenate(vals, axis=0)
    return EpisodeBatch(**fields)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class Stage1Config:
    train_episodes: int = 1500
    val_episodes: int = 400
    ood_samples: int = 2000
    horizon: int = 10


def collect_fixation_data(cfg: WorldConfig, n_episodes: int, seed: int, horizon: int = 10, offset: int = 0):
    """Single observations gathered by the fixation heuristic on training scenes.

    Returns (features, labels) with one row per step of every episode,
    including steps where the target is out of sight.
    """
    insts = [sample_instance(offset + j, seed, cfg, TRAIN_DOMAIN) for j in range(n_episodes)]
    feats, labels = [], []
    for j, inst in enumerate(insts):
        scene = generate_scene(inst.scene_seed, cfg)
        rng = _streams(derive_seed(seed, 11), offset + j)[0]
        pose = inst.start
        for t in range(horizon):
            obs = observe(scene, pose, rng, cfg)
            feats.append(obs.feature)
            labels.append(scene.target_class)
            if t < horizon - 1:
                pose = step(scene, pose, fixation_shortest_path_action(scene, pose))
    return np.array(feats), np.array(labels, dtype=int)


def train_stage1(cfg: WorldConfig, train_cfg: TrainConfig, stage_cfg: Stage1Config, seed: int) -> TrainResult:
    X, y = collect_fixation_data(cfg, stage_cfg.train_episodes, seed, stage_cfg.horizon)
    Xv, yv = collect_fixation_data(cfg, stage_cfg.val_episodes, seed, stage_cfg.horizon,
                                   offset=stage_cfg.train_episodes)
    Xo = make_noise_inputs(stage_cfg.ood_samples, cfg.feature_dim, cfg.sigma0, seed=derive_seed(seed, 13))
    return train_recognizer(X, y, train_cfg, n_classes=cfg.n_classes, X_val=Xv, y_val=yv, X_ood=Xo)


@dataclass
class UpdateStats:
    update: int
    mean_reward: float
    mean_return: float
    final_success: float
    entropy: float
    value_loss: float
    clip_frac: float


def _instance_pool(cfg: WorldConfig, size: int, seed: int):
    return [sample_instance(10_000_000 + j, seed, cfg, TRAIN_DOMAIN) for j in range(size)]


def train_policy(recognizer, cfg: WorldConfig, ppo: PPOConfig, ckpt_path=None, resume=False,
                 stop_after: Optional[int] = None, pool=None):
    """PPO on training scenes against a frozen recognizer.

    Each update's rollouts and minibatch order derive from ``(seed,
    update)``, so a run resumed from a checkpoint reproduces the
    uninterrupted run exactly. ``stop_after`` ends the run early after that
    many updates (used to simulate interruption).
    Returns (policy, history).
    """
    frozen = nx.checksum(recognizer.params_) if hasattr(recognizer, "params_") else None
    pool = pool if pool is not None else _instance_pool(cfg, ppo.pool_size, ppo.seed)
    net = PolicyNet(ppo.hidden, seed=ppo.seed)
    velocity: dict = {}
    history: list = []
    start = 0
    if resume:
        if ckpt_path is None or not Path(ckpt_path).exists():
            raise StageDependencyError(f"no checkpoint to resume from at {ckpt_path}")
        net, velocity, start, history = load_training_state(ckpt_path)
    n_ep = ppo.episodes_per_update
    for upd in range(start, ppo.updates):
        rng = np.random.default_rng([ppo.seed, upd])
        idx = rng.choice(len(pool), size=n_ep, replace=False) if n_ep <= len(pool) else rng.integers(len(pool), size=n_ep)
        batch = run_episodes([pool[i] for i in idx], "ours", recognizer, cfg, ppo.horizon,
                             seed=derive_seed(ppo.seed, 17, upd), policy=net, reward=ppo.reward,
                             greedy=False)
        adv, ret = gae_advantages(batch.rewards, batch.values, ppo.gamma, ppo.lam)
        adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)
        data = {"inputs": batch.inputs, "actions": batch.actions, "logp": batch.logp,
                "adv": adv_n, "returns": ret}
        try:
            stats = ppo_update(net, data, ppo, rng, velocity)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(derive_seed(ppo.seed, upd, exc.seed), "policy loss") from None
        fb, _ = batch.fused()
        final = float((rank_classes(fb[:, -1])[:, 0] == batch.labels).mean())
        belief_r = batch.beliefs[np.arange(len(idx)), 1:, batch.labels].mean()
        history.append(UpdateStats(upd, float(batch.rewards.mean()), float(batch.rewards.sum(1).mean()),
                                   final, float(np.mean([s["entropy"] for s in stats])),
                                   float(np.mean([s["value_loss"] for s in stats])),
                                   float(np.mean([s["clip_frac"] for s in stats]))))
        log.info("update %d reward %.4f belief %.4f success %.3f", upd, history[-1].mean_reward,
                 belief_r, final)
        done = upd + 1
        if ckpt_path is not None and (done % ppo.checkpoint_every == 0 or done == ppo.updates):
            save_training_state(ckpt_path, net, velocity, done, history, ppo)
        if stop_after is not None and done >= stop_after:
            break
    if frozen is not None and nx.checksum(recognizer.params_) != frozen:
        raise RuntimeError("recognizer parameters changed during policy training")
    return net, history


def save_training_state(path, net: PolicyNet, velocity, done, history, ppo: PPOConfig):
    arrays = dict(net.params)
    arrays.update({"velocity/" + k: v for k, v in velocity.items()})
    net_meta = {"kind": "policy", "hidden": net.hidden, "n_inputs": net.n_inputs,
                "updates_done": done, "ppo": asdict(ppo), "history": [asdict(h) for h in history]}
    nx.save_arrays(path, arrays, net_meta)


def load_training_state(path):
    arrays, meta = nx.load_arrays(path)
    if meta.get("kind") != "policy":
        raise ValueError(f"{path} is not a policy checkpoint")
    params = {k: v for k, v in arrays.items() if not k.startswith("velocity/")}
    velocity = {k[len("velocity/"):]: v for k, v in arrays.items() if k.startswith("velocity/")}
    net = PolicyNet(meta["hidden"], meta["n_inputs"], params=params)
    history = [UpdateStats(**h) for h in meta.get("history", [])]
    return net, velocity, int(meta.get("updates_done", 0)), history


def load_policy(path) -> PolicyNet:
    return load_training_state(path)[0]


def staged_train(world: WorldConfig, recognizer_cfg: TrainConfig, stage1: Stage1Config, ppo: PPOConfig,
                 seed: int = 0, recognizer=None, policy_ckpt=None, resume=False):
    """Stage 1 trains the recognizer on fixation data (skipped when
    ``recognizer`` is given); stage 2 trains the policy with it frozen.

    Returns (recognizer, policy, stage-1 result or None, policy history).
    """
    result = None
    if recognizer is None:
        result = train_stage1(world, recognizer_cfg, stage1, seed)
        if not result.ok:
            raise StageDependencyError(f"recognizer training failed ({result.status}); seed {seed}")
        recognizer = result.model
    policy, history = train_policy(recognizer, world, ppo, ckpt_path=policy_ckpt, resume=resume)
    return recognizer, policy, result, history
