"""Recurrent actor-critic and the PPO objective.

The policy reads one feature vector per step, folds it into a GRU hidden
state, and emits three action logits and a scalar value from that state.
Gradients of the clipped surrogate are computed by hand with
backpropagation through time over whole episodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .world import ACTIONS

N_ACTIONS = len(ACTIONS)
# per-step input: [u, top belief, visible, visibility, distance/6, sin b, cos b, prev action one-hot]
N_INPUTS = 7 + N_ACTIONS


def state_features(beliefs, uncertainty, visible, visibility, distance_m, bearing_deg, prev_action):
    """Policy input rows for a batch of episodes at one step.

    ``bearing_deg`` may hold NaN where the target is not visible; the
    bearing terms are zeroed there. ``prev_action`` is -1 at the first step.
    """
    n = len(uncertainty)
    out = np.zeros((n, N_INPUTS))
    vis = np.asarray(visible, dtype=bool)
    out[:, 0] = uncertainty
    out[:, 1] = np.max(beliefs, axis=1)
    out[:, 2] = vis
    out[:, 3] = visibility
    out[:, 4] = np.asarray(distance_m) / 6.0
    b = np.radians(np.where(vis, np.nan_to_num(bearing_deg), 0.0))
    out[:, 5] = np.where(vis, np.sin(b), 0.0)
    out[:, 6] = np.where(vis, np.cos(b), 0.0)
    prev = np.asarray(prev_action)
    has = prev >= 0
    out[np.flatnonzero(has), 7 + prev[has]] = 1.0
    return out


class PolicyNet:
    """GRU aggregator with linear actor and critic heads."""

    def __init__(self, hidden=32, n_inputs=N_INPUTS, seed=0, params=None):
        self.hidden = hidden
        self.n_inputs = n_inputs
        if params is None:
            rng = np.random.default_rng(seed)
            params = {"gru_" + k: v for k, v in nx.gru_init(rng, n_inputs, hidden).items()}
            params["actor_W"] = rng.normal(0.0, 0.01, size=(N_ACTIONS, hidden))
            params["actor_b"] = np.zeros(N_ACTIONS)
            params["critic_W"] = rng.normal(0.0, 0.1, size=(1, hidden))
            params["critic_b"] = np.zeros(1)
        self.params = params

    def initial_state(self, n):
        return np.zeros((n, self.hidden))

    def step(self, x, h):
        """One step for a batch: returns (log-probs, values, new hidden)."""
        return nx.row_blocks(self._step, x, h)

    def _step(self, x, h):
        p = self.params
        h, _ = nx.gru_cell_forward(x, h, p["gru_W"], p["gru_U"], p["gru_b"])
        logits = nx.affine_forward(h, p["actor_W"], p["actor_b"])
        value = nx.affine_forward(h, p["critic_W"], p["critic_b"])[:, 0]
        return nx.softmax_logprob(logits), value, h

    def unroll(self, inputs):
        """Forward over (N, L, I) inputs; returns log-probs (N, L, A), values (N, L) and caches."""
        p = self.params
        n, L, _ = inputs.shape
        h = self.initial_state(n)
        logps, values, caches, hs = [], [], [], []
        for t in range(L):
            h, cache = nx.gru_cell_forward(inputs[:, t], h, p["gru_W"], p["gru_U"], p["gru_b"])
            caches.append(cache)
            hs.append(h)
            logits = nx.affine_forward(h, p["actor_W"], p["actor_b"])
            logps.append(nx.softmax_logprob(logits))
            values.append(nx.affine_forward(h, p["critic_W"], p["critic_b"])[:, 0])
        return np.stack(logps, 1), np.stack(values, 1), (caches, hs)

    def backward(self, dlogits, dvalue, caches):
        """Backprop through time given gradients on logits (N, L, A) and values (N, L)."""
        p = self.params
        step_caches, hs = caches
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        L = len(hs)
        dh_next = np.zeros_like(hs[0])
        for t in reversed(range(L)):
            h = hs[t]
            dh = dh_next
            d, dW, db = nx.affine_backward(dlogits[:, t], h, p["actor_W"])
            dh = dh + d
            grads["actor_W"] += dW
            grads["actor_b"] += db
            d, dW, db = nx.affine_backward(dvalue[:, t:t + 1], h, p["critic_W"])
            dh = dh + d
            grads["critic_W"] += dW
            grads["critic_b"] += db
            _, dh_prev, dW, dU, db = nx.gru_cell_backward(dh, step_caches[t], p["gru_W"], p["gru_U"])
            grads["gru_W"] += dW
            grads["gru_U"] += dU
            grads["gru_b"] += db
            dh_next = dh_prev
        return grads

    def copy(self):
        return PolicyNet(self.hidden, self.n_inputs, params={k: v.copy() for k, v in self.params.items()})

    def save(self, path, meta=None):
        info = {"kind": "policy", "hidden": self.hidden, "n_inputs": self.n_inputs}
        info.update(meta or {})
        nx.save_arrays(path, self.params, info)

    @classmethod
    def load(cls, path):
        arrays, meta = nx.load_arrays(path)
        if meta.get("kind") != "policy":
            raise ValueError(f"{path} is not a policy checkpoint")
        return cls(meta["hidden"], meta["n_inputs"], params=arrays), meta


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------

def gae_advantages(rewards, values, gamma=0.99, lam=0.95, last_values=None):
    """Generalised advantage estimates for fixed-length episodes.

    ``rewards`` and ``values`` are (N, L); every episode terminates after
    its L-th transition unless ``last_values`` bootstraps it. Returns
    (advantages, returns), both (N, L).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    n, L = r.shape
    nxt = np.zeros(n) if last_values is None else np.asarray(last_values, dtype=float)
    adv = np.zeros_like(r)
    acc = np.zeros(n)
    for t in reversed(range(L)):
        delta = r[:, t] + gamma * nxt - v[:, t]
        acc = delta + gamma * lam * acc
        adv[:, t] = acc
        nxt = v[:, t]
    return adv, adv + v


# ---------------------------------------------------------------------------
# PPO objective
# ---------------------------------------------------------------------------

@dataclass
class PPOConfig:
    updates: int = 300
    episodes_per_update: int = 128
    epochs: int = 4
    minibatch: int = 64
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 0.05
    momentum: float = 0.9
    max_grad_norm: float = 0.5
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    hidden: int = 32
    horizon: int = 10
    reward: str = "belief"
    pool_size: int = 4000
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.reward not in ("belief", "binary"):
            raise ValueError(f"reward must be 'belief' or 'binary', got {self.reward!r}")
        if min(self.updates, self.episodes_per_update, self.epochs, self.minibatch) < 1:
            raise ValueError("counts must be positive")


def clipped_surrogate(ratio, adv, clip):
    """Per-transition PPO objective min(r A, clip(r) A) and d/d(ratio)."""
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    use_unclipped = unclipped_obj <= clipped_obj
    obj = np.where(use_unclipped, unclipped_obj, clipped_obj)
    dratio = np.where(use_unclipped, adv, 0.0)
    return obj, dratio


def ppo_loss_and_grad(net: PolicyNet, inputs, actions, old_logp, adv, returns, cfg: PPOConfig):
    """Clipped-surrogate loss over a minibatch of whole episodes.

    All trajectory arrays are (N, L) except ``inputs`` (N, L, I). The loss
    is averaged over the N*L transitions:

        -min(r A, clip(r) A) + value_coef (V - R)^2 - entropy_coef H(pi)
    """
    logp_all, values, caches = net.unroll(inputs)
    n, L, A = logp_all.shape
    m = n * L
    logp = np.take_along_axis(logp_all, actions[..., None], axis=2)[..., 0]
    ratio = np.exp(logp - old_logp)
    obj, dratio = clipped_surrogate(ratio, adv, cfg.clip)
    probs = np.exp(logp_all)
    ent = -(probs * logp_all).sum(axis=2)
    vloss = (values - returns) ** 2
    loss = (-obj.sum() + cfg.value_coef * vloss.sum() - cfg.entropy_coef * ent.sum()) / m

    # gradient on the chosen action's log-prob, then on the logits
    dlogp = -(dratio * ratio) / m
    onehot = np.zeros_like(logp_all)
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=2)
    dlogits = dlogp[..., None] * (onehot - probs)
    dlogits += (cfg.entropy_coef / m) * probs * (logp_all + ent[..., None])
    dvalue = 2.0 * cfg.value_coef * (values - returns) / m
    grads = net.backward(dlogits, dvalue, caches)
    stats = {
        "loss": float(loss),
        "policy_obj": float(obj.mean()),
        "value_loss": float(vloss.mean()),
        "entropy": float(ent.mean()),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }
    return float(loss), grads, stats


def ppo_update(net: PolicyNet, batch: dict, cfg: PPOConfig, rng, velocity: dict):
    """Run ``cfg.epochs`` passes of minibatch descent over one rollout batch.

    ``batch`` holds ``inputs``, ``actions``, ``logp``, ``adv`` and
    ``returns`` arrays indexed by episode. Raises NonFiniteLoss on a
    non-finite minibatch loss before touching the parameters.
    """
    from .errors import NonFiniteLoss

    n = batch["actions"].shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = np.sort(order[start:start + cfg.minibatch])
            loss, grads, stats = ppo_loss_and_grad(
                net, batch["inputs"][idx], batch["actions"][idx], batch["logp"][idx],
                batch["adv"][idx], batch["returns"][idx], cfg)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLoss(int(idx[0]) if len(idx) else -1)
            stats["grad_norm"] = nx.clip_grad_norm(grads, cfg.max_grad_norm)
            nx.momentum_step(net.params, grads, velocity, cfg.lr, cfg.momentum)
            history.append(stats)
    return history
