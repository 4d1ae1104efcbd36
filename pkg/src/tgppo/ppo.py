"""PPO training of the tree-gated branching policy against the B&B engine.

One episode is one branch-and-bound run on an (instance, seed) pair. Each
decision becomes a ``Transition``; the episode's terminal reward is added to
its last transition. The buffer is consumed by an update when the run ends
or when it holds ``horizon`` transitions, and the next episode starts.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .bnb import BranchAndBound, BranchingPolicy, RunConfig
from .errors import NetError, TrainingError
from .features import StateFeatures
from .net import Mode, NetConfig, TreeGateNet, forward, init_params, save_checkpoint, state_tensors
from .rewards import (BaselineManifest, acquire_baseline, h3_weights, reward_functions,
                      reward_state, snapshot)

LOG_HEADER = ["episode", "instance", "seed", "nodes", "pdi", "status", "sum_reward",
              "policy_loss", "value_loss", "entropy", "clip_frac"]


@dataclass
class Transition:
    state: StateFeatures
    action: int
    log_prob_old: float
    value_old: float
    reward: float
    terminal: bool


@dataclass
class TrainConfig:
    actor_lr: float = 2.4e-4
    critic_lr: float = 1.2e-4
    clip_eps: float = 0.16
    entropy_coef: float = 3.0e-3
    value_coef: float = 0.5
    gamma: float = 0.97
    gae_lambda: float = 0.92
    minibatch: int = 256
    epochs: int = 3
    horizon: int = 2048
    grad_clip_norm: float = 0.5
    weight_decay: float = 0.01
    episodes: int = 500
    reward_signal: str = "H3"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    seed: int = 0
    checkpoint_every: int = 50

    def validate(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.minibatch < 1 or self.minibatch > self.horizon:
            raise ValueError("minibatch must be between 1 and horizon")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        reward_functions(self.reward_signal)
        return self


def compute_gae(buffer, bootstrap_value, gamma, lam):
    """Advantages and returns for an ordered buffer of transitions."""
    n = len(buffer)
    adv = np.zeros(n)
    values = np.array([tr.value_old for tr in buffer], dtype=np.float64)
    nxt_adv, nxt_val = 0.0, float(bootstrap_value)
    for i in range(n - 1, -1, -1):
        tr = buffer[i]
        live = 0.0 if tr.terminal else 1.0
        delta = tr.reward + gamma * nxt_val * live - values[i]
        nxt_adv = delta + gamma * lam * live * nxt_adv
        adv[i] = nxt_adv
        nxt_val = values[i]
    return adv, adv + values


def standardize(adv, eps=1e-8):
    """Mean 0 / std 1 when more than one sample; unchanged otherwise."""
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size <= 1:
        return adv.copy()
    return (adv - adv.mean()) / (adv.std() + eps)


def ppo_loss(net: TreeGateNet, states, actions, log_prob_old, advantages, returns, cfg: TrainConfig,
             mode=Mode.TRAIN):
    """Clipped-surrogate actor-critic loss; returns (loss, diagnostics)."""
    cand, tree, mask = state_tensors(states)
    out = net(cand, tree, mask, mode=mode)
    act = torch.as_tensor(actions, dtype=torch.long)
    if bool(mask.gather(1, act[:, None]).any()):
        raise NetError("action addresses a padded slot", code="MASKED_ACTION")
    logp = torch.log(out.probs.gather(1, act[:, None]).squeeze(1))
    old = torch.as_tensor(log_prob_old, dtype=logp.dtype)
    A = torch.as_tensor(advantages, dtype=logp.dtype)
    R = torch.as_tensor(returns, dtype=logp.dtype)
    ratio = torch.exp(logp - old)
    clipped = torch.clamp(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
    policy = -torch.min(ratio * A, clipped * A).mean()
    value = ((out.value - R) ** 2).mean()
    entropy = out.entropy.mean()
    loss = policy + cfg.value_coef * value - cfg.entropy_coef * entropy
    with torch.no_grad():
        clip_frac = ((ratio - 1).abs() > cfg.clip_eps).to(logp.dtype).mean()
    diag = {"policy_loss": policy.item(), "value_loss": value.item(), "entropy": entropy.item(),
            "mean_ratio": ratio.mean().item(), "clip_frac": clip_frac.item()}
    return loss, diag


def make_optimizer(net: TreeGateNet, cfg: TrainConfig):
    actor, critic = net.parameter_groups()
    return torch.optim.AdamW(
        [{"params": actor, "lr": cfg.actor_lr}, {"params": critic, "lr": cfg.critic_lr}],
        betas=(0.9, 0.999), weight_decay=cfg.weight_decay)


class PPOUpdater:
    """Holds the optimizer across updates and counts non-finite losses."""

    def __init__(self, net: TreeGateNet, cfg: TrainConfig, rng=None):
        self.net = net
        self.cfg = cfg
        self.opt = make_optimizer(net, cfg)
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.bad_losses = 0
        self.updates = 0

    def update(self, buffer, bootstrap_value=0.0):
        """E epochs of shuffled minibatches over ``buffer``; clears it."""
        cfg = self.cfg
        if not buffer:
            return {}
        adv, ret = compute_gae(buffer, bootstrap_value, cfg.gamma, cfg.gae_lambda)
        adv = standardize(adv)
        states = [tr.state for tr in buffer]
        actions = np.array([tr.action for tr in buffer])
        old = np.array([tr.log_prob_old for tr in buffer])
        n = len(buffer)
        totals, batches = {}, 0
        self.net.train()
        for _ in range(cfg.epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                idx = order[start:start + cfg.minibatch]
                loss, diag = ppo_loss(self.net, [states[i] for i in idx], actions[idx], old[idx],
                                      adv[idx], ret[idx], cfg)
                if not torch.isfinite(loss):
                    self.bad_losses += 1
                    if self.bad_losses >= 3:
                        raise TrainingError("three consecutive non-finite losses", code="NON_FINITE_LOSS")
                    continue
                self.bad_losses = 0
                self.opt.zero_grad()
                loss.backward()
                for name, p in self.net.named_parameters():
                    if p.grad is not None and not torch.isfinite(p.grad).all():
                        raise NetError(f"non-finite gradient for {name}", code="NON_FINITE_GRAD")
                torch.nn.utils.clip_grad_norm_(self.net.parameters(), cfg.grad_clip_norm)
                self.opt.step()
                for k, v in diag.items():
                    totals[k] = totals.get(k, 0.0) + v
                batches += 1
        self.net.eval()
        buffer.clear()
        self.updates += 1
        return {k: v / batches for k, v in totals.items()} if batches else {}


# -------------------------------------------------------------- policies
def act(net, state, rng, greedy):
    with torch.no_grad():
        out = forward(state, net, Mode.ROLLOUT)
    probs = out.probs[0].numpy()
    k = state.num_candidates
    if greedy:
        a = int(np.argmax(probs[:k]))
    else:
        p = probs[:k] / probs[:k].sum()
        a = int(rng.choice(k, p=p))
    return a, math.log(probs[a]), float(out.value[0])


class LearnedPolicy(BranchingPolicy):
    """Branching with a trained network: argmax by default, sampling if asked."""

    name = "tgppo"
    uses_features = True

    def __init__(self, net: TreeGateNet, sample=False, seed=0):
        self.net = net.eval()
        self.sample = sample
        self.rng = np.random.default_rng(seed)

    def decide(self, state, ctx):
        return act(self.net, state, self.rng, greedy=not self.sample)[0]


# ------------------------------------------------------------ environment
class BranchingEnv:
    """Step interface over one B&B run, producing shaped rewards."""

    def __init__(self, inst, run_cfg: RunConfig, baseline, reward_signal="H3"):
        self.solver = BranchAndBound(inst, run_cfg)
        self.baseline = baseline
        self.step_fn, self.terminal_fn = reward_functions(reward_signal)
        self.weights = h3_weights(baseline.baseline_nodes) if reward_signal.upper() == "H3" else None
        self.t = 0
        self.gap0 = None

    def reset(self):
        """Solve the root; returns the first state or None if no decision is needed."""
        if not self.solver.start():
            return None
        self.gap0 = self.solver.stats.gap_timeline[-1][1]
        return self.solver.state()

    @property
    def done(self):
        return self.solver.finished

    def step(self, action):
        s = self.solver
        before = snapshot(s)
        pending = s.branch(action)
        after = snapshot(s)
        rs = reward_state(self.t, before, after, self.gap0, s.budget_fraction())
        r = self.step_fn(rs, self.baseline, self.weights) if self.weights else self.step_fn(rs, self.baseline)
        self.t += 1
        if not pending:
            r += self.terminal_fn(s.stats.status, s.stats.nodes_explored, rs, self.baseline)
            return None, r, True
        return s.state(), r, False


# ------------------------------------------------------------------ train
def _fmt(x):
    return format(float(x), ".17g")


def train(instances, tcfg: TrainConfig, net_cfg: NetConfig | None = None, run_cfg: RunConfig | None = None,
          cutoffs=None, manifest: BaselineManifest | None = None, log_path=None, checkpoint_dir=None,
          net: TreeGateNet | None = None, on_episode=None, pairs=None):
    """Train a policy; returns (net, log rows).

    ``cutoffs`` maps instance name to the cutoff used for that instance
    (missing names run without one). ``pairs`` replaces the default
    instances x ``tcfg.seeds`` pool with explicit (instance, seed) pairs.
    Baselines come from ``manifest`` when cached and are computed otherwise.
    """
    tcfg.validate()
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    net = net or init_params(net_cfg or NetConfig())
    net.eval()
    updater = PPOUpdater(net, tcfg, rng)
    run_cfg = run_cfg or RunConfig(node_budget=5000)
    cutoffs = cutoffs or {}
    pool = list(pairs) if pairs is not None else [(inst, s) for inst in instances for s in tcfg.seeds]
    rows = []
    log = None
    if log_path:
        log = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log, lineterminator="\n")
        writer.writerow(LOG_HEADER)
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    queue = []
    try:
        for ep in range(tcfg.episodes):
            if not queue:
                queue = [pool[i] for i in rng.permutation(len(pool))]
            inst, seed = queue.pop()
            cfg = RunConfig(**{**run_cfg.__dict__, "seed": int(seed), "cutoff": cutoffs.get(inst.name)})
            bs = acquire_baseline(inst, seed, cfg, manifest)
            cfg.pdi_reference = bs.pdi0
            env = BranchingEnv(inst, cfg, bs, tcfg.reward_signal)
            state = env.reset()
            buffer, total, diag, steps = [], 0.0, {}, 0
            while state is not None:
                a, logp, v = act(net, state, rng, greedy=False)
                nxt, r, done = env.step(a)
                total += r
                steps += 1
                buffer.append(Transition(state, a, logp, v, r, done))
                if done or len(buffer) >= tcfg.horizon:
                    boot = 0.0 if done else act(net, nxt, rng, greedy=True)[2]
                    diag = updater.update(buffer, boot)
                    break
                state = nxt
            st = env.solver.stats
            status = st.status.value if st.status is not None else "TRUNCATED"
            row = [ep, inst.name, int(seed), st.nodes_explored, _fmt(st.pdi), status, _fmt(total),
                   _fmt(diag.get("policy_loss", 0.0)), _fmt(diag.get("value_loss", 0.0)),
                   _fmt(diag.get("entropy", 0.0)), _fmt(diag.get("clip_frac", 0.0))]
            rows.append({**dict(zip(LOG_HEADER, row)), "steps": steps})
            if log:
                writer.writerow(row)
                log.flush()
            if on_episode is not None:
                on_episode(ep, rows[-1])
            if checkpoint_dir and tcfg.checkpoint_every and (ep + 1) % tcfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"policy_ep{ep + 1:05d}.ckpt"), net,
                                {"episode": ep + 1})
    finally:
        if log:
            log.close()
    if checkpoint_dir:
        save_checkpoint(os.path.join(checkpoint_dir, "policy_final.ckpt"), net, {"episode": tcfg.episodes})
    return net, rows
