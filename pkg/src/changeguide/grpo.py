"""Group relative policy optimization for the block reasoner.

For every prompt a frozen snapshot of the policy draws ``G`` answers.  Their
rewards are normalized inside the group, and the live policy ascends the
PPO-style clipped surrogate built from the probability ratio between the live
policy and the snapshot.  No value network is involved.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .codec import BlockLabelSet
from .nn import adam_step
from .reasoner import PolicySample, ReasonerPolicy, block_probs, logprob_from_logits, make_output
from .rewards import RewardConfig, total_reward
from .tensor import Tensor


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    eps_std: float = 1e-8
    eps_clip: float = 0.2
    updates_per_group: int = 1
    kl_coef: float = 0.0
    lr: float = 0.02
    steps: int = 200
    epochs: int | None = None
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        problems = self.validate()
        if problems:
            raise ValueError("; ".join(problems))

    def validate(self) -> list[str]:
        out = []
        if self.group_size < 1:
            out.append(f"grpo.group_size must be >= 1, got {self.group_size}")
        if self.eps_std <= 0:
            out.append(f"grpo.eps_std must be > 0, got {self.eps_std}")
        if not 0 < self.eps_clip < 1:
            out.append(f"grpo.eps_clip must be in (0, 1), got {self.eps_clip}")
        if self.updates_per_group < 1:
            out.append(f"grpo.updates_per_group must be >= 1, got {self.updates_per_group}")
        if self.steps < 0 or (self.epochs is not None and self.epochs < 0):
            out.append("grpo.steps and grpo.epochs must be >= 0")
        if self.batch_size < 1:
            out.append(f"grpo.batch_size must be >= 1, got {self.batch_size}")
        return out


@dataclass
class SampleGroup:
    prompt_id: int
    samples: list[PolicySample]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logprobs: np.ndarray
    recalls: np.ndarray


def group_advantages(rewards, eps_std: float = 1e-8) -> np.ndarray:
    """(r - mean) / max(population std, eps_std)."""
    r = np.asarray(rewards, dtype=np.float64)
    return (r - r.mean()) / max(r.std(), eps_std)


def clipped_objective(ratios, advantages, eps_clip: float = 0.2):
    """mean_i min(ratio_i * A_i, clip(ratio_i, 1-eps, 1+eps) * A_i).

    Returns a :class:`Tensor` when ``ratios`` is one, otherwise a float.
    """
    adv = np.asarray(advantages, dtype=np.float64)
    if np.shape(ratios) != adv.shape:
        raise ValueError(f"clipped_objective: {np.shape(ratios)} ratios vs {adv.shape} advantages")
    r = T.as_tensor(ratios)
    obj = T.mean(T.minimum(r * adv, T.clip(r, 1.0 - eps_clip, 1.0 + eps_clip) * adv))
    return obj if isinstance(ratios, Tensor) else obj.item()


def surrogate(policy: ReasonerPolicy, features, chosen, old_logprobs, advantages,
              eps_clip: float = 0.2) -> tuple[Tensor, Tensor]:
    """Clipped objective of ``policy`` on fixed samples, plus the per-sample log ratios.

    ``features`` is (B, n_blocks, F); ``chosen``, (B, G, n_blocks); the old
    log-probabilities and advantages are (B, G).
    """
    z = policy.scaled_logits(features)
    lp = logprob_from_logits(T.reshape(z, (z.shape[0], 1, z.shape[1])), chosen)
    log_ratio = lp - np.asarray(old_logprobs, dtype=np.float64)
    return clipped_objective(T.exp(log_ratio), advantages, eps_clip), log_ratio


def sample_group(snapshot: ReasonerPolicy, features, gt: BlockLabelSet, cfg: GrpoConfig, rng,
                 reward_cfg: RewardConfig = RewardConfig(), prompt_id: int = 0) -> SampleGroup:
    probs = block_probs(snapshot, features)
    draws = rng.random((cfg.group_size, probs.size)) < probs
    with T.no_grad():
        old_lp = logprob_from_logits(snapshot.scaled_logits(features), draws).data
    samples, rewards, recalls = [], [], []
    for row, lp in zip(draws, old_lp):
        blocks = BlockLabelSet(gt.grid, frozenset(np.flatnonzero(row).tolist()))
        out = make_output(blocks, probs)
        br = total_reward(out.raw, gt, reward_cfg)
        samples.append(PolicySample(out, blocks, float(lp)))
        rewards.append(br.total)
        recalls.append(br.recall)
    rewards = np.array(rewards)
    return SampleGroup(prompt_id, samples, rewards, group_advantages(rewards, cfg.eps_std),
                       np.asarray(old_lp), np.array(recalls))


def grpo_step(policy: ReasonerPolicy, snapshot: ReasonerPolicy, prompts, cfg: GrpoConfig, rng,
              reward_cfg: RewardConfig = RewardConfig()) -> dict:
    """Sample groups from ``snapshot``, then update ``policy`` in place.

    ``prompts`` is a sequence of ``(features, BlockLabelSet)`` pairs.
    """
    if len(prompts) == 0:
        raise ValueError("grpo_step: empty prompt batch")
    groups = [sample_group(snapshot, f, gt, cfg, rng, reward_cfg, i) for i, (f, gt) in enumerate(prompts)]
    feats = np.stack([np.asarray(f) for f, _ in prompts])
    chosen = np.stack([np.stack([s.blocks.to_vector() for s in g.samples]) for g in groups])
    old_lp = np.stack([g.old_logprobs for g in groups])
    adv = np.stack([g.advantages for g in groups])
    params = policy.parameters()

    objective, clipped = None, 0
    for _ in range(cfg.updates_per_group):
        obj, log_ratio = surrogate(policy, feats, chosen, old_lp, adv, cfg.eps_clip)
        if objective is None:
            objective = obj.item()
        clipped += int(np.count_nonzero(np.abs(np.exp(log_ratio.data) - 1.0) > cfg.eps_clip))
        loss = -obj
        if cfg.kl_coef:
            loss = loss + cfg.kl_coef * T.mean(log_ratio)
        T.backward(loss)
        adam_step(params, lr=cfg.lr)

    return {
        "mean_reward": float(np.mean([g.rewards for g in groups])),
        "mean_recall": float(np.mean([g.recalls for g in groups])),
        "clip_frac": clipped / (adv.size * cfg.updates_per_group),
        "objective": float(objective),
    }


def total_steps(cfg: GrpoConfig, n_prompts: int) -> int:
    if cfg.epochs is None:
        return cfg.steps
    return cfg.epochs * math.ceil(n_prompts / cfg.batch_size)


def grpo_train(policy: ReasonerPolicy, prompts, cfg: GrpoConfig = GrpoConfig(),
               reward_cfg: RewardConfig = RewardConfig(), log_path=None) -> tuple[ReasonerPolicy, list[float]]:
    """Run GRPO over shuffled prompt batches; the snapshot is refreshed every step.

    Runs ``cfg.epochs`` passes over the prompts when set, else ``cfg.steps``
    batches.  Each step appends ``{step, mean_reward, mean_recall, clip_frac,
    objective}`` as a JSON line to ``log_path`` when given.
    """
    prompts = list(prompts)
    rng = np.random.default_rng(cfg.seed)
    n_steps = total_steps(cfg, len(prompts))
    if n_steps and not prompts:
        raise ValueError("grpo_train: no prompts")
    curve: list[float] = []
    log = open(log_path, "w") if log_path is not None else None
    try:
        order: list[int] = []
        for step in range(n_steps):
            if len(order) < min(cfg.batch_size, len(prompts)):
                order.extend(rng.permutation(len(prompts)).tolist())
            batch, order = order[: cfg.batch_size], order[cfg.batch_size :]
            snapshot = policy.copy()
            stats = grpo_step(policy, snapshot, [prompts[i] for i in batch], cfg, rng, reward_cfg)
            curve.append(stats["mean_reward"])
            if log is not None:
                log.write(json.dumps({"step": step, **stats}) + "\n")
    finally:
        if log is not None:
            log.close()
    return policy, curve


def expected_reward(policy: ReasonerPolicy, features, gt: BlockLabelSet,
                    reward_cfg: RewardConfig = RewardConfig()) -> float:
    """Exact expected total reward by enumerating every block set (small grids only)."""
    n = gt.grid.n_blocks
    if n > 16:
        raise ValueError(f"expected_reward: {n} blocks is too many to enumerate")
    probs = block_probs(policy, features)
    total = 0.0
    for code in range(2 ** n):
        chosen = np.array([(code >> b) & 1 for b in range(n)], dtype=bool)
        p = float(np.prod(np.where(chosen, probs, 1.0 - probs)))
        blocks = BlockLabelSet(gt.grid, frozenset(np.flatnonzero(chosen).tolist()))
        total += p * total_reward(make_output(blocks, probs).raw, gt, reward_cfg).total
    return total
