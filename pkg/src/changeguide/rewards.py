"""Verifiable rewards for block-level change answers.

The total reward is gated by a binary format check; a well-formed answer earns
1 plus a recall-weighted accuracy term plus a tiered recall bonus.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .codec import BlockLabelSet, FormatError, GridSpec, ParseError, extract_structured, parse_runs


@dataclass(frozen=True)
class RewardConfig:
    beta: float = 0.7
    bonus_tiers: tuple[tuple[float, float], ...] = ((0.7, 0.7), (0.9, 0.9), (1.0, 1.0))

    def __post_init__(self):
        object.__setattr__(self, "bonus_tiers", tuple((float(t), float(b)) for t, b in self.bonus_tiers))
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        thresholds = [t for t, _ in self.bonus_tiers]
        bonuses = [b for _, b in self.bonus_tiers]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError(f"bonus thresholds must be strictly increasing, got {thresholds}")
        if any(b < a for a, b in zip(bonuses, bonuses[1:])):
            raise ValueError(f"bonuses must be non-decreasing, got {bonuses}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: int
    precision: float = 0.0
    recall: float = 0.0
    r_acc: float = 0.0
    r_bonus: float = 0.0
    total: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def parse_answer(raw: str, grid: GridSpec) -> BlockLabelSet:
    """Structured text to block set; raises FormatError or ParseError."""
    return parse_runs(extract_structured(raw).answer, grid)


def format_reward(raw: str, grid: GridSpec = GridSpec()) -> int:
    try:
        parse_answer(raw, grid)
    except (FormatError, ParseError):
        return 0
    return 1


def block_precision_recall(pred: BlockLabelSet, gt: BlockLabelSet) -> tuple[float, float]:
    if pred.grid != gt.grid:
        raise ValueError(f"grid mismatch: {pred.grid} vs {gt.grid}")
    hit = len(pred.changed & gt.changed)
    if len(pred) == 0:
        precision = 1.0 if len(gt) == 0 else 0.0
    else:
        precision = hit / len(pred)
    recall = 1.0 if len(gt) == 0 else hit / len(gt)
    return precision, recall


def accuracy_reward(precision: float, recall: float, cfg: RewardConfig = RewardConfig()) -> float:
    return (1.0 - cfg.beta) * precision + cfg.beta * recall


def recall_bonus(recall: float, cfg: RewardConfig = RewardConfig()) -> float:
    # Highest satisfied tier wins; a threshold of 1.0 means "recall is perfect".
    for threshold, bonus in reversed(cfg.bonus_tiers):
        if (recall >= threshold) if threshold >= 1.0 else (recall > threshold):
            return bonus
    return 0.0


def total_reward(raw: str, gt: BlockLabelSet, cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    try:
        pred = parse_answer(raw, gt.grid)
    except (FormatError, ParseError):
        return RewardBreakdown(r_format=0)
    precision, recall = block_precision_recall(pred, gt)
    r_acc = accuracy_reward(precision, recall, cfg)
    r_bonus = recall_bonus(recall, cfg)
    return RewardBreakdown(1, precision, recall, r_acc, r_bonus, 1.0 + r_acc + r_bonus)
