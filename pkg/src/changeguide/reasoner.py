"""Block-level change reasoner: a factorized Bernoulli policy over grid blocks.

Each block is described by 15 statistics (per-channel mean and standard
deviation at both times, plus the absolute difference of means).  A two-layer
perceptron shared across blocks turns them into one logit per block.  Samples
are emitted as ``<think>..</think><answer>run string</answer>`` text so the
reward can be computed from the text alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .codec import BlockLabelSet, GridSpec, StructuredOutput, render_structured, serialize_runs
from .nn import Module, Parameter, adam_step
from .tensor import Tensor

N_FEATURES = 15


def featurize(img_t1: np.ndarray, img_t2: np.ndarray, grid: GridSpec, radiometric: bool = True) -> np.ndarray:
    """(n_blocks, 15) block statistics with channels scaled to [0, 1].

    With ``radiometric`` the second image is first shifted per channel so that
    its median matches the first image's median, which cancels global
    brightness and tint offsets while leaving localized changes intact.
    """
    shape = (grid.image_h, grid.image_w, 3)
    if np.shape(img_t1) != shape or np.shape(img_t2) != shape:
        raise ValueError(f"featurize: images {np.shape(img_t1)}, {np.shape(img_t2)} do not match grid {shape}")
    a, b = _unit(img_t1), _unit(img_t2)
    if radiometric:
        b = b + (np.median(a, axis=(0, 1)) - np.median(b, axis=(0, 1)))

    def blocks(img):
        return (
            img.reshape(grid.rows, grid.block_h, grid.cols, grid.block_w, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(grid.n_blocks, grid.block_h * grid.block_w, 3)
        )

    def spread(x):
        # std is shift-invariant; shifting by the first pixel makes flat blocks exactly 0
        return (x - x[:, :1]).std(axis=1)

    b1, b2 = blocks(a), blocks(b)
    m1, m2 = b1.mean(axis=1), b2.mean(axis=1)
    return np.concatenate([m1, spread(b1), m2, spread(b2), np.abs(m2 - m1)], axis=1)


def _unit(img) -> np.ndarray:
    a = np.asarray(img)
    return a / 255.0 if a.dtype == np.uint8 else a.astype(np.float64)


class ReasonerPolicy(Module):
    def __init__(self, hidden: int = 32, temperature: float = 1.0, seed: int = 0):
        if temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.temperature = temperature
        self.w1 = Parameter(rng.normal(0.0, np.sqrt(2.0 / N_FEATURES), size=(N_FEATURES, hidden)))
        self.b1 = Parameter(np.zeros(hidden))
        self.w2 = Parameter(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 1)))
        self.b2 = Parameter(np.zeros(1))
        # fixed input standardization, fitted once from training features
        self.shift = np.zeros(N_FEATURES)
        self.scale = np.ones(N_FEATURES)

    def fit_normalizer(self, features: np.ndarray) -> None:
        flat = np.asarray(features).reshape(-1, N_FEATURES)
        self.shift = flat.mean(axis=0)
        self.scale = flat.std(axis=0) + 1e-6

    def logits(self, features) -> Tensor:
        """Raw logits, shape features.shape[:-1]; temperature not applied."""
        f = (np.asarray(features, dtype=np.float64) - self.shift) / self.scale
        h = T.relu(f @ self.w1 + self.b1)
        z = h @ self.w2 + self.b2
        return T.reshape(z, f.shape[:-1])

    def scaled_logits(self, features) -> Tensor:
        return self.logits(features) * (1.0 / self.temperature)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        state["norm.shift"] = self.shift.copy()
        state["norm.scale"] = self.scale.copy()
        return state

    def load_state_dict(self, state) -> None:
        super().load_state_dict(state)
        if "norm.shift" in state:
            self.shift = np.array(state["norm.shift"], dtype=np.float64)
            self.scale = np.array(state["norm.scale"], dtype=np.float64)

    def copy(self) -> "ReasonerPolicy":
        twin = ReasonerPolicy(self.hidden, self.temperature)
        twin.load_state_dict(self.state_dict())
        return twin


def block_probs(policy: ReasonerPolicy, features) -> np.ndarray:
    features = np.asarray(features)
    if features.shape[-1] != N_FEATURES:
        raise ValueError(f"block_probs: expected {N_FEATURES} features per block, got shape {features.shape}")
    with T.no_grad():
        return T.sigmoid(policy.scaled_logits(features)).data


def logprob_from_logits(z: Tensor, chosen) -> Tensor:
    """Sum over the last axis of log p (chosen) or log(1-p) (not chosen), p = sigmoid(z).

    ``chosen`` may carry extra leading sample dimensions that broadcast
    against ``z``.
    """
    chosen = np.asarray(chosen, dtype=np.float64)
    log_p = -T.softplus(-z)
    log_q = -T.softplus(z)
    return T.sum_(log_p * chosen + log_q * (1.0 - chosen), axis=-1)


def bernoulli_logprob(policy: ReasonerPolicy, features, chosen) -> Tensor:
    return logprob_from_logits(policy.scaled_logits(features), chosen)


def logprob_of(policy: ReasonerPolicy, features, blocks: BlockLabelSet) -> float:
    with T.no_grad():
        return bernoulli_logprob(policy, features, blocks.to_vector()).item()


@dataclass(frozen=True)
class PolicySample:
    output: StructuredOutput
    blocks: BlockLabelSet
    logprob: float


def think_text(probs: np.ndarray) -> str:
    listed = " ".join(f"{i}:{p:.2f}" for i, p in enumerate(probs))
    return f"Compared block statistics of both dates. Change probability per block: {listed}"


def make_output(blocks: BlockLabelSet, probs: np.ndarray) -> StructuredOutput:
    think, answer = think_text(probs), serialize_runs(blocks)
    return StructuredOutput(think, answer, render_structured(think, answer))


def _logprob_from_probs(probs: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(chosen, np.log(probs), np.log1p(-probs)).sum(axis=-1)


def sample_from_probs(probs: np.ndarray, grid: GridSpec, rng, n: int = 1) -> list[PolicySample]:
    """Draw ``n`` independent block sets from per-block Bernoulli probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    draws = rng.random((n, probs.size)) < probs
    lps = _logprob_from_probs(probs, draws)
    out = []
    for row, lp in zip(draws, lps):
        blocks = BlockLabelSet(grid, frozenset(np.flatnonzero(row).tolist()))
        out.append(PolicySample(make_output(blocks, probs), blocks, float(lp)))
    return out


def sample(policy: ReasonerPolicy, features, grid: GridSpec, rng, n: int = 1):
    """One :class:`PolicySample` (``n=1``) or a list of ``n`` samples."""
    draws = sample_from_probs(block_probs(policy, features), grid, rng, n)
    if n == 1:
        # recompute through the policy so the stored value equals logprob_of exactly
        return PolicySample(draws[0].output, draws[0].blocks, logprob_of(policy, features, draws[0].blocks))
    return [PolicySample(d.output, d.blocks, logprob_of(policy, features, d.blocks)) for d in draws]


def greedy_decode(policy: ReasonerPolicy, features, grid: GridSpec) -> BlockLabelSet:
    probs = block_probs(policy, features)
    return BlockLabelSet(grid, frozenset(np.flatnonzero(probs > 0.5).tolist()))


def block_bce(policy: ReasonerPolicy, features, targets) -> Tensor:
    """Mean per-block binary cross-entropy."""
    z = policy.scaled_logits(features)
    t = np.asarray(targets, dtype=np.float64)
    return T.mean(T.softplus(z) - z * t)


def sft_train(policy: ReasonerPolicy, dataset, epochs: int = 50, lr: float = 1e-2,
              batch_size: int = 16, seed: int = 0, fit_normalizer: bool = True) -> list[float]:
    """Supervised per-block BCE against ground-truth blocks; returns per-step losses.

    ``dataset`` is a sequence of ``(features, BlockLabelSet)`` pairs.
    """
    if len(dataset) == 0:
        raise ValueError("sft_train: empty dataset")
    feats = np.stack([np.asarray(f) for f, _ in dataset])
    targets = np.stack([gt.to_vector() for _, gt in dataset])
    if fit_normalizer:
        policy.fit_normalizer(feats)
    rng = np.random.default_rng(seed)
    params = policy.parameters()
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss = block_bce(policy, feats[idx], targets[idx])
            T.backward(loss)
            adam_step(params, lr=lr)
            curve.append(loss.item())
    return curve


def block_f1(preds, gts) -> float:
    """Micro-averaged block-level F1 over paired label sets."""
    tp = sum(len(p.changed & g.changed) for p, g in zip(preds, gts))
    fp = sum(len(p.changed - g.changed) for p, g in zip(preds, gts))
    fn = sum(len(g.changed - p.changed) for p, g in zip(preds, gts))
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def block_recall(preds, gts) -> float:
    tp = sum(len(p.changed & g.changed) for p, g in zip(preds, gts))
    pos = sum(len(g) for g in gts)
    return 1.0 if pos == 0 else tp / pos
