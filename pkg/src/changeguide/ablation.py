"""Paired ablation runs on synthetic scenes.

One call trains a reasoner (SFT, then GRPO) and two decoders that differ only
in whether coarse-mask guidance is enabled, and reports held-out numbers for
every variant.  Seeds select both the scenes and every model initialization.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .codec import GridSpec, block_labels_from_mask, coarse_mask_from_blocks
from .decoder import DecoderSample, MaskGuidedDecoder, MGDConfig, predict, train_decoder
from .grpo import GrpoConfig, grpo_train
from .losses import ConfusionMatrix, confusion, metrics
from .reasoner import ReasonerPolicy, block_recall, featurize, greedy_decode, sft_train
from .scenes import GenConfig, generate


@dataclass(frozen=True)
class AblationConfig:
    n_train: int = 200
    n_test: int = 50
    sft_epochs: int = 50
    grpo: GrpoConfig = GrpoConfig(epochs=30)
    decoder_train: int = 200
    decoder_epochs: int = 8
    mgd: MGDConfig = MGDConfig()
    gen: GenConfig = GenConfig()


def _scenes(gen: GenConfig, first_seed: int, n: int):
    return [generate(dataclasses.replace(gen, seed=first_seed + i)) for i in range(n)]


def _pixel_iou(model, scenes, coarse) -> float:
    preds = predict(model, np.stack([s.img_t1 for s in scenes]), np.stack([s.img_t2 for s in scenes]), np.stack(coarse))
    cm = ConfusionMatrix()
    for p, s in zip(preds, scenes):
        cm = cm + confusion(p, s.gt)
    return metrics(cm)["iou"]


def ablation_run(seed: int, cfg: AblationConfig = AblationConfig()) -> dict:
    """Held-out block recall (SFT vs SFT+GRPO) and pixel IoU (guided vs unguided)."""
    start = time.perf_counter()
    grid = GridSpec(cfg.gen.grid_rows, cfg.gen.grid_cols, cfg.gen.h, cfg.gen.w)
    base = 100_000 * seed
    train = _scenes(cfg.gen, base, cfg.n_train)
    test = _scenes(cfg.gen, base + 50_000, cfg.n_test)

    def prompts(scenes):
        return [(featurize(s.img_t1, s.img_t2, grid), block_labels_from_mask(s.gt, grid)) for s in scenes]

    train_p, test_p = prompts(train), prompts(test)
    gts = [gt for _, gt in test_p]
    policy = ReasonerPolicy(seed=seed)
    sft_train(policy, train_p, epochs=cfg.sft_epochs, seed=seed)
    recall_sft = block_recall([greedy_decode(policy, f, grid) for f, _ in test_p], gts)
    grpo_train(policy, train_p, dataclasses.replace(cfg.grpo, seed=seed))
    blocks = [greedy_decode(policy, f, grid) for f, _ in test_p]
    recall_grpo = block_recall(blocks, gts)

    samples = [
        DecoderSample(s.img_t1, s.img_t2, s.gt, coarse_mask_from_blocks(block_labels_from_mask(s.gt, grid)))
        for s in train[: cfg.decoder_train]
    ]
    coarse = [coarse_mask_from_blocks(b) for b in blocks]
    iou = {}
    for guided in (True, False):
        model = MaskGuidedDecoder(dataclasses.replace(cfg.mgd, guidance=guided), seed=seed)
        train_decoder(model, samples, epochs=cfg.decoder_epochs, seed=seed)
        iou[guided] = _pixel_iou(model, test, coarse)

    return {
        "seed": seed,
        "recall_sft": recall_sft,
        "recall_grpo": recall_grpo,
        "iou_guided": iou[True],
        "iou_unguided": iou[False],
        "seconds": round(time.perf_counter() - start, 1),
    }
