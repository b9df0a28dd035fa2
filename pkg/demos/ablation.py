"""Paired ablation: SFT vs SFT+GRPO reasoner, guided vs unguided decoder.

Usage: python3 ablation.py [n_seeds]   (about 5 minutes per seed on one core)
"""
import sys

import numpy as np

from changeguide.ablation import AblationConfig, ablation_run

n = int(sys.argv[1]) if len(sys.argv) > 1 else 1
rows = [ablation_run(seed, AblationConfig()) for seed in range(n)]
for r in rows:
    print(r)
for key in ("recall_sft", "recall_grpo", "iou_guided", "iou_unguided"):
    print(f"mean {key:13s} {np.mean([r[key] for r in rows]):.4f}")
