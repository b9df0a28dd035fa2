"""GRPO fine-tuning of the block reasoner on a handful of synthetic scenes.

Shows the mean group reward climbing after a short supervised warm start.
"""
import dataclasses

from changeguide.codec import GridSpec, block_labels_from_mask
from changeguide.grpo import GrpoConfig, grpo_train
from changeguide.reasoner import ReasonerPolicy, block_recall, featurize, greedy_decode, sft_train
from changeguide.scenes import GenConfig, generate

grid = GridSpec(8, 8, 64, 64)
scenes = [generate(dataclasses.replace(GenConfig(), seed=i)) for i in range(48)]
prompts = [(featurize(s.img_t1, s.img_t2, grid), block_labels_from_mask(s.gt, grid)) for s in scenes]
train, test = prompts[:32], prompts[32:]

policy = ReasonerPolicy(seed=0)
sft_train(policy, train, epochs=5, seed=0)


def recall():
    return block_recall([greedy_decode(policy, f, grid) for f, _ in test], [g for _, g in test])


print(f"after a short SFT warm start: held-out block recall {recall():.3f}")
_, curve = grpo_train(policy, train, GrpoConfig(steps=60, batch_size=8))
for step in range(0, len(curve), 10):
    window = curve[step:step + 10]
    print(f"steps {step:3d}-{step + len(window) - 1:3d}: mean reward {sum(window) / len(window):.3f}")
print(f"after GRPO: held-out block recall {recall():.3f}")
