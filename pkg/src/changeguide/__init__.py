"""Bi-temporal change detection: a block-level reasoner trained with supervised
and group-relative policy optimization, followed by a mask-guided pixel decoder.

Submodules are imported on demand so that ``changeguide.cli`` can configure
BLAS threading before numpy loads.

- ``codec``: block grids, run strings, tagged reasoner output
- ``rewards``: format, accuracy and recall-bonus rewards
- ``scenes``: synthetic scene pairs with exact change masks
- ``tensor`` / ``nn``: reverse-mode autodiff, Adam, checkpoints
- ``reasoner`` / ``grpo``: block policy, SFT and GRPO
- ``decoder``: Siamese encoder with mask-guided decoding
- ``losses``: weighted BCE plus Dice, confusion metrics
- ``pipeline`` / ``cli``: file-driven stages and the command line
"""
__version__ = "0.1.0"
