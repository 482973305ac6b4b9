"""
A short toy training run
========================

Pretrain a small promptable segmenter on visible masks, freeze its image and
prompt encoders, then fine-tune only the mask decoder to predict amodal masks.
This uses a cut-down schedule so it finishes in a few minutes; the acceptance
suite and ``amodalseg ablate`` use the full toy schedule.
"""

import logging

from amodalseg import experiments as X
from amodalseg.training import PromptPolicy

logging.basicConfig(level=logging.INFO, format="%(message)s")

scale = X.ToyScale(train_pairs=300, heldout_pairs=100, pretrain_pairs=300,
                   pretrain_iterations=200, iterations=200)
data = X.make_toy_data(scale)
foundation = X.train_foundation(data, scale)

heldout = data.heldout_set()
before = X.learning_signal(foundation.build_model(), heldout)
print(f"foundation only: amodal IoU {before['iou_mean']:.3f}  (visible copy {before['baseline']:.3f})")

tuned = X.finetune(foundation, [data.train_set()], PromptPolicy("random"), scale)
after = X.learning_signal(tuned.build_model(), heldout)
print(f"after decoder fine-tuning: amodal IoU {after['iou_mean']:.3f} "
      f"(modal prompt {after['iou_modal_prompt']:.3f}, amodal prompt {after['iou_amodal_prompt']:.3f})")
