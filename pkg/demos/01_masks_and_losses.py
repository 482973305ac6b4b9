"""
Masks, occlusion statistics and the training loss
=================================================

A visible (modal) mask is a subset of the full (amodal) silhouette. The
gap between the two is what the model has to fill in.
"""

import numpy as np
import torch

from amodalseg import AmodalInstance, BinaryMask
from amodalseg.losses import total_loss
from amodalseg.masks import mask_iou, occlusion_rate

# a 6x10 rectangle whose right 40% is hidden behind something
amodal = np.zeros((12, 16), dtype=bool)
amodal[3:9, 3:13] = True
visible = amodal.copy()
visible[:, 9:] = False
inst = AmodalInstance(image_id=0, modal_mask=visible, amodal_mask=amodal)

print("visible area:", inst.modal_mask.area(), " amodal area:", inst.amodal_mask.area())
print("occlusion rate:", occlusion_rate(inst))
print("modal box:", inst.modal_box.as_list(), " amodal box:", inst.amodal_box.as_list())

# masks travel as COCO run-length encodings (column-major, zeros first)
rle = inst.amodal_mask.to_rle()
print("RLE counts:", rle["counts"])
assert BinaryMask.from_rle(rle) == inst.amodal_mask

# copying the visible region is the trivial amodal guess
print("IoU of the visible-copy guess:", mask_iou(visible, amodal))

# the loss sees soft probabilities plus the model's own IoU estimate
probs = torch.tensor(np.where(visible, 0.9, 0.1), dtype=torch.float64)
report = total_loss(probs, amodal, rho_hat=0.9)
print(f"dice {report.dice.item():.4f}  focal {report.focal.item():.4f}  "
      f"iou-estimate error {report.iou.item():.4f}  total {report.total.item():.4f}")
