"""Refinement pilot: does the trained refiner lift held-out PSNR / L1?"""
import sys
import time

import numpy as np

sys.path.insert(0, "/root/pkg/src")

from srfields.scenes import load_dataset
from srfields.training import TrainConfig, render_dataset_view
from srfields.field import FieldConfig, FieldParams
from srfields.metrics import psnr
from srfields.refine import (RefinerConfig, RefineTrainConfig, refine_image,
                             train_refiner)

CKPT = sys.argv[1] if len(sys.argv) > 1 else "/root/pkg/pilot/e_n24_lrend5e-5_e12.npz"

ds = load_dataset("/root/pkg/pilot/ds_toy")
params = FieldParams.load(CKPT)
cfg = TrainConfig(s=2, n_coarse=24, n_fine=24, seed=5, field=params.config)
m = ds.manifest

t0 = time.time()
sr_ref, _ = render_dataset_view(params, ds, "train", 0, cfg, scale=2)
ref_image = ds.load_array("train", 0, "hr")
print(f"ref-view SR render: {time.time()-t0:.0f}s  "
      f"(psnr vs gt {psnr(np.clip(sr_ref,0,1), ref_image):.2f})", flush=True)

for steps, ch, lr in ((300, 16, 2e-4),):
    t0 = time.time()
    rt = RefineTrainConfig(steps=steps, lr=lr, seed=5,
                           refiner=RefinerConfig(base_channels=ch))
    refiner, log = train_refiner(np.clip(sr_ref, 0, 1), ref_image, rt)
    print(f"refiner c{ch} {steps}st: {time.time()-t0:.0f}s  "
          f"loss {log[0]['loss']:.4f} -> {log[-1]['loss']:.4f}", flush=True)

    pose_ref = ds.pose("train", 0)
    intr_hr = m.intrinsics["hr"]
    pb, pa, l1b, l1a = [], [], [], []
    for i in range(ds.n_views("test")):
        img, depth = render_dataset_view(params, ds, "test", i, cfg, scale=2)
        img = np.clip(img, 0, 1)
        refined = refine_image(img, depth, ds.pose("test", i), intr_hr,
                               ref_image, pose_ref, intr_hr, refiner)
        gt = ds.load_array("test", i, "hr")
        pb.append(psnr(img, gt))
        pa.append(psnr(refined, gt))
        l1b.append(np.abs(img - gt).mean())
        l1a.append(np.abs(refined - gt).mean())
    improved = sum(a < b for a, b in zip(l1a, l1b))
    print(f"  PSNR {np.mean(pb):.3f} -> {np.mean(pa):.3f}; "
          f"L1 improved {improved}/8", flush=True)
    print(f"  per-view before {['%.2f' % v for v in pb]}", flush=True)
    print(f"  per-view after  {['%.2f' % v for v in pa]}", flush=True)
print("done", flush=True)
