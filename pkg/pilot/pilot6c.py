"""Candidate acceptance budget: equal epochs, equal ray batches."""
import sys
import time

import numpy as np

sys.path.insert(0, "/root/pkg/src")

from srfields.scenes import load_dataset
from srfields.training import TrainConfig, train, render_dataset_view
from srfields.field import FieldConfig
from srfields.metrics import psnr, ssim

ds = load_dataset("/root/pkg/pilot/ds_toy")

cfg = TrainConfig(
    s=2, batch_rays=512, epochs=16, n_coarse=24, n_fine=24, seed=5,
    jitter=True, micro_chunk_pixels=512,
    field=FieldConfig(depth=4, width=48, skip_at=2, l_pos=6, l_dir=2))

for mode in ("vanilla", "supersample"):
    t0 = time.time()
    params, recs = train(ds, cfg, mode)
    dt = time.time() - t0
    vals = [r["val_psnr"] for r in recs if r.get("event") == "epoch_end"]
    scores, sscores = [], []
    for i in range(ds.n_views("test")):
        img, _ = render_dataset_view(params, ds, "test", i, cfg, scale=2)
        gt = ds.load_array("test", i, "hr")
        scores.append(psnr(np.clip(img, 0, 1), gt))
        sscores.append(ssim(np.clip(img, 0, 1), gt))
    print(f"{mode}: {dt:.0f}s  hr-psnr {np.mean(scores):.3f}  "
          f"ssim {np.mean(sscores):.4f}", flush=True)
    print(f"  val curve: {['%.1f' % v for v in vals]}", flush=True)
    print(f"  per-view: {['%.2f' % v for v in scores]}", flush=True)
    params.save(f"/root/pkg/pilot/c16_{mode}.npz")
print("done", flush=True)
