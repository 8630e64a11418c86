"""Step-matched budgets: equal rays, equal optimizer steps per mode."""
import sys
import time

import numpy as np

sys.path.insert(0, "/root/pkg/src")

from srfields.scenes import load_dataset
from srfields.training import TrainConfig, train, render_dataset_view
from srfields.field import FieldConfig
from srfields.metrics import psnr, ssim

ds = load_dataset("/root/pkg/pilot/ds_toy")
FIELD = FieldConfig(depth=4, width=48, skip_at=2, l_pos=6, l_dir=2)

BASE = dict(s=2, batch_rays=512, n_coarse=16, n_fine=16, seed=5, jitter=True,
            micro_chunk_pixels=512, field=FIELD)
EPOCHS = {"supersample": 12, "vanilla": 48}  # both: 1536 steps of 512 rays

for mode, epochs in EPOCHS.items():
    cfg = TrainConfig(epochs=epochs, **BASE)
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
    print(f"  val tail: {['%.1f' % v for v in vals[-6:]]}", flush=True)
    print(f"  per-view: {['%.2f' % v for v in scores]}", flush=True)
    params.save(f"/root/pkg/pilot/d_{mode}.npz")
print("done", flush=True)
