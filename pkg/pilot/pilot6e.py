"""Schedule/sample sweep for the acceptance budget (supersample side only,
plus a train-view PSNR readout against the >25 dB regression bar)."""
import sys
import time

import numpy as np

sys.path.insert(0, "/root/pkg/src")

from srfields.scenes import load_dataset
from srfields.training import TrainConfig, train, render_dataset_view
from srfields.field import FieldConfig
from srfields.metrics import psnr

ds = load_dataset("/root/pkg/pilot/ds_toy")
FIELD = FieldConfig(depth=4, width=48, skip_at=2, l_pos=6, l_dir=2)

SWEEP = {
    "n24_lrend5e-5_e12": dict(n_coarse=24, n_fine=24, lr_end=5e-5, epochs=12),
    "n24_lrend5e-6_e24": dict(n_coarse=24, n_fine=24, lr_end=5e-6, epochs=24),
    "n16_lrend5e-5_e16": dict(n_coarse=16, n_fine=16, lr_end=5e-5, epochs=16),
}

for name, kw in SWEEP.items():
    cfg = TrainConfig(s=2, batch_rays=512, seed=5, jitter=True,
                      micro_chunk_pixels=512, field=FIELD, **kw)
    t0 = time.time()
    params, recs = train(ds, cfg, "supersample")
    dt = time.time() - t0
    vals = [r["val_psnr"] for r in recs if r.get("event") == "epoch_end"]
    hr = []
    for i in range(ds.n_views("test")):
        img, _ = render_dataset_view(params, ds, "test", i, cfg, scale=2)
        hr.append(psnr(np.clip(img, 0, 1), ds.load_array("test", i, "hr")))
    # train-view LR reconstruction (the regression bar)
    tr = []
    for i in range(4):
        img, _ = render_dataset_view(params, ds, "train", i, cfg, scale=1)
        tr.append(psnr(np.clip(img, 0, 1), ds.load_array("train", i, "lr")))
    print(f"{name}: {dt:.0f}s  hr {np.mean(hr):.2f}  "
          f"train-lr {np.mean(tr):.2f}  val tail {['%.1f' % v for v in vals[-4:]]}",
          flush=True)
    params.save(f"/root/pkg/pilot/e_{name}.npz")
print("done", flush=True)
