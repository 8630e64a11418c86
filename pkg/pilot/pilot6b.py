"""Budget tuning: find the cheapest config that shows the SS trend clearly."""
import sys
import time

import numpy as np

sys.path.insert(0, "/root/pkg/src")

from srfields.scenes import load_dataset
from srfields.training import TrainConfig, train, render_dataset_view
from srfields.field import FieldConfig
from srfields.metrics import psnr

ds = load_dataset("/root/pkg/pilot/ds_toy")

CONFIGS = {
    "A_w48_b1024_e12": dict(
        field=FieldConfig(depth=4, width=48, skip_at=2, l_pos=6, l_dir=2),
        batch_rays=1024, epochs=12, n_coarse=24, n_fine=24,
        micro_chunk_pixels=256),
    "B_w48_b512_e10": dict(
        field=FieldConfig(depth=4, width=48, skip_at=2, l_pos=6, l_dir=2),
        batch_rays=512, epochs=10, n_coarse=24, n_fine=24,
        micro_chunk_pixels=128),
}

for name, kw in CONFIGS.items():
    print(f"== {name}", flush=True)
    cfg = TrainConfig(s=2, seed=5, jitter=True, **kw)
    results = {}
    for mode in ("vanilla", "supersample"):
        t0 = time.time()
        params, recs = train(ds, cfg, mode)
        dt = time.time() - t0
        vals = [r["val_psnr"] for r in recs if r.get("event") == "epoch_end"]
        scores = []
        for i in range(ds.n_views("test")):
            img, _ = render_dataset_view(params, ds, "test", i, cfg, scale=2)
            scores.append(psnr(np.clip(img, 0, 1), ds.load_array("test", i, "hr")))
        results[mode] = np.mean(scores)
        print(f"  {mode}: {dt:.0f}s, hr-psnr {np.mean(scores):.3f}, "
              f"val curve {['%.1f' % v for v in vals]}", flush=True)
        params.save(f"/root/pkg/pilot/{name}_{mode}.npz")
    gap = results["supersample"] - results["vanilla"]
    print(f"  GAP: {gap:+.3f} dB", flush=True)
print("done", flush=True)
