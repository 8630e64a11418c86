"""Pilot for the supersampling-vs-vanilla trend at acceptance scale."""
import sys
import time

import numpy as np

sys.path.insert(0, "/root/pkg/src")

from srfields.scenes import toy_three_sphere_scene, make_dataset, load_dataset
from srfields.training import TrainConfig, train, render_dataset_view
from srfields.field import FieldConfig
from srfields.metrics import psnr, downsample_average

OUT = "/root/pkg/pilot/ds_toy"

scene = toy_three_sphere_scene()
t0 = time.time()
make_dataset(scene, n_views=16, hr_res=64, s=2, seed=11, out_dir=OUT,
             n_test=8, n_val=2, extra_kernels=("tent",))
print(f"dataset: {time.time()-t0:.0f}s", flush=True)
ds = load_dataset(OUT)

field_cfg = FieldConfig(depth=4, width=64, skip_at=2, l_pos=10, l_dir=4)
cfg = TrainConfig(s=2, batch_rays=1024, epochs=8, n_coarse=32, n_fine=32,
                  seed=5, jitter=True, field=field_cfg, micro_chunk_pixels=128)

for mode in ("vanilla", "supersample"):
    t0 = time.time()
    params, recs = train(ds, cfg, mode)
    dt = time.time() - t0
    vals = [r["val_psnr"] for r in recs if r.get("event") == "epoch_end"]
    print(f"{mode}: {dt:.0f}s, val psnr per epoch {['%.2f'%v for v in vals]}",
          flush=True)
    # HR eval on the 8 test views
    scores_hr = []
    scores_lr = []
    for i in range(ds.n_views("test")):
        img, _ = render_dataset_view(params, ds, "test", i, cfg, scale=2)
        gt = ds.load_array("test", i, "hr")
        scores_hr.append(psnr(np.clip(img, 0, 1), gt))
        scores_lr.append(psnr(np.clip(downsample_average(img, 2), 0, 1),
                              downsample_average(gt, 2)))
    print(f"{mode}: test HR psnr mean {np.mean(scores_hr):.3f} "
          f"({['%.2f'%v for v in scores_hr]})", flush=True)
    print(f"{mode}: test LR psnr mean {np.mean(scores_lr):.3f}", flush=True)
    params.save(f"/root/pkg/pilot/{mode}.npz")
print("done", flush=True)
