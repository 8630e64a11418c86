"""Training loops for the radiance field: plain per-pixel MSE and the
sub-pixel supersampled objective, optimized with Adam under an exponential
learning-rate decay.

The supersampled objective renders an s x s grid of rays inside each
training pixel and penalizes the squared error between their average color
and the low-resolution ground-truth pixel, matching a box ("average")
degradation model. Both the coarse and fine passes are supervised.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import rays_for_points
from .field import FieldConfig, FieldParams
from .metrics import psnr
from .render import SampleConfig, render_image, render_rays


def _subpixel_offsets(s: int) -> np.ndarray:
    """(s*s, 2) symmetric offsets of the sub-pixel centers around a pixel
    center, matching camera.subpixel_grid's layout."""
    off = (2.0 * np.arange(s) + 1.0 - s) / (2.0 * s)
    gx, gy = np.meshgrid(off, off)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)

__all__ = [
    "TrainConfig", "AdamState", "adam_step", "lr_at",
    "vanilla_loss", "supersampled_loss", "train",
    "supersampled_view_average", "render_dataset_view",
]


@dataclass(frozen=True)
class TrainConfig:
    s: int = 2                    # supersampling scale factor
    batch_rays: int = 2048        # rays per optimizer step (pixels = rays / s^2)
    epochs: int = 10
    lr_start: float = 5e-4
    lr_end: float = 5e-6
    n_coarse: int = 64
    n_fine: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    jitter: bool = True
    lr_role: str = "lr"           # which LR degradation the model trains on
    micro_chunk_pixels: int = 128  # gradient-accumulation granularity
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("scale factor must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.batch_rays < 1 or self.epochs < 1:
            raise ValueError("batch_rays and epochs must be positive")

    def pixels_per_batch(self, s: int) -> int:
        return max(1, self.batch_rays // (s * s))

    def sample_config(self, white_background: bool, jitter: bool | None = None
                      ) -> SampleConfig:
        return SampleConfig(n_coarse=self.n_coarse, n_fine=self.n_fine,
                            jitter=self.jitter if jitter is None else jitter,
                            white_background=white_background)


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place; returns (params, state)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ad.ShapeError("adam_step", g.shape, p.data.shape)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Geometric interpolation from lr_start to lr_end across training."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    if total_steps == 0:
        return cfg.lr_start
    frac = step / total_steps
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


# -- batch construction -------------------------------------------------------


class _TrainData:
    """Pinned-in-memory view of the training split used by the loss ops."""

    def __init__(self, dataset, lr_role: str):
        manifest = dataset.manifest
        if "train" not in manifest.splits or not manifest.splits["train"]:
            raise ValueError("dataset has no training views")
        self.intr = manifest.intrinsics["lr"]
        self.t_near = manifest.t_near
        self.t_far = manifest.t_far
        self.white_background = manifest.background == "white"
        self.poses = [dataset.pose("train", i)
                      for i in range(dataset.n_views("train"))]
        self.images = []
        for i in range(dataset.n_views("train")):
            img = dataset.load_array("train", i, lr_role)
            if img.shape != (self.intr.height, self.intr.width, 3):
                raise ValueError(
                    f"train view {i}: image shape {img.shape} does not match "
                    f"intrinsics {(self.intr.height, self.intr.width, 3)}")
            self.images.append(img)

    def all_pixels(self) -> np.ndarray:
        """(n_views * H * W, 3) rows of (view, y, x)."""
        h, w = self.intr.height, self.intr.width
        vs, ys, xs = np.meshgrid(np.arange(len(self.poses)), np.arange(h),
                                 np.arange(w), indexing="ij")
        return np.stack([vs.reshape(-1), ys.reshape(-1), xs.reshape(-1)], axis=1)

    def gt_colors(self, pixels: np.ndarray) -> np.ndarray:
        return np.stack([self.images[v][y, x] for v, y, x in pixels])

    def subpixel_rays(self, pixels: np.ndarray, s: int
                      ) -> tuple[np.ndarray, np.ndarray]:
        """Origins/dirs (n_pixels * s^2, 3) for the sub-pixel grids of a batch,
        in batch order with each pixel's s^2 rays contiguous."""
        n = pixels.shape[0]
        offsets = _subpixel_offsets(s)
        centers = pixels[:, [2, 1]] + 0.5                 # (n, 2) as (x, y)
        grid = centers[:, None, :] + offsets[None]        # (n, s^2, 2)
        origins = np.empty((n, s * s, 3))
        dirs = np.empty((n, s * s, 3))
        for view in np.unique(pixels[:, 0]):
            rows = np.flatnonzero(pixels[:, 0] == view)
            o, d = rays_for_points(self.poses[view], self.intr,
                                   grid[rows].reshape(-1, 2),
                                   self.t_near, self.t_far)
            origins[rows] = o.reshape(len(rows), s * s, 3)
            dirs[rows] = d.reshape(len(rows), s * s, 3)
        return origins.reshape(-1, 3), dirs.reshape(-1, 3)


def _pass_mse(colors: Tensor, gt: np.ndarray, n_pixels: int, s: int) -> Tensor:
    """Mean over pixels of the channel-summed squared error of the sub-pixel
    average color; s=1 reduces to the plain per-ray MSE bit for bit."""
    mean_colors = ad.tmean(colors.reshape(n_pixels, s * s, 3), axis=1)
    diff = mean_colors - Tensor(gt)
    return ad.tmean(ad.tsum(diff * diff, axis=1))


def _batch_loss(params: FieldParams, data: _TrainData, pixels: np.ndarray,
                s: int, cfg: TrainConfig, rng: np.random.Generator | None,
                jitter: bool, do_backward: bool,
                sample_cache: dict | None = None) -> tuple[float, float]:
    """Loss over one batch, chunked for memory; backpropagates if asked.

    Returns (coarse, fine) loss components. Chunk boundaries depend only on
    the pixel count, so results are bit-identical across scale factors with
    the same pixel stream. ``sample_cache`` freezes each chunk's fine sample
    set on first use, pinning the objective's sampling for gradient checks.
    """
    n = pixels.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    samp = cfg.sample_config(data.white_background, jitter)
    total_c = 0.0
    total_f = 0.0
    for ci, lo in enumerate(range(0, n, cfg.micro_chunk_pixels)):
        chunk = pixels[lo:lo + cfg.micro_chunk_pixels]
        weight = chunk.shape[0] / n
        origins, dirs = data.subpixel_rays(chunk, s)
        gt = data.gt_colors(chunk)
        frozen = sample_cache.get(ci) if sample_cache is not None else None
        out_c, out_f = render_rays(params, origins, dirs, data.t_near,
                                   data.t_far, samp, rng, frozen_fine=frozen)
        if sample_cache is not None and frozen is None:
            sample_cache[ci] = out_f.samples
        loss_c = _pass_mse(out_c.color, gt, chunk.shape[0], s)
        loss_f = _pass_mse(out_f.color, gt, chunk.shape[0], s)
        total_c += weight * float(loss_c.data)
        total_f += weight * float(loss_f.data)
        if do_backward:
            ad.backward((loss_c + loss_f) * weight)
    return total_c, total_f


def vanilla_loss(params: FieldParams, dataset, pixels: np.ndarray,
                 cfg: TrainConfig, rng: np.random.Generator | None = None,
                 jitter: bool = False, do_backward: bool = False,
                 sample_cache: dict | None = None,
                 _data: _TrainData | None = None) -> float:
    """Per-pixel MSE through pixel centers, coarse and fine passes summed."""
    data = _data or _TrainData(dataset, cfg.lr_role)
    c, f = _batch_loss(params, data, np.asarray(pixels), 1, cfg, rng,
                       jitter, do_backward, sample_cache)
    return c + f


def supersampled_loss(params: FieldParams, dataset, pixels: np.ndarray, s: int,
                      cfg: TrainConfig, rng: np.random.Generator | None = None,
                      jitter: bool = False, do_backward: bool = False,
                      sample_cache: dict | None = None,
                      _data: _TrainData | None = None) -> float:
    """Sub-pixel averaged MSE (the supersampling objective), both passes."""
    data = _data or _TrainData(dataset, cfg.lr_role)
    c, f = _batch_loss(params, data, np.asarray(pixels), s, cfg, rng,
                       jitter, do_backward, sample_cache)
    return c + f


# -- the training loop ---------------------------------------------------------


def train(dataset, cfg: TrainConfig, mode: str, out_dir=None,
          progress=None) -> tuple[FieldParams, list[dict]]:
    """Train a field on the dataset's train split.

    mode "vanilla" shoots one center ray per pixel; mode "supersample"
    shoots cfg.s^2 sub-pixel rays per pixel and supervises their average.
    Checkpoints (last/best by val PSNR) and a JSONL log are written under
    ``out_dir`` when given. Deterministic for a fixed cfg.seed.
    """
    if mode not in ("vanilla", "supersample"):
        raise ValueError(f"unknown training mode '{mode}'")
    s = cfg.s if mode == "supersample" else 1
    data = _TrainData(dataset, cfg.lr_role)

    params = FieldParams(cfg.field, seed=cfg.seed)
    named = params.named_params()
    state = AdamState(named)
    pixels = data.all_pixels()
    per_batch = cfg.pixels_per_batch(s)
    batches_per_epoch = (pixels.shape[0] + per_batch - 1) // per_batch
    total_steps = cfg.epochs * batches_per_epoch

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")

    def emit(record: dict) -> None:
        records.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
        if progress is not None:
            progress(record)

    records: list[dict] = []
    t0 = time.time()
    best_val = -np.inf
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(
                pixels.shape[0])
            for bi in range(batches_per_epoch):
                batch = pixels[order[bi * per_batch:(bi + 1) * per_batch]]
                rng = (np.random.default_rng([cfg.seed, 2, epoch, bi])
                       if cfg.jitter else None)
                lr = lr_at(step, total_steps, cfg)
                loss_c, loss_f = _batch_loss(params, data, batch, s, cfg, rng,
                                             cfg.jitter, do_backward=True)
                grads = {k: t.grad for k, t in named.items() if t.grad is not None}
                adam_step(named, grads, state, lr, cfg.beta1, cfg.beta2,
                          cfg.adam_eps)
                params.zero_grad()
                step += 1
                emit({"epoch": epoch, "step": step, "loss_coarse": loss_c,
                      "loss_fine": loss_f, "lr": lr,
                      "wall_time": time.time() - t0})

            val_psnr = _validation_psnr(params, dataset, cfg, data)
            emit({"epoch": epoch, "event": "epoch_end", "val_psnr": val_psnr,
                  "wall_time": time.time() - t0})
            if out is not None:
                params.save(out / "last.npz")
                if val_psnr is not None and val_psnr > best_val:
                    best_val = val_psnr
                    params.save(out / "best.npz")
    finally:
        if log_fh is not None:
            log_fh.close()
    return params, records


def _validation_psnr(params: FieldParams, dataset, cfg: TrainConfig,
                     data: _TrainData) -> float | None:
    """Mean PSNR of LR renders against val-split ground truth (None if no val)."""
    manifest = dataset.manifest
    if "val" not in manifest.splits or not manifest.splits["val"]:
        return None
    samp = cfg.sample_config(data.white_background, jitter=False)
    scores = []
    for i in range(dataset.n_views("val")):
        img, _ = render_image(params, dataset.pose("val", i),
                              manifest.intrinsics["lr"], manifest.t_near,
                              manifest.t_far, samp)
        scores.append(psnr(np.clip(img, 0.0, 1.0),
                           dataset.load_array("val", i, cfg.lr_role)))
    return float(np.mean(scores))


def render_dataset_view(params: FieldParams, dataset, split: str, idx: int,
                        cfg: TrainConfig, scale: int = 1, workers: int = 1
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Render one dataset view at ``scale`` times the LR resolution."""
    manifest = dataset.manifest
    intr = manifest.intrinsics["lr"].scaled(scale) if scale != 1 \
        else manifest.intrinsics["lr"]
    samp = cfg.sample_config(manifest.background == "white", jitter=False)
    return render_image(params, dataset.pose(split, idx), intr,
                        manifest.t_near, manifest.t_far, samp, workers=workers,
                        seed=cfg.seed)


def supersampled_view_average(params: FieldParams, dataset, split: str,
                              idx: int, s: int, cfg: TrainConfig
                              ) -> np.ndarray:
    """The training-time quantity of the supersampled objective for a whole
    view: per LR pixel, the average color of its s^2 sub-pixel rays.

    Uses the same sub-pixel ray construction as the loss, with jitter off.
    """
    data = _TrainData(dataset, cfg.lr_role)
    h, w = data.intr.height, data.intr.width
    pose = dataset.pose(split, idx)
    samp = cfg.sample_config(data.white_background, jitter=False)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    offsets = _subpixel_offsets(s)
    centers = np.stack([xs.reshape(-1) + 0.5, ys.reshape(-1) + 0.5], axis=1)
    grid = centers[:, None, :] + offsets[None]
    out = np.zeros((h * w, 3))
    chunk = max(1, cfg.micro_chunk_pixels)
    for lo in range(0, grid.shape[0], chunk):
        sel = grid[lo:lo + chunk]
        origins, dirs = rays_for_points(pose, data.intr, sel.reshape(-1, 2),
                                        data.t_near, data.t_far)
        with ad.no_grad():
            _, fine = render_rays(params, origins, dirs, data.t_near,
                                  data.t_far, samp)
        out[lo:lo + chunk] = fine.color.data.reshape(sel.shape[0], s * s, 3) \
            .mean(axis=1)
    return out.reshape(h, w, 3)
