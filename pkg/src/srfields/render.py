"""Discretized volume rendering: stratified and hierarchical sampling,
transmittance compositing, and the batched two-pass coarse/fine pipeline.

All sampling state is numpy (constants of the graph); only field outputs
and everything downstream of them are differentiable. Per-ray math is
vectorized over rectangular (n_rays, n_samples) batches.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraPose, Intrinsics, rays_for_points
from .field import encode

__all__ = [
    "LAST_DELTA",
    "RaySamples", "RenderOutput", "SampleConfig",
    "stratified_sample", "composite", "importance_sample",
    "render_rays", "render_ray", "render_image", "AnalyticField",
]

LAST_DELTA = 1e10  # open-ended final interval so the last sample can absorb
DEPTH_EPS = 1e-8


@dataclass
class RaySamples:
    """Per-ray depths (n_rays, n) strictly increasing, plus interval widths.

    ``deltas[:, -1]`` is LAST_DELTA for open-ended render samples, or the
    true closing interval when ``closed`` sampling is requested.
    """

    ts: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        self.ts = np.atleast_2d(np.asarray(self.ts, dtype=np.float64))
        self.deltas = np.atleast_2d(np.asarray(self.deltas, dtype=np.float64))
        if self.ts.shape != self.deltas.shape:
            raise ValueError("ts and deltas must share a shape")
        if np.any(np.diff(self.ts, axis=1) <= 0):
            raise ValueError("sample depths must be strictly increasing")
        if np.any(self.deltas <= 0):
            raise ValueError("sample intervals must be positive")

    @property
    def n_rays(self) -> int:
        return self.ts.shape[0]

    @property
    def n_samples(self) -> int:
        return self.ts.shape[1]


@dataclass
class RenderOutput:
    """Composited ray results; color/weights/acc are graph tensors, depth is
    the detached expected termination depth."""

    color: Tensor        # (n_rays, 3)
    weights: Tensor      # (n_rays, n_samples)
    acc: Tensor          # (n_rays,)
    depth: np.ndarray    # (n_rays,)
    samples: RaySamples


@dataclass(frozen=True)
class SampleConfig:
    n_coarse: int = 64
    n_fine: int = 64
    jitter: bool = False
    white_background: bool = True

    def __post_init__(self):
        if self.n_coarse < 2:
            raise ValueError("need at least 2 coarse samples")
        if self.n_fine < 0:
            raise ValueError("n_fine must be nonnegative")


def _deltas_from_ts(ts: np.ndarray, t_near: float, t_far: float,
                    closed: bool) -> np.ndarray:
    if closed:
        # midpoint-style cover: each sample owns its Voronoi cell inside
        # [t_near, t_far], so the interval widths sum to the whole range
        mids = 0.5 * (ts[:, 1:] + ts[:, :-1])
        n = ts.shape[0]
        edges = np.concatenate([np.full((n, 1), t_near), mids,
                                np.full((n, 1), t_far)], axis=1)
        return np.diff(edges, axis=1)
    diffs = np.diff(ts, axis=1)
    last = np.full((ts.shape[0], 1), LAST_DELTA)
    return np.concatenate([diffs, last], axis=1)


def stratified_sample(t_near: float, t_far: float, n: int, jitter: bool,
                      rng: np.random.Generator | None = None, n_rays: int = 1,
                      closed: bool = False) -> RaySamples:
    """N equal-width bins over [t_near, t_far]; one sample per bin.

    Bin centers when jitter is off, a uniform draw inside each bin when on.
    ``closed=True`` ends the sample set at t_far instead of the open-ended
    LAST_DELTA interval (used when comparing against finite integrals).
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if not t_near < t_far:
        raise ValueError("t_near must be below t_far")
    width = (t_far - t_near) / n
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        u = rng.uniform(size=(n_rays, n))
    else:
        u = np.full((n_rays, n), 0.5)
    ts = t_near + (np.arange(n)[None, :] + u) * width
    return RaySamples(ts, _deltas_from_ts(ts, t_near, t_far, closed))


def composite(colors: Tensor, sigmas: Tensor, samples: RaySamples,
              white_background: bool = False) -> RenderOutput:
    """Transmittance-weighted quadrature of per-sample radiance.

    alpha_i = 1 - exp(-sigma_i * delta_i); T_i is the product of (1 - alpha)
    over earlier samples, computed as exp of the exclusive running optical
    depth; w_i = T_i * alpha_i. Color sums w_i * c_i (plus the remaining
    transmittance times white when requested), acc sums the weights, and
    depth is the weight-averaged sample depth.
    """
    colors = colors if isinstance(colors, Tensor) else Tensor(colors)
    sigmas = sigmas if isinstance(sigmas, Tensor) else Tensor(sigmas)
    n_rays, n_samples = samples.ts.shape
    if colors.shape != (n_rays, n_samples, 3) or sigmas.shape != (n_rays, n_samples):
        raise ad.ShapeError("composite", colors.shape, sigmas.shape, samples.ts.shape)
    if np.any(sigmas.data < 0.0):
        raise ValueError("composite: negative density")

    sdelta = sigmas * Tensor(samples.deltas)                  # (N, S)
    alpha = 1.0 - ad.exp(-sdelta)
    running = ad.cumsum(sdelta, axis=1)
    zeros = Tensor(np.zeros((n_rays, 1)))
    exclusive = ad.concat([zeros, running[:, :-1]], axis=1)   # optical depth before i
    trans = ad.exp(-exclusive)
    weights = trans * alpha                                    # (N, S)

    color = ad.tsum(weights.reshape(n_rays, n_samples, 1) * colors, axis=1)
    acc = ad.tsum(weights, axis=1)
    if white_background:
        color = color + (1.0 - acc).reshape(n_rays, 1)
    depth = (weights.data * samples.ts).sum(axis=1) / np.maximum(acc.data, DEPTH_EPS)
    return RenderOutput(color=color, weights=weights, acc=acc, depth=depth,
                        samples=samples)


def importance_sample(weights: np.ndarray, samples: RaySamples, n_fine: int,
                      t_near: float, t_far: float,
                      rng: np.random.Generator | None = None,
                      jitter: bool = False, closed: bool = False) -> RaySamples:
    """Inverse-transform draws from the piecewise-constant pdf over coarse bins,
    merged (sorted) with the coarse samples.

    Bin b of ray r spans the coarse stratification grid and carries weight
    weights[r, b]. A small floor keeps the pdf proper; all-zero weight rows
    thereby fall back to the uniform distribution over [t_near, t_far],
    which is the documented stratified fallback.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("importance weights must be nonnegative")
    n_rays, n_coarse = weights.shape
    edges = np.linspace(t_near, t_far, n_coarse + 1)

    floored = weights + 1e-5
    pdf = floored / floored.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if jitter:
        if rng is None:
            raise ValueError("jittered importance sampling needs an rng")
        u = rng.uniform(size=(n_rays, n_fine))
    else:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (n_rays, n_fine)).copy()

    # index of the bin whose cdf segment contains each u
    inds = (u[:, :, None] >= cdf[:, None, 1:-1]).sum(axis=2)
    lo = np.take_along_axis(cdf, inds, axis=1)
    hi = np.take_along_axis(cdf, inds + 1, axis=1)
    span = np.where(hi - lo < 1e-12, 1.0, hi - lo)
    frac = (u - lo) / span
    fine_ts = edges[inds] + frac * (edges[inds + 1] - edges[inds])

    merged = np.sort(np.concatenate([samples.ts, fine_ts], axis=1), axis=1)
    # strictly-increasing guard: nudge exact duplicates apart
    eps = 1e-12 * (t_far - t_near)
    diffs = np.diff(merged, axis=1)
    if np.any(diffs <= 0):
        merged = merged + np.arange(merged.shape[1]) * eps
    return RaySamples(merged, _deltas_from_ts(merged, t_near, t_far, closed))


class AnalyticField:
    """Adapter exposing an analytic scene through the field-query interface,
    so the render pipeline can run against exact ground truth."""

    def __init__(self, scene):
        from .scenes import scene_field
        self._scene = scene
        self._field = scene_field

    def query(self, which: str, x: np.ndarray, d: np.ndarray):
        rgb, sigma = self._field(self._scene, x)
        return Tensor(rgb), Tensor(sigma)

    def query_rays(self, which: str, pts: np.ndarray, dirs: np.ndarray):
        rgb, sigma = self._field(self._scene, pts)
        return Tensor(rgb), Tensor(sigma)


def _query_samples(field, which: str, origins: np.ndarray, dirs: np.ndarray,
                   samples: RaySamples) -> tuple[Tensor, Tensor]:
    pts = origins[:, None, :] + samples.ts[:, :, None] * dirs[:, None, :]
    return field.query_rays(which, pts, dirs)


def render_rays(field, origins: np.ndarray, dirs: np.ndarray, t_near: float,
                t_far: float, config: SampleConfig,
                rng: np.random.Generator | None = None,
                frozen_fine: RaySamples | None = None
                ) -> tuple[RenderOutput, RenderOutput]:
    """Two-pass render of a ray batch: coarse stratified pass, importance
    sampling from its weights, fine pass over the merged sample set.

    Deterministic when config.jitter is off. Differentiable end to end with
    respect to field parameters; sample placement is detached (the standard
    estimator). ``frozen_fine`` bypasses importance sampling with a fixed
    fine sample set, which makes the objective's parameter dependence purely
    pathwise — finite-difference gradient checks need that.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n_rays = origins.shape[0]

    coarse_samples = stratified_sample(t_near, t_far, config.n_coarse,
                                       config.jitter, rng, n_rays)
    rgb_c, sigma_c = _query_samples(field, "coarse", origins, dirs, coarse_samples)
    out_c = composite(rgb_c, sigma_c, coarse_samples, config.white_background)

    if frozen_fine is not None:
        fine_samples = frozen_fine
    elif config.n_fine > 0:
        fine_samples = importance_sample(out_c.weights.data, coarse_samples,
                                         config.n_fine, t_near, t_far,
                                         rng=rng, jitter=config.jitter)
    else:
        fine_samples = coarse_samples
    rgb_f, sigma_f = _query_samples(field, "fine", origins, dirs, fine_samples)
    out_f = composite(rgb_f, sigma_f, fine_samples, config.white_background)
    return out_c, out_f


def render_ray(field, ray, config: SampleConfig,
               rng: np.random.Generator | None = None
               ) -> tuple[RenderOutput, RenderOutput]:
    """Single-ray convenience wrapper over the batched path."""
    return render_rays(field, ray.origin[None], ray.direction[None],
                       ray.t_near, ray.t_far, config, rng)


def render_image(field, pose: CameraPose, intr: Intrinsics, t_near: float,
                 t_far: float, config: SampleConfig, chunk: int = 2048,
                 workers: int = 1, seed: int = 0
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Render a full view through pixel centers; returns (image, depth).

    Rays are processed in fixed-size chunks whose boundaries do not depend
    on ``workers``, and each jittered chunk draws from an rng seeded by
    (seed, chunk index), so results are identical for any worker count.
    """
    h, w = intr.height, intr.width
    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    points = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)
    origins, dirs = rays_for_points(pose, intr, points, t_near, t_far)

    image = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    starts = list(range(0, h * w, chunk))

    def run_chunk(ci: int) -> None:
        lo = starts[ci]
        sel = slice(lo, min(lo + chunk, h * w))
        rng = np.random.default_rng([seed, ci]) if config.jitter else None
        with ad.no_grad():
            _, fine = render_rays(field, origins[sel], dirs[sel], t_near, t_far,
                                  config, rng)
        image[sel] = fine.color.data
        depth[sel] = fine.depth

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_chunk, range(len(starts))))
    else:
        for ci in range(len(starts)):
            run_chunk(ci)
    return image.reshape(h, w, 3), depth.reshape(h, w)
