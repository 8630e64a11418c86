"""Procedural analytic scenes with exact ground truth, dense-quadrature
oracle rendering, and posed-dataset generation/serialization.

Scenes stand in for real captured data at desk scale: a handful of smooth
solid primitives (spheres and axis-aligned boxes) whose density falls off
smoothly over a thin shell so the field stays C1 for gradient checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .camera import CameraPose, Intrinsics, look_at_pose, rays_for_points
from .metrics import downsample_average, downsample_tent

__all__ = [
    "Sphere", "Box", "AnalyticScene",
    "scene_field", "oracle_render",
    "DatasetError", "DatasetManifest", "DatasetView", "Dataset",
    "make_dataset", "load_dataset", "save_image_pair", "toy_three_sphere_scene",
    "MANIFEST_VERSION",
]

MANIFEST_VERSION = 1
FALLOFF_FRACTION = 0.05  # shell width as a fraction of the primitive radius


class DatasetError(ValueError):
    """Manifest schema violations, missing files, or dimension mismatches."""


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    density: float

    def __post_init__(self):
        if self.radius <= 0 or self.density < 0:
            raise ValueError("sphere needs positive radius and nonnegative density")


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_sizes: tuple[float, float, float]
    albedo: tuple[float, float, float]
    density: float

    def __post_init__(self):
        if min(self.half_sizes) <= 0 or self.density < 0:
            raise ValueError("box needs positive half sizes and nonnegative density")


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple
    background: str = "white"       # white | black
    bound_radius: float = 1.0      # all primitives live inside this sphere

    def __post_init__(self):
        if self.background not in ("white", "black"):
            raise ValueError(f"unknown background '{self.background}'")
        for p in self.primitives:
            c = np.asarray(p.center)
            extent = p.radius if isinstance(p, Sphere) else float(np.linalg.norm(p.half_sizes))
            if np.linalg.norm(c) + extent > self.bound_radius + 1e-9:
                raise ValueError("primitive extends outside the declared bounding region")

    @property
    def white_background(self) -> bool:
        return self.background == "white"


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _primitive_density(p, x: np.ndarray) -> np.ndarray:
    """Density of one primitive at points (N, 3): full inside, smoothstep
    falloff over a shell of FALLOFF_FRACTION of the primitive radius, zero out."""
    c = np.asarray(p.center, dtype=np.float64)
    if isinstance(p, Sphere):
        dist = np.linalg.norm(x - c, axis=-1)
        w = FALLOFF_FRACTION * p.radius
        t = np.clip((p.radius - dist) / w, 0.0, 1.0)
    else:
        h = np.asarray(p.half_sizes, dtype=np.float64)
        signed = (np.abs(x - c) - h).max(axis=-1)  # L-inf signed distance
        w = FALLOFF_FRACTION * float(h.min())
        t = np.clip(-signed / w, 0.0, 1.0)
    return p.density * _smoothstep(t)


def scene_field(scene: AnalyticScene, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact radiance/density of the scene at points (..., 3).

    Density is the sum of primitive densities; color is the density-weighted
    mean of primitive albedos (zero where no primitive contributes).
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, 3)
    sigma = np.zeros(flat.shape[0])
    weighted = np.zeros((flat.shape[0], 3))
    for p in scene.primitives:
        d = _primitive_density(p, flat)
        sigma += d
        weighted += d[:, None] * np.asarray(p.albedo, dtype=np.float64)
    rgb = np.where(sigma[:, None] > 0.0, weighted / np.maximum(sigma, 1e-300)[:, None], 0.0)
    return rgb.reshape(*x.shape[:-1], 3), sigma.reshape(x.shape[:-1])


_SATURATION_OPTICAL_DEPTH = 34.0  # transmittance below 2e-15: nothing left


def oracle_render(scene: AnalyticScene, pose: CameraPose, intr: Intrinsics,
                  t_near: float, t_far: float, steps: int = 10_000,
                  pixel_chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force ground truth: midpoint quadrature of the volume rendering
    integral at ``steps`` samples per ray.

    Two exact shortcuts keep this tractable: rays that miss the scene's
    bounding sphere (density is identically zero outside it) skip straight
    to the background, and rays whose accumulated optical depth exceeds
    _SATURATION_OPTICAL_DEPTH stop integrating (the remaining transmittance
    is below 2e-15). Returns (image (H, W, 3), expected-termination depth
    (H, W)); rays go through pixel centers; deterministic given
    (scene, pose, steps).
    """
    if steps < 10_000:
        raise ValueError("oracle rendering requires at least 10000 steps")
    h, w = intr.height, intr.width
    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    points = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)
    delta = (t_far - t_near) / steps
    ts = t_near + (np.arange(steps) + 0.5) * delta

    image = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    if scene.white_background:
        image[:] = 1.0
    block = 512  # quadrature samples per pass; small blocks help early exit
    for lo in range(0, points.shape[0], pixel_chunk):
        sel = slice(lo, min(lo + pixel_chunk, points.shape[0]))
        origins, dirs = rays_for_points(pose, intr, points[sel], t_near, t_far)

        # bounding-sphere interval: outside it every primitive density is 0
        oc = origins
        b_half = (oc * dirs).sum(axis=1)
        disc = b_half * b_half - ((oc * oc).sum(axis=1) - scene.bound_radius ** 2)
        hits = disc > 0.0
        if not np.any(hits):
            continue
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_enter = np.where(hits, -b_half - sq, np.inf)
        t_exit = np.where(hits, -b_half + sq, -np.inf)

        idx = np.flatnonzero(hits)
        origins, dirs = origins[idx], dirs[idx]
        t_enter, t_exit = t_enter[idx], t_exit[idx]
        n = idx.size
        prefix = np.zeros(n)            # optical depth accumulated so far
        color = np.zeros((n, 3))
        acc = np.zeros(n)
        t_weighted = np.zeros(n)
        for b0 in range(0, steps, block):
            tb = ts[b0:b0 + block]
            live = ((prefix < _SATURATION_OPTICAL_DEPTH)
                    & (t_exit >= tb[0]) & (t_enter <= tb[-1]))
            if not np.any(live):
                if np.all(prefix >= _SATURATION_OPTICAL_DEPTH) or tb[0] > t_exit.max():
                    break
                continue
            li = np.flatnonzero(live)
            pts = origins[li, None, :] + tb[None, :, None] * dirs[li, None, :]
            rgb, sigma = scene_field(scene, pts)
            sdelta = sigma * delta
            cum = np.cumsum(sdelta, axis=1)
            trans = np.exp(-(prefix[li, None] + cum - sdelta))
            weights = trans * (1.0 - np.exp(-sdelta))
            color[li] += (weights[..., None] * rgb).sum(axis=1)
            acc[li] += weights.sum(axis=1)
            t_weighted[li] += (weights * tb[None, :]).sum(axis=1)
            prefix[li] += cum[:, -1]
        if scene.white_background:
            color += (1.0 - acc)[:, None]
        image[lo + idx] = color
        depth[lo + idx] = t_weighted / np.maximum(acc, 1e-8)
    return image.reshape(h, w, 3), depth.reshape(h, w)


# -- dataset generation and serialization -------------------------------------


@dataclass
class DatasetView:
    cam_to_world: np.ndarray
    images: dict[str, str] = field(default_factory=dict)   # role -> png path
    arrays: dict[str, str] = field(default_factory=dict)   # role -> npy path


@dataclass
class DatasetManifest:
    version: int
    scale: int
    t_near: float
    t_far: float
    background: str
    kernels: dict[str, str]                 # lr role -> kernel name
    intrinsics: dict[str, Intrinsics]       # "lr" and "hr"
    splits: dict[str, list[DatasetView]]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "scale": self.scale,
            "t_near": self.t_near,
            "t_far": self.t_far,
            "background": self.background,
            "kernels": self.kernels,
            "intrinsics": {k: {"focal": v.focal, "cx": v.cx, "cy": v.cy,
                               "width": v.width, "height": v.height}
                           for k, v in self.intrinsics.items()},
            "splits": {name: [{"cam_to_world": v.cam_to_world.tolist(),
                               "images": v.images, "arrays": v.arrays}
                              for v in views]
                       for name, views in self.splits.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        required = ("version", "scale", "t_near", "t_far", "background",
                    "kernels", "intrinsics", "splits")
        for key in required:
            if key not in doc:
                raise DatasetError(f"manifest missing required field '{key}'")
        if doc["version"] != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {doc['version']}")
        try:
            intr = {k: Intrinsics(**v) for k, v in doc["intrinsics"].items()}
            splits = {}
            for name, views in doc["splits"].items():
                splits[name] = [DatasetView(np.asarray(v["cam_to_world"], dtype=np.float64),
                                            dict(v["images"]), dict(v["arrays"]))
                                for v in views]
        except (TypeError, KeyError, ValueError) as e:
            raise DatasetError(f"malformed manifest: {e}") from e
        return cls(doc["version"], int(doc["scale"]), float(doc["t_near"]),
                   float(doc["t_far"]), doc["background"], dict(doc["kernels"]),
                   intr, splits)


@dataclass
class Dataset:
    """Manifest plus eagerly loaded image arrays, validated on load."""

    root: Path
    manifest: DatasetManifest

    def pose(self, split: str, idx: int) -> CameraPose:
        return CameraPose(self.manifest.splits[split][idx].cam_to_world)

    def n_views(self, split: str) -> int:
        return len(self.manifest.splits[split])

    def load_array(self, split: str, idx: int, role: str) -> np.ndarray:
        """Image pixels in [0,1]; float sidecar preferred over the PNG."""
        view = self.manifest.splits[split][idx]
        if role in view.arrays:
            return np.load(self.root / view.arrays[role])
        png = self.root / view.images[role]
        return np.asarray(PILImage.open(png), dtype=np.float64) / 255.0


def save_image_pair(root: Path, rel_base: str, img: np.ndarray) -> tuple[str, str]:
    """Write an image as 8-bit PNG plus an exact float64 sidecar.

    The sidecar is authoritative for training and tests; the PNG is for
    eyeballs. Returns (png relpath, npy relpath).
    """
    png_rel = f"images/{rel_base}.png"
    npy_rel = f"float/{rel_base}.npy"
    png_path, npy_path = root / png_rel, root / npy_rel
    png_path.parent.mkdir(parents=True, exist_ok=True)
    npy_path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(quantized).save(png_path)
    np.save(npy_path, np.asarray(img, dtype=np.float64))
    return png_rel, npy_rel


def hemisphere_poses(n: int, radius: float, rng: np.random.Generator,
                     elev_range=(0.26, 1.22)) -> list[CameraPose]:
    """Cameras on an upper hemisphere looking at the origin.

    Azimuths are stratified around the circle with random phase; elevations
    are uniform draws in ``elev_range`` (radians).
    """
    poses = []
    for i in range(n):
        az = 2.0 * np.pi * (i + rng.uniform()) / n
        elev = rng.uniform(*elev_range)
        eye = radius * np.array([np.cos(az) * np.cos(elev),
                                 np.sin(az) * np.cos(elev),
                                 np.sin(elev)])
        poses.append(look_at_pose(eye, np.zeros(3)))
    return poses


def toy_three_sphere_scene() -> AnalyticScene:
    """The stock 3-primitive test scene: three colored spheres, white bg."""
    return AnalyticScene(
        primitives=(
            Sphere((0.45, 0.0, 0.12), 0.42, (0.85, 0.15, 0.12), 40.0),
            Sphere((-0.40, 0.38, -0.05), 0.34, (0.10, 0.65, 0.20), 40.0),
            Sphere((-0.05, -0.45, 0.32), 0.28, (0.15, 0.25, 0.80), 40.0),
        ),
        background="white",
        bound_radius=1.0,
    )


def make_dataset(scene: AnalyticScene, n_views: int, hr_res: int, s: int,
                 seed: int, out_dir, n_test: int = 8, n_val: int = 2,
                 focal_hr: float | None = None, camera_radius: float = 3.0,
                 oracle_steps: int = 10_000,
                 extra_kernels: tuple[str, ...] = ()) -> DatasetManifest:
    """Generate a posed multi-view dataset and write it under ``out_dir``.

    Train views carry an LR image (HR oracle render box-averaged down by s)
    alongside the HR render it came from; test views carry HR ground truth.
    ``extra_kernels`` adds alternative LR degradations (currently "tent")
    as additional roles on the train views.
    """
    if hr_res % s != 0:
        raise ValueError(f"hr_res {hr_res} not divisible by scale {s}")
    for k in extra_kernels:
        if k != "tent":
            raise ValueError(f"unknown extra kernel '{k}'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    margin = 0.5 * scene.bound_radius
    t_near = camera_radius - scene.bound_radius - margin
    t_far = camera_radius + scene.bound_radius + margin
    if focal_hr is None:
        focal_hr = 1.35 * (hr_res / 2.0) * camera_radius / scene.bound_radius / np.sqrt(2)
    intr_hr = Intrinsics(focal_hr, hr_res / 2.0, hr_res / 2.0, hr_res, hr_res)
    intr_lr = intr_hr.scaled(1.0 / s)

    rng = np.random.default_rng([seed, 17])
    poses = hemisphere_poses(n_views + n_test + n_val, camera_radius, rng)
    split_of = ["train"] * n_views + ["test"] * n_test + ["val"] * n_val

    kernels = {"lr": "average"}
    splits: dict[str, list[DatasetView]] = {"train": [], "test": [], "val": []}
    counters = {"train": 0, "test": 0, "val": 0}
    for pose, split in zip(poses, split_of):
        idx = counters[split]
        counters[split] += 1
        hr_img, _ = oracle_render(scene, pose, intr_hr, t_near, t_far, oracle_steps)
        view = DatasetView(cam_to_world=pose.cam_to_world)
        base = f"{split}_{idx:03d}"
        if split in ("train", "val"):
            lr_img = downsample_average(hr_img, s)
            png, npy = save_image_pair(out, f"{base}_lr", lr_img)
            view.images["lr"], view.arrays["lr"] = png, npy
            for kernel in extra_kernels:
                alt = downsample_tent(hr_img, s)
                png, npy = save_image_pair(out, f"{base}_lr_{kernel}", alt)
                view.images[f"lr_{kernel}"] = png
                view.arrays[f"lr_{kernel}"] = npy
                kernels[f"lr_{kernel}"] = kernel
        if split in ("train", "test"):
            png, npy = save_image_pair(out, f"{base}_hr", hr_img)
            view.images["hr"], view.arrays["hr"] = png, npy
        splits[split].append(view)

    manifest = DatasetManifest(
        version=MANIFEST_VERSION, scale=s, t_near=float(t_near), t_far=float(t_far),
        background=scene.background, kernels=kernels,
        intrinsics={"lr": intr_lr, "hr": intr_hr}, splits=splits,
    )
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest.to_json(), fh, indent=2)
    return manifest


def load_dataset(path) -> Dataset:
    """Load and validate a dataset directory written by :func:`make_dataset`."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: invalid JSON ({e})") from e
    manifest = DatasetManifest.from_json(doc)

    expected = {"lr": manifest.intrinsics["lr"], "hr": manifest.intrinsics["hr"]}
    for split, views in manifest.splits.items():
        for i, view in enumerate(views):
            try:
                CameraPose(view.cam_to_world)
            except ValueError as e:
                raise DatasetError(f"{split}[{i}]: bad pose ({e})") from e
            for role, rel in {**view.images, **view.arrays}.items():
                fpath = root / rel
                if not fpath.exists():
                    raise DatasetError(f"{split}[{i}]: missing file {fpath}")
            for role, rel in view.arrays.items():
                arr = np.load(root / rel)
                intr = expected["hr" if role == "hr" else "lr"]
                if arr.shape != (intr.height, intr.width, 3):
                    raise DatasetError(
                        f"{split}[{i}] role {role}: array shape {arr.shape} does not "
                        f"match declared {(intr.height, intr.width, 3)}")
    hr, lr = manifest.intrinsics["hr"], manifest.intrinsics["lr"]
    if hr.width != manifest.scale * lr.width or hr.height != manifest.scale * lr.height:
        raise DatasetError("hr dimensions are not scale x lr dimensions")
    return Dataset(root=root, manifest=manifest)
