"""Depth-guided patch refinement.

A synthesized 64x64 patch is warped into the high-resolution reference view
pixel by pixel using its rendered depth; reference patches gathered around
the warped footprint feed a shared convolutional encoder whose features are
max-pooled across references and fused into a decoder that predicts a
residual correction for the patch. The final layer starts at zero, so an
untrained refiner is exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraPose, Intrinsics, project_points, rays_for_points
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "PATCH_SIZE", "K_REFERENCES",
    "Patch", "RefSet", "RefinerConfig", "RefinerParams", "RefineTrainConfig",
    "warp_map", "gather_reference_patches", "refine", "train_refiner",
    "refine_image", "image_gradient_features",
]

PATCH_SIZE = 64
K_REFERENCES = 8


@dataclass
class Patch:
    """A PATCH_SIZE square of rgb values with its provenance."""

    pixels: np.ndarray            # (64, 64, 3) in [0, 1]
    origin: tuple[int, int]       # top-left (x, y) in the source image
    view: int | str = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (PATCH_SIZE, PATCH_SIZE, 3):
            raise ValueError(f"patches are {PATCH_SIZE}x{PATCH_SIZE}x3, "
                             f"got {self.pixels.shape}")


@dataclass
class RefSet:
    """Exactly K reference patches; ``fallback`` marks an all-discarded warp."""

    patches: list[Patch]
    fallback: bool = False

    def __post_init__(self):
        if len(self.patches) != K_REFERENCES:
            raise ValueError(f"a RefSet holds exactly {K_REFERENCES} patches")


# -- depth-guided warping ------------------------------------------------------


def warp_map(origin: tuple[int, int], depth: np.ndarray, pose_n: CameraPose,
             pose_ref: CameraPose, intr_n: Intrinsics, intr_ref: Intrinsics
             ) -> tuple[np.ndarray, np.ndarray]:
    """Map each patch pixel into the reference view via its rendered depth.

    ``depth`` (64, 64) is the expected termination distance along each
    pixel's ray. Returns (coords (64, 64, 2) on the reference image, valid
    (64, 64) bool); pixels that land behind the reference camera or outside
    its frame are marked invalid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError(f"depth must be {PATCH_SIZE}x{PATCH_SIZE}")
    if not np.all(np.isfinite(depth)):
        raise ValueError("warp_map: non-finite depth")
    x0, y0 = origin
    xs, ys = np.meshgrid(np.arange(PATCH_SIZE) + x0 + 0.5,
                         np.arange(PATCH_SIZE) + y0 + 0.5)
    points = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)
    # patches from reflect-padded images can poke past the frame; those
    # pixels are cropped away later, so reuse the nearest in-frame ray
    points[:, 0] = np.clip(points[:, 0], 0.0, intr_n.width)
    points[:, 1] = np.clip(points[:, 1], 0.0, intr_n.height)
    origins, dirs = rays_for_points(pose_n, intr_n, points, 0.1, np.inf)
    world = origins + depth.reshape(-1, 1) * dirs
    uv, ref_depth = project_points(world, pose_ref, intr_ref)
    valid = ((ref_depth > 0.0)
             & (uv[:, 0] >= 0.0) & (uv[:, 0] <= intr_ref.width)
             & (uv[:, 1] >= 0.0) & (uv[:, 1] <= intr_ref.height))
    return (uv.reshape(PATCH_SIZE, PATCH_SIZE, 2),
            valid.reshape(PATCH_SIZE, PATCH_SIZE))


def _crop_centered(image: np.ndarray, center: np.ndarray) -> Patch:
    """64x64 crop of ``image`` centered near ``center``, shifted in-bounds."""
    h, w = image.shape[:2]
    half = PATCH_SIZE // 2
    x0 = int(np.clip(round(float(center[0]) - half), 0, max(w - PATCH_SIZE, 0)))
    y0 = int(np.clip(round(float(center[1]) - half), 0, max(h - PATCH_SIZE, 0)))
    return Patch(image[y0:y0 + PATCH_SIZE, x0:x0 + PATCH_SIZE], (x0, y0),
                 view="ref")


def gather_reference_patches(coords: np.ndarray, valid: np.ndarray,
                             ref_image: np.ndarray, k: int = K_REFERENCES
                             ) -> RefSet:
    """Pick K reference patches covering the warped footprint.

    Deterministic selection rule: the valid warped coordinates are binned
    into a fixed 2 (rows) x 4 (cols) grid over their bounding box; each
    nonempty cell contributes the 64x64 patch centered on the cell's
    componentwise median coordinate, and the list is padded by repetition
    up to K. With no valid pixels at all, K copies of the patch around the
    reference image center are returned with ``fallback`` set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if ref_image.shape[0] < PATCH_SIZE or ref_image.shape[1] < PATCH_SIZE:
        raise ValueError("reference image smaller than a patch")
    flat_ok = valid.reshape(-1)
    pts = coords.reshape(-1, 2)[flat_ok]
    if pts.shape[0] == 0:
        center = np.array([ref_image.shape[1] / 2.0, ref_image.shape[0] / 2.0])
        patch = _crop_centered(ref_image, center)
        return RefSet([patch] * K_REFERENCES, fallback=True)

    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    cols = np.minimum((4 * (pts[:, 0] - lo[0]) / span[0]).astype(int), 3)
    rows = np.minimum((2 * (pts[:, 1] - lo[1]) / span[1]).astype(int), 1)
    cells = rows * 4 + cols
    centers = []
    for cell in range(8):
        members = pts[cells == cell]
        if members.shape[0]:
            centers.append(np.median(members, axis=0))
    patches = [_crop_centered(ref_image, c) for c in centers]
    out = [patches[i % len(patches)] for i in range(K_REFERENCES)]
    return RefSet(out, fallback=False)


# -- convolutional building blocks ---------------------------------------------


def zero_pad2d(x: Tensor, p: int) -> Tensor:
    data = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    return ad.make_op(data, (x,), (lambda g: g[:, p:-p, p:-p, :],))


def upsample_nearest2x(x: Tensor) -> Tensor:
    data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        b, h2, w2, c = g.shape
        return g.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))

    return ad.make_op(data, (x,), (vjp,))


def conv3x3(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """SAME-padded 3x3 convolution on (B, H, W, C) maps.

    Expressed as nine shifted matrix products so the tape differentiates it
    with existing ops; w has shape (9, C_in, C_out).
    """
    bsz, h, width, _ = x.shape
    xp = zero_pad2d(x, 1)
    ho = (h + stride - 1) // stride
    wo = (width + stride - 1) // stride
    out = None
    for tap in range(9):
        di, dj = divmod(tap, 3)
        sl = xp[:, di:di + stride * (ho - 1) + 1:stride,
                dj:dj + stride * (wo - 1) + 1:stride, :]
        flat = sl.reshape(-1, x.shape[3])
        term = ad.matmul(flat, w[tap])
        out = term if out is None else out + term
    return (out + b).reshape(bsz, ho, wo, -1)


@dataclass(frozen=True)
class RefinerConfig:
    base_channels: int = 32
    k_references: int = K_REFERENCES


_ENC_PLAN = [  # (name, in_mult, out_mult, stride); mult is x base_channels
    ("enc1", None, 1, 1),   # in: 3 rgb channels
    ("enc2", 1, 1, 2),
    ("enc3", 1, 2, 1),
    ("enc4", 2, 2, 2),
    ("enc5", 2, 2, 1),
    ("enc6", 2, 2, 2),
    ("enc7", 2, 2, 1),
]
_SKIPS = ["enc1", "enc3", "enc5", "enc7"]  # taps feeding the decoder


class RefinerParams:
    """Weights of the shared encoder and the skip decoder."""

    def __init__(self, config: RefinerConfig = RefinerConfig(), seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng([seed, 1])
        c = config.base_channels
        self.params: dict[str, Tensor] = {}

        def conv(name, c_in, c_out, zero=False):
            if zero:
                w = np.zeros((9, c_in, c_out))
            else:
                bound = np.sqrt(6.0 / (9 * c_in))
                w = rng.uniform(-bound, bound, size=(9, c_in, c_out))
            self.params[f"{name}.w"] = Tensor(w, tracked=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(c_out), tracked=True)

        for name, in_mult, out_mult, _ in _ENC_PLAN:
            conv(name, 3 if in_mult is None else in_mult * c, out_mult * c)
        conv("dec8", 4 * c, 2 * c)           # enc7(p) ++ maxpool(enc7(refs))
        conv("dec16", 6 * c, 2 * c)          # up ++ enc5 skips
        conv("dec32", 6 * c, 2 * c)          # up ++ enc3 skips
        conv("dec64", 2 * c + c + c, c)      # up ++ enc1 skips
        conv("out", c, 3, zero=True)         # residual head, identity at init

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return conv3x3(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                       stride)

    def encode(self, images: Tensor) -> dict[str, Tensor]:
        """Shared encoder over a batch (B, 64, 64, 3); returns skip taps."""
        taps = {}
        h = images
        for name, _, _, stride in _ENC_PLAN:
            h = ad.relu(self._conv(name, h, stride))
            if name in _SKIPS:
                taps[name] = h
        return taps

    def forward(self, patch: Tensor, refs: Tensor) -> Tensor:
        """patch (1, 64, 64, 3), refs (K, 64, 64, 3) -> refined (64, 64, 3)."""
        taps = self.encode(ad.concat([patch, refs], axis=0))

        def split(name):
            t = taps[name]
            pooled = ad.amax(t[1:], axis=0, keepdims=True)
            return t[0:1], pooled

        p7, r7 = split("enc7")
        h = ad.relu(self._conv("dec8", ad.concat([p7, r7], axis=3)))
        p5, r5 = split("enc5")
        h = ad.relu(self._conv(
            "dec16", ad.concat([upsample_nearest2x(h), p5, r5], axis=3)))
        p3, r3 = split("enc3")
        h = ad.relu(self._conv(
            "dec32", ad.concat([upsample_nearest2x(h), p3, r3], axis=3)))
        p1, r1 = split("enc1")
        h = ad.relu(self._conv(
            "dec64", ad.concat([upsample_nearest2x(h), p1, r1], axis=3)))
        residual = self._conv("out", h)
        return ad.clamp(patch + residual, 0.0, 1.0)[0]

    def save(self, path) -> None:
        arrays = {k: t.data for k, t in self.params.items()}
        config = {"base_channels": self.config.base_channels,
                  "k_references": self.config.k_references}
        save_checkpoint(path, "refiner", config, arrays, self.seed)

    @classmethod
    def load(cls, path) -> "RefinerParams":
        config, arrays, seed = load_checkpoint(path, expect_kind="refiner")
        out = cls(RefinerConfig(**config), seed=seed)
        if set(arrays) != set(out.params):
            raise ValueError("refiner checkpoint arrays do not match architecture")
        for name, t in out.params.items():
            t.data = arrays[name].astype(np.float64)
        return out


def refine(params: RefinerParams, patch: Patch, refs: RefSet) -> Patch:
    """Refine one synthesized patch against its gathered references."""
    with ad.no_grad():
        stacked = Tensor(np.stack([r.pixels for r in refs.patches]))
        out = params.forward(Tensor(patch.pixels[None]), stacked)
    return Patch(out.data, patch.origin, patch.view)


# -- training ------------------------------------------------------------------


def image_gradient_features(img: Tensor) -> list[Tensor]:
    """Default feature extractor: horizontal and vertical finite differences.

    Stands in for a pretrained perceptual network; swap in any callable with
    the same signature to change the feature loss.
    """
    return [img[:, 1:, :] - img[:, :-1, :], img[1:, :, :] - img[:-1, :, :]]


@dataclass(frozen=True)
class RefineTrainConfig:
    steps: int = 300
    lr: float = 2e-4
    feature_weight: float = 0.1
    jitter_px: float = 8.0       # max corner displacement of the perspective warp
    window_px: int = 32          # reference sampling window around the patch
    seed: int = 0
    refiner: RefinerConfig = dc_field(default_factory=RefinerConfig)


def _solve_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography with H @ [src, 1] ~ [dst, 1] for the 4 corner pairs."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((sx, sy), (dx, dy)) in enumerate(zip(src, dst)):
        a[2 * i] = [sx, sy, 1, 0, 0, 0, -dx * sx, -dx * sy]
        a[2 * i + 1] = [0, 0, 0, sx, sy, 1, -dy * sx, -dy * sy]
        b[2 * i], b[2 * i + 1] = dx, dy
    h = np.linalg.solve(a, b)
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray
                     ) -> np.ndarray:
    """Sample at continuous image coords with clamp-to-edge behavior."""
    h, w = image.shape[:2]
    fx = np.clip(xs - 0.5, 0.0, w - 1.0)
    fy = np.clip(ys - 0.5, 0.0, h - 1.0)
    x0 = np.floor(fx).astype(int)
    y0 = np.floor(fy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (fx - x0)[..., None]
    ay = (fy - y0)[..., None]
    top = image[y0, x0] * (1 - ax) + image[y0, x1] * ax
    bot = image[y1, x0] * (1 - ax) + image[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def _warp_patch_pair(sr: np.ndarray, ref: np.ndarray, origin: np.ndarray,
                     rng: np.random.Generator, jitter_px: float
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Jointly perspective-jitter the SR/reference patch at ``origin``."""
    corners = np.array([[0.0, 0.0], [PATCH_SIZE, 0.0],
                        [0.0, PATCH_SIZE], [PATCH_SIZE, PATCH_SIZE]])
    src = corners + origin + rng.uniform(-jitter_px, jitter_px, (4, 2))
    hom = _solve_homography(corners, src)
    xs, ys = np.meshgrid(np.arange(PATCH_SIZE) + 0.5, np.arange(PATCH_SIZE) + 0.5)
    ones = np.ones_like(xs)
    mapped = np.einsum("rc,hwc->hwr", hom, np.stack([xs, ys, ones], axis=-1))
    mx = mapped[..., 0] / mapped[..., 2]
    my = mapped[..., 1] / mapped[..., 2]
    return _bilinear_sample(sr, mx, my), _bilinear_sample(ref, mx, my)


def train_refiner(sr_image: np.ndarray, ref_image: np.ndarray,
                  cfg: RefineTrainConfig = RefineTrainConfig(),
                  feature_fn=image_gradient_features,
                  progress=None) -> tuple["RefinerParams", list[dict]]:
    """Fit the refiner on (SR render, ground truth) pairs at the reference
    pose, with perspective jitter standing in for the pose differences seen
    at test time.

    Loss per patch: mean absolute error plus ``feature_weight`` times the
    mean absolute error of each feature map from ``feature_fn``.
    """
    sr_image = np.asarray(sr_image, dtype=np.float64)
    ref_image = np.asarray(ref_image, dtype=np.float64)
    if sr_image.shape != ref_image.shape:
        raise ValueError("SR render and reference image must share a shape")
    if sr_image.shape[0] < PATCH_SIZE or sr_image.shape[1] < PATCH_SIZE:
        raise ValueError("images smaller than a patch")

    from .training import AdamState, adam_step  # shared optimizer

    params = RefinerParams(cfg.refiner, seed=cfg.seed)
    named = params.named_params()
    state = AdamState(named)
    rng = np.random.default_rng([cfg.seed, 3])
    h, w = sr_image.shape[:2]
    log: list[dict] = []
    for step in range(cfg.steps):
        ox = rng.integers(0, w - PATCH_SIZE + 1)
        oy = rng.integers(0, h - PATCH_SIZE + 1)
        p_in, p_gt = _warp_patch_pair(sr_image, ref_image,
                                      np.array([ox, oy], dtype=np.float64),
                                      rng, cfg.jitter_px)
        refs = []
        for _ in range(cfg.refiner.k_references):
            dx, dy = rng.integers(-cfg.window_px, cfg.window_px + 1, 2)
            rx = int(np.clip(ox + dx, 0, w - PATCH_SIZE))
            ry = int(np.clip(oy + dy, 0, h - PATCH_SIZE))
            refs.append(ref_image[ry:ry + PATCH_SIZE, rx:rx + PATCH_SIZE])

        out = params.forward(Tensor(p_in[None]), Tensor(np.stack(refs)))
        gt = Tensor(p_gt)
        loss = ad.tmean(ad.absolute(out - gt))
        for feat_out, feat_gt in zip(feature_fn(out), feature_fn(gt)):
            loss = loss + cfg.feature_weight * ad.tmean(
                ad.absolute(feat_out - feat_gt))
        ad.backward(loss)
        grads = {k: t.grad for k, t in named.items() if t.grad is not None}
        adam_step(named, grads, state, cfg.lr)
        params.zero_grad()
        record = {"step": step, "loss": float(loss.data)}
        log.append(record)
        if progress is not None:
            progress(record)
    return params, log


# -- whole-image refinement ------------------------------------------------------


def refine_image(image: np.ndarray, depth: np.ndarray, pose: CameraPose,
                 intr: Intrinsics, ref_image: np.ndarray,
                 pose_ref: CameraPose, intr_ref: Intrinsics,
                 params: RefinerParams) -> np.ndarray:
    """Refine a rendered view patch by patch and stitch the results.

    Images whose dimensions are not multiples of 64 are reflect-padded for
    processing and cropped back afterwards. Output matches the input shape.
    """
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    h, w = image.shape[:2]
    ph = (-h) % PATCH_SIZE
    pw = (-w) % PATCH_SIZE
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect") \
        if (ph or pw) else image
    padded_depth = np.pad(depth, ((0, ph), (0, pw)), mode="reflect") \
        if (ph or pw) else depth

    out = np.empty_like(padded)
    for y0 in range(0, padded.shape[0], PATCH_SIZE):
        for x0 in range(0, padded.shape[1], PATCH_SIZE):
            tile = Patch(padded[y0:y0 + PATCH_SIZE, x0:x0 + PATCH_SIZE],
                         (x0, y0))
            coords, valid = warp_map((x0, y0),
                                     padded_depth[y0:y0 + PATCH_SIZE,
                                                  x0:x0 + PATCH_SIZE],
                                     pose, pose_ref, intr, intr_ref)
            refs = gather_reference_patches(coords, valid, ref_image)
            out[y0:y0 + PATCH_SIZE, x0:x0 + PATCH_SIZE] = \
                refine(params, tile, refs).pixels
    return out[:h, :w]
