"""Positional-encoded MLP radiance field in coarse and fine copies.

The field maps (position, view direction) to (rgb, density). Density comes
off the trunk before the direction branch joins, so it cannot depend on the
view direction; rgb passes through a sigmoid head and density through a
softplus head.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = ["FieldConfig", "FieldMLP", "FieldParams", "encode", "encoding_dim"]


def encoding_dim(in_dim: int, levels: int) -> int:
    return in_dim + in_dim * 2 * levels


def encode(v: np.ndarray, levels: int) -> np.ndarray:
    """Frequency featurization: concat(v, sin(2^k pi v), cos(2^k pi v)).

    k runs over 0..levels-1 (frequency-major ordering within the sin and cos
    blocks); works on (..., D) arrays and returns (..., D + 2*D*levels).
    Plain numpy: encodings feed the MLP as constants.
    """
    if levels < 0:
        raise ValueError("levels must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    if levels == 0:
        return v.copy()
    d = v.shape[-1]
    freqs = (2.0 ** np.arange(levels)) * np.pi                  # (L,)
    ang = (v[..., None, :] * freqs[:, None]).reshape(*v.shape[:-1], levels * d)
    out = np.empty((*v.shape[:-1], d + 2 * levels * d))
    out[..., :d] = v
    np.sin(ang, out=out[..., d:d + levels * d])
    np.cos(ang, out=out[..., d + levels * d:])
    return out


@dataclass(frozen=True)
class FieldConfig:
    """Architecture of one MLP copy (coarse and fine share it)."""

    depth: int = 4          # trunk layers
    width: int = 128
    skip_at: int = 2        # re-concat the encoded position after this layer
    l_pos: int = 10         # position encoding levels
    l_dir: int = 4          # direction encoding levels

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        if not 0 < self.skip_at < self.depth:
            raise ValueError("skip_at must name an interior trunk layer")

    @property
    def pos_dim(self) -> int:
        return encoding_dim(3, self.l_pos)

    @property
    def dir_dim(self) -> int:
        return encoding_dim(3, self.l_dir)


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class FieldMLP:
    """One MLP copy: trunk with a skip connection, density and color heads."""

    def __init__(self, config: FieldConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.params: dict[str, Tensor] = {}

        def linear(name, fan_in, fan_out):
            self.params[f"{name}.w"] = Tensor(_kaiming_uniform(rng, fan_in, fan_out),
                                              tracked=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(fan_out), tracked=True)

        in_dim = c.pos_dim
        for i in range(c.depth):
            layer_in = in_dim if i == 0 else c.width
            if i == c.skip_at:
                layer_in += c.pos_dim
            linear(f"trunk{i}", layer_in, c.width)
        linear("sigma", c.width, 1)
        linear("bottleneck", c.width, c.width)
        linear("color0", c.width + c.dir_dim, max(c.width // 2, 4))
        linear("rgb", max(c.width // 2, 4), 3)

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return ad.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def forward(self, enc_x: Tensor, enc_d: Tensor) -> tuple[Tensor, Tensor]:
        """(N, pos_dim), (N, dir_dim) -> rgb (N, 3) in [0,1], sigma (N,) >= 0."""
        c = self.config
        h = enc_x
        for i in range(c.depth):
            if i == c.skip_at:
                h = ad.concat([h, enc_x], axis=1)
            h = ad.relu(self._linear(f"trunk{i}", h))
        sigma = ad.softplus(self._linear("sigma", h)).reshape(-1)
        feat = self._linear("bottleneck", h)
        h_dir = ad.relu(self._linear("color0", ad.concat([feat, enc_d], axis=1)))
        rgb = ad.sigmoid(self._linear("rgb", h_dir))
        return rgb, sigma

    def query(self, x: np.ndarray, d: np.ndarray) -> tuple[Tensor, Tensor]:
        """Field evaluation at raw positions (N, 3) and unit directions (N, 3)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(d))):
            raise ValueError("field query requires finite inputs")
        enc_x = Tensor(encode(x, self.config.l_pos))
        enc_d = Tensor(encode(d, self.config.l_dir))
        return self.forward(enc_x, enc_d)

    def query_rays(self, pts: np.ndarray, dirs: np.ndarray
                   ) -> tuple[Tensor, Tensor]:
        """Per-ray sample evaluation: pts (N, S, 3) with one shared direction
        per ray (N, 3). Encodes each direction once instead of per sample."""
        n, s_cnt = pts.shape[:2]
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(dirs))):
            raise ValueError("field query requires finite inputs")
        enc_x = Tensor(encode(pts.reshape(-1, 3), self.config.l_pos))
        enc_d = Tensor(np.repeat(encode(dirs, self.config.l_dir), s_cnt, axis=0))
        rgb, sigma = self.forward(enc_x, enc_d)
        return rgb.reshape(n, s_cnt, 3), sigma.reshape(n, s_cnt)


class FieldParams:
    """Coarse and fine MLPs of identical architecture plus their seed."""

    def __init__(self, config: FieldConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng([seed, 0])
        self.coarse = FieldMLP(config, rng)
        self.fine = FieldMLP(config, rng)

    def mlp(self, which: str) -> FieldMLP:
        if which not in ("coarse", "fine"):
            raise ValueError(f"unknown network '{which}'")
        return self.coarse if which == "coarse" else self.fine

    def query(self, which: str, x: np.ndarray, d: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.mlp(which).query(x, d)

    def query_rays(self, which: str, pts: np.ndarray, dirs: np.ndarray
                   ) -> tuple[Tensor, Tensor]:
        return self.mlp(which).query_rays(pts, dirs)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mlp in (("coarse", self.coarse), ("fine", self.fine)):
            for name, t in mlp.params.items():
                out[f"{prefix}.{name}"] = t
        return out

    def zero_grad(self) -> None:
        for t in self.named_params().values():
            t.zero_grad()

    # -- checkpoint round trip ------------------------------------------

    def save(self, path) -> None:
        arrays = {name: t.data for name, t in self.named_params().items()}
        save_checkpoint(path, "field", asdict(self.config), arrays, self.seed)

    @classmethod
    def load(cls, path) -> "FieldParams":
        config, arrays, seed = load_checkpoint(path, expect_kind="field")
        params = cls(FieldConfig(**config), seed=seed)
        named = params.named_params()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise ValueError(f"checkpoint arrays do not match architecture "
                             f"(missing={sorted(missing)}, extra={sorted(extra)})")
        for name, t in named.items():
            if arrays[name].shape != t.data.shape:
                raise ValueError(f"checkpoint array {name} has shape "
                                 f"{arrays[name].shape}, expected {t.data.shape}")
            t.data = arrays[name].astype(np.float64)
        return params
