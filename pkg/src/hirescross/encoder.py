"""Image grids, resizing, patchify and the two parallel vision encoders."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import numerics as nx
from .blocks import Module, linear, mlp, multihead_attention
from .numerics import Tensor


class EncoderError(ValueError):
    pass


@dataclass
class ImageGrid:
    """Row-major pixels in [0, 1], shape (height, width, channels)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise EncoderError(f"expected (H, W, 1|3) pixels, got {px.shape}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class TokenSequence:
    data: np.ndarray  # (L, D)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, edge clamped
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize(img: ImageGrid, side: int, height: int | None = None) -> ImageGrid:
    """Bilinear resize to ``side`` x ``side`` (or ``side`` wide x ``height`` tall)."""
    out_w, out_h = side, side if height is None else height
    if out_w <= 0 or out_h <= 0:
        raise EncoderError("target size must be positive")
    if img.width == 0 or img.height == 0:
        raise EncoderError("cannot resize a zero-area image")
    if (out_h, out_w) == (img.height, img.width):
        return ImageGrid(img.pixels.copy())
    y0, y1, fy = _bilinear_axis(img.height, out_h)
    x0, x1, fx = _bilinear_axis(img.width, out_w)
    p = img.pixels
    top = p[y0][:, x0] * (1 - fx)[None, :, None] + p[y0][:, x1] * fx[None, :, None]
    bot = p[y1][:, x0] * (1 - fx)[None, :, None] + p[y1][:, x1] * fx[None, :, None]
    return ImageGrid(top * (1 - fy)[:, None, None] + bot * fy[:, None, None])


def patchify(img: ImageGrid, patch: int) -> TokenSequence:
    """Split into non-overlapping patch x patch tiles, top-left first, row-major.

    Each token is the tile flattened as (row, col, channel).
    """
    h, w, c = img.pixels.shape
    if patch <= 0 or h % patch or w % patch:
        raise EncoderError(f"patch {patch} does not divide image {w}x{h}")
    gh, gw = h // patch, w // patch
    tiles = img.pixels.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return TokenSequence(tiles.reshape(gh * gw, patch * patch * c))


def patchify_batch(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, L, patch*patch*C), same ordering as :func:`patchify`."""
    b, h, w, c = pixels.shape
    if h % patch or w % patch:
        raise EncoderError(f"patch {patch} does not divide image {w}x{h}")
    gh, gw = h // patch, w // patch
    tiles = pixels.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return tiles.reshape(b, gh * gw, patch * patch * c)


@dataclass
class EncoderConfig:
    side: int = 28
    patch: int = 14
    layers: int = 1
    hidden: int = 32
    heads: int = 4
    channels: int = 1
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden % self.heads:
            raise EncoderError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.side % self.patch:
            raise EncoderError(f"patch {self.patch} does not divide side {self.side}")

    @property
    def tokens(self) -> int:
        return (self.side // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


class VisionEncoder(Module):
    """Patch projection + learned 2-D position table + pre-norm ViT blocks."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32, prefix: str = "enc."):
        super().__init__(seed, dtype, prefix)
        self.cfg = cfg
        h = cfg.hidden
        self.xavier("patch.w", cfg.patch_dim, h)
        self.zeros("patch.b", (h,))
        self.normal("pos", (cfg.tokens, h))
        for i in range(cfg.layers):
            p = f"blocks.{i}."
            self.ones(p + "ln1.g", (h,))
            self.zeros(p + "ln1.b", (h,))
            self.xavier(p + "wq", h, h)
            self.xavier(p + "wk", h, h)
            self.xavier(p + "wv", h, h)
            self.xavier(p + "wo", h, h)
            self.ones(p + "ln2.g", (h,))
            self.zeros(p + "ln2.b", (h,))
            self.xavier(p + "mlp.w1", h, cfg.mlp_ratio * h)
            self.zeros(p + "mlp.b1", (cfg.mlp_ratio * h,))
            self.xavier(p + "mlp.w2", cfg.mlp_ratio * h, h)
            self.zeros(p + "mlp.b2", (h,))
        if cfg.layers:
            self.ones("ln_f.g", (h,))
            self.zeros("ln_f.b", (h,))

    def __call__(self, patches) -> Tensor:
        """patches: (B, L, patch_dim) array or Tensor -> (B, L, hidden)."""
        cfg = self.cfg
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=self.dtype))
        if x.shape[-1] != cfg.patch_dim or x.shape[-2] != cfg.tokens:
            raise EncoderError(f"expected (B, {cfg.tokens}, {cfg.patch_dim}) patches, got {x.shape}")
        P = self.params
        pre = self.prefix
        x = nx.add(linear(x, P[pre + "patch.w"], P[pre + "patch.b"]), P[pre + "pos"])
        for i in range(cfg.layers):
            p = f"{pre}blocks.{i}."
            h = nx.layernorm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            att = multihead_attention(
                linear(h, P[p + "wq"]), linear(h, P[p + "wk"]), linear(h, P[p + "wv"]), cfg.heads
            )
            x = nx.add(x, linear(att, P[p + "wo"]))
            h = nx.layernorm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            x = nx.add(x, mlp(h, P[p + "mlp.w1"], P[p + "mlp.b1"], P[p + "mlp.w2"], P[p + "mlp.b2"]))
        if cfg.layers:
            x = nx.layernorm(x, P[pre + "ln_f.g"], P[pre + "ln_f.b"])
        return x

    def encode(self, tokens: TokenSequence) -> TokenSequence:
        out = self(tokens.data[None])
        return TokenSequence(out.data[0])


def encoder_param_count(cfg: EncoderConfig) -> int:
    h, r = cfg.hidden, cfg.mlp_ratio
    per_block = 4 * h + 4 * h * h + 2 * r * h * h + r * h + h
    final = 2 * h if cfg.layers else 0
    return cfg.patch_dim * h + h + cfg.tokens * h + cfg.layers * per_block + final


def standardize(pixels: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Zero mean, unit variance per image.

    Raw [0, 1] screens are dominated by their mean brightness; without this
    the patch embeddings start nearly collinear and glyph detail carries
    almost no gradient.
    """
    px = np.asarray(pixels, dtype=np.float64)
    return (px - px.mean()) / (px.std() + eps)


def images_to_branches(pixels: np.ndarray, lo: EncoderConfig, hi: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Batch of images (B, H, W[, C]) -> (lo patches, hi patches).

    Each image is resized per branch and then standardized.
    """
    lo_px, hi_px = [], []
    for im in pixels:
        g = ImageGrid(im)
        lo_px.append(standardize(resize(g, lo.side).pixels))
        hi_px.append(standardize(resize(g, hi.side).pixels))
    return patchify_batch(np.stack(lo_px), lo.patch), patchify_batch(np.stack(hi_px), hi.patch)


def load_image(path: str | Path) -> ImageGrid:
    """Read a PGM/PNG screen as grayscale in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except OSError as e:
        raise EncoderError(f"cannot read image {path}: {e}") from e
    return ImageGrid(arr)


def save_image(img: ImageGrid, path: str | Path) -> None:
    px = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    Image.fromarray(np.clip(np.round(px * 255), 0, 255).astype(np.uint8)).save(path)
