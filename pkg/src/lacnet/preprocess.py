"""Crop, resize, normalize, and augment RGB-D inputs around a visible mask.

Bounding boxes are half-open integer tuples ``(x0, y0, x1, y1)`` with x along
columns. Resampling uses the half-pixel-center convention (pixel k is a
sample at coordinate k, an N-pixel extent covers [-0.5, N-0.5)); sampling
coordinates are clamped to the crop so edges replicate, while anything the
box covers outside the image itself is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

Bbox = tuple[int, int, int, int]


@dataclass
class CropSpec:
    """Cropping contract: box expansion factor and square output size."""

    bbox: Bbox
    expansion_factor: float = 2.0
    output_size: int = 256

    def validate(self) -> None:
        x0, y0, x1, y1 = self.bbox
        if x1 <= x0 or y1 <= y0:
            raise ValueError("bbox must have positive width and height")
        if self.expansion_factor < 1.0:
            raise ValueError("expansion_factor must be >= 1")
        if self.output_size % 32 != 0:
            raise ValueError("output_size must be a multiple of 32")


@dataclass
class AugmentParams:
    """Mask-corruption settings simulating an imperfect visible-mask detector."""

    dilate_radius_range: tuple[int, int] = (1, 2)
    erode_radius_range: tuple[int, int] = (1, 2)
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)
    dilate_prob: float = 0.3
    erode_prob: float = 0.3
    blur_prob: float = 0.3

    def validate(self) -> None:
        for lo, hi in (self.dilate_radius_range, self.erode_radius_range, self.blur_sigma_range):
            if lo < 0 or hi < lo:
                raise ValueError("augment ranges must be non-negative and ordered")
        for p in (self.dilate_prob, self.erode_prob, self.blur_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("apply probabilities must lie in [0, 1]")


def bbox_of_mask(mask: np.ndarray) -> Bbox:
    """Tightest half-open box containing all set pixels."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask is empty; no visible prior to crop around")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def expand_bbox(bbox: Bbox, factor: float) -> Bbox:
    """Scale width/height by ``factor`` about the center, rounding outward."""
    if factor < 1.0:
        raise ValueError("factor must be >= 1")
    x0, y0, x1, y1 = bbox
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    hw, hh = (x1 - x0) * factor / 2.0, (y1 - y0) * factor / 2.0
    return (
        int(math.floor(cx - hw)),
        int(math.floor(cy - hh)),
        int(math.ceil(cx + hw)),
        int(math.ceil(cy + hh)),
    )


def _padded_crop(image: np.ndarray, bbox: Bbox) -> np.ndarray:
    """Extract ``bbox`` from ``image``, zero-filling outside the bounds."""
    x0, y0, x1, y1 = bbox
    h, w = image.shape[:2]
    out_shape = (y1 - y0, x1 - x0) + image.shape[2:]
    out = np.zeros(out_shape, dtype=image.dtype)
    sy0, sy1 = max(y0, 0), min(y1, h)
    sx0, sx1 = max(x0, 0), min(x1, w)
    if sy1 > sy0 and sx1 > sx0:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = image[sy0:sy1, sx0:sx1]
    return out


def _sample_coords(n_out: int, n_src: int) -> np.ndarray:
    """Source coordinates for resizing n_src samples to n_out."""
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_src / n_out) - 0.5


def _resize_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    src = src.astype(np.float64)
    sh, sw = src.shape[:2]
    u = np.clip(_sample_coords(out_w, sw), 0.0, sw - 1.0)
    v = np.clip(_sample_coords(out_h, sh), 0.0, sh - 1.0)
    return _bilinear_at(src, v[:, None], u[None, :])


def _bilinear_at(src: np.ndarray, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``src`` at (row, col) coordinate grids v, u."""
    sh, sw = src.shape[:2]
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, sw - 1)
    v1 = np.minimum(v0 + 1, sh - 1)
    fu = u - u0
    fv = v - v0
    if src.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    top = src[v0, u0] * (1 - fu) + src[v0, u1] * fu
    bot = src[v1, u0] * (1 - fu) + src[v1, u1] * fu
    return top * (1 - fv) + bot * fv


def _resize_nearest(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    sh, sw = src.shape[:2]
    u = np.clip(np.floor(_sample_coords(out_w, sw) + 0.5).astype(int), 0, sw - 1)
    v = np.clip(np.floor(_sample_coords(out_h, sh) + 0.5).astype(int), 0, sh - 1)
    return src[v[:, None], u[None, :]]


def crop_and_resize(image: np.ndarray, bbox: Bbox, output_size: int, mode: str) -> np.ndarray:
    """Crop ``bbox`` (zero-padded where it leaves the image) to a square patch.

    ``mode`` is "bilinear" for images/depth (returns float64) or "nearest"
    for masks (preserves dtype).
    """
    x0, y0, x1, y1 = bbox
    if x1 <= x0 or y1 <= y0:
        raise ValueError("zero-area bbox")
    crop = _padded_crop(image, bbox)
    if mode == "bilinear":
        return _resize_bilinear(crop, output_size, output_size)
    if mode == "nearest":
        return _resize_nearest(crop, output_size, output_size)
    raise ValueError(f"unknown resampling mode {mode!r}")


def normalize_inputs(rgb_patch: np.ndarray, depth_patch: np.ndarray):
    """Scale RGB to [0,1]; min-max scale valid depth within the patch.

    Invalid depth (<= 0) maps to 0. If all valid depths coincide, valid
    pixels map to 0.5 so a flat surface is not confused with missing data.
    """
    rgb_norm = (rgb_patch.astype(np.float32) / 255.0).clip(0.0, 1.0)
    depth = depth_patch.astype(np.float32)
    valid = depth > 0
    depth_norm = np.zeros_like(depth)
    if valid.any():
        dmin = float(depth[valid].min())
        dmax = float(depth[valid].max())
        if dmax > dmin:
            depth_norm[valid] = (depth[valid] - dmin) / (dmax - dmin)
        else:
            depth_norm[valid] = 0.5
    return rgb_norm, depth_norm


def _disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy**2 + xx**2 <= r * r


def augment_mask(mask: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Randomly dilate, erode, and/or blur a binary mask.

    Each transform fires independently with its probability; an augmentation
    chain that would empty the mask is discarded and the original returned.
    """
    out = mask.astype(bool)
    if rng.uniform() < params.dilate_prob:
        r = int(rng.integers(params.dilate_radius_range[0], params.dilate_radius_range[1] + 1))
        if r > 0:
            out = ndimage.binary_dilation(out, structure=_disc(r))
    if rng.uniform() < params.erode_prob:
        r = int(rng.integers(params.erode_radius_range[0], params.erode_radius_range[1] + 1))
        if r > 0:
            out = ndimage.binary_erosion(out, structure=_disc(r))
    if rng.uniform() < params.blur_prob:
        sigma = float(rng.uniform(params.blur_sigma_range[0], params.blur_sigma_range[1]))
        if sigma > 0:
            out = ndimage.gaussian_filter(out.astype(np.float64), sigma=sigma) > 0.5
    if not out.any():
        return mask.astype(bool)
    return out


def paste_prob(prob_map: np.ndarray, bbox: Bbox, image_size: tuple[int, int]) -> np.ndarray:
    """Resize a patch probability map back into full-image coordinates.

    ``image_size`` is (height, width). The bbox region is filled by bilinear
    sampling of the patch; pixels outside the (clipped) bbox stay 0.
    """
    h, w = image_size
    x0, y0, x1, y1 = bbox
    bw, bh = x1 - x0, y1 - y0
    if bw <= 0 or bh <= 0:
        raise ValueError("zero-area bbox")
    ph, pw = prob_map.shape
    canvas = np.zeros((h, w), dtype=np.float64)
    cx0, cx1 = max(x0, 0), min(x1, w)
    cy0, cy1 = max(y0, 0), min(y1, h)
    if cx1 <= cx0 or cy1 <= cy0:
        return canvas
    # map canvas pixel centers into patch coordinates (inverse of the crop)
    u = (np.arange(cx0, cx1) - x0 + 0.5) * (pw / bw) - 0.5
    v = (np.arange(cy0, cy1) - y0 + 0.5) * (ph / bh) - 0.5
    u = np.clip(u, 0.0, pw - 1.0)
    v = np.clip(v, 0.0, ph - 1.0)
    canvas[cy0:cy1, cx0:cx1] = _bilinear_at(prob_map.astype(np.float64), v[:, None], u[None, :])
    return canvas


def paste_back(
    prob_map: np.ndarray,
    bbox: Bbox,
    image_size: tuple[int, int],
    threshold: float = 0.5,
) -> np.ndarray:
    """Paste a patch probability map into the image and binarize it."""
    return paste_prob(prob_map, bbox, image_size) >= threshold
