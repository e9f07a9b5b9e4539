"""Scene domain types, procedural occlusion scenes, and dataset I/O.

A scene is a registered RGB + depth pair with per-instance amodal and
visible masks. The generator builds cluttered desk scenes from flat-colored
parametric shapes stacked in depth, with a layer of small "foam" discs
painted nearest to the camera so objects end up partially buried, mimicking
granular occluders. Everything is a pure function of (seed, scene_index).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

OCCLUSION_RATIO_THRESHOLD = 0.95

SHAPE_NAMES = ("rectangle", "ellipse", "capsule", "triangle", "L-shape")
CONVEX_SHAPES = ("rectangle", "ellipse", "capsule", "triangle")


class GenerationError(RuntimeError):
    """Raised when a generator config cannot be satisfied on the canvas."""


class DatasetError(RuntimeError):
    """Raised when an on-disk dataset is missing files or malformed."""


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        cam = cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )
        cam.validate()
        return cam


@dataclass
class InstanceAnnotation:
    """Per-object masks and occlusion state.

    ``occluded_mask`` is always ``amodal & ~visible``; ``occluded_flag``
    follows the strict visible/amodal area-ratio rule (< 0.95).
    """

    amodal_mask: np.ndarray
    visible_mask: np.ndarray
    occluded_mask: np.ndarray
    occluded_flag: bool
    depth_rank: int
    label: str = ""

    def validate(self) -> None:
        a = self.amodal_mask
        v = self.visible_mask
        o = self.occluded_mask
        if a.shape != v.shape or a.shape != o.shape:
            raise ValueError("masks must share one shape")
        amodal_area = int(a.sum())
        if amodal_area == 0:
            raise ValueError("amodal mask must be nonempty")
        if np.any(v & ~a):
            raise ValueError("visible mask must be a subset of the amodal mask")
        if np.any(o != (a & ~v)):
            raise ValueError("occluded mask must equal amodal AND NOT visible")
        if self.occluded_flag != occlusion_flag(int(v.sum()), amodal_area):
            raise ValueError("occluded flag inconsistent with mask areas")


@dataclass
class RgbdScene:
    """Registered RGB-D frame with instance annotations."""

    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    instances: list[InstanceAnnotation]
    scene_id: str

    def validate(self) -> None:
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise ValueError("rgb and depth sizes differ")
        if (self.intrinsics.height, self.intrinsics.width) != (h, w):
            raise ValueError("intrinsics size differs from images")
        for inst in self.instances:
            if inst.amodal_mask.shape != (h, w):
                raise ValueError("instance mask size differs from images")
            inst.validate()


@dataclass
class GeneratorConfig:
    """Knobs for the procedural scene generator."""

    canvas_size: int = 128
    object_count_range: tuple[int, int] = (2, 8)
    shape_set: tuple[str, ...] = SHAPE_NAMES
    object_depth_range: tuple[float, float] = (0.4, 1.0)
    background_depth: float = 1.2
    foam_cover_fraction_range: tuple[float, float] = (0.0, 0.5)
    foam_disc_radius_range: tuple[int, int] = (2, 4)
    color_noise_std: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if self.canvas_size < 16:
            raise ValueError("canvas_size must be at least 16 pixels")
        lo, hi = self.object_count_range
        if lo < 1 or hi < lo:
            raise ValueError("object_count_range must satisfy 1 <= min <= max")
        if not self.shape_set:
            raise ValueError("shape_set must not be empty")
        for s in self.shape_set:
            if s not in SHAPE_NAMES:
                raise ValueError(f"unknown shape {s!r}")
        dlo, dhi = self.object_depth_range
        if dlo <= 0 or dhi < dlo:
            raise ValueError("object_depth_range must be positive and ordered")
        if self.background_depth <= dhi:
            raise ValueError("background_depth must exceed the deepest object")
        flo, fhi = self.foam_cover_fraction_range
        if not (0.0 <= flo <= fhi <= 1.0):
            raise ValueError("foam_cover_fraction_range must lie in [0, 1]")
        rlo, rhi = self.foam_disc_radius_range
        if rlo < 1 or rhi < rlo:
            raise ValueError("foam_disc_radius_range must satisfy 1 <= min <= max")
        if self.color_noise_std < 0:
            raise ValueError("color_noise_std must be non-negative")


def occlusion_flag(visible_area: int, amodal_area: int) -> bool:
    """True when the visible fraction drops below 0.95 (strict)."""
    if amodal_area <= 0:
        raise ValueError("amodal area must be positive")
    if visible_area > amodal_area:
        raise ValueError("visible area cannot exceed amodal area")
    return visible_area / amodal_area < OCCLUSION_RATIO_THRESHOLD


def derive_visible_masks(
    amodal_masks: Sequence[np.ndarray],
    depth_ranks: Sequence[int],
    foam_mask: np.ndarray,
) -> list[InstanceAnnotation]:
    """Derive visible/occluded masks from the depth ordering and foam layer.

    A pixel of instance i is visible iff no instance with a smaller depth
    rank claims it and it is not covered by foam. Labels are left empty for
    the caller to fill.
    """
    if len(amodal_masks) != len(depth_ranks):
        raise ValueError("amodal_masks and depth_ranks must have equal length")
    if len(set(depth_ranks)) != len(depth_ranks):
        raise ValueError("depth ranks must be unique")

    order = np.argsort(depth_ranks)  # nearest first
    nearer = np.zeros_like(foam_mask, dtype=bool)
    visibles: list[np.ndarray | None] = [None] * len(amodal_masks)
    for idx in order:
        amodal = amodal_masks[idx].astype(bool)
        visibles[idx] = amodal & ~nearer & ~foam_mask
        nearer |= amodal

    annotations = []
    for amodal, visible, rank in zip(amodal_masks, visibles, depth_ranks):
        amodal = amodal.astype(bool)
        occluded = amodal & ~visible
        flag = occlusion_flag(int(visible.sum()), int(amodal.sum()))
        annotations.append(
            InstanceAnnotation(
                amodal_mask=amodal,
                visible_mask=visible,
                occluded_mask=occluded,
                occluded_flag=flag,
                depth_rank=int(rank),
            )
        )
    return annotations


# ---------------------------------------------------------------------------
# shape rasterization


def _local_frame(canvas: int, cx: float, cy: float, angle: float):
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    ca, sa = math.cos(angle), math.sin(angle)
    dx = xx - cx
    dy = yy - cy
    return dx * ca + dy * sa, -dx * sa + dy * ca


def _rasterize(shape: str, canvas: int, cx: float, cy: float, angle: float, dims: tuple) -> np.ndarray:
    u, v = _local_frame(canvas, cx, cy, angle)
    if shape == "rectangle":
        w, h = dims
        return (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)
    if shape == "ellipse":
        a, b = dims
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if shape == "capsule":
        half_len, r = dims
        du = np.maximum(np.abs(u) - half_len, 0.0)
        return du**2 + v**2 <= r**2
    if shape == "triangle":
        base, height = dims
        # isoceles, apex at v = -height/2, base edge at v = +height/2
        inside = v <= height / 2
        # edges from apex (0, -h/2) to base corners (+-b/2, +h/2)
        slope = (base / 2) / height
        inside &= np.abs(u) <= slope * (v + height / 2)
        return inside
    if shape == "L-shape":
        w, h, t = dims
        bar = (np.abs(u) <= w / 2) & (v >= h / 2 - t) & (v <= h / 2)
        stem = (u >= -w / 2) & (u <= -w / 2 + t) & (np.abs(v) <= h / 2)
        return bar | stem
    raise ValueError(f"unknown shape {shape!r}")


def _sample_shape(rng: np.random.Generator, config: GeneratorConfig):
    """Sample shape kind, dimensions, pose; returns (name, dims, radius)."""
    s = config.canvas_size
    name = config.shape_set[rng.integers(0, len(config.shape_set))]
    if name == "rectangle":
        w = rng.uniform(0.16, 0.38) * s
        h = rng.uniform(0.45, 1.0) * w
        dims = (w, h)
        radius = math.hypot(w, h) / 2
    elif name == "ellipse":
        a = rng.uniform(0.09, 0.19) * s
        b = rng.uniform(0.5, 1.0) * a
        dims = (a, b)
        radius = a
    elif name == "capsule":
        half_len = rng.uniform(0.08, 0.17) * s
        r = rng.uniform(0.035, 0.07) * s
        dims = (half_len, r)
        radius = half_len + r
    elif name == "triangle":
        height = rng.uniform(0.12, 0.24) * s
        base = rng.uniform(1.4, 2.2) * height  # wide base keeps the centroid mid-axis
        dims = (base, height)
        radius = math.hypot(base / 2, height / 2) * 1.05
    else:  # L-shape
        w = rng.uniform(0.18, 0.34) * s
        h = rng.uniform(0.7, 1.0) * w
        t = rng.uniform(0.3, 0.45) * min(w, h)
        dims = (w, h, t)
        radius = math.hypot(w, h) / 2
    angle = rng.uniform(0.0, math.pi)
    return name, dims, radius, angle


_MIN_OBJECT_AREA = 25
_PLACEMENT_ATTEMPTS = 100


def _place_object(rng: np.random.Generator, config: GeneratorConfig):
    s = config.canvas_size
    for _ in range(_PLACEMENT_ATTEMPTS):
        name, dims, radius, angle = _sample_shape(rng, config)
        margin = radius + 1.0
        if s - 1 - margin <= margin:
            continue  # shape cannot fit; resample
        cx = rng.uniform(margin, s - 1 - margin)
        cy = rng.uniform(margin, s - 1 - margin)
        mask = _rasterize(name, s, cx, cy, angle, dims)
        if int(mask.sum()) >= _MIN_OBJECT_AREA:
            return name, mask
    raise GenerationError(
        f"could not place an object on a {s}px canvas after "
        f"{_PLACEMENT_ATTEMPTS} attempts; config is over-constrained"
    )


def _paint_disc(target: np.ndarray, cy: int, cx: int, r: int, value) -> None:
    s = target.shape[0]
    y0, y1 = max(cy - r, 0), min(cy + r + 1, s)
    x0, x1 = max(cx - r, 0), min(cx + r + 1, s)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    target[y0:y1, x0:x1][disc] = value


def _place_foam(
    rng: np.random.Generator,
    config: GeneratorConfig,
    amodal_masks: list[np.ndarray],
):
    """Scatter discs over each object until its target cover fraction is met.

    Returns the combined foam mask plus the disc list (center, radius) so the
    renderer can paint each disc with its own color and depth.
    """
    s = config.canvas_size
    foam = np.zeros((s, s), dtype=bool)
    discs: list[tuple[int, int, int]] = []
    flo, fhi = config.foam_cover_fraction_range
    rlo, rhi = config.foam_disc_radius_range
    for amodal in amodal_masks:
        target = rng.uniform(flo, fhi)
        area = int(amodal.sum())
        if target <= 0.0 or area == 0:
            continue
        ys, xs = np.nonzero(amodal)
        # cap guards against unreachable cover targets on sliver objects
        max_discs = 40 + 8 * area // max(int(math.pi * rlo * rlo), 1)
        for _ in range(max_discs):
            covered = int((foam & amodal).sum())
            if covered >= target * area:
                break
            k = rng.integers(0, len(ys))
            r = int(rng.integers(rlo, rhi + 1))
            _paint_disc(foam, int(ys[k]), int(xs[k]), r, True)
            discs.append((int(ys[k]), int(xs[k]), r))
    return foam, discs


_FOAM_BASE_COLOR = np.array([235, 235, 235], dtype=np.float64)


def generate_scene(config: GeneratorConfig, scene_index: int) -> RgbdScene:
    """Generate one deterministic cluttered scene.

    Objects are painted far-to-near into the RGB and depth canvases, foam
    discs go on top, and annotations are derived from the depth ordering.
    Instances whose visible mask ends up empty are resampled so every
    instance keeps a usable visible prior.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(scene_index,)))
    s = config.canvas_size
    n = int(rng.integers(config.object_count_range[0], config.object_count_range[1] + 1))

    labels: list[str] = []
    amodals: list[np.ndarray] = []
    for _ in range(n):
        name, mask = _place_object(rng, config)
        labels.append(name)
        amodals.append(mask)
    dlo, dhi = config.object_depth_range
    depths = rng.uniform(dlo, dhi, size=n)

    for round_idx in range(_PLACEMENT_ATTEMPTS):
        ranks = np.empty(n, dtype=int)
        ranks[np.argsort(depths, kind="stable")] = np.arange(n)
        foam, discs = _place_foam(rng, config, amodals)
        annotations = derive_visible_masks(amodals, ranks.tolist(), foam)
        empty = [i for i, a in enumerate(annotations) if not a.visible_mask.any()]
        if not empty:
            break
        for i in empty:
            labels[i], amodals[i] = _place_object(rng, config)
            depths[i] = rng.uniform(dlo, dhi)
    else:
        raise GenerationError(
            "could not produce a scene where every instance stays partly "
            f"visible after {_PLACEMENT_ATTEMPTS} rounds"
        )
    for anno, label in zip(annotations, labels):
        anno.label = label

    # render: background, then objects far-to-near, then foam
    rgb = np.empty((s, s, 3), dtype=np.float64)
    rgb[:] = rng.uniform(90, 160, size=3)
    depth_map = np.full((s, s), config.background_depth, dtype=np.float64)
    colors = rng.uniform(30, 225, size=(n, 3))
    for i in np.argsort(-depths, kind="stable"):  # farthest first
        rgb[amodals[i]] = colors[i]
        depth_map[amodals[i]] = depths[i]
    foam_depth_lo, foam_depth_hi = 0.5 * dlo, 0.9 * dlo
    for cy, cx, r in discs:
        color = _FOAM_BASE_COLOR + rng.uniform(-12, 12, size=3)
        _paint_disc(rgb, cy, cx, r, color)
        d = np.zeros((s, s), dtype=bool)
        _paint_disc(d, cy, cx, r, True)
        depth_map[d] = rng.uniform(foam_depth_lo, foam_depth_hi)
    if config.color_noise_std > 0:
        rgb += rng.normal(0.0, config.color_noise_std, size=rgb.shape)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)

    intrinsics = CameraIntrinsics(
        fx=float(s), fy=float(s), cx=s / 2, cy=s / 2, width=s, height=s
    )
    scene = RgbdScene(
        rgb=rgb,
        depth=depth_map,
        intrinsics=intrinsics,
        instances=annotations,
        scene_id=f"scene_{scene_index:05d}",
    )
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# dataset serialization
#
# Layout: <root>/<scene_id>/{rgb.png, depth.png, camera.json, instances.json,
# masks/<k>_amodal.png, masks/<k>_visible.png}. Depth is 16-bit millimeters
# (0 = invalid), masks are 8-bit {0, 255}.


def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def _load_mask(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing mask file {path}")
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise DatasetError(f"mask file {path} is not single-channel")
    return arr > 127


def save_scene(scene: RgbdScene, scene_dir: Path) -> None:
    scene_dir = Path(scene_dir)
    (scene_dir / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(scene.rgb).save(scene_dir / "rgb.png")
    depth_mm = np.clip(np.rint(scene.depth * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(depth_mm).save(scene_dir / "depth.png")
    (scene_dir / "camera.json").write_text(
        json.dumps(scene.intrinsics.to_dict(), indent=2) + "\n"
    )
    records = []
    for k, inst in enumerate(scene.instances):
        amodal_rel = f"masks/{k}_amodal.png"
        visible_rel = f"masks/{k}_visible.png"
        _save_mask(scene_dir / amodal_rel, inst.amodal_mask)
        _save_mask(scene_dir / visible_rel, inst.visible_mask)
        records.append(
            {
                "amodal": amodal_rel,
                "visible": visible_rel,
                "occluded_flag": bool(inst.occluded_flag),
                "depth_rank": int(inst.depth_rank),
                "label": inst.label,
            }
        )
    (scene_dir / "instances.json").write_text(json.dumps(records, indent=2) + "\n")


def save_dataset(scenes: Sequence[RgbdScene], directory: Path) -> None:
    """Write scenes under ``directory``, one subdirectory per scene."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        save_scene(scene, directory / scene.scene_id)


def load_scene(scene_dir: Path) -> RgbdScene:
    """Load one scene directory, verifying the annotation invariants."""
    scene_dir = Path(scene_dir)
    camera_path = scene_dir / "camera.json"
    if not camera_path.is_file():
        raise DatasetError(f"missing camera file {camera_path}")
    try:
        intrinsics = CameraIntrinsics.from_dict(json.loads(camera_path.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"malformed camera file {camera_path}: {exc}") from exc

    rgb_path = scene_dir / "rgb.png"
    depth_path = scene_dir / "depth.png"
    if not rgb_path.is_file() or not depth_path.is_file():
        raise DatasetError(f"missing rgb.png or depth.png under {scene_dir}")
    rgb = np.asarray(Image.open(rgb_path).convert("RGB"))
    depth_mm = np.asarray(Image.open(depth_path))
    if depth_mm.ndim != 2:
        raise DatasetError(f"malformed depth file {depth_path}")
    depth = depth_mm.astype(np.float64) / 1000.0

    instances_path = scene_dir / "instances.json"
    if not instances_path.is_file():
        raise DatasetError(f"missing annotation file {instances_path}")
    try:
        records = json.loads(instances_path.read_text())
        if not isinstance(records, list):
            raise ValueError("top-level value must be an array")
    except ValueError as exc:
        raise DatasetError(f"malformed annotation file {instances_path}: {exc}") from exc

    instances = []
    for rec in records:
        try:
            amodal = _load_mask(scene_dir / rec["amodal"])
            visible = _load_mask(scene_dir / rec["visible"])
            inst = InstanceAnnotation(
                amodal_mask=amodal,
                visible_mask=visible,
                occluded_mask=amodal & ~visible,
                occluded_flag=bool(rec["occluded_flag"]),
                depth_rank=int(rec["depth_rank"]),
                label=str(rec.get("label", "")),
            )
            inst.validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(
                f"malformed annotation file {instances_path}: {exc}"
            ) from exc
        instances.append(inst)

    scene = RgbdScene(
        rgb=rgb,
        depth=depth,
        intrinsics=intrinsics,
        instances=instances,
        scene_id=scene_dir.name,
    )
    try:
        scene.validate()
    except ValueError as exc:
        raise DatasetError(f"inconsistent scene under {scene_dir}: {exc}") from exc
    return scene


def load_dataset(directory: Path) -> list[RgbdScene]:
    """Load every scene subdirectory under ``directory``, sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory {directory} does not exist")
    scene_dirs = sorted(p for p in directory.iterdir() if p.is_dir())
    if not scene_dirs:
        raise DatasetError(f"no scene directories under {directory}")
    return [load_scene(p) for p in scene_dirs]
