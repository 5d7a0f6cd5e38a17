"""Procedural paired-frame scene generator with ground-truth labels and flow.

Scenes are layered compositions: sky band, building band, road band,
vegetation blobs, optional extra static blocks, then car and person sprites
placed on or near the road with constant per-sprite integer velocities.
Frame t+1 repeats the composition with sprites displaced, so ground-truth
flow is exact: the sprite velocity on sprite pixels at t, zero elsewhere.

Appearance shifts (gamma, channel gains, additive noise, texture style) are
applied identically to both frames and never touch labels or flow.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import imagecore

ROAD, SKY, BUILDING, VEGETATION, CAR, PERSON = range(6)
DEFAULT_CLASS_NAMES = ["road", "sky", "building", "vegetation", "car", "person"]
MOVING_CLASS_IDS = (CAR, PERSON)
SPEED_BOUND = 8.0

CITYSCAPES_CLASS_NAMES_19 = [
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bike",
]
_EXTRA_CLASS_POOL = [n for n in CITYSCAPES_CLASS_NAMES_19 if n not in DEFAULT_CLASS_NAMES]

_BASE_COLORS = {
    "road": (90, 90, 95),
    "sky": (150, 185, 230),
    "building": (150, 110, 95),
    "vegetation": (60, 130, 60),
    "car": (128, 128, 128),  # never rendered: sprites use their own palettes
    "person": (128, 128, 128),
    "sidewalk": (120, 120, 125),
    "wall": (140, 135, 120),
    "fence": (160, 130, 70),
    "pole": (70, 70, 75),
    "traffic light": (220, 170, 40),
    "traffic sign": (200, 60, 50),
    "terrain": (110, 140, 70),
    "rider": (150, 60, 130),
    "truck": (90, 120, 150),
    "bus": (200, 120, 30),
    "train": (120, 60, 60),
    "motorcycle": (60, 90, 120),
    "bike": (90, 160, 170),
}
# sprite colors keep their luma well away from the road/building bands so
# the grayscale flow input sees every moving boundary
_CAR_PALETTE = [(255, 70, 70), (25, 30, 95), (195, 195, 205), (40, 40, 48)]
_PERSON_PALETTE = [(60, 180, 170), (240, 200, 60), (35, 35, 42)]

_GEOMETRY_STREAM = 11
_TEXTURE_STREAM = 23
_SHIFT_NOISE_STREAM = 37


def class_names(n_classes: int) -> list[str]:
    """Default six scene classes, extended from the 19-name taxonomy."""
    if not (6 <= n_classes <= 19):
        raise ValueError(f"class count must be in [6, 19], got {n_classes}")
    return DEFAULT_CLASS_NAMES + _EXTRA_CLASS_POOL[: n_classes - 6]


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 96
    n_classes: int = 6
    car_count: tuple[int, int] = (1, 3)
    person_count: tuple[int, int] = (1, 2)
    car_speed: tuple[int, int] = (1, 6)  # px/frame, horizontal, sign randomized
    person_speed: tuple[int, int] = (1, 2)
    texture_amplitude: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 32 or self.height < 32:
            raise ValueError("scene must be at least 32x32")
        class_names(self.n_classes)
        for lo, hi in (self.car_count, self.person_count):
            if not (0 <= lo <= hi):
                raise ValueError("count ranges must satisfy 0 <= lo <= hi")
        for lo, hi in (self.car_speed, self.person_speed):
            if not (1 <= lo <= hi):
                raise ValueError("speed ranges must satisfy 1 <= lo <= hi")
        if max(self.car_speed[1], np.hypot(self.person_speed[1], 1)) > SPEED_BOUND:
            raise ValueError(f"sprite speeds must stay within {SPEED_BOUND} px/frame")
        if not (0.0 <= self.texture_amplitude <= 1.0):
            raise ValueError("texture_amplitude must be in [0, 1]")


@dataclass(frozen=True)
class DomainShift:
    gamma: float = 1.0
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    texture_style: int = 0

    def __post_init__(self) -> None:
        if not (0.5 <= self.gamma <= 2.0):
            raise ValueError("gamma must be in [0.5, 2]")
        if min(self.gain) <= 0:
            raise ValueError("channel gains must be positive")
        if self.noise_sigma < 0 or self.texture_style < 0:
            raise ValueError("noise_sigma and texture_style must be >= 0")


@dataclass
class ScenePair:
    frame_t: np.ndarray  # (H, W, 3) uint8
    frame_t1: np.ndarray  # (H, W, 3) uint8
    labels: np.ndarray  # (H, W) uint8, labels for frame_t
    flow: np.ndarray  # (H, W, 2) float32, ground truth t -> t+1


@dataclass
class _Sprite:
    class_id: int
    x: int
    y: int
    w: int
    h: int
    vx: int
    vy: int
    color: tuple[int, int, int]
    ellipse: bool
    texture: np.ndarray = field(default=None)  # type: ignore[assignment]

    def mask(self) -> np.ndarray:
        if not self.ellipse:
            return np.ones((self.h, self.w), dtype=bool)
        ys = (np.arange(self.h) - (self.h - 1) / 2.0) / (self.h / 2.0)
        xs = (np.arange(self.w) - (self.w - 1) / 2.0) / (self.w / 2.0)
        return ys[:, None] ** 2 + xs[None, :] ** 2 <= 1.0


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Smooth value noise in roughly [-1, 1]: bilinear-upsampled coarse grid
    mixed with fine grain so every region carries gradients."""
    ch = h // cell + 2
    cw = w // cell + 2
    coarse = rng.uniform(-1.0, 1.0, size=(ch, cw)).astype(np.float32)
    up = imagecore.upsample_bilinear(coarse, h, w)
    fine = rng.uniform(-1.0, 1.0, size=(h, w)).astype(np.float32)
    return 0.65 * up + 0.35 * fine


def _rects_overlap(a: _Sprite, b: _Sprite) -> bool:
    return not (a.x + a.w <= b.x or b.x + b.w <= a.x or a.y + a.h <= b.y or b.y + b.h <= a.y)


def _place_sprite(
    geom: np.random.Generator,
    placed: list[_Sprite],
    class_id: int,
    size_w: tuple[int, int],
    size_h: tuple[int, int],
    speed: tuple[int, int],
    y_range_fn,
    palette: list[tuple[int, int, int]],
    ellipse: bool,
    vertical_jitter: bool,
    width: int,
    height: int,
) -> _Sprite:
    for _ in range(100):
        w = int(geom.integers(size_w[0], size_w[1] + 1))
        h = int(geom.integers(size_h[0], size_h[1] + 1))
        vx = int(geom.integers(speed[0], speed[1] + 1)) * int(geom.choice([-1, 1]))
        vy = int(geom.integers(-1, 2)) if vertical_jitter else 0
        color = palette[int(geom.integers(0, len(palette)))]
        x_lo = max(0, -vx)
        x_hi = width - w - max(0, vx)
        y_lo, y_hi = y_range_fn(h)
        y_lo = max(y_lo, 0, -vy)
        y_hi = min(y_hi, height - h, height - h - vy)
        if x_hi < x_lo or y_hi < y_lo:
            continue
        x = int(geom.integers(x_lo, x_hi + 1))
        y = int(geom.integers(y_lo, y_hi + 1))
        sprite = _Sprite(class_id, x, y, w, h, vx, vy, color, ellipse)
        if any(_rects_overlap(sprite, other) for other in placed):
            continue
        return sprite
    raise RuntimeError(f"could not place class-{class_id} sprite after 100 attempts")


def gen_scene_pair(spec: SceneSpec, shift: DomainShift | None, seed: int) -> ScenePair:
    """Generate one frame pair with labels and exact ground-truth flow.

    Geometry (layout, sprites, velocities, hence labels and flow) depends
    only on (spec, seed); the shift and its texture style alter appearance
    streams exclusively.
    """
    w, h = spec.width, spec.height
    geom = np.random.default_rng([seed, _GEOMETRY_STREAM])
    style = shift.texture_style if shift is not None else 0
    texture = np.random.default_rng([seed, _TEXTURE_STREAM, style])
    names = class_names(spec.n_classes)

    sky_h = int(h * geom.uniform(0.22, 0.32))
    road_top = int(h * geom.uniform(0.60, 0.70))

    labels = np.full((h, w), BUILDING, dtype=np.uint8)
    labels[:sky_h] = SKY
    labels[road_top:] = ROAD

    n_veg = int(geom.integers(2, 5))
    for _ in range(n_veg):
        cx = int(geom.integers(0, w))
        cy = int(geom.integers(sky_h, road_top))
        rx = int(geom.integers(6, 15))
        ry = int(geom.integers(4, 11))
        ys = np.arange(h)[:, None]
        xs = np.arange(w)[None, :]
        blob = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
        blob[road_top:] = False
        labels[blob] = VEGETATION

    for class_id in range(6, spec.n_classes):
        bw = int(geom.integers(8, 17))
        bh = int(geom.integers(6, 13))
        bx = int(geom.integers(0, w - bw))
        by = int(geom.integers(sky_h, max(sky_h + 1, road_top - bh)))
        labels[by : by + bh, bx : bx + bw] = class_id

    sprites: list[_Sprite] = []
    n_cars = int(geom.integers(spec.car_count[0], spec.car_count[1] + 1))
    for _ in range(n_cars):
        sprites.append(
            _place_sprite(
                geom, sprites, CAR, (14, 22), (7, 11), spec.car_speed,
                lambda sh: (road_top + 1, h - sh - 1), _CAR_PALETTE,
                ellipse=False, vertical_jitter=False, width=w, height=h,
            )
        )
    n_persons = int(geom.integers(spec.person_count[0], spec.person_count[1] + 1))
    for _ in range(n_persons):
        sprites.append(
            _place_sprite(
                geom, sprites, PERSON, (4, 6), (9, 13), spec.person_speed,
                lambda sh: (road_top - sh + 2, road_top + 2), _PERSON_PALETTE,
                ellipse=True, vertical_jitter=True, width=w, height=h,
            )
        )

    # appearance: one static background texture plane, one patch per sprite
    amp = np.float32(spec.texture_amplitude)
    cell = 4 + 2 * (style % 3)
    bg_noise = _value_noise(texture, h, w, cell)
    base = np.array([_BASE_COLORS[names[c]] for c in range(spec.n_classes)], dtype=np.float32)
    background = base[labels] * (1.0 + amp * bg_noise[:, :, None])
    for sprite in sprites:
        sprite.texture = _value_noise(texture, sprite.h, sprite.w, 2)

    frame_t = background.copy()
    frame_t1 = background.copy()
    flow = np.zeros((h, w, 2), dtype=np.float32)
    for sprite in sprites:
        patch = np.float32(sprite.color) * (1.0 + amp * sprite.texture[:, :, None])
        mask = sprite.mask()
        _draw(frame_t, patch, mask, sprite.x, sprite.y)
        _draw(frame_t1, patch, mask, sprite.x + sprite.vx, sprite.y + sprite.vy)
        region = labels[sprite.y : sprite.y + sprite.h, sprite.x : sprite.x + sprite.w]
        region[mask] = sprite.class_id
        flow_region = flow[sprite.y : sprite.y + sprite.h, sprite.x : sprite.x + sprite.w]
        flow_region[mask] = (sprite.vx, sprite.vy)

    if shift is not None:
        noise_rng = np.random.default_rng([seed, _SHIFT_NOISE_STREAM])
        noise_field = (
            noise_rng.normal(0.0, shift.noise_sigma, size=(h, w, 3)).astype(np.float32)
            if shift.noise_sigma > 0
            else np.float32(0.0)
        )
        gain = np.float32(shift.gain)
        frame_t = gain * 255.0 * (frame_t.clip(0, 255) / 255.0) ** np.float32(shift.gamma) + noise_field
        frame_t1 = gain * 255.0 * (frame_t1.clip(0, 255) / 255.0) ** np.float32(shift.gamma) + noise_field

    return ScenePair(
        frame_t=imagecore.quantize_u8(frame_t),
        frame_t1=imagecore.quantize_u8(frame_t1),
        labels=labels,
        flow=flow,
    )


def _draw(frame: np.ndarray, patch: np.ndarray, mask: np.ndarray, x: int, y: int) -> None:
    region = frame[y : y + patch.shape[0], x : x + patch.shape[1]]
    region[mask] = patch[mask]


def gen_dataset(
    spec: SceneSpec,
    shift_source: DomainShift | None,
    shift_target: DomainShift | None,
    n_source: int,
    n_target: int,
    seed: int,
    out_dir: str | Path,
) -> dict:
    """Write a two-domain dataset; target labels land in a quarantined
    eval-only directory. Per-image seeds are seed + running image index."""
    if n_source < 1 or n_target < 1:
        raise ValueError("need at least one source and one target scene")
    root = Path(out_dir)
    for split in ("source", "target"):
        (root / split / "rgb").mkdir(parents=True, exist_ok=True)
        (root / split / "flow_gt").mkdir(parents=True, exist_ok=True)
    (root / "source" / "labels").mkdir(parents=True, exist_ok=True)
    (root / "target" / "eval_only").mkdir(parents=True, exist_ok=True)

    for i in range(n_source):
        pair = gen_scene_pair(spec, shift_source, seed + i)
        _write_pair(root / "source", "labels", i, pair)
    for j in range(n_target):
        pair = gen_scene_pair(spec, shift_target, seed + n_source + j)
        _write_pair(root / "target", "eval_only", j, pair)

    names = class_names(spec.n_classes)
    manifest = {
        "version": 1,
        "seed": seed,
        "width": spec.width,
        "height": spec.height,
        "n_classes": spec.n_classes,
        "classes": [
            {"id": c, "name": names[c], "moving": c in MOVING_CLASS_IDS}
            for c in range(spec.n_classes)
        ],
        "n_source": n_source,
        "n_target": n_target,
        "scene_spec": asdict(spec),
        "shift_source": None if shift_source is None else asdict(shift_source),
        "shift_target": None if shift_target is None else asdict(shift_target),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _write_pair(split_dir: Path, label_subdir: str, index: int, pair: ScenePair) -> None:
    imagecore.write_ppm(split_dir / "rgb" / f"{index}_t0.ppm", pair.frame_t)
    imagecore.write_ppm(split_dir / "rgb" / f"{index}_t1.ppm", pair.frame_t1)
    imagecore.write_pgm(split_dir / label_subdir / f"{index}.pgm", pair.labels)
    imagecore.write_flo(split_dir / "flow_gt" / f"{index}.flo", pair.flow)


def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {dataset_dir!s}")
    return json.loads(path.read_text())
