"""Synthetic paired camera / radar-cube scenes for desk-scale training and eval.

Rendering is deliberately crude: camera frames are flat backgrounds with
filled box silhouettes, radar cubes are a noise floor plus one Gaussian
power blob per object. The point is a fully controlled ground truth for
exercising the detection pipeline end to end, not photorealism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image, ImageDraw

from .boxes import CLASS_NAMES, Box3D
from .camera import CameraFrame, forward_camera_rotation, project_ego_points
from .evaluation import CONDITIONS, DAYTIMES, iou_bev
from .geometry import yaw_rotation
from .radar import RadarCube

# Per-class (lo, hi) metre ranges for length, width, height.
CLASS_SIZE_RANGES = {
    "car": ((3.6, 4.8), (1.6, 2.0), (1.4, 1.8)),
    "pedestrian": ((0.5, 0.8), (0.5, 0.8), (1.5, 1.9)),
    "cyclist": ((1.5, 2.0), (0.5, 0.8), (1.4, 1.8)),
}

# Camera silhouette fill per class (RGB in [0, 1]).
CLASS_COLORS = {
    "car": (0.85, 0.25, 0.20),
    "pedestrian": (0.20, 0.75, 0.30),
    "cyclist": (0.25, 0.35, 0.90),
}

BACKGROUND_COLOR = (0.45, 0.45, 0.45)
NIGHT_FACTOR = 0.25

# condition -> (camera contrast reduction, camera noise std, radar noise multiplier)
WEATHER_EFFECTS = {
    "normal": (0.0, 0.0, 1.0),
    "overcast": (0.2, 0.0, 1.1),
    "fog": (0.6, 0.02, 1.5),
    "rain": (0.3, 0.05, 2.0),
    "sleet": (0.4, 0.06, 2.5),
    "light_snow": (0.3, 0.04, 2.0),
    "heavy_snow": (0.5, 0.08, 3.0),
}

MAX_PLACEMENT_ATTEMPTS = 200


@dataclass
class SensorRig:
    """Geometry of the co-located camera and radar sensors.

    FoV fields store the half-angle in radians, so bounds are symmetric
    about zero by construction.
    """

    fov_azimuth: float = math.radians(50.0)
    fov_elevation: float = math.radians(15.0)
    range_max: float = 72.0
    range_bins: int = 64
    azimuth_bins: int = 32
    elevation_bins: int = 16
    doppler_bins: int = 8
    doppler_max: float = 10.0
    image_height: int = 192
    image_width: int = 320

    def __post_init__(self):
        if self.range_max <= 0:
            raise ValueError("range_max must be positive")
        if self.fov_azimuth <= 0 or self.fov_elevation <= 0:
            raise ValueError("field-of-view half-angles must be positive")
        for name in ("range_bins", "azimuth_bins", "elevation_bins", "doppler_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def range_axis(self) -> np.ndarray:
        return (np.arange(self.range_bins) + 0.5) * self.range_max / self.range_bins

    def azimuth_axis(self) -> np.ndarray:
        return self._centered_axis(self.azimuth_bins, self.fov_azimuth)

    def elevation_axis(self) -> np.ndarray:
        return self._centered_axis(self.elevation_bins, self.fov_elevation)

    def doppler_axis(self) -> np.ndarray:
        return self._centered_axis(self.doppler_bins, self.doppler_max)

    @staticmethod
    def _centered_axis(bins: int, half_span: float) -> np.ndarray:
        return (np.arange(bins) + 0.5) * 2.0 * half_span / bins - half_span

    def camera_intrinsics(self) -> np.ndarray:
        """Pinhole matrix whose horizontal FoV matches the radar azimuth FoV."""
        fx = (self.image_width / 2.0) / math.tan(self.fov_azimuth)
        return np.array([
            [fx, 0.0, self.image_width / 2.0],
            [0.0, fx, self.image_height / 2.0],
            [0.0, 0.0, 1.0],
        ])

    def camera_extrinsics(self) -> tuple[np.ndarray, np.ndarray]:
        return forward_camera_rotation(), np.zeros(3)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SensorRig":
        return cls(**d)


@dataclass
class SceneConfig:
    """Knobs of the random scene generator."""

    min_objects: int = 1
    max_objects: int = 5
    condition_weights: dict = field(default_factory=lambda: {"normal": 1.0})
    daytime_weights: dict = field(default_factory=lambda: {"day": 0.8, "night": 0.2})
    min_range: float = 5.0
    max_range_fraction: float = 0.85
    max_azimuth_fraction: float = 0.9
    max_bev_overlap: float = 0.1
    noise_floor: float = 0.01
    blob_peak: float = 1.0
    blob_sigma_range: float = 1.5
    blob_sigma_azimuth: float = math.radians(3.0)
    blob_sigma_elevation: float = math.radians(4.0)
    blob_sigma_doppler: float = 0.8
    edge_artifact_level: float = 2.0
    edge_artifact_bins: int = 3

    def __post_init__(self):
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        for weights, allowed in ((self.condition_weights, CONDITIONS),
                                 (self.daytime_weights, DAYTIMES)):
            for tag in weights:
                if tag not in allowed:
                    raise ValueError(f"unknown tag {tag!r}; allowed: {allowed}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Scene:
    """Ground-truth objects plus the tags that drive condition-aware rendering."""

    objects: list[Box3D]
    radial_velocities: np.ndarray
    condition: str
    daytime: str
    rng_seed: int

    def __post_init__(self):
        self.radial_velocities = np.asarray(self.radial_velocities, dtype=np.float64)
        if len(self.radial_velocities) != len(self.objects):
            raise ValueError("one radial velocity per object required")


def _weighted_choice(rng: np.random.Generator, weights: dict) -> str:
    tags = sorted(weights)
    p = np.array([weights[t] for t in tags], dtype=np.float64)
    p = p / p.sum()
    return tags[rng.choice(len(tags), p=p)]


def generate_scene(seed: int, config: SceneConfig, rig: SensorRig,
                   condition: str | None = None, daytime: str | None = None) -> Scene:
    """Draw a random scene. Deterministic for a given (seed, config, rig).

    Objects are rejected and re-drawn until their BEV footprints overlap no
    more than `config.max_bev_overlap` with everything already placed;
    an unsatisfiable layout raises after a bounded number of attempts.
    """
    rng = np.random.default_rng([seed, 0])
    condition = condition or _weighted_choice(rng, config.condition_weights)
    daytime = daytime or _weighted_choice(rng, config.daytime_weights)

    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects: list[Box3D] = []
    velocities: list[float] = []
    for _ in range(n_objects):
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            name = CLASS_NAMES[rng.integers(0, len(CLASS_NAMES))]
            (l_lo, l_hi), (w_lo, w_hi), (h_lo, h_hi) = CLASS_SIZE_RANGES[name]
            size = np.array([rng.uniform(l_lo, l_hi), rng.uniform(w_lo, w_hi),
                             rng.uniform(h_lo, h_hi)])
            r = rng.uniform(config.min_range, config.max_range_fraction * rig.range_max)
            az = rng.uniform(-1.0, 1.0) * config.max_azimuth_fraction * rig.fov_azimuth
            center = np.array([r * math.cos(az), r * math.sin(az), size[2] / 2.0])
            heading = rng.uniform(-math.pi, math.pi)
            box = Box3D(center=center, size=size, heading=heading,
                        class_id=CLASS_NAMES.index(name))
            if all(iou_bev(box, other) <= config.max_bev_overlap for other in objects):
                objects.append(box)
                velocities.append(float(rng.uniform(-rig.doppler_max, rig.doppler_max)))
                break
        else:
            raise RuntimeError(
                f"could not place {n_objects} non-overlapping objects (seed {seed})")

    return Scene(objects=objects, radial_velocities=np.array(velocities),
                 condition=condition, daytime=daytime, rng_seed=seed)


def box_corners_3d(box: Box3D) -> np.ndarray:
    """All eight corners (8, 3) of an oriented box in ego coordinates."""
    l, w, h = box.size
    signs = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)])
    local = signs * np.array([l / 2, w / 2, h / 2])
    rot = np.eye(3)
    rot[:2, :2] = yaw_rotation(box.heading)
    return local @ rot.T + box.center


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain hull of (n, 2) points, CCW without repeats."""
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.array(pts)

    def half(points_iter):
        out = []
        for p in points_iter:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.array(lower[:-1] + upper[:-1])


def render_camera(scene: Scene, rig: SensorRig) -> CameraFrame:
    """Rasterize box silhouettes with class colors onto a flat background.

    Objects are drawn far-to-near so closer silhouettes occlude. The night
    tag darkens the frame; weather tags reduce contrast and add pixel noise.
    """
    img = Image.new("RGB", (rig.image_width, rig.image_height),
                    tuple(int(round(c * 255)) for c in BACKGROUND_COLOR))
    draw = ImageDraw.Draw(img)
    intr = rig.camera_intrinsics()
    rot, trans = rig.camera_extrinsics()

    order = np.argsort([-box.range for box in scene.objects])
    for idx in order:
        box = scene.objects[idx]
        corners = box_corners_3d(box)
        uv, valid = project_ego_points(corners, intr, rot, trans,
                                       rig.image_width, rig.image_height)
        # Keep points in front of the camera even if slightly off-image so
        # partially visible boxes still draw; PIL clips to the canvas.
        cam_z = (corners @ rot.T + trans)[:, 2]
        uv = uv[cam_z > 1e-6]
        if len(uv) < 3:
            continue
        hull = _convex_hull(uv)
        if len(hull) < 3:
            continue
        color = CLASS_COLORS[CLASS_NAMES[box.class_id]]
        draw.polygon([(float(u), float(v)) for u, v in hull],
                     fill=tuple(int(round(c * 255)) for c in color))

    pixels = np.asarray(img, dtype=np.float64) / 255.0
    contrast, noise_std, _ = WEATHER_EFFECTS[scene.condition]
    if contrast > 0:
        pixels = pixels * (1 - contrast) + pixels.mean() * contrast
    if noise_std > 0:
        rng = np.random.default_rng([scene.rng_seed, 1])
        pixels = pixels + rng.normal(0.0, noise_std, pixels.shape)
    if scene.daytime == "night":
        pixels = pixels * NIGHT_FACTOR
    pixels = np.clip(pixels, 0.0, 1.0)

    return CameraFrame(pixels=pixels, intrinsics=intr, rotation=rot, translation=trans)


def render_radar(scene: Scene, rig: SensorRig, config: SceneConfig) -> RadarCube:
    """Noise floor plus one separable Gaussian power blob per object.

    Each blob peaks at the object's (range, azimuth, elevation) position
    with its Doppler profile centred on the radial velocity. Leading and
    trailing range bins get strong edge artifacts so that trimming them is
    functionally necessary. Weather raises the noise floor.
    """
    r_ax = rig.range_axis()
    az_ax = rig.azimuth_axis()
    el_ax = rig.elevation_axis()
    d_ax = rig.doppler_axis()
    shape = (rig.range_bins, rig.azimuth_bins, rig.elevation_bins, rig.doppler_bins)

    rng = np.random.default_rng([scene.rng_seed, 2])
    noise_scale = config.noise_floor * WEATHER_EFFECTS[scene.condition][2]
    power = rng.exponential(noise_scale, shape) if noise_scale > 0 else np.zeros(shape)

    m = min(config.edge_artifact_bins, rig.range_bins // 2)
    if config.edge_artifact_level > 0 and m > 0:
        edge_shape = (m,) + shape[1:]
        power[:m] += rng.exponential(config.edge_artifact_level, edge_shape)
        power[-m:] += rng.exponential(config.edge_artifact_level, edge_shape)

    for box, v_r in zip(scene.objects, scene.radial_velocities):
        r = box.range
        az = math.atan2(box.center[1], box.center[0])
        el = math.asin(np.clip(box.center[2] / max(r, 1e-9), -1.0, 1.0))
        amp = config.blob_peak * float(np.clip(box.size[0] * box.size[1] / 4.0, 0.3, 3.0))
        g_r = np.exp(-0.5 * ((r_ax - r) / config.blob_sigma_range) ** 2)
        g_az = np.exp(-0.5 * ((az_ax - az) / config.blob_sigma_azimuth) ** 2)
        g_el = np.exp(-0.5 * ((el_ax - el) / config.blob_sigma_elevation) ** 2)
        g_d = np.exp(-0.5 * ((d_ax - v_r) / config.blob_sigma_doppler) ** 2)
        power += amp * np.einsum("r,a,e,d->raed", g_r, g_az, g_el, g_d)

    return RadarCube(power=power, range_axis=r_ax, azimuth_axis=az_ax,
                     elevation_axis=el_ax, doppler_axis=d_ax)
