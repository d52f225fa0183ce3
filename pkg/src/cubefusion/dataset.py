"""On-disk dataset of paired camera/radar scenes.

Layout::

    <root>/
        manifest.json
        scene_00000/
            cube.rcub      raw 4D radar power
            camera.png     8-bit RGB frame
            boxes.json     ground-truth boxes, velocities, tags
            rig.json       sensor geometry (duplicated per scene for portability)
        scene_00001/
        ...
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import Box3D
from .camera import CameraFrame
from .radar import load_cube, save_cube
from .synthetic import (Scene, SceneConfig, SensorRig, generate_scene,
                        render_camera, render_radar)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def allocate_quotas(weights: dict[str, float], total: int) -> dict[str, int]:
    """Integer counts per tag summing to `total`, via largest remainder.

    Realized mixes stay within one scene of the exact weighted share, so
    small datasets still contain every requested tag where possible.
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    tags = sorted(weights)
    if not tags:
        raise ValueError("empty weights")
    w = np.array([weights[t] for t in tags], dtype=np.float64)
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative and sum > 0")
    exact = w / w.sum() * total
    base = np.floor(exact).astype(int)
    frac = exact - base
    for i in np.argsort(-frac, kind="stable")[: total - base.sum()]:
        base[i] += 1
    return {t: int(c) for t, c in zip(tags, base)}


def _tag_sequence(weights: dict[str, float], total: int,
                  rng: np.random.Generator) -> list[str]:
    quotas = allocate_quotas(weights, total)
    seq = [t for t in sorted(quotas) for _ in range(quotas[t])]
    rng.shuffle(seq)
    return seq


def scene_seed(dataset_seed: int, index: int) -> int:
    """Stable per-scene seed derived from the dataset seed."""
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def write_scene(scene_dir: str | Path, scene: Scene, rig: SensorRig,
                config: SceneConfig) -> None:
    """Render a scene and persist all four per-scene files."""
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)

    save_cube(render_radar(scene, rig, config), scene_dir / "cube.rcub")

    frame = render_camera(scene, rig)
    pixels_u8 = np.clip(np.round(frame.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels_u8).save(scene_dir / "camera.png")

    with open(scene_dir / "boxes.json", "w") as fh:
        json.dump({
            "boxes": [b.to_dict() for b in scene.objects],
            "radial_velocities": scene.radial_velocities.tolist(),
            "condition": scene.condition,
            "daytime": scene.daytime,
            "rng_seed": scene.rng_seed,
        }, fh, indent=2)
    with open(scene_dir / "rig.json", "w") as fh:
        json.dump(rig.to_dict(), fh, indent=2)


def generate_dataset(root: str | Path, num_scenes: int, seed: int,
                     config: SceneConfig | None = None,
                     rig: SensorRig | None = None) -> dict:
    """Generate `num_scenes` scenes under `root` and return the manifest.

    Conditions and daytimes are assigned by quota rather than sampled per
    scene, so the realized mix tracks the configured weights even for tiny
    datasets.
    """
    config = config or SceneConfig()
    rig = rig or SensorRig()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([seed, 10])
    conditions = _tag_sequence(config.condition_weights, num_scenes, rng)
    daytimes = _tag_sequence(config.daytime_weights, num_scenes, rng)

    entries = []
    for i in range(num_scenes):
        scene = generate_scene(scene_seed(seed, i), config, rig,
                               condition=conditions[i], daytime=daytimes[i])
        scene_id = f"scene_{i:05d}"
        write_scene(root / scene_id, scene, rig, config)
        entries.append({"id": scene_id, "condition": scene.condition,
                        "daytime": scene.daytime, "num_objects": len(scene.objects)})

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "num_scenes": num_scenes,
        "rig": rig.to_dict(),
        "scene_config": config.to_dict(),
        "scenes": entries,
    }
    with open(root / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_sample(scene_dir: str | Path, rig: SensorRig) -> dict:
    """Load one scene directory into the in-memory sample dict."""
    scene_dir = Path(scene_dir)
    cube = load_cube(scene_dir / "cube.rcub")
    pixels = np.asarray(Image.open(scene_dir / "camera.png"), dtype=np.float64) / 255.0
    rot, trans = rig.camera_extrinsics()
    camera = CameraFrame(pixels=pixels, intrinsics=rig.camera_intrinsics(),
                         rotation=rot, translation=trans)
    with open(scene_dir / "boxes.json") as fh:
        meta = json.load(fh)
    return {
        "scene_id": scene_dir.name,
        "camera": camera,
        "cube": cube,
        "boxes": [Box3D.from_dict(d) for d in meta["boxes"]],
        "condition": meta["condition"],
        "daytime": meta["daytime"],
    }


class CubeDataset:
    """Random-access view over a generated dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / MANIFEST_NAME
        if not manifest_path.exists():
            raise FileNotFoundError(f"no {MANIFEST_NAME} under {self.root}")
        with open(manifest_path) as fh:
            self.manifest = json.load(fh)
        if self.manifest.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version "
                             f"{self.manifest.get('version')!r}")
        self.rig = SensorRig.from_dict(self.manifest["rig"])
        self._ids = [e["id"] for e in self.manifest["scenes"]]

    def __len__(self) -> int:
        return len(self._ids)

    def __getitem__(self, index: int) -> dict:
        return load_sample(self.root / self._ids[index], self.rig)

    def scene_ids(self) -> list[str]:
        return list(self._ids)
