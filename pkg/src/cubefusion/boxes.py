"""Oriented 3D box type shared by the synthetic generator, detector, and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle, yaw_rotation

CLASS_NAMES = ("car", "pedestrian", "cyclist")


@dataclass
class Box3D:
    """Oriented 3D box: centre (x, y, z) m, size (l, w, h) m, heading rad.

    `score` is only meaningful on predictions and stays None on ground truth.
    """

    center: np.ndarray
    size: np.ndarray
    heading: float
    class_id: int
    score: float | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError(f"box size components must be positive, got {self.size}")
        self.heading = float(wrap_angle(float(self.heading)))
        self.class_id = int(self.class_id)
        if self.score is not None:
            self.score = float(self.score)
            if not (0.0 <= self.score <= 1.0):
                raise ValueError(f"score must be in [0, 1], got {self.score}")

    @property
    def range(self) -> float:
        """Distance of the box centre from the ego origin."""
        return float(np.linalg.norm(self.center))

    def bev_corners(self) -> np.ndarray:
        """The four BEV footprint corners (4, 2) in ego (x, y), CCW order."""
        l, w = self.size[0], self.size[1]
        local = np.array(
            [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
        )
        return local @ yaw_rotation(self.heading).T + self.center[:2]

    def z_interval(self) -> tuple[float, float]:
        h = self.size[2]
        return float(self.center[2] - h / 2), float(self.center[2] + h / 2)

    def to_dict(self) -> dict:
        d = {
            "center": [float(v) for v in self.center],
            "size": [float(v) for v in self.size],
            "heading": self.heading,
            "class_id": self.class_id,
        }
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(
            center=np.array(d["center"], dtype=np.float64),
            size=np.array(d["size"], dtype=np.float64),
            heading=float(d["heading"]),
            class_id=int(d["class_id"]),
            score=d.get("score"),
        )


@dataclass
class DetectionSet:
    """Per-frame set of scored predicted boxes."""

    boxes: list[Box3D] = field(default_factory=list)

    def __post_init__(self):
        for b in self.boxes:
            if b.score is None:
                raise ValueError("detections must carry scores")

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def to_list(self) -> list[dict]:
        return [b.to_dict() for b in self.boxes]

    @classmethod
    def from_list(cls, items: list[dict]) -> "DetectionSet":
        return cls(boxes=[Box3D.from_dict(d) for d in items])
