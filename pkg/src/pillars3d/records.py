"""Line-delimited detection records and a KITTI-label-style text export."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

from .geometry import Detection

_FIELDS = ("frame", "class_name", "box", "score")


@dataclass(frozen=True)
class DetectionRecord:
    frame: str
    class_name: str
    box: Tuple[float, ...]  # (x, y, z, l, w, h, yaw)
    score: float

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        if len(box) != 7 or not all(math.isfinite(v) for v in box):
            raise ValueError(f"box must be 7 finite numbers, got {self.box}")
        if not 0.0 <= float(self.score) <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "score", float(self.score))

    def to_json(self) -> str:
        # repr-exact floats keep the round trip lossless
        return json.dumps({"frame": self.frame, "class_name": self.class_name, "box": list(self.box),
                           "score": self.score})

    @classmethod
    def from_json(cls, line: str) -> "DetectionRecord":
        data = json.loads(line)
        if set(data) != set(_FIELDS):
            raise ValueError(f"record keys {sorted(data)} != {sorted(_FIELDS)}")
        return cls(str(data["frame"]), str(data["class_name"]), tuple(data["box"]), data["score"])

    def to_kitti_line(self) -> str:
        """``type trunc occ alpha bbox(4) h w l x y z ry score`` in the LiDAR frame."""
        x, y, z, l, w, h, yaw = self.box
        return (f"{self.class_name} -1 -1 -10 -1 -1 -1 -1 {h:.4f} {w:.4f} {l:.4f} "
                f"{x:.4f} {y:.4f} {z:.4f} {yaw:.4f} {self.score:.6f}")


def records_from_detections(frame: str, detections: Sequence[Detection],
                            class_names: Sequence[str]) -> List[DetectionRecord]:
    return [DetectionRecord(frame, class_names[d.class_id], tuple(d.box.to_array()), d.score)
            for d in detections]


def dumps(records: Iterable[DetectionRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def loads(text: str) -> List[DetectionRecord]:
    return [DetectionRecord.from_json(line) for line in text.splitlines() if line.strip()]
