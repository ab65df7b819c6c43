"""Vector-map element containers and JSON Lines interchange."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

CLASSES = ("divider", "boundary", "pedestrian_crossing")
CLOSED_CLASSES = frozenset({"pedestrian_crossing"})
BACKGROUND = len(CLASSES)  # index of the no-object slot in class-probability vectors


@dataclass(eq=False)
class MapElement:
    cls: str
    points: np.ndarray  # (n_pts, 2) metres, ego frame
    closed: bool | None = None

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown map class {self.cls!r}")
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.closed is None:
            self.closed = self.cls in CLOSED_CLASSES
        if not np.all(np.isfinite(self.points)):
            raise ValueError("map element has non-finite points")

    @property
    def label(self) -> int:
        return CLASSES.index(self.cls)

    def __eq__(self, other):
        return (
            isinstance(other, MapElement)
            and self.cls == other.cls
            and self.closed == other.closed
            and np.array_equal(self.points, other.points)
        )

    def to_json(self) -> dict:
        return {"class": self.cls, "points": self.points.tolist()}


@dataclass(eq=False)
class Prediction:
    element: MapElement
    score: float
    probs: np.ndarray = field(default=None)  # foreground classes then background

    def __post_init__(self):
        if self.probs is None:
            self.probs = np.zeros(len(CLASSES) + 1)
            self.probs[self.element.label] = self.score
            self.probs[BACKGROUND] = 1.0 - self.score
        self.probs = np.asarray(self.probs, dtype=np.float64)

    @property
    def cls(self) -> str:
        return self.element.cls

    def to_json(self) -> dict:
        d = self.element.to_json()
        d["score"] = float(self.score)
        return d


def prediction_from_probs(points: np.ndarray, probs: np.ndarray) -> Prediction:
    """Label = most probable foreground class; score = its probability."""
    fg = probs[: len(CLASSES)]
    label = int(np.argmax(fg))
    return Prediction(MapElement(CLASSES[label], points), float(fg[label]), probs)


def write_jsonl(path: str | os.PathLike, scenes: dict[str, list]) -> None:
    with open(path, "w") as fh:
        for sid, items in scenes.items():
            fh.write(json.dumps({"scene_id": sid, "elements": [it.to_json() for it in items]}) + "\n")


def read_jsonl(path: str | os.PathLike) -> dict[str, list]:
    """Scenes of MapElement (no scores) or Prediction (with scores)."""
    out: dict[str, list] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        items = []
        for e in rec["elements"]:
            el = MapElement(e["class"], np.array(e["points"], dtype=np.float64))
            items.append(Prediction(el, float(e["score"])) if "score" in e else el)
        out[str(rec["scene_id"])] = items
    return out


def as_gt_scenes(scenes: Iterable) -> dict[str, list[MapElement]]:
    return {str(s.seed): list(s.elements) for s in scenes}
