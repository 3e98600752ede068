"""Cross-domain label harmonization.

A label map sends raw dataset class ids into a shared, merged class space;
classes without a counterpart in the other domain map to ``"ignore"``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Dict, List

import numpy as np

from .errors import LabelMapError
from .pointcloud import IGNORE

_FIELDS = {"name", "classes", "map"}


@dataclass(frozen=True)
class LabelMap:
    name: str
    classes: tuple
    entries: Dict[int, int]        # raw id -> merged id or IGNORE

    @property
    def num_classes(self):
        return len(self.classes)

    def lookup_table(self):
        size = max(self.entries) + 1 if self.entries else 0
        table = np.full(size, -2, dtype=np.int64)
        for raw, merged in self.entries.items():
            table[raw] = merged
        return table

    def to_json(self) -> str:
        doc = {
            "name": self.name,
            "classes": list(self.classes),
            "map": {str(k): ("ignore" if v == IGNORE else v) for k, v in sorted(self.entries.items())},
        }
        return json.dumps(doc, indent=2)


def parse_label_map(text: str) -> LabelMap:
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise LabelMapError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise LabelMapError("label map must be a JSON object")
    for key in doc:
        if key not in _FIELDS:
            raise LabelMapError(f"unknown field {key!r}", key)
    for key in _FIELDS:
        if key not in doc:
            raise LabelMapError(f"missing field {key!r}", key)
    name = doc["name"]
    if not isinstance(name, str):
        raise LabelMapError("'name' must be a string", "name")
    classes = doc["classes"]
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        raise LabelMapError("'classes' must be a list of strings", "classes")
    raw_map = doc["map"]
    if not isinstance(raw_map, dict):
        raise LabelMapError("'map' must be an object", "map")

    entries: Dict[int, int] = {}
    for key, value in raw_map.items():
        try:
            raw = int(key)
        except ValueError:
            raise LabelMapError(f"raw id {key!r} is not an integer", key) from None
        if raw < 0:
            raise LabelMapError(f"raw id {key!r} is negative", key)
        if raw in entries:
            raise LabelMapError(f"duplicate raw id {key!r}", key)
        if value == "ignore":
            entries[raw] = IGNORE
        elif isinstance(value, int) and not isinstance(value, bool) and value >= 0:
            entries[raw] = value
        else:
            raise LabelMapError(f"bad merged id {value!r} for raw id {key!r}", key)

    merged = sorted({v for v in entries.values() if v != IGNORE})
    if merged != list(range(len(merged))):
        raise LabelMapError(f"gap in merged ids: {merged}", "map")
    if len(merged) != len(classes):
        raise LabelMapError(
            f"{len(classes)} class names for {len(merged)} merged ids", "classes")
    return LabelMap(name, tuple(classes), entries)


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise LabelMapError(f"duplicate raw id {key!r}", key)
        seen[key] = value
    return seen


def load_label_map(path) -> LabelMap:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_label_map(fh.read())


def sample_label_map(name: str) -> LabelMap:
    """One of the label maps shipped under ``pcltta/data/labelmaps``."""
    text = resources.files("pcltta.data.labelmaps").joinpath(f"{name}.json").read_text("utf-8")
    return parse_label_map(text)


def identity_map(classes: List[str], name: str = "identity") -> LabelMap:
    return LabelMap(name, tuple(classes), {i: i for i in range(len(classes))})


def remap_labels(labels: np.ndarray, label_map: LabelMap) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full(labels.shape, IGNORE, dtype=np.int64)
    valid = labels >= 0
    if not valid.any():
        return out
    table = label_map.lookup_table()
    raw = labels[valid]
    missing = raw[(raw >= len(table))]
    if len(missing) == 0:
        mapped = table[raw]
        missing = raw[mapped == -2]
    if len(missing):
        raise ValueError(f"raw label {int(missing[0])} is not in label map {label_map.name!r}")
    out[valid] = mapped
    return out
