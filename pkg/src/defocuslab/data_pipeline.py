"""Dataset indexing, splitting and aligned patch sampling.

A layout maps each raster role to a glob pattern containing one ``{id}``
placeholder. The default layout follows the common DPDD release
(``*_c/source``, ``*_c/target``, ``*_l/source``, ``*_r/source``); the
``synthetic`` layout matches directories written by ``generate_scene`` exports.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CropError, DatasetError, LayoutError
from .forward_reblur import SceneSample
from .io import read_kv, read_map, read_png

ROLES = ("blurred", "aif", "dp_left", "dp_right", "gt_map")
SPLITS = ("train", "val", "test")
# DPDD: 350 / 74 / 76 of 500 scenes
DEFAULT_SPLIT_COUNTS = (350, 74, 76)
INDEX_VERSION = 1

DPDD_LAYOUT = {
    "blurred": "*_c/source/{id}.png",
    "aif": "*_c/target/{id}.png",
    "dp_left": "*_l/source/{id}.png",
    "dp_right": "*_r/source/{id}.png",
}
SYNTHETIC_LAYOUT = {
    "blurred": "{id}/oof.png",
    "aif": "{id}/aif.png",
    "dp_left": "{id}/dp_l.png",
    "dp_right": "{id}/dp_r.png",
    "gt_map": "{id}/gt_map.pfm",
}
LAYOUTS = {"dpdd": DPDD_LAYOUT, "synthetic": SYNTHETIC_LAYOUT}


@dataclass
class SceneRecord:
    scene_id: str
    paths: dict
    split: str = ""


@dataclass
class DatasetIndex:
    root: str
    records: list
    rejected: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict:
        return {s: len(self.split(s)) for s in SPLITS}

    def to_json(self) -> str:
        payload = {"version": INDEX_VERSION, "root": self.root, "rejected": self.rejected,
                   "records": [asdict(r) for r in self.records]}
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetIndex":
        payload = json.loads(text)
        if payload.get("version") != INDEX_VERSION:
            raise DatasetError(f"unsupported index version {payload.get('version')}")
        return cls(payload["root"], [SceneRecord(**r) for r in payload["records"]], payload.get("rejected", {}))


def resolve_layout(layout) -> dict:
    if layout is None:
        return dict(DPDD_LAYOUT)
    if isinstance(layout, (str, Path)):
        if str(layout) in LAYOUTS:
            return dict(LAYOUTS[str(layout)])
        if not Path(layout).is_file():
            raise LayoutError(f"unknown layout {str(layout)!r}; choose from {sorted(LAYOUTS)} or give a key = value file")
        layout = read_kv(layout)
    layout = dict(layout)
    for role in ("blurred", "aif", "dp_left", "dp_right"):
        if role not in layout:
            raise LayoutError(f"layout is missing role {role!r}")
    for role, pattern in layout.items():
        if role not in ROLES:
            raise LayoutError(f"unknown role {role!r}")
        if pattern.count("{id}") != 1:
            raise LayoutError(f"pattern for {role!r} needs exactly one {{id}}: {pattern!r}")
    return layout


def _id_regex(pattern: str) -> re.Pattern:
    parts = pattern.split("{id}")
    esc = [re.escape(p).replace(r"\*", "[^/]*").replace(r"\?", "[^/]") for p in parts]
    return re.compile("^" + esc[0] + "(?P<id>[^/]+)" + esc[1] + "$")


def assign_splits(scene_ids, counts=DEFAULT_SPLIT_COUNTS, seed: int = 0) -> dict:
    """Deterministic split assignment.

    Scenes are ordered by a seeded hash of their id and cut into
    train/val/test with sizes proportional to ``counts`` (exact for 500).
    """
    ids = sorted(scene_ids)
    n = len(ids)
    total = sum(counts)
    n_train = int(round(n * counts[0] / total))
    n_val = int(round(n * counts[1] / total))
    n_val = min(n_val, n - n_train)
    key = lambda s: hashlib.sha256(f"{seed}:{s}".encode()).hexdigest()
    ordered = sorted(ids, key=key)
    out = {}
    for i, sid in enumerate(ordered):
        out[sid] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    return out


def index_dataset(root, layout=None, split_seed: int = 0, split_counts=DEFAULT_SPLIT_COUNTS) -> DatasetIndex:
    """Scan ``root`` and build a sorted, split index. Incomplete scenes are rejected."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    layout = resolve_layout(layout)
    rx = _id_regex(layout["blurred"])
    found = {}
    for p in sorted(root.glob(layout["blurred"].replace("{id}", "*"))):
        m = rx.match(p.relative_to(root).as_posix())
        if m:
            found.setdefault(m.group("id"), []).append(p)

    records, rejected = [], {}
    for sid in sorted(found):
        if len(found[sid]) > 1:
            raise LayoutError(f"scene {sid!r}: {len(found[sid])} files match role 'blurred'")
        paths = {"blurred": str(found[sid][0])}
        missing = []
        for role, pattern in layout.items():
            if role == "blurred":
                continue
            hits = sorted(root.glob(pattern.replace("{id}", glob_escape(sid))))
            if len(hits) > 1:
                raise LayoutError(f"scene {sid!r}: {len(hits)} files match role {role!r}")
            if not hits:
                missing.append(role)
            else:
                paths[role] = str(hits[0])
        if missing:
            rejected[sid] = f"missing {', '.join(missing)}"
            continue
        records.append(SceneRecord(sid, paths))
    if not records:
        raise DatasetError(f"no complete scenes found under {root}")
    splits = assign_splits([r.scene_id for r in records], split_counts, split_seed)
    for r in records:
        r.split = splits[r.scene_id]
    return DatasetIndex(str(root), records, rejected)


def glob_escape(s: str) -> str:
    return re.sub(r"([*?\[])", r"[\1]", s)


def load_index(root, layout=None, split_seed=0, split_counts=DEFAULT_SPLIT_COUNTS, cache_dir=None) -> DatasetIndex:
    """Index with an optional on-disk manifest cache keyed by root, layout, seed and counts."""
    if cache_dir is None:
        return index_dataset(root, layout, split_seed, split_counts)
    key_src = [str(Path(root).resolve()), resolve_layout(layout), split_seed, list(split_counts)]
    key = hashlib.sha256(json.dumps(key_src, sort_keys=True).encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"index-{key}.json"
    if path.is_file():
        try:
            index = DatasetIndex.from_json(path.read_text())
            if all(Path(p).exists() for r in index.records for p in r.paths.values()):
                return index
        except (DatasetError, ValueError, KeyError):
            pass
    index = index_dataset(root, layout, split_seed, split_counts)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(index.to_json())
    return index


def _chw(arr) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def load_record(record: SceneRecord) -> SceneSample:
    p = record.paths
    gt = torch.from_numpy(np.ascontiguousarray(read_map(p["gt_map"]))) if "gt_map" in p else None
    return SceneSample(
        aif=_chw(read_png(p["aif"])),
        oof=_chw(read_png(p["blurred"])),
        dp_left=_chw(read_png(p["dp_left"])),
        dp_right=_chw(read_png(p["dp_right"])),
        gt_map=gt,
        scene_id=record.scene_id,
    )


def crop_sample(sample: SceneSample, top: int, left: int, height: int, width: int) -> SceneSample:
    window = (slice(top, top + height), slice(left, left + width))
    kw = {}
    for name, t in sample.rasters().items():
        kw[name] = t[..., window[0], window[1]]
    return SceneSample(**kw, scene_id=sample.scene_id)


def hflip_sample(sample: SceneSample) -> SceneSample:
    """Mirror every raster; the DP views swap because the half apertures mirror too."""
    r = {k: v.flip(-1) for k, v in sample.rasters().items()}
    r["dp_left"], r["dp_right"] = r["dp_right"], r["dp_left"]
    return SceneSample(**r, scene_id=sample.scene_id)


def sample_patch(sample, size, rng: np.random.Generator, hflip_prob: float = 0.0) -> SceneSample:
    """Same random crop for every raster, optionally followed by a horizontal flip."""
    if isinstance(sample, SceneRecord):
        sample = load_record(sample)
    ph, pw = (size, size) if np.isscalar(size) else size
    h, w = sample.aif.shape[-2:]
    if ph > h or pw > w or ph < 1 or pw < 1:
        raise CropError(f"patch {ph}x{pw} does not fit image {h}x{w}")
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    out = crop_sample(sample, top, left, ph, pw)
    if hflip_prob > 0 and rng.random() < hflip_prob:
        out = hflip_sample(out)
    return out
