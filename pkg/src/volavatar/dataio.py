"""Dataset manifest, frame records and image I/O.

The manifest is a JSON document in the transforms-file style: global
intrinsics and size at the top level, one entry per frame under
``"frames"``. Stored camera matrices use the OpenGL convention
(+Y up, -Z forward) and are converted once on load to the internal
+Z-forward, +Y-down convention. Keys this module does not know are kept
and written back unchanged.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .body_model import PoseParams
from .geometry import Camera

MANIFEST_NAME = "manifest.json"
FORMAT_TAG = "volavatar-dataset"
_FLIP = np.diag([1.0, -1.0, -1.0, 1.0])


class SchemaError(ValueError):
    pass


class FrameCategory(enum.Enum):
    STATIC360 = "STATIC360"
    EXPRESSION_FRONTAL = "EXPRESSION_FRONTAL"
    TALKING_FRONTAL = "TALKING_FRONTAL"


@dataclass
class FrameRecord:
    index: int
    image_path: str
    camera: Camera
    category: FrameCategory
    mask_path: str | None = None
    landmarks: np.ndarray | None = None
    params: PoseParams | None = None
    split: str = "train"
    extra: dict = field(default_factory=dict)


_FRAME_KEYS = {"index", "file_path", "mask_path", "transform_matrix", "fl_x", "fl_y", "cx", "cy", "w", "h",
               "category", "split", "landmarks"}
_TOP_KEYS = {"format", "version", "width", "height", "fl_x", "fl_y", "cx", "cy", "camera_convention", "rig",
             "tracks", "frames"}


def gl_to_internal(c2w_gl):
    return np.asarray(c2w_gl, dtype=np.float64) @ _FLIP


def internal_to_gl(c2w):
    return np.asarray(c2w, dtype=np.float64) @ _FLIP


@dataclass
class Dataset:
    root: str
    width: int
    height: int
    frames: list
    rig: str | None = None
    tracks: str | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def frame(self, index):
        for fr in self.frames:
            if fr.index == index:
                return fr
        raise KeyError(f"no frame with index {index}")

    def path(self, rel):
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def image(self, fr: FrameRecord):
        return read_image(self.path(fr.image_path))

    def mask(self, fr: FrameRecord):
        return None if fr.mask_path is None else read_mask(self.path(fr.mask_path))

    def split(self, name):
        return [f for f in self.frames if f.split == name]

    def by_category(self, cat: FrameCategory, split="train"):
        return [f for f in self.frames if f.category == cat and (split is None or f.split == split)]

    def rig_path(self):
        return None if self.rig is None else self.path(self.rig)

    def attach_tracks(self, tracks):
        """Set per-frame parameters from a list of ``FrameTrack``-like records."""
        by = {t.frame: t.params for t in tracks}
        for fr in self.frames:
            if fr.index in by:
                fr.params = by[fr.index]


def _camera_from(entry, top, where):
    def get(k):
        if k in entry:
            return entry[k]
        if k in top:
            return top[k]
        raise SchemaError(f"{where}: missing '{k}'")

    try:
        m = np.array(entry["transform_matrix"], dtype=np.float64)
    except KeyError:
        raise SchemaError(f"{where}: missing 'transform_matrix'") from None
    if m.shape != (4, 4):
        raise SchemaError(f"{where}.transform_matrix: expected 4x4, got {m.shape}")
    conv = top.get("camera_convention", "opengl")
    c2w = gl_to_internal(m) if conv == "opengl" else m
    try:
        return Camera(c2w, float(get("fl_x")), float(get("fl_y")), float(get("cx")), float(get("cy")),
                      int(entry.get("w", top.get("width"))), int(entry.get("h", top.get("height"))))
    except ValueError as e:
        raise SchemaError(f"{where}: {e}") from None


def camera_entry(cam: Camera):
    return {"transform_matrix": internal_to_gl(cam.c2w).tolist(), "fl_x": cam.fl_x, "fl_y": cam.fl_y,
            "cx": cam.cx, "cy": cam.cy, "w": int(cam.width), "h": int(cam.height)}


def load_dataset(path, check_files=True) -> Dataset:
    """Load and validate a manifest (file path or dataset directory)."""
    mpath = os.path.join(path, MANIFEST_NAME) if os.path.isdir(path) else path
    root = os.path.dirname(os.path.abspath(mpath))
    try:
        with open(mpath) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"manifest not found: {mpath}") from None
    except json.JSONDecodeError as e:
        raise SchemaError(f"{mpath}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise SchemaError("manifest: top level must be an object")
    for k in ("width", "height", "frames"):
        if k not in doc:
            raise SchemaError(f"manifest.{k}: missing")
    frames = []
    seen = set()
    for i, e in enumerate(doc["frames"]):
        where = f"manifest.frames[{i}]"
        if "file_path" not in e:
            raise SchemaError(f"{where}: missing 'file_path'")
        idx = int(e.get("index", i))
        if idx in seen:
            raise SchemaError(f"{where}.index: duplicate frame index {idx}")
        seen.add(idx)
        try:
            cat = FrameCategory(e.get("category", ""))
        except ValueError:
            raise SchemaError(f"{where}.category: unknown category {e.get('category')!r}") from None
        lm = e.get("landmarks")
        rec = FrameRecord(idx, e["file_path"], _camera_from(e, doc, where), cat, e.get("mask_path"),
                          None if lm is None else np.asarray(lm, dtype=np.float64).reshape(-1, 2),
                          None, e.get("split", "train"), {k: v for k, v in e.items() if k not in _FRAME_KEYS})
        if check_files:
            img = os.path.join(root, rec.image_path)
            if not os.path.exists(img):
                raise SchemaError(f"{where} (frame {idx}): image file not found: {rec.image_path}")
            if rec.mask_path and not os.path.exists(os.path.join(root, rec.mask_path)):
                raise SchemaError(f"{where} (frame {idx}): mask file not found: {rec.mask_path}")
        frames.append(rec)
    ds = Dataset(root, int(doc["width"]), int(doc["height"]), frames, doc.get("rig"), doc.get("tracks"),
                 {k: v for k, v in doc.items() if k not in _TOP_KEYS})
    if ds.tracks:
        from .tracking import load_tracks
        tp = ds.path(ds.tracks)
        if os.path.exists(tp):
            ds.attach_tracks(load_tracks(tp))
    return ds


def save_dataset(ds: Dataset, path=None):
    mpath = path or os.path.join(ds.root, MANIFEST_NAME)
    doc = {"format": FORMAT_TAG, "version": 1, "width": ds.width, "height": ds.height,
           "camera_convention": "opengl"}
    if ds.rig is not None:
        doc["rig"] = ds.rig
    if ds.tracks is not None:
        doc["tracks"] = ds.tracks
    doc.update(ds.extra)
    frames = []
    for fr in ds.frames:
        e = {"index": fr.index, "file_path": fr.image_path, "category": fr.category.value, "split": fr.split}
        e.update(camera_entry(fr.camera))
        if fr.mask_path is not None:
            e["mask_path"] = fr.mask_path
        if fr.landmarks is not None:
            e["landmarks"] = np.asarray(fr.landmarks).tolist()
        e.update(fr.extra)
        frames.append(e)
    doc["frames"] = frames
    with open(mpath, "w") as fh:
        json.dump(doc, fh, indent=1)
    return mpath


def load_cameras(path):
    """Cameras from a file in the manifest grammar (top-level intrinsics, ``frames`` entries)."""
    with open(path) as fh:
        doc = json.load(fh)
    entries = doc.get("frames", [doc])
    return [_camera_from(e, doc, f"{path}.frames[{i}]") for i, e in enumerate(entries)]


def save_cameras(path, cams):
    with open(path, "w") as fh:
        json.dump({"camera_convention": "opengl", "frames": [camera_entry(c) for c in cams]}, fh, indent=1)


# --- images --------------------------------------------------------------------------


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def to_uint8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img):
    Image.fromarray(to_uint8(img)).save(path)


def write_mask(path, mask):
    Image.fromarray(to_uint8(mask), mode="L").save(path)
