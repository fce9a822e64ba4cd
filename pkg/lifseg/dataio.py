# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
Reading and writing frames, datasets, painted clouds and checkpoints in the
bit-exact formats described by FORMAT_DOCUMENTATION (also docs/formats.md).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from lifseg import config
from lifseg.context_fusion import PaintedCloud
from lifseg.data_model import Box2D, CameraImage, CameraView, FrameBundle, PointCloud
from lifseg.errors import CorruptFile, VersionMismatch
from lifseg.geometry import CalibrationChain, CameraIntrinsics, RigidTransform

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_FILE = "meta.json"
SPLIT_FILE = "split.json"
SCENE_FILE = "scene.json"
POINTS_FILE = "points.bin"
LABELS_FILE = "labels.bin"
OFFSETS_FILE = "gt_offsets.bin"
CALIB_FILE = "calib.json"
BOXES_FILE = "boxes.json"
CHAIN_KEYS = ("ego_from_lidar", "global_from_ego_sweep", "ego_image_from_global", "camera_from_ego_image")

FORMAT_DOCUMENTATION = """# lifseg on-disk formats (format_version 1)

All binary numbers are little-endian regardless of host. "f8" is an IEEE-754
64-bit float, "u8" a 64-bit unsigned integer, "u2" a 16-bit unsigned integer.
Arrays are stored row-major (C order).

## Dataset root

    <root>/meta.json
    <root>/split.json          (optional)
    <root>/scene.json          (optional, synthetic datasets only)
    <root>/frame_0000/ ...     one directory per frame, names listed in meta.json

meta.json is a UTF-8 JSON object:

    format_version  int     must be 1; any other value is rejected (VersionMismatch)
    class_names     [str]   C names, index = class id
    class_count     int     C
    point_dim       int     D, columns per LiDAR point
    camera_count    int     n
    height          int     H, image rows
    width           int     W, image columns
    window          int     w, context window used when painting
    frames          [str]   frame directory names, in frame order

split.json holds {"train": [int], "held_out": [int]}, indices into meta.json "frames".
scene.json holds the generator settings the dataset was produced with.

## Frame directory

    points.bin       required
    labels.bin       present when the cloud is labelled
    gt_offsets.bin   present when ground-truth offsets are known
    cam_<i>.ppm      one per camera, i = 0 .. n-1
    calib.json       required
    boxes.json       required

### points.bin

    offset  size      content
    0       8         u8  N, number of points
    8       8         u8  D, values per point
    16      8*N*D     f8  points, row-major N x D

Columns 0-2 are x, y, z in metres in the LiDAR frame; column 3, when present,
is intensity in [0, 1]. The file size must be exactly 16 + 8*N*D bytes.

### labels.bin

N values of u2, one class id per point, no header. Size must be exactly 2*N.

### gt_offsets.bin

N x 2 values of f8 (row, column) in pixels, no header. Size must be exactly 16*N.

### cam_<i>.ppm

Binary PPM (P6), maxval 255, H rows by W columns, RGB. A pixel value x in
[0, 1] is stored as the byte rint(255 * x) (round half to even) and read back
as byte / 255.

### calib.json

    format_version   int     1
    class_count      int     C
    lidar_timestamp  float   seconds
    cameras          list of n objects:
        timestamp               float           seconds
        ego_from_lidar          4 x 4 [[float]] row-major
        global_from_ego_sweep   4 x 4 [[float]]
        ego_image_from_global   4 x 4 [[float]]
        camera_from_ego_image   4 x 4 [[float]]
        intrinsics              3 x 4 [[float]]

Floats are written with the shortest decimal representation that reads back
to the identical 64-bit value (at most 17 significant digits).

### boxes.json

    {"cameras": [[box, ...], ...]}   one list per camera

Each box is {"min_row", "min_col", "max_row", "max_col", "class_id",
"instance_id"}, all integers, bounds inclusive.

## Painted cloud file

Same layout as points.bin with D replaced by the painted width D + 3*w*w.
The first D columns equal the input cloud; the remaining columns hold the
w x w RGB window, window rows then columns then R, G, B.

## Checkpoint file

    offset  size   content
    0       8      u8  L, header length in bytes
    8       L      UTF-8 JSON header
    8+L     ...    f8  payload

The header is {"format_version": 1, "metadata": {...}, "tensors": [{"name":
str, "shape": [int], "offset": int}]}. Each tensor occupies prod(shape) f8
values starting at payload byte "offset"; tensors are stored in header order
without padding.

## Run directory

    <run>/config.json        PipelineConfig used for training
    <run>/checkpoint.bin     final parameters
    <run>/report.json        RunReport
    <run>/epoch_<k>.bin      per-epoch checkpoints

## Read limits

No file is read and no array is allocated when its declared or actual size
exceeds the per-frame cap (1 GiB unless LIFSEG_DATA_CAP_BYTES is set); such a
file is reported as corrupt.
"""


# Create directory if it does not exist
def ensure_directory_exists(directory_path):
    path = Path(directory_path)
    if not path.exists():
        path.mkdir(parents=True, exist_ok=True)


def frame_dir_name(index: int) -> str:
    return f"frame_{index:04d}"


def camera_file(index: int) -> str:
    return f"cam_{index}.ppm"


def _check_size(path, size: int, cap: int):
    if size > cap:
        raise CorruptFile(path, f"{size} bytes exceeds the read cap of {cap} bytes")


def _read_bytes(path, expected: Optional[int] = None, cap: Optional[int] = None) -> bytes:
    cap = config.data_cap_bytes() if cap is None else cap
    if not os.path.exists(path):
        raise CorruptFile(path, "missing")
    size = os.path.getsize(path)
    _check_size(path, size, cap)
    if expected is not None and size != expected:
        raise CorruptFile(path, f"expected {expected} bytes, found {size}" + (" (truncated)" if size < expected else ""))
    with open(path, "rb") as f:
        return f.read()


def _write_bytes(path, data: bytes):
    with open(path, "wb") as f:
        f.write(data)


def write_matrix_file(path, values: np.ndarray):
    """u8 N, u8 D header followed by N x D f8 values."""
    values = np.asarray(values, dtype=np.float64)
    header = np.array(values.shape, dtype="<u8").tobytes()
    _write_bytes(path, header + np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_matrix_file(path, cap: Optional[int] = None) -> np.ndarray:
    cap = config.data_cap_bytes() if cap is None else cap
    if not os.path.exists(path):
        raise CorruptFile(path, "missing")
    size = os.path.getsize(path)
    _check_size(path, size, cap)
    if size < 16:
        raise CorruptFile(path, f"header needs 16 bytes, file has {size} (truncated)")
    with open(path, "rb") as f:
        n, d = (int(v) for v in np.frombuffer(f.read(16), dtype="<u8"))
        declared = 16 + 8 * n * d
        _check_size(path, declared, cap)
        if declared != size:
            raise CorruptFile(path, f"header declares {n} x {d} values ({declared} bytes), file has {size} bytes"
                              + (" (truncated)" if size < declared else ""))
        data = np.frombuffer(f.read(), dtype="<f8")
    return data.astype(np.float64).reshape(n, d)


def quantize_pixels(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, pixels: np.ndarray):
    Image.fromarray(quantize_pixels(pixels)).save(path, format="PPM")


def read_image(path, height: Optional[int] = None, width: Optional[int] = None, cap: Optional[int] = None) -> np.ndarray:
    cap = config.data_cap_bytes() if cap is None else cap
    if not os.path.exists(path):
        raise CorruptFile(path, "missing")
    _check_size(path, os.path.getsize(path), cap)
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode != "RGB":
                raise CorruptFile(path, f"expected an 8-bit RGB PPM, found {img.format} {img.mode}")
            _check_size(path, img.width * img.height * 3 * 8, cap)
            data = np.asarray(img, dtype=np.uint8)
    except CorruptFile:
        raise
    except (OSError, ValueError) as e:
        raise CorruptFile(path, f"unreadable image ({e})") from e
    if height is not None and width is not None and data.shape[:2] != (height, width):
        raise CorruptFile(path, f"expected {height} x {width} pixels, found {data.shape[0]} x {data.shape[1]}")
    return data.astype(np.float64) / 255.0


def _read_json(path, cap: Optional[int] = None):
    raw = _read_bytes(path, cap=cap)
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(path, f"invalid JSON ({e})") from e


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def write_frame(frame_dir, bundle: FrameBundle):
    """Write one FrameBundle into frame_dir (created if needed)."""
    ensure_directory_exists(frame_dir)
    cloud = bundle.cloud
    write_matrix_file(os.path.join(frame_dir, POINTS_FILE), cloud.points)
    if cloud.labels is not None:
        _write_bytes(os.path.join(frame_dir, LABELS_FILE), np.asarray(cloud.labels, dtype="<u2").tobytes())
    if bundle.gt_offsets is not None:
        _write_bytes(os.path.join(frame_dir, OFFSETS_FILE),
                     np.ascontiguousarray(bundle.gt_offsets, dtype="<f8").tobytes())

    cameras = []
    for i, view in enumerate(bundle.cameras):
        write_image(os.path.join(frame_dir, camera_file(i)), view.image.pixels)
        entry = {"timestamp": float(view.image.timestamp)}
        for key, transform in zip(CHAIN_KEYS, view.chain.transforms()):
            entry[key] = transform.matrix.tolist()
        entry["intrinsics"] = view.intrinsics.matrix.tolist()
        cameras.append(entry)
    _write_json(os.path.join(frame_dir, CALIB_FILE), {
        "format_version": FORMAT_VERSION,
        "class_count": int(bundle.class_count),
        "lidar_timestamp": float(bundle.lidar_timestamp),
        "cameras": cameras,
    })
    _write_json(os.path.join(frame_dir, BOXES_FILE),
                {"cameras": [[box.to_dict() for box in view.boxes] for view in bundle.cameras]})


def _parse_matrix(path, value, shape, name):
    try:
        matrix = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise CorruptFile(path, f"{name} is not numeric ({e})") from e
    if matrix.shape != shape:
        raise CorruptFile(path, f"{name} has shape {matrix.shape}, expected {shape}")
    return matrix


def read_frame(frame_dir, cap: Optional[int] = None) -> FrameBundle:
    """
    Read one frame directory.

    Raises:
        CorruptFile: on missing, truncated, oversized or malformed files.
        VersionMismatch: if calib.json was written by another format version.
    """
    cap = config.data_cap_bytes() if cap is None else cap
    total = sum(os.path.getsize(os.path.join(frame_dir, f)) for f in os.listdir(frame_dir)) \
        if os.path.isdir(frame_dir) else 0
    _check_size(frame_dir, total, cap)

    calib_path = os.path.join(frame_dir, CALIB_FILE)
    calib = _read_json(calib_path, cap)
    version = calib.get("format_version") if isinstance(calib, dict) else None
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{calib_path}: format_version {version!r}, this reader supports {FORMAT_VERSION}")

    points = read_matrix_file(os.path.join(frame_dir, POINTS_FILE), cap)
    n = points.shape[0]
    labels = None
    labels_path = os.path.join(frame_dir, LABELS_FILE)
    if os.path.exists(labels_path):
        labels = np.frombuffer(_read_bytes(labels_path, 2 * n, cap), dtype="<u2").astype(np.int64)
    gt_offsets = None
    offsets_path = os.path.join(frame_dir, OFFSETS_FILE)
    if os.path.exists(offsets_path):
        gt_offsets = np.frombuffer(_read_bytes(offsets_path, 16 * n, cap), dtype="<f8").astype(np.float64).reshape(n, 2)

    boxes_path = os.path.join(frame_dir, BOXES_FILE)
    boxes = _read_json(boxes_path, cap)
    try:
        entries = calib["cameras"]
        box_lists = boxes["cameras"]
        class_count = int(calib["class_count"])
        lidar_timestamp = float(calib["lidar_timestamp"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFile(calib_path, f"missing field ({e})") from e
    if len(box_lists) != len(entries):
        raise CorruptFile(boxes_path, f"{len(box_lists)} box lists for {len(entries)} cameras")

    views = []
    shape = None
    for i, entry in enumerate(entries):
        try:
            transforms = [RigidTransform(_parse_matrix(calib_path, entry[key], (4, 4), key)) for key in CHAIN_KEYS]
            intrinsics = CameraIntrinsics(_parse_matrix(calib_path, entry["intrinsics"], (3, 4), "intrinsics"))
            timestamp = float(entry["timestamp"])
            camera_boxes = [Box2D.from_dict(b) for b in box_lists[i]]
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptFile(calib_path, f"camera {i}: malformed entry ({e})") from e
        pixels = read_image(os.path.join(frame_dir, camera_file(i)), *(shape or (None, None)), cap=cap)
        shape = shape or pixels.shape[:2]
        views.append(CameraView(
            image=CameraImage(pixels=pixels, timestamp=timestamp),
            chain=CalibrationChain(*transforms),
            intrinsics=intrinsics,
            boxes=camera_boxes,
        ))
    return FrameBundle(cloud=PointCloud(points=points, labels=labels), cameras=views, class_count=class_count,
                       gt_offsets=gt_offsets, lidar_timestamp=lidar_timestamp)


@dataclass
class Dataset:
    frames: List[FrameBundle]
    class_names: List[str]
    window: int = 3
    split: Optional[Tuple[List[int], List[int]]] = None
    scene: Optional[dict] = None
    meta: Dict = field(default_factory=dict)

    def train_frames(self) -> List[FrameBundle]:
        if self.split is None:
            return list(self.frames)
        return [self.frames[i] for i in self.split[0]]

    def held_out_frames(self) -> List[FrameBundle]:
        if self.split is None:
            return list(self.frames)
        return [self.frames[i] for i in self.split[1]]


def write_dataset(root, frames: Sequence[FrameBundle], class_names: Sequence[str], window: int = 3,
                  split: Optional[Tuple[Sequence[int], Sequence[int]]] = None, scene: Optional[dict] = None):
    if not frames:
        raise ValueError("cannot write an empty dataset")
    ensure_directory_exists(root)
    names = []
    for i, bundle in enumerate(frames):
        name = frame_dir_name(i)
        write_frame(os.path.join(root, name), bundle)
        names.append(name)
    first = frames[0]
    height, width = first.image_shape
    _write_json(os.path.join(root, META_FILE), {
        "format_version": FORMAT_VERSION,
        "class_names": list(class_names),
        "class_count": int(first.class_count),
        "point_dim": int(first.cloud.dim),
        "camera_count": first.camera_count,
        "height": int(height),
        "width": int(width),
        "window": int(window),
        "frames": names,
    })
    if split is not None:
        _write_json(os.path.join(root, SPLIT_FILE), {"train": list(split[0]), "held_out": list(split[1])})
    if scene is not None:
        _write_json(os.path.join(root, SCENE_FILE), scene)
    logger.info(f"Wrote {len(frames)} frames to {root}")


def read_meta(root) -> dict:
    meta_path = os.path.join(root, META_FILE)
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"No {META_FILE} in dataset directory {root}")
    meta = _read_json(meta_path)
    version = meta.get("format_version") if isinstance(meta, dict) else None
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{meta_path}: format_version {version!r}, this reader supports {FORMAT_VERSION}")
    return meta


def read_dataset(root, frame_indices: Optional[Sequence[int]] = None) -> Dataset:
    """
    Read meta.json, the frames it lists and the optional split.json / scene.json.

    frame_indices restricts which frames are loaded; the others are None.
    """
    meta = read_meta(root)
    try:
        names = list(meta["frames"])
        class_names = list(meta["class_names"])
        expected = (int(meta["point_dim"]), int(meta["camera_count"]), int(meta["height"]), int(meta["width"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFile(os.path.join(root, META_FILE), f"missing field ({e})") from e
    wanted = set(range(len(names))) if frame_indices is None else set(frame_indices)
    frames = []
    for i, name in enumerate(names):
        if i not in wanted:
            frames.append(None)
            continue
        bundle = read_frame(os.path.join(root, name))
        h, w = bundle.image_shape
        if (bundle.cloud.dim, bundle.camera_count, h, w) != expected:
            raise CorruptFile(os.path.join(root, name),
                              f"frame has (D, n, H, W) = {(bundle.cloud.dim, bundle.camera_count, h, w)}, "
                              f"meta.json declares {expected}")
        frames.append(bundle)

    split = None
    split_path = os.path.join(root, SPLIT_FILE)
    if os.path.exists(split_path):
        data = _read_json(split_path)
        try:
            split = ([int(i) for i in data["train"]], [int(i) for i in data["held_out"]])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptFile(split_path, f"malformed split ({e!r})") from e
    scene_path = os.path.join(root, SCENE_FILE)
    scene = _read_json(scene_path) if os.path.exists(scene_path) else None
    logger.info(f"Read {len(wanted)} of {len(names)} frames from {root}")
    return Dataset(frames=frames, class_names=class_names, window=int(meta.get("window", 3)),
                   split=split, scene=scene, meta=meta)


def write_painted(path, painted: PaintedCloud):
    write_matrix_file(path, painted.rows)


def save_checkpoint(path, tensors: Dict[str, np.ndarray], metadata: Optional[dict] = None):
    """Header length, JSON header, then every tensor as f8 in header order."""
    entries, payload, offset = [], [], 0
    for name, value in tensors.items():
        array = np.ascontiguousarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        payload.append(array.tobytes())
        offset += array.nbytes
    header = json.dumps({"format_version": FORMAT_VERSION, "metadata": metadata or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    _write_bytes(path, np.array([len(header)], dtype="<u8").tobytes() + header + b"".join(payload))


def load_checkpoint(path, cap: Optional[int] = None) -> Tuple[Dict[str, np.ndarray], dict]:
    raw = _read_bytes(path, cap=cap)
    if len(raw) < 8:
        raise CorruptFile(path, "truncated header length")
    header_len = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    if 8 + header_len > len(raw):
        raise CorruptFile(path, f"header of {header_len} bytes runs past the end of the file")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CorruptFile(path, f"invalid header ({e})") from e
    if not isinstance(entries, list):
        raise CorruptFile(path, "header field 'tensors' is not a list")
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint format_version {header.get('format_version')!r}")
    payload = raw[8 + header_len:]
    tensors = {}
    for entry in entries:
        try:
            name = str(entry["name"])
            shape = tuple(int(s) for s in entry["shape"])
            start = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptFile(path, f"malformed tensor entry {entry!r} ({e!r})") from e
        if any(s < 0 for s in shape):
            raise CorruptFile(path, f"tensor {name!r} has negative shape {shape}")
        end = start + 8 * int(np.prod(shape, dtype=np.int64))
        if start < 0 or end > len(payload):
            raise CorruptFile(path, f"tensor {name!r} runs past the end of the payload")
        tensors[name] = np.frombuffer(payload[start:end], dtype="<f8").astype(np.float64).reshape(shape)
    return tensors, header.get("metadata", {})
