"""
Text scene/camera files and the binary IESR container.

Scene file: one Gaussian per line, whitespace separated
    px py pz sx sy sz qw qx qy qz r g b a [filter_sigma]
with `#` comments. Camera file: one block per view,

    view <id>
    fx <v> fy <v> cx <v> cy <v> w <int> h <int>
    r00 r01 r02 t0
    r10 r11 r12 t1
    r20 r21 r22 t2

The `view` line is optional for single-camera files.

IESR container: magic b"IESR", u32 version, u32 field count, u32 metadata
length, UTF-8 JSON metadata, then a field directory (u16 name length, name,
u32 ndim, u32 dims...) followed by every field's little-endian f32 payload
in directory order.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from splat_core import Camera, GaussianScene
from .errors import CheckpointFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SCENE_COLUMNS = "px py pz sx sy sz qw qx qy qz r g b a"
CONTAINER_MAGIC = b"IESR"
CONTAINER_VERSION = 1
_CONTAINER_HEADER = struct.Struct("<4sIII")
_CAMERA_LABELS = ("fx", "fy", "cx", "cy", "w", "h")


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def write_scene(path: PathLike, scene: GaussianScene) -> Path:
    """Write a scene; full float precision so read_scene round-trips exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with_sigma = bool(np.any(scene.filter_sigmas != 0))
    header = SCENE_COLUMNS + (" filter_sigma" if with_sigma else "")
    rows = [f"# {header}", f"# count {len(scene)}"]
    for i in range(len(scene)):
        values = np.concatenate([
            scene.positions[i], scene.scales[i], scene.rotations[i], scene.colors[i], [scene.opacities[i]],
        ])
        if with_sigma:
            values = np.append(values, scene.filter_sigmas[i])
        rows.append(" ".join(repr(float(v)) for v in values))
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path


def read_scene(path: PathLike) -> GaussianScene:
    """Parse a scene file; scales must be positive, opacities in [0, 1]."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CheckpointFormatError(f"Cannot read scene file {path}: {e}") from e
    records = []
    for lineno, line in _content_lines(text):
        fields = line.split()
        if len(fields) not in (14, 15):
            raise CheckpointFormatError(f"{path}:{lineno}: expected 14 or 15 values, found {len(fields)}")
        try:
            values = [float(v) for v in fields]
        except ValueError as e:
            raise CheckpointFormatError(f"{path}:{lineno}: {e}") from e
        if not np.all(np.isfinite(values)):
            raise CheckpointFormatError(f"{path}:{lineno}: non-finite value")
        if min(values[3:6]) <= 0:
            raise CheckpointFormatError(f"{path}:{lineno}: scales must be positive")
        if not 0.0 <= values[13] <= 1.0:
            raise CheckpointFormatError(f"{path}:{lineno}: opacity {values[13]} outside [0, 1]")
        if np.linalg.norm(values[6:10]) == 0:
            raise CheckpointFormatError(f"{path}:{lineno}: zero quaternion")
        records.append(values + [0.0] * (15 - len(values)))
    if not records:
        return GaussianScene.empty()
    arr = np.asarray(records)
    rot = arr[:, 6:10] / np.linalg.norm(arr[:, 6:10], axis=1, keepdims=True)
    return GaussianScene(arr[:, 0:3], arr[:, 3:6], rot, arr[:, 10:13], arr[:, 13], arr[:, 14])


def write_cameras(path: PathLike, cameras: List[Camera]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = []
    for cam in cameras:
        lines = []
        if cam.view_id:
            lines.append(f"view {cam.view_id}")
        lines.append(
            f"fx {float(cam.focal[0])!r} fy {float(cam.focal[1])!r} cx {float(cam.principal_point[0])!r} "
            f"cy {float(cam.principal_point[1])!r} w {int(cam.width)} h {int(cam.height)}"
        )
        extrinsic = np.hstack([cam.rotation, cam.translation[:, None]])
        for row in extrinsic:
            lines.append(" ".join(repr(float(v)) for v in row))
        blocks.append("\n".join(lines))
    path.write_text("\n\n".join(blocks) + "\n", encoding="utf-8")
    return path


def _parse_intrinsics(path: Path, lineno: int, line: str) -> Dict[str, float]:
    tokens = line.split()
    if len(tokens) % 2:
        raise CheckpointFormatError(f"{path}:{lineno}: intrinsics must be label/value pairs")
    fields = {}
    for label, value in zip(tokens[0::2], tokens[1::2]):
        if label not in _CAMERA_LABELS:
            raise CheckpointFormatError(f"{path}:{lineno}: unknown camera field '{label}'")
        try:
            fields[label] = float(value)
        except ValueError as e:
            raise CheckpointFormatError(f"{path}:{lineno}: {e}") from e
    return fields


def read_cameras(path: PathLike) -> List[Camera]:
    """Parse a camera file holding one or more views."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CheckpointFormatError(f"Cannot read camera file {path}: {e}") from e

    cameras = []
    view_id = ""
    intrinsics: Dict[str, float] = {}
    rows: List[List[float]] = []

    def finish(lineno: int):
        missing = [k for k in _CAMERA_LABELS if k not in intrinsics]
        if missing:
            raise CheckpointFormatError(f"{path}:{lineno}: camera '{view_id}' lacks {', '.join(missing)}")
        matrix = np.asarray(rows)
        try:
            cameras.append(Camera(
                focal=(intrinsics["fx"], intrinsics["fy"]),
                principal_point=(intrinsics["cx"], intrinsics["cy"]),
                width=int(intrinsics["w"]),
                height=int(intrinsics["h"]),
                rotation=matrix[:, :3],
                translation=matrix[:, 3],
                view_id=view_id or f"{len(cameras):03d}",
            ))
        except ValueError as e:
            raise CheckpointFormatError(f"{path}:{lineno}: {e}") from e

    for lineno, line in _content_lines(text):
        head = line.split()[0]
        if head == "view":
            if intrinsics or rows:
                raise CheckpointFormatError(f"{path}:{lineno}: incomplete camera block before '{line}'")
            view_id = line.split(None, 1)[1].strip() if len(line.split()) > 1 else ""
        elif head in _CAMERA_LABELS:
            intrinsics.update(_parse_intrinsics(path, lineno, line))
        else:
            try:
                row = [float(v) for v in line.split()]
            except ValueError as e:
                raise CheckpointFormatError(f"{path}:{lineno}: {e}") from e
            if len(row) != 4:
                raise CheckpointFormatError(f"{path}:{lineno}: extrinsic rows need 4 values")
            rows.append(row)
            if len(rows) == 3:
                finish(lineno)
                view_id, intrinsics, rows = "", {}, []
    if intrinsics or rows:
        raise CheckpointFormatError(f"{path}: truncated camera block at end of file")
    if not cameras:
        raise CheckpointFormatError(f"{path}: no cameras found")
    return cameras


def write_container(path: PathLike, fields: Dict[str, np.ndarray], metadata: Dict[str, Any] = None) -> Path:
    """Write named arrays (stored as f32) plus JSON metadata to an IESR container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    directory = bytearray()
    payload = bytearray()
    for name, arr in fields.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        directory += struct.pack("<H", len(encoded)) + encoded
        directory += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_CONTAINER_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, len(fields), len(meta)))
        f.write(meta)
        f.write(bytes(directory))
        f.write(bytes(payload))
    return path


def read_container(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read an IESR container; arrays come back as float64."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"Cannot read checkpoint {path}: {e}") from e
    if len(raw) < _CONTAINER_HEADER.size:
        raise CheckpointFormatError(f"{path}: truncated header")
    magic, version, count, meta_len = _CONTAINER_HEADER.unpack_from(raw)
    if magic != CONTAINER_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported container version {version}")
    offset = _CONTAINER_HEADER.size
    try:
        metadata = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
        offset += meta_len
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            entries.append((name, shape))
        fields = {}
        for name, shape in entries:
            size = int(np.prod(shape)) if shape else 1
            chunk = raw[offset:offset + 4 * size]
            if len(chunk) != 4 * size:
                raise CheckpointFormatError(f"{path}: field '{name}' is truncated")
            fields[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
            offset += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt container ({e})") from e
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return fields, metadata
