"""File formats: PFM images, triplet manifests, key=value configs, head checkpoints.

PFM
    ``Pf`` (1 channel), ``PF`` (3 channels) or ``PC<k>`` (k channels), then
    ``width height`` and a scale line whose sign gives the byte order
    (negative = little-endian, which is what we write). float32 rows follow,
    bottom row first, channels interleaved.

Manifest
    JSON Lines. The first line is a header ``{"format": ..., "version": 1}``,
    each further line one triplet. Poses are row-major 4x4 matrices given as
    16 doubles; file paths are relative to the manifest's directory.

Checkpoint
    One JSON header line (parameter shapes, config echo, seed, value count)
    followed by the parameter vector as little-endian float64.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import fastjsonschema
import numpy as np

from .camera import PinholeCamera
from .errors import InvalidPose, MalformedHeader, SchemaViolation, TruncatedData, ValidationError
from .liegroup import SE3Pose, compose, inverse

MANIFEST_FORMAT = "tcreloc-manifest"
MANIFEST_VERSION = 1
CHECKPOINT_FORMAT = "tcreloc-head"
CHECKPOINT_VERSION = 1


# -- PFM ----------------------------------------------------------------------


def write_pfm(path: str, img) -> None:
    data = np.asarray(img, dtype=np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3 or data.shape[2] < 1:
        raise ValueError(f"cannot store an array of shape {data.shape} as PFM")
    h, w, c = data.shape
    tag = {1: "Pf", 3: "PF"}.get(c, f"PC{c}")
    header = f"{tag}\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(data[::-1]).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def _read_token_line(fh) -> str:
    line = fh.readline(64)
    if not line.endswith(b"\n"):
        raise MalformedHeader("PFM header line missing or too long")
    try:
        return line.decode("ascii").strip()
    except UnicodeDecodeError:
        raise MalformedHeader("PFM header is not ASCII") from None


def read_pfm(path: str) -> np.ndarray:
    """Returns ``(H, W)`` for one channel, ``(H, W, C)`` otherwise."""
    with open(path, "rb") as fh:
        tag = _read_token_line(fh)
        if tag == "Pf":
            c = 1
        elif tag == "PF":
            c = 3
        else:
            m = re.fullmatch(r"PC(\d+)", tag)
            if not m:
                raise MalformedHeader(f"unknown PFM tag {tag!r}")
            c = int(m.group(1))
            if c < 1:
                raise MalformedHeader("PFM channel count must be at least 1")
        dims = _read_token_line(fh).split()
        if len(dims) != 2 or not all(d.isdigit() for d in dims):
            raise MalformedHeader(f"bad PFM dimensions {' '.join(dims)!r}")
        w, h = int(dims[0]), int(dims[1])
        if w < 1 or h < 1:
            raise MalformedHeader("PFM dimensions must be positive")
        try:
            scale = float(_read_token_line(fh))
        except ValueError:
            raise MalformedHeader("bad PFM scale field") from None
        if scale == 0 or not np.isfinite(scale):
            raise MalformedHeader("PFM scale must be finite and non-zero")
        count = w * h * c
        raw = fh.read(4 * count)
    if len(raw) < 4 * count:
        raise TruncatedData(f"PFM payload has {len(raw)} bytes, expected {4 * count}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w, c)[::-1].astype(np.float32)
    return data[:, :, 0] if c == 1 else data


# -- manifest -----------------------------------------------------------------

_POSE = {"type": "array", "items": {"type": "number"}, "minItems": 16, "maxItems": 16}
_PATH = {"type": "string", "minLength": 1}


def _frame_schema(required):
    props = {"image": _PATH, "depth": _PATH, "segmentation": _PATH}
    return {"type": "object", "properties": props, "required": required, "additionalProperties": False}


HEADER_SCHEMA = {
    "type": "object",
    "properties": {"format": {"const": MANIFEST_FORMAT}, "version": {"const": MANIFEST_VERSION}},
    "required": ["format", "version"],
    "additionalProperties": False,
}

ENTRY_SCHEMA = {
    "type": "object",
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "ref_seq": {"type": "integer", "minimum": 0},
        "query_seq": {"type": "integer", "minimum": 0},
        "camera": {
            "type": "object",
            "properties": {
                "fx": {"type": "number", "exclusiveMinimum": 0},
                "fy": {"type": "number", "exclusiveMinimum": 0},
                "cx": {"type": "number"},
                "cy": {"type": "number"},
                "width": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
            },
            "required": ["fx", "fy", "cx", "cy", "width", "height"],
            "additionalProperties": False,
        },
        "that_r0_r1": _POSE,
        "gt_q_r0": _POSE,
        "files": {
            "type": "object",
            "properties": {
                "r0": _frame_schema(["image", "depth"]),
                "r1": _frame_schema(["image", "depth"]),
                "q": _frame_schema(["image"]),
            },
            "required": ["r0", "r1", "q"],
            "additionalProperties": False,
        },
    },
    "required": ["id", "ref_seq", "query_seq", "camera", "that_r0_r1", "files"],
    "additionalProperties": False,
}


@dataclass
class ManifestEntry:
    id: str
    ref_seq: int
    query_seq: int
    camera: PinholeCamera
    that_r0_r1: SE3Pose
    files: Dict[str, Dict[str, str]]
    gt_q_r0: Optional[SE3Pose] = None

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "ref_seq": self.ref_seq,
            "query_seq": self.query_seq,
            "camera": dict(zip(("fx", "fy", "cx", "cy", "width", "height"), self.camera.as_list())),
            "that_r0_r1": pose_to_list(self.that_r0_r1),
            "files": self.files,
        }
        if self.gt_q_r0 is not None:
            out["gt_q_r0"] = pose_to_list(self.gt_q_r0)
        return out


@dataclass
class TripletManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    base_dir: str = "."
    version: int = MANIFEST_VERSION

    def __len__(self):
        return len(self.entries)

    def find(self, triplet_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == triplet_id:
                return e
        raise SchemaViolation(f"no triplet with id {triplet_id!r} in the manifest")

    def path(self, rel: str) -> str:
        return os.path.join(self.base_dir, rel)


def pose_to_list(t: SE3Pose) -> List[float]:
    return [float(x) for x in t.matrix().ravel()]


_VALIDATORS: Dict[int, Callable] = {}


def _validate(record, schema, where: str) -> None:
    validator = _VALIDATORS.get(id(schema))
    if validator is None:
        validator = _VALIDATORS[id(schema)] = fastjsonschema.compile(schema)
    try:
        validator(record)
    except fastjsonschema.JsonSchemaValueException as exc:
        loc = ".".join(str(p) for p in exc.path[1:]) or "<record>"
        message = exc.message.split(" ", 1)[1] if exc.message.startswith(exc.name) else exc.message
        raise SchemaViolation(f"{where}: {loc}: {message}") from None


def _pose(values, where: str) -> SE3Pose:
    try:
        return SE3Pose.from_matrix(values)
    except InvalidPose as exc:
        raise InvalidPose(f"{where}: {exc}") from None


def save_manifest(path: str, manifest: TripletManifest) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": MANIFEST_FORMAT, "version": manifest.version}) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps(e.to_json()) + "\n")


def load_manifest(path: str, check_files: bool = True) -> TripletManifest:
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SchemaViolation(f"{path}: missing header line")
    records = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append((n, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"{path}:{n}: not valid JSON ({exc.msg})") from None
    if not records:
        raise SchemaViolation(f"{path}: missing header line")
    _validate(records[0][1], HEADER_SCHEMA, f"{path}:{records[0][0]}")
    entries, seen = [], set()
    for n, rec in records[1:]:
        where = f"{path}:{n}"
        _validate(rec, ENTRY_SCHEMA, where)
        where = f"{where} (triplet {rec['id']})"
        if rec["id"] in seen:
            raise SchemaViolation(f"{where}: duplicate id")
        seen.add(rec["id"])
        c = rec["camera"]
        try:
            cam = PinholeCamera(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"])
        except ValueError as exc:
            raise SchemaViolation(f"{where}: camera: {exc}") from None
        that = _pose(rec["that_r0_r1"], f"{where}: that_r0_r1")
        gt = _pose(rec["gt_q_r0"], f"{where}: gt_q_r0") if "gt_q_r0" in rec else None
        if check_files:
            for frame, files in rec["files"].items():
                for kind, rel in files.items():
                    if not os.path.isfile(os.path.join(base, rel)):
                        raise SchemaViolation(f"{where}: files.{frame}.{kind}: {rel} does not exist")
        entries.append(ManifestEntry(rec["id"], rec["ref_seq"], rec["query_seq"], cam, that, rec["files"], gt))
    return TripletManifest(entries, base, records[0][1]["version"])


def write_triplet(out_dir: str, triplet) -> ManifestEntry:
    """Store a FrameTriplet's buffers as PFM files under ``out_dir``."""
    files: Dict[str, Dict[str, str]] = {}
    for name in ("r0", "r1", "q"):
        frame = getattr(triplet, name)
        files[name] = {}
        kinds = [("image", frame.image), ("segmentation", frame.segmentation)]
        if frame.depth is not None and name != "q":
            kinds.append(("depth", frame.depth))
        for kind, data in kinds:
            rel = f"{triplet.id}_{name}_{kind}.pfm"
            write_pfm(os.path.join(out_dir, rel), data)
            files[name][kind] = rel
    return ManifestEntry(
        triplet.id, triplet.ref_seq, triplet.query_seq, triplet.r0.camera, triplet.that_r0_r1, files, triplet.gt_q_r0()
    )


def load_triplet(manifest: TripletManifest, entry: ManifestEntry):
    """Read an entry's buffers back into a FrameTriplet.

    Poses are expressed in the r0 frame. Without a ground-truth query pose the
    query frame's pose is set to r0's and must not be used for evaluation.
    """
    from .synthscene import Frame, FrameTriplet

    def frame(name, pose):
        f = entry.files[name]
        image = read_pfm(manifest.path(f["image"])).astype(float)
        depth = read_pfm(manifest.path(f["depth"])).astype(float) if "depth" in f else None
        if "segmentation" in f:
            seg = read_pfm(manifest.path(f["segmentation"])).astype(int)
        else:
            seg = np.full(image.shape[:2], -1)
        if image.shape[:2] != (entry.camera.height, entry.camera.width):
            raise SchemaViolation(f"triplet {entry.id}: {name} image does not match the camera size")
        return Frame(image, depth, seg, entry.camera, pose)

    t_w_r0 = SE3Pose.identity()
    t_w_q = inverse(entry.gt_q_r0) if entry.gt_q_r0 is not None else t_w_r0
    return FrameTriplet(
        frame("r0", t_w_r0),
        frame("r1", entry.that_r0_r1),
        frame("q", t_w_q),
        entry.that_r0_r1,
        entry.id,
        entry.ref_seq,
        entry.query_seq,
    )


# -- key=value configs ----------------------------------------------------------


def _config_fields(cls, prefix=""):
    """Flattened ``key -> (default, type)`` of a dataclass; nested dataclasses use dotted keys."""
    out = {}
    obj = cls()
    for f in dataclasses.fields(cls):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(_config_fields(type(value), prefix + f.name + "."))
        else:
            out[prefix + f.name] = value
    return out


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _parse_value(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(float(p)) if kind is int else kind(p) for p in parts)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {text!r}") from None


def config_template(cls) -> str:
    """Every key with its default, in file syntax."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in _config_fields(cls).items())


def parse_config(text: str, cls, source: str = "<config>"):
    """Build ``cls`` from ``key = value`` lines. ``#`` starts a comment;
    missing keys keep their defaults and unknown keys are errors."""
    known = _config_fields(cls)
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValidationError(f"{source}:{n}: unknown key {key!r}")
        if key in values:
            raise ValidationError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = _parse_value(value, known[key], key)
    return _build(cls, values, "")


def _build(cls, values, prefix):
    kwargs = {}
    obj = cls()
    for f in dataclasses.fields(cls):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            kwargs[f.name] = _build(type(value), values, prefix + f.name + ".")
        elif prefix + f.name in values:
            kwargs[f.name] = values[prefix + f.name]
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ValidationError(f"invalid configuration: {exc}") from None


def load_config(path: Optional[str], cls):
    if path is None:
        return cls()
    with open(path) as fh:
        return parse_config(fh.read(), cls, path)


# -- checkpoints ----------------------------------------------------------------


def write_checkpoint(path: str, params, config: Optional[dict] = None, seed: Optional[int] = None) -> None:
    theta = params.to_vector()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "shapes": params.shapes(),
        "count": int(theta.size),
        "seed": seed,
        "config": config or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(theta.astype("<f8").tobytes())


def read_checkpoint(path: str):
    """Returns ``(HeadParams, header)``."""
    from .features import HeadParams

    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise MalformedHeader(f"{path}: checkpoint header is not JSON") from None
        if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
            raise MalformedHeader(f"{path}: not a head checkpoint")
        try:
            count = int(header["count"])
            _, c_in, c_out = header["shapes"]["feat_w"]
        except (KeyError, TypeError, ValueError):
            raise MalformedHeader(f"{path}: checkpoint header lacks shapes or count") from None
        raw = fh.read()
    if len(raw) < 8 * count:
        raise TruncatedData(f"{path}: {len(raw)} payload bytes, expected {8 * count}")
    if len(raw) > 8 * count:
        raise MalformedHeader(f"{path}: {len(raw) - 8 * count} trailing bytes")
    theta = np.frombuffer(raw, dtype="<f8").astype(float)
    return HeadParams.from_vector(theta, c_in, c_out), header


# -- CSV ------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path: str, header: Sequence[str], rows) -> None:
    """Floats are written with ``repr`` so values round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def loss_report_row(report) -> Dict[str, str]:
    return {k: _cell(v) for k, v in report.as_row().items()}
