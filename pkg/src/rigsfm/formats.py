"""Text and binary file formats consumed and produced by the toolkit.

Grammars (all text formats start with a ``<magic> <version>`` header line,
``#`` starts a comment, fields are whitespace separated):

Correspondence file (``rigsfm-correspondences 1``)::

    frame <frame_id> <camera_id> <unit_id> <width> <height>
    obs <u> <v> <label_id>            # repeated, indexed 0.. per frame
    pair <frame_a> <frame_b>          # frame_a < frame_b
    m <obs_index_in_a> <obs_index_in_b>

Prior trajectory file (``rigsfm-priors 1``)::

    unit <unit_id> <timestamp> <qw> <qx> <qy> <qz> <x> <y> <z>

Rig calibration file (``rigsfm-rig 1``)::

    camera <camera_id> <width> <height> <fx> <fy> <cx> <cy> <k1> <k2> \
           <qw> <qx> <qy> <qz> <x> <y> <z>

Semantic label table (``rigsfm-labels 1``)::

    label <label_id> <name>

GNSS anchor file (``rigsfm-anchor 1``), local ENU frame::

    anchor <qw> <qx> <qy> <qz> <x> <y> <z>

Trajectory files are header-less TUM-style lines, one registered unit each::

    <timestamp> <tx> <ty> <tz> <qx> <qy> <qz> <qw>

Point clouds are binary little-endian PLY with float32 x/y/z and uint8
red/green/blue coloured by semantic class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ReferentialIntegrityError
from .geometry import CameraIntrinsics, Pose, RelativePose, SceneTransform
from .model import Frame, Observation, Reconstruction, RigCamera, RigidUnit, ScenePoint

__all__ = [
    "LabelTable",
    "RawMatches",
    "CorrespondenceData",
    "read_correspondences",
    "write_correspondences",
    "read_priors",
    "write_priors",
    "read_rig",
    "write_rig",
    "read_labels",
    "write_labels",
    "read_anchor",
    "write_anchor",
    "read_trajectory",
    "write_trajectory",
    "read_ply",
    "write_ply",
    "save_reconstruction",
    "load_reconstruction",
    "SEMANTIC_PALETTE",
]

# fixed palette for PLY export, keyed by label name; unknown names hash to grey
SEMANTIC_PALETTE = {
    "road": (128, 128, 128),
    "building": (204, 102, 0),
    "vegetation": (0, 153, 51),
    "vehicle": (51, 102, 255),
    "pedestrian": (255, 51, 51),
    "rider": (255, 153, 51),
    "unknown": (180, 180, 180),
}


def _fmt(x: float) -> str:
    return repr(float(x))


def _header_check(lines: list[str], magic: str, path: Path) -> None:
    if not lines or lines[0].split()[:1] != [magic]:
        raise ParseError(path, 1, f"expected '{magic} <version>' header")
    parts = lines[0].split()
    if len(parts) != 2 or parts[1] != "1":
        raise ParseError(path, 1, f"unsupported {magic} version: {lines[0]!r}")


def _tokens(path: Path):
    lines = path.read_text().splitlines()
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        yield line_no, line.split()


# ---------------------------------------------------------------------------
# label table
# ---------------------------------------------------------------------------

@dataclass
class LabelTable:
    """Bidirectional map between semantic label ids and names."""

    names: dict[int, str] = field(default_factory=dict)

    UNKNOWN = -1

    def __post_init__(self):
        self.ids = {name: lid for lid, name in self.names.items()}

    def name_of(self, label_id: int) -> str:
        return self.names.get(label_id, "unknown")

    def id_of(self, name: str) -> int:
        if name not in self.ids:
            raise KeyError(f"unknown semantic label name {name!r}")
        return self.ids[name]

    def dynamic_ids(self, dynamic_names) -> set[int]:
        return {lid for lid, name in self.names.items() if name in set(dynamic_names)}


def read_labels(path: str | Path) -> LabelTable:
    path = Path(path)
    lines = path.read_text().splitlines()
    _header_check(lines, "rigsfm-labels", path)
    names: dict[int, str] = {}
    for line_no, toks in _tokens(path):
        if line_no == 1:
            continue
        if toks[0] != "label" or len(toks) != 3:
            raise ParseError(path, line_no, "expected 'label <id> <name>'")
        try:
            lid = int(toks[1])
        except ValueError:
            raise ParseError(path, line_no, f"bad label id {toks[1]!r}") from None
        names[lid] = toks[2]
    return LabelTable(names)


def write_labels(table: LabelTable, path: str | Path) -> None:
    lines = ["rigsfm-labels 1"]
    for lid in sorted(table.names):
        lines.append(f"label {lid} {table.names[lid]}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# correspondences
# ---------------------------------------------------------------------------

@dataclass
class RawMatches:
    """Match index pairs for one canonical (frame_a < frame_b) image pair."""

    frame_a: int
    frame_b: int
    pairs: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class CorrespondenceData:
    """Parsed correspondence file: frames with observations plus raw matches."""

    frames: dict[int, Frame] = field(default_factory=dict)
    matches: dict[tuple[int, int], RawMatches] = field(default_factory=dict)


def read_correspondences(path: str | Path) -> CorrespondenceData:
    path = Path(path)
    lines = path.read_text().splitlines()
    _header_check(lines, "rigsfm-correspondences", path)
    data = CorrespondenceData()
    current_frame: Frame | None = None
    current_pair: RawMatches | None = None
    for line_no, toks in _tokens(path):
        if line_no == 1:
            continue
        kind = toks[0]
        try:
            if kind == "frame":
                fid, cam, unit, w, h = (int(v) for v in toks[1:6])
                if fid in data.frames:
                    raise ParseError(path, line_no, f"duplicate frame id {fid}")
                current_frame = Frame(fid, cam, unit, w, h)
                current_pair = None
                data.frames[fid] = current_frame
            elif kind == "obs":
                if current_frame is None:
                    raise ParseError(path, line_no, "'obs' before any 'frame'")
                u, v = float(toks[1]), float(toks[2])
                label = int(toks[3])
                if not (0 <= u < current_frame.width and 0 <= v < current_frame.height):
                    raise ParseError(
                        path, line_no,
                        f"observation ({u}, {v}) outside frame bounds "
                        f"{current_frame.width}x{current_frame.height}")
                current_frame.observations.append(Observation(np.array([u, v]), label))
            elif kind == "pair":
                fa, fb = int(toks[1]), int(toks[2])
                if fa >= fb:
                    raise ParseError(path, line_no, f"pair must satisfy frame_a < frame_b, got {fa} {fb}")
                for f in (fa, fb):
                    if f not in data.frames:
                        raise ReferentialIntegrityError(
                            f"{path}:{line_no}: pair references unknown frame {f}")
                if (fa, fb) in data.matches:
                    raise ParseError(path, line_no, f"duplicate pair {fa} {fb}")
                current_pair = RawMatches(fa, fb)
                current_frame = None
                data.matches[(fa, fb)] = current_pair
            elif kind == "m":
                if current_pair is None:
                    raise ParseError(path, line_no, "'m' before any 'pair'")
                ia, ib = int(toks[1]), int(toks[2])
                na = len(data.frames[current_pair.frame_a].observations)
                nb = len(data.frames[current_pair.frame_b].observations)
                if not (0 <= ia < na and 0 <= ib < nb):
                    raise ReferentialIntegrityError(
                        f"{path}:{line_no}: match indices ({ia}, {ib}) out of range")
                current_pair.pairs.append((ia, ib))
            else:
                raise ParseError(path, line_no, f"unknown record {kind!r}")
        except (ValueError, IndexError):
            raise ParseError(path, line_no, f"malformed {kind!r} record") from None
    return data


def write_correspondences(data: CorrespondenceData, path: str | Path) -> None:
    out = ["rigsfm-correspondences 1"]
    for fid in sorted(data.frames):
        f = data.frames[fid]
        out.append(f"frame {f.frame_id} {f.camera_id} {f.unit_id} {f.width} {f.height}")
        for obs in f.observations:
            out.append(f"obs {_fmt(obs.pixel[0])} {_fmt(obs.pixel[1])} {obs.semantic_label}")
    for key in sorted(data.matches):
        m = data.matches[key]
        out.append(f"pair {m.frame_a} {m.frame_b}")
        for ia, ib in m.pairs:
            out.append(f"m {ia} {ib}")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# priors / rig / anchors
# ---------------------------------------------------------------------------

def read_priors(path: str | Path) -> dict[int, tuple[float, Pose]]:
    """Unit id -> (timestamp, prior vehicle pose)."""
    path = Path(path)
    lines = path.read_text().splitlines()
    _header_check(lines, "rigsfm-priors", path)
    priors: dict[int, tuple[float, Pose]] = {}
    for line_no, toks in _tokens(path):
        if line_no == 1:
            continue
        if toks[0] != "unit" or len(toks) != 10:
            raise ParseError(path, line_no, "expected 'unit <id> <ts> <qw qx qy qz> <x y z>'")
        try:
            uid = int(toks[1])
            ts = float(toks[2])
            vals = [float(v) for v in toks[3:10]]
        except ValueError:
            raise ParseError(path, line_no, "malformed 'unit' record") from None
        if uid in priors:
            raise ParseError(path, line_no, f"duplicate unit id {uid}")
        priors[uid] = (ts, Pose(np.array(vals[:4]), np.array(vals[4:])))
    return priors


def write_priors(priors: dict[int, tuple[float, Pose]], path: str | Path) -> None:
    out = ["rigsfm-priors 1"]
    for uid in sorted(priors):
        ts, pose = priors[uid]
        q, t = pose.q, pose.t
        out.append("unit {} {} {}".format(
            uid, _fmt(ts),
            " ".join(_fmt(v) for v in [q[0], q[1], q[2], q[3], t[0], t[1], t[2]])))
    Path(path).write_text("\n".join(out) + "\n")


def read_rig(path: str | Path) -> list[RigCamera]:
    path = Path(path)
    lines = path.read_text().splitlines()
    _header_check(lines, "rigsfm-rig", path)
    cams: list[RigCamera] = []
    seen: set[int] = set()
    for line_no, toks in _tokens(path):
        if line_no == 1:
            continue
        if toks[0] != "camera" or len(toks) != 17:
            raise ParseError(
                path, line_no,
                "expected 'camera <id> <w> <h> <fx fy cx cy k1 k2> <qw qx qy qz> <x y z>'")
        try:
            cid = int(toks[1])
            w, h = int(toks[2]), int(toks[3])
            vals = [float(v) for v in toks[4:17]]
        except ValueError:
            raise ParseError(path, line_no, "malformed 'camera' record") from None
        if cid in seen:
            raise ParseError(path, line_no, f"duplicate camera id {cid}")
        seen.add(cid)
        K = CameraIntrinsics(*vals[:6])
        if not (0 <= K.cx < w and 0 <= K.cy < h):
            raise ParseError(path, line_no, f"principal point ({K.cx}, {K.cy}) outside {w}x{h}")
        rel = RelativePose(np.array(vals[6:10]), np.array(vals[10:13]))
        cams.append(RigCamera(cid, K, rel, w, h))
    return sorted(cams, key=lambda c: c.camera_id)


def write_rig(rig: list[RigCamera], path: str | Path) -> None:
    out = ["rigsfm-rig 1"]
    for cam in sorted(rig, key=lambda c: c.camera_id):
        K, rel = cam.intrinsics, cam.relative
        vals = [K.fx, K.fy, K.cx, K.cy, K.k1, K.k2,
                rel.q[0], rel.q[1], rel.q[2], rel.q[3], rel.t[0], rel.t[1], rel.t[2]]
        out.append("camera {} {} {} {}".format(
            cam.camera_id, cam.width, cam.height, " ".join(_fmt(v) for v in vals)))
    Path(path).write_text("\n".join(out) + "\n")


def read_anchor(path: str | Path) -> SceneTransform:
    path = Path(path)
    lines = path.read_text().splitlines()
    _header_check(lines, "rigsfm-anchor", path)
    for line_no, toks in _tokens(path):
        if line_no == 1:
            continue
        if toks[0] != "anchor" or len(toks) != 8:
            raise ParseError(path, line_no, "expected 'anchor <qw qx qy qz> <x y z>'")
        try:
            vals = [float(v) for v in toks[1:8]]
        except ValueError:
            raise ParseError(path, line_no, "malformed 'anchor' record") from None
        return SceneTransform(np.array(vals[:4]), np.array(vals[4:]))
    raise ParseError(path, len(lines), "anchor file holds no 'anchor' record")


def write_anchor(anchor: SceneTransform, path: str | Path) -> None:
    vals = [anchor.q[0], anchor.q[1], anchor.q[2], anchor.q[3],
            anchor.t[0], anchor.t[1], anchor.t[2]]
    Path(path).write_text(
        "rigsfm-anchor 1\nanchor " + " ".join(_fmt(v) for v in vals) + "\n")


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def write_trajectory(entries: list[tuple[float, Pose]], path: str | Path) -> None:
    """TUM-style lines: timestamp, origin, quaternion as qx qy qz qw."""
    out = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, pose in sorted(entries, key=lambda e: e[0]):
        q, t = pose.q, pose.t
        out.append(" ".join(_fmt(v) for v in [ts, t[0], t[1], t[2], q[1], q[2], q[3], q[0]]))
    Path(path).write_text("\n".join(out) + "\n")


def read_trajectory(path: str | Path) -> list[tuple[float, Pose]]:
    path = Path(path)
    entries: list[tuple[float, Pose]] = []
    for line_no, toks in _tokens(path):
        if len(toks) != 8:
            raise ParseError(path, line_no, "expected 8 fields: ts tx ty tz qx qy qz qw")
        try:
            vals = [float(v) for v in toks]
        except ValueError:
            raise ParseError(path, line_no, "malformed trajectory line") from None
        q = np.array([vals[7], vals[4], vals[5], vals[6]])
        entries.append((vals[0], Pose(q, np.array(vals[1:4]))))
    return entries


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

_PLY_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
])


def write_ply(points: np.ndarray, colors: np.ndarray, path: str | Path) -> None:
    """Binary little-endian PLY: float32 xyz + uint8 rgb per vertex."""
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if len(points) != len(colors):
        raise ValueError("points and colors must have equal length")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.empty(len(points), dtype=_PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ParseError(path, 1, "not a PLY file")
    header = blob[:end].decode("ascii").splitlines()
    count = None
    for line in header:
        if line.startswith("element vertex"):
            count = int(line.split()[2])
        if line.startswith("format") and "binary_little_endian" not in line:
            raise ParseError(path, 1, f"unsupported PLY format: {line}")
    if count is None:
        raise ParseError(path, 1, "PLY header lacks a vertex element")
    body = blob[end + len(b"end_header\n"):]
    rec = np.frombuffer(body, dtype=_PLY_DTYPE, count=count)
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    return points, colors


# ---------------------------------------------------------------------------
# reconstruction snapshots (JSON)
# ---------------------------------------------------------------------------

def _pose_to_list(p) -> list[float]:
    return [float(v) for v in np.concatenate([p.q, p.t])]


def save_reconstruction(recon: Reconstruction, path: str | Path) -> None:
    doc = {
        "format": "rigsfm-reconstruction",
        "version": 1,
        "rig": [
            {
                "camera_id": cam.camera_id,
                "width": cam.width,
                "height": cam.height,
                "intrinsics": [float(v) for v in cam.intrinsics.as_array()],
                "relative": _pose_to_list(cam.relative),
            }
            for cam in recon.rig
        ],
        "units": [
            {
                "unit_id": u.unit_id,
                "timestamp": u.timestamp,
                "pose": _pose_to_list(u.pose) if u.pose is not None else None,
                "frame_ids": u.frame_ids,
                "registered": u.registered,
            }
            for u in sorted(recon.units.values(), key=lambda u: u.unit_id)
        ],
        "frames": [
            {
                "frame_id": f.frame_id,
                "camera_id": f.camera_id,
                "unit_id": f.unit_id,
                "width": f.width,
                "height": f.height,
                "registered": f.registered,
                "pose_override": _pose_to_list(f.pose_override) if f.pose_override else None,
                "observations": [
                    [float(o.pixel[0]), float(o.pixel[1]), o.semantic_label,
                     -1 if o.track_id is None else o.track_id]
                    for o in f.observations
                ],
            }
            for f in sorted(recon.frames.values(), key=lambda f: f.frame_id)
        ],
        "points": [
            {
                "point_id": pid,
                "position": [float(v) for v in p.position],
                "semantic_label": p.semantic_label,
                "error": p.error,
                "track": [[fid, oi] for fid, oi in p.track],
            }
            for pid, p in sorted(recon.points.items())
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_reconstruction(path: str | Path) -> Reconstruction:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    if doc.get("format") != "rigsfm-reconstruction":
        raise ParseError(path, 1, "not a reconstruction snapshot")
    rig = [
        RigCamera(
            c["camera_id"],
            CameraIntrinsics(*c["intrinsics"]),
            RelativePose(np.array(c["relative"][:4]), np.array(c["relative"][4:])),
            c["width"], c["height"],
        )
        for c in doc["rig"]
    ]
    recon = Reconstruction(rig)
    for u in doc["units"]:
        pose = None
        if u["pose"] is not None:
            pose = Pose(np.array(u["pose"][:4]), np.array(u["pose"][4:]))
        recon.add_unit(RigidUnit(u["unit_id"], u["timestamp"], pose, [], u["registered"]))
    for f in doc["frames"]:
        frame = Frame(f["frame_id"], f["camera_id"], f["unit_id"], f["width"], f["height"],
                      registered=f["registered"])
        if f["pose_override"] is not None:
            frame.pose_override = Pose(np.array(f["pose_override"][:4]),
                                       np.array(f["pose_override"][4:]))
        for u, v, label, track_id in f["observations"]:
            frame.observations.append(
                Observation(np.array([u, v]), int(label),
                            None if track_id < 0 else int(track_id)))
        recon.add_frame(frame)
    max_pid = -1
    for p in doc["points"]:
        pid = p["point_id"]
        recon.points[pid] = ScenePoint(
            np.array(p["position"]), p["semantic_label"],
            [(fid, oi) for fid, oi in p["track"]], p["error"])
        max_pid = max(max_pid, pid)
    recon._next_point_id = max_pid + 1
    return recon
