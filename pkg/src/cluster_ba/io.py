"""Plain-text scan, pose, association and report formats.

Every numeric value is written with 17 significant digits, so a
write/read cycle reproduces doubles exactly.  Lines starting with ``#``
are comments; CRLF line endings are accepted.

Scan file      one point per line: ``x y z`` (meters, scan frame)
Pose file      ``j r11 r12 r13 tx r21 r22 r23 ty r31 r32 r33 tz``, ``j`` 1-based
Association    ``feature_id pose_id point_index``: feature and pose ids are
               1-based, ``point_index`` is the 0-based line of the point
               among the data lines of that pose's scan file
Features       ``feature_id kind nx ny nz qx qy qz``
Manifest       ``key = value``
"""

from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_geom import Pose
from .errors import FormatError
from .simulator import FeatureDef, Scene

FMT = "%.17g"


def _fmt(x):
    return FMT % x


def _data_lines(path, split=True):
    """Yield ``(line_number, fields)`` for non-comment, non-blank lines.

    With ``split=False`` the stripped line text is yielded instead of fields.
    """
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except OSError as exc:
        raise FormatError(path, 0, f"cannot read file: {exc.strerror or exc}") from exc
    except UnicodeDecodeError as exc:
        raise FormatError(path, 0, "file is not UTF-8 text") from exc
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        yield no, line.split() if split else line


def _floats(path, no, fields, count, what):
    if len(fields) != count:
        raise FormatError(path, no, f"expected {count} fields for {what}, got {len(fields)}")
    try:
        vals = [float(f) for f in fields]
    except ValueError as exc:
        raise FormatError(path, no, f"non-numeric field in {what}: {exc}") from exc
    if not all(np.isfinite(vals)):
        raise FormatError(path, no, f"non-finite value in {what}")
    return vals


def _int(path, no, s, what):
    try:
        return int(s)
    except ValueError:
        raise FormatError(path, no, f"{what} must be an integer, got {s!r}") from None


def write_scan(path, points):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w", newline="\n") as fh:
        fh.write("# x y z [m]\n")
        for p in pts:
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")


def read_scan(path):
    rows = [_floats(path, no, f, 3, "point") for no, f in _data_lines(path)]
    return np.array(rows, dtype=float).reshape(-1, 3)


def pose_line(j, T: Pose):
    vals = []
    for r in range(3):
        vals += [T.R[r, 0], T.R[r, 1], T.R[r, 2], T.t[r]]
    return " ".join([str(j)] + [_fmt(v) for v in vals])


def write_poses(path, poses):
    with open(path, "w", newline="\n") as fh:
        fh.write("# j r11 r12 r13 tx r21 r22 r23 ty r31 r32 r33 tz\n")
        for j, T in enumerate(poses, start=1):
            fh.write(pose_line(j, T) + "\n")


def read_poses(path):
    poses = {}
    for no, f in _data_lines(path):
        if len(f) != 13:
            raise FormatError(path, no, f"expected 13 fields for pose, got {len(f)}")
        j = _int(path, no, f[0], "pose index")
        if j in poses:
            raise FormatError(path, no, f"duplicate pose index {j}")
        v = _floats(path, no, f[1:], 12, "pose")
        M = np.array(v).reshape(3, 4)
        R = M[:, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise FormatError(path, no, "rotation block is not a proper rotation")
        poses[j] = Pose(R, M[:, 3])
    if sorted(poses) != list(range(1, len(poses) + 1)):
        raise FormatError(path, 0, "pose indices must be 1..M without gaps")
    return [poses[j] for j in range(1, len(poses) + 1)]


def write_association(path, table):
    with open(path, "w", newline="\n") as fh:
        fh.write("# feature_id pose_id point_index (ids 1-based, point index 0-based)\n")
        for i, obs in enumerate(table, start=1):
            for j in sorted(obs):
                for k in obs[j]:
                    fh.write(f"{i} {j + 1} {int(k)}\n")


def read_association(path, num_poses=None, scan_sizes=None):
    rows = {}
    for no, f in _data_lines(path):
        if len(f) != 3:
            raise FormatError(path, no, f"expected 3 fields for association, got {len(f)}")
        i = _int(path, no, f[0], "feature_id")
        j = _int(path, no, f[1], "pose_id")
        k = _int(path, no, f[2], "point_index")
        if i < 1 or j < 1 or k < 0:
            raise FormatError(path, no, "ids must be >= 1 and point_index >= 0")
        if num_poses is not None and j > num_poses:
            raise FormatError(path, no, f"pose_id {j} exceeds pose count {num_poses}")
        if scan_sizes is not None and k >= scan_sizes[j - 1]:
            raise FormatError(path, no, f"point_index {k} beyond scan {j} ({scan_sizes[j - 1]} points)")
        rows.setdefault(i, {}).setdefault(j - 1, []).append(k)
    if rows and sorted(rows) != list(range(1, len(rows) + 1)):
        raise FormatError(path, 0, "feature ids must be 1..M_f without gaps")
    return [{j: np.array(v, dtype=np.intp) for j, v in sorted(rows[i].items())}
            for i in range(1, len(rows) + 1)]


def write_features(path, defs):
    with open(path, "w", newline="\n") as fh:
        fh.write("# feature_id kind nx ny nz qx qy qz\n")
        for i, d in enumerate(defs, start=1):
            vals = " ".join(_fmt(x) for x in (*d.n, *d.q))
            fh.write(f"{i} {d.kind} {vals}\n")


def read_features(path):
    defs = []
    for no, f in _data_lines(path):
        if len(f) != 8:
            raise FormatError(path, no, f"expected 8 fields for feature, got {len(f)}")
        if f[1] not in ("plane", "edge"):
            raise FormatError(path, no, f"unknown feature kind {f[1]!r}")
        v = _floats(path, no, f[2:], 6, "feature")
        defs.append(FeatureDef(f[1], np.array(v[:3]), np.array(v[3:])))
    return defs


def write_kv(path, items):
    with open(path, "w", newline="\n") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {json.dumps(v)}\n")


def read_kv(path):
    out = {}
    for no, line in _data_lines(path, split=False):
        if "=" not in line:
            raise FormatError(path, no, "expected 'key = value'")
        k, v = line.split("=", 1)
        try:
            out[k.strip()] = json.loads(v.strip())
        except json.JSONDecodeError as exc:
            raise FormatError(path, no, f"bad value: {exc.msg}") from None
    return out


SCAN_DIR = "scans"


def scan_name(j):
    """File name of scan ``j`` (0-based index, 1-based name)."""
    return f"scan_{j + 1:04d}.txt"


def write_scene(out_dir, scene: Scene, init_poses=None, manifest=None):
    out = Path(out_dir)
    (out / SCAN_DIR).mkdir(parents=True, exist_ok=True)
    for j, s in enumerate(scene.scans):
        write_scan(out / SCAN_DIR / scan_name(j), s)
    write_poses(out / "gt_poses.txt", scene.gt_poses)
    if init_poses is not None:
        write_poses(out / "init_poses.txt", init_poses)
    write_association(out / "association.txt", scene.gt_association)
    write_features(out / "features.txt", scene.feature_defs)
    info = {"num_poses": scene.num_poses, "num_features": len(scene.feature_defs),
            "num_points": scene.num_points, "sigma_p": scene.sigma_p, "misses": scene.misses}
    info.update({k: v for k, v in scene.meta.items() if _jsonable(v)})
    info.update(manifest or {})
    write_kv(out / "manifest.txt", info)


def _jsonable(v):
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def read_scene(in_dir):
    """Return ``(scene, init_poses_or_None, manifest)``."""
    d = Path(in_dir)
    manifest = read_kv(d / "manifest.txt") if (d / "manifest.txt").exists() else {}
    init = read_poses(d / "init_poses.txt") if (d / "init_poses.txt").exists() else None
    if (d / "gt_poses.txt").exists():
        gt = read_poses(d / "gt_poses.txt")
    elif init is not None:
        # raw input without ground truth
        gt = list(init)
        manifest["has_gt"] = False
    else:
        raise FormatError(d / "gt_poses.txt", 0, "need gt_poses.txt or init_poses.txt")
    scans = []
    for j in range(len(gt)):
        p = d / SCAN_DIR / scan_name(j)
        if not p.exists():
            raise FormatError(p, 0, "missing scan file")
        scans.append(read_scan(p))
    assoc_path = d / "association.txt"
    table = read_association(assoc_path, len(gt), [len(s) for s in scans]) \
        if assoc_path.exists() else []
    defs = read_features(d / "features.txt") if (d / "features.txt").exists() else \
        [FeatureDef("plane", np.array([0.0, 0.0, 1.0]), np.zeros(3)) for _ in table]
    if len(defs) != len(table):
        raise FormatError(d / "features.txt", 0,
                          f"{len(defs)} features listed but association has {len(table)}")
    if init is not None and len(init) != len(gt):
        raise FormatError(d / "init_poses.txt", 0, "initial and ground-truth pose counts differ")
    scene = Scene(gt, scans, table, defs, sigma_p=float(manifest.get("sigma_p", 0.0)),
                  misses=int(manifest.get("misses", 0)), meta=dict(manifest))
    return scene, init, manifest


@dataclass
class RunReport:
    """Config echo, scalar metrics and named tables.

    Serialized as ``[section]`` blocks: ``key = json`` lines for config and
    metrics, CSV (JSON-encoded cells) for tables.
    """

    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def add_table(self, name, header, rows):
        self.tables[name] = (list(header), [list(r) for r in rows])

    def to_text(self):
        buf = _io.StringIO()
        buf.write("# cluster-ba run report\n")
        for sec in ("config", "metrics"):
            buf.write(f"[{sec}]\n")
            for k, v in getattr(self, sec).items():
                buf.write(f"{k} = {json.dumps(v)}\n")
        for name, (header, rows) in self.tables.items():
            buf.write(f"[table {name}]\n")
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([json.dumps(x) for x in r])
        return buf.getvalue()

    @classmethod
    def from_text(cls, text, path="<report>"):
        rep = cls()
        section = None
        table = None
        lines = text.splitlines()
        for no, line in enumerate(lines, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if s.startswith("[") and s.endswith("]"):
                name = s[1:-1]
                if name in ("config", "metrics"):
                    section, table = name, None
                elif name.startswith("table "):
                    section = "table"
                    table = name[6:]
                    rep.tables[table] = None
                else:
                    raise FormatError(path, no, f"unknown section {name!r}")
                continue
            if section in ("config", "metrics"):
                if "=" not in s:
                    raise FormatError(path, no, "expected 'key = value'")
                k, v = s.split("=", 1)
                try:
                    getattr(rep, section)[k.strip()] = json.loads(v.strip())
                except json.JSONDecodeError as exc:
                    raise FormatError(path, no, f"bad value: {exc.msg}") from None
            elif section == "table":
                row = next(csv.reader([line]))
                if rep.tables[table] is None:
                    rep.tables[table] = (row, [])
                else:
                    try:
                        rep.tables[table][1].append([json.loads(x) for x in row])
                    except json.JSONDecodeError as exc:
                        raise FormatError(path, no, f"bad cell: {exc.msg}") from None
            else:
                raise FormatError(path, no, "content outside a section")
        for name, t in rep.tables.items():
            if t is None:
                rep.tables[name] = ([], [])
        return rep

    def write(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise FormatError(path, 0, f"cannot read file: {exc.strerror or exc}") from exc
        return cls.from_text(text, str(path))

    def __eq__(self, other):
        if not isinstance(other, RunReport):
            return NotImplemented
        return self.to_text() == other.to_text()
