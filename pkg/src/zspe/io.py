"""File formats: PLY meshes, 16-bit depth PNGs, mask PNGs, ZSPF feature
matrices, BOP-style JSON annotations and the results CSV."""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, DepthImage, Pose, TriangleMesh


class FormatError(ValueError):
    pass


# -- PLY ---------------------------------------------------------------------

_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def read_ply(path, symmetries=None) -> TriangleMesh:
    """Read vertices and triangular faces from an ASCII or binary little-endian PLY."""
    path = Path(path)
    data = path.read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    elements = []  # [name, count, [(name, type) or (name, ("list", ctype, itype))]]
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            else:
                elements[-1][2].append((tok[2], tok[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")

    verts = faces = None
    if fmt == "ascii":
        tokens = data[body_start:].decode("ascii").split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        k = int(tokens[pos])
                        row[pname] = [int(x) for x in tokens[pos + 1:pos + 1 + k]]
                        pos += 1 + k
                    else:
                        row[pname] = float(tokens[pos])
                        pos += 1
                rows.append(row)
            if name == "vertex":
                verts = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=float)
            elif name == "face":
                key = props[0][0]
                faces = [r[key] for r in rows]
    else:
        buf = memoryview(data)[body_start:]
        pos = 0
        for name, count, props in elements:
            if all(not isinstance(t, tuple) for _, t in props):
                dt = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in props])
                arr = np.frombuffer(buf[pos:pos + dt.itemsize * count], dtype=dt)
                pos += dt.itemsize * count
                if name == "vertex":
                    verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(float)
                continue
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        cfmt, ifmt = "<" + _PLY_TYPES[ptype[1]], _PLY_TYPES[ptype[2]]
                        (k,) = struct.unpack_from(cfmt, buf, pos)
                        pos += struct.calcsize(cfmt)
                        f = f"<{k}{ifmt}"
                        row[pname] = list(struct.unpack_from(f, buf, pos))
                        pos += struct.calcsize(f)
                    else:
                        f = "<" + _PLY_TYPES[ptype]
                        (row[pname],) = struct.unpack_from(f, buf, pos)
                        pos += struct.calcsize(f)
                rows.append(row)
            if name == "face":
                faces = [r[props[0][0]] for r in rows]
    if verts is None:
        raise FormatError(f"{path}: no vertex element")
    tris = []
    for f in faces or []:
        # fan-triangulate polygons
        tris.extend([f[0], f[i], f[i + 1]] for i in range(1, len(f) - 1))
    return TriangleMesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3),
                        tuple(symmetries) if symmetries else (Pose(),))


def write_ply(path, mesh: TriangleMesh, binary: bool = False) -> None:
    v, f = mesh.vertices, mesh.triangles
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(v)}", "property float x", "property float y",
              "property float z", f"element face {len(f)}",
              "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(v.astype("<f4").tobytes())
            rec = np.zeros(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = f
            fh.write(rec.tobytes())
        else:
            for p in v:
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n".encode("ascii"))
            for t in f:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))


# -- images --------------------------------------------------------------------

def write_depth_png(path, depth_mm: np.ndarray, depth_scale: float = 1.0) -> None:
    """Store depth (mm) as uint16 raw values with ``raw * depth_scale = mm``."""
    raw = np.round(np.asarray(depth_mm, dtype=float) / depth_scale)
    if raw.max(initial=0) > 65535:
        raise FormatError("depth exceeds the 16-bit range at this scale")
    Image.fromarray(raw.astype(np.uint16)).save(path, format="PNG")


def read_depth_png(path, intrinsics: CameraIntrinsics, depth_scale: float = 1.0) -> DepthImage:
    with Image.open(path) as im:
        raw = np.array(im)
    if raw.ndim != 2:
        raise FormatError(f"{path}: depth PNG must be single-channel")
    return DepthImage(raw.astype(float) * depth_scale, intrinsics)


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr != 0


# -- ZSPF feature matrices -----------------------------------------------------

ZSPF_MAGIC = b"ZSPF"
ZSPF_VERSION = 1
_ZSPF_HEADER = struct.Struct("<4sIII")


def write_features(path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise FormatError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_ZSPF_HEADER.pack(ZSPF_MAGIC, ZSPF_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _ZSPF_HEADER.size:
        raise FormatError(f"{path}: truncated ZSPF header")
    magic, version, rows, dim = _ZSPF_HEADER.unpack_from(data)
    if magic != ZSPF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != ZSPF_VERSION:
        raise FormatError(f"{path}: unsupported ZSPF version {version}")
    expected = _ZSPF_HEADER.size + rows * dim * 4
    if len(data) != expected:
        raise FormatError(f"{path}: payload size {len(data)} != {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_ZSPF_HEADER.size).reshape(rows, dim).astype(float)


# -- JSON ----------------------------------------------------------------------

def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return json.loads(path.read_text())


def pose_to_json(pose: Pose) -> dict:
    return {"R": [float(x) for x in pose.R.ravel()], "t": [float(x) for x in pose.t]}


def pose_from_json(d: dict) -> Pose:
    return Pose(np.asarray(d["R"], dtype=float).reshape(3, 3), np.asarray(d["t"], dtype=float))


def symmetries_from_json(items) -> tuple:
    return tuple(pose_from_json(s) for s in items or [])


def read_models(models_dir) -> tuple[dict[int, TriangleMesh], dict[int, dict]]:
    """Load ``obj_{id}.ply`` meshes listed in ``models_info.json``."""
    models_dir = Path(models_dir)
    info = {int(k): v for k, v in load_json(models_dir / "models_info.json").items()}
    meshes = {}
    for oid, meta in sorted(info.items()):
        path = models_dir / f"obj_{oid:06d}.ply"
        if not path.exists():
            raise FileNotFoundError(f"missing file: {path}")
        meshes[oid] = read_ply(path, symmetries_from_json(meta.get("symmetries")))
    return meshes, info


def write_models(models_dir, meshes: dict[int, TriangleMesh], info: dict[int, dict]) -> None:
    models_dir = Path(models_dir)
    models_dir.mkdir(parents=True, exist_ok=True)
    for oid, mesh in sorted(meshes.items()):
        write_ply(models_dir / f"obj_{oid:06d}.ply", mesh)
    dump_json(models_dir / "models_info.json", {str(k): v for k, v in sorted(info.items())})


# -- results CSV ---------------------------------------------------------------

RESULT_FIELDS = ["scene_id", "im_id", "obj_id", "score", "R", "t", "time"]


@dataclass(frozen=True)
class SceneEstimate:
    scene_id: int
    im_id: int
    obj_id: int
    score: float
    pose: Pose
    runtime: float

    def key(self):
        return (self.scene_id, self.im_id, self.obj_id)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_results(estimates: Iterable[SceneEstimate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for e in estimates:
        w.writerow([e.scene_id, e.im_id, e.obj_id, _fmt(e.score),
                    " ".join(_fmt(x) for x in e.pose.R.ravel()),
                    " ".join(_fmt(x) for x in e.pose.t), _fmt(e.runtime)])
    return buf.getvalue()


def write_results(path, estimates: Iterable[SceneEstimate]) -> None:
    Path(path).write_text(format_results(estimates))


def parse_results(text: str) -> list[SceneEstimate]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        r = np.array([float(x) for x in row["R"].split()]).reshape(3, 3)
        t = np.array([float(x) for x in row["t"].split()])
        out.append(SceneEstimate(int(row["scene_id"]), int(row["im_id"]), int(row["obj_id"]),
                                 float(row["score"]), Pose(r, t), float(row["time"])))
    return out


def read_results(path) -> list[SceneEstimate]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return parse_results(path.read_text())


# -- dataset layout --------------------------------------------------------------

def scene_dir(root, scene_id: int) -> Path:
    return Path(root) / f"{scene_id:06d}"


def list_scenes(root) -> list[int]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"missing directory: {root}")
    return sorted(int(p.name) for p in root.iterdir()
                  if p.is_dir() and p.name.isdigit() and (p / "scene_camera.json").exists())


def read_scene_camera(root, scene_id: int) -> dict[int, tuple[CameraIntrinsics, float]]:
    cams = load_json(scene_dir(root, scene_id) / "scene_camera.json")
    out = {}
    for im, c in cams.items():
        k = np.asarray(c["cam_K"], dtype=float).reshape(3, 3)
        cam = CameraIntrinsics(k[0, 0], k[1, 1], k[0, 2], k[1, 2], int(c["width"]), int(c["height"]))
        out[int(im)] = (cam, float(c.get("depth_scale", 1.0)))
    return out


def camera_to_json(cam: CameraIntrinsics, depth_scale: float) -> dict:
    return {"cam_K": [float(x) for x in cam.K.ravel()], "depth_scale": float(depth_scale),
            "width": cam.width, "height": cam.height}


def read_scene_gt(root, scene_id: int) -> dict[int, list[tuple[int, Pose]]]:
    """Per-image ground truth; accepts ``R``/``t`` or BOP ``cam_R_m2c``/``cam_t_m2c`` keys."""
    gt = load_json(scene_dir(root, scene_id) / "scene_gt.json")
    out = {}
    for im, items in gt.items():
        recs = []
        for g in items:
            r = g["R"] if "R" in g else g["cam_R_m2c"]
            t = g["t"] if "t" in g else g["cam_t_m2c"]
            recs.append((int(g["obj_id"]), Pose(np.asarray(r, dtype=float).reshape(3, 3),
                                                np.asarray(t, dtype=float))))
        out[int(im)] = recs
    return out


def gt_to_json(obj_id: int, pose: Pose) -> dict:
    return {"obj_id": int(obj_id), **pose_to_json(pose)}


def read_depth(root, scene_id: int, im_id: int, cam: CameraIntrinsics, depth_scale: float) -> DepthImage:
    path = scene_dir(root, scene_id) / "depth" / f"{im_id:06d}.png"
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return read_depth_png(path, cam, depth_scale)
