"""End-to-end orchestration: model preparation, per-image estimation,
template rendering, evaluation and synthetic dataset generation.

On-disk layout used next to a BOP-like dataset root::

    masks/{scene:06d}/index.json        {im_id: [{"file", "obj_id"?, "score"?}, ...]}
    masks/{scene:06d}/{im:06d}_{k:06d}.png
    embeddings/templates.zspf (+ .json with [obj_id, view_id] per row)
    embeddings/{scene:06d}/{im:06d}.zspf (+ .json with the mask index per row)
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import io as zio
from .descriptor import HierarchicalCloud, Whitener, build_hierarchy, describe, fit_whiteners, whiten
from .geometry import (CameraIntrinsics, DepthImage, GeometryError, Pose, TriangleMesh, circumradius,
                       mesh_diameter, project_depth, random_rotation, sample_surface)
from .labeler import EmbeddingMatrix, assign, filter_masks, similarity
from .matcher import coarse_match, fine_match
from .metrics import ArConfig, PoseErrorRecord, ScoredMask, mspd, mssd, pose_ar, seg_ap, vsd_errors
from .noise_filter import filter_by_radius
from .registration import register
from .render import render_depth, render_scene
from .shapes import blob
from .views import template_camera, template_poses, view_set

log = logging.getLogger("zspe")

SYNTH_CAMERA = CameraIntrinsics(572.4, 573.6, 325.3, 242.0, 640, 480)
SYNTH_DEPTH_SCALE = 0.1
TEMPLATE_DEPTH_SCALE = 0.1


@dataclass(frozen=True)
class PipelineConfig:
    views: int = 72
    threshold: float = 0.5
    min_mask_area: int = 200
    model_points: int = 30000
    # voxel sizes and radii are fractions / multiples of the object circumradius R
    fine_voxel_div: float = 25.0
    coarse_voxel_div: float = 5.0
    fine_radius_mult: float = 4.0
    coarse_radius_mult: float = 2.0
    inlier_div: float = 10.0
    top_k: int = 256
    temperature: float = 0.1
    min_confidence: float = 0.01
    min_scene_points: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("views", "min_mask_area", "model_points", "top_k", "min_scene_points"):
            if getattr(self, name) < 0 or (name != "min_mask_area" and getattr(self, name) == 0):
                raise GeometryError(f"{name} must be positive")
        if not -1.0 < self.threshold < 1.0:
            raise GeometryError("threshold must lie in (-1, 1)")
        if self.temperature <= 0 or self.inlier_div <= 0:
            raise GeometryError("temperature and inlier_div must be positive")
        if not self.fine_voxel_div > self.coarse_voxel_div > 0:
            raise GeometryError("need fine_voxel_div > coarse_voxel_div > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise GeometryError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


def thread_count() -> int:
    raw = os.environ.get("ZSPE_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise GeometryError(f"ZSPE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise GeometryError("ZSPE_THREADS must be >= 1")
    return n


# -- model preparation -----------------------------------------------------------

@dataclass(frozen=True)
class PreparedModel:
    obj_id: int
    mesh: TriangleMesh
    radius: float
    diameter: float
    cloud: HierarchicalCloud          # whitened features
    whiteners: tuple[Whitener, Whitener]


def _hierarchy(cloud, radius: float, cfg: PipelineConfig, viewpoint=None) -> HierarchicalCloud:
    fv, cv = radius / cfg.fine_voxel_div, radius / cfg.coarse_voxel_div
    h = build_hierarchy(cloud, fv, cv)
    return describe(h, cfg.fine_radius_mult * fv, cfg.coarse_radius_mult * cv, viewpoint=viewpoint)


def prepare_model(obj_id: int, mesh: TriangleMesh, cfg: PipelineConfig,
                  diameter: Optional[float] = None) -> PreparedModel:
    cloud = sample_surface(mesh, cfg.model_points, seed=cfg.seed + obj_id)
    radius = circumradius(cloud)
    h = _hierarchy(cloud, radius, cfg)
    wf, wc = fit_whiteners(h)
    diameter = mesh_diameter(mesh) if diameter is None else float(diameter)
    return PreparedModel(obj_id, mesh, radius, diameter, whiten(h, wf, wc), (wf, wc))


def prepare_models(meshes: Mapping[int, TriangleMesh], cfg: PipelineConfig,
                   info: Optional[Mapping[int, dict]] = None) -> dict[int, PreparedModel]:
    info = info or {}
    return {oid: prepare_model(oid, m, cfg, info.get(oid, {}).get("diameter"))
            for oid, m in sorted(meshes.items())}


# -- estimation ------------------------------------------------------------------

def estimate_object(model: PreparedModel, depth: DepthImage, mask: np.ndarray,
                    cfg: PipelineConfig):
    """Pose of one object from its instance mask; returns a
    ``RegistrationResult`` or raises ``GeometryError``."""
    cloud = project_depth(depth, mask)
    if len(cloud) < cfg.min_scene_points:
        raise GeometryError(f"only {len(cloud)} valid depth pixels in mask")
    cloud = filter_by_radius(cloud, model.radius)
    if len(cloud) < cfg.min_scene_points:
        raise GeometryError(f"only {len(cloud)} points left after noise filtering")
    scene = _hierarchy(cloud, model.radius, cfg, viewpoint=np.zeros(3))
    scene = whiten(scene, *model.whiteners)
    pairs = coarse_match(model.cloud, scene, cfg.top_k)
    corr = fine_match(model.cloud, scene, pairs, temperature=cfg.temperature,
                      min_confidence=cfg.min_confidence)
    return register(model.cloud, scene, corr, model.radius / cfg.inlier_div)


def estimate_scene(scene_id: int, im_id: int, depth: DepthImage, masks: Sequence[np.ndarray],
                   embeddings: EmbeddingMatrix, templates: EmbeddingMatrix,
                   models: Mapping[int, PreparedModel], cfg: PipelineConfig,
                   timing: bool = True) -> list[zio.SceneEstimate]:
    """Label the masks by template similarity and register each labelled one.

    ``embeddings`` rows are keyed by mask index. Skipped masks (too small,
    unassigned, degenerate geometry) yield no estimate.
    """
    if len(masks) != len(embeddings.ids):
        raise GeometryError(f"{len(masks)} masks but {len(embeddings.ids)} embeddings")
    if not len(masks):
        return []
    keep = [i for i, m in enumerate(masks) if filter_masks([m], cfg.min_mask_area)]
    if not keep:
        return []
    rows = [embeddings.ids.index(i) for i in keep]
    scene_emb = EmbeddingMatrix(embeddings.rows[rows], tuple(keep))
    out = []
    for a in assign(similarity(scene_emb, templates), cfg.threshold):
        oid = int(a.object_id)
        if oid not in models:
            log.warning("scene %d image %d: no model for object %d", scene_id, im_id, oid)
            continue
        t0 = time.perf_counter()
        try:
            res = estimate_object(models[oid], depth, masks[a.mask_id], cfg)
        except GeometryError as exc:
            log.warning("scene %d image %d mask %d: skipped (%s)", scene_id, im_id, a.mask_id, exc)
            continue
        dt = time.perf_counter() - t0 if timing else 0.0
        out.append(zio.SceneEstimate(scene_id, im_id, oid, res.score, res.pose, dt))
    return sorted(out, key=lambda e: (e.key(), -e.score))


# -- masks / embeddings on disk ---------------------------------------------------

def read_mask_index(masks_root, scene_id: int) -> dict[int, list[dict]]:
    d = Path(masks_root) / f"{scene_id:06d}"
    return {int(k): v for k, v in zio.load_json(d / "index.json").items()}


def load_masks(masks_root, scene_id: int, entries: Sequence[dict]) -> list[np.ndarray]:
    d = Path(masks_root) / f"{scene_id:06d}"
    return [zio.read_mask_png(d / e["file"]) for e in entries]


def write_mask_set(masks_root, scene_id: int, per_image: Mapping[int, Sequence[tuple]]) -> None:
    """``per_image[im] = [(mask, obj_id or None, score or None), ...]``."""
    d = Path(masks_root) / f"{scene_id:06d}"
    d.mkdir(parents=True, exist_ok=True)
    index = {}
    for im, items in sorted(per_image.items()):
        entries = []
        for k, (mask, oid, score) in enumerate(items):
            name = f"{im:06d}_{k:06d}.png"
            zio.write_mask_png(d / name, mask)
            e = {"file": name}
            if oid is not None:
                e["obj_id"] = int(oid)
            if score is not None:
                e["score"] = float(score)
            entries.append(e)
        index[str(im)] = entries
    zio.dump_json(d / "index.json", index)


def write_embeddings(path, rows: np.ndarray, ids: Sequence) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    zio.write_features(path, np.asarray(rows, dtype=float))
    zio.dump_json(path.with_suffix(".json"), [list(i) if isinstance(i, tuple) else i for i in ids])


def read_embeddings(path, normalize: bool = True) -> EmbeddingMatrix:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    rows = zio.read_features(path)
    ids = [tuple(i) if isinstance(i, list) else i for i in zio.load_json(path.with_suffix(".json"))]
    if len(ids) != len(rows):
        raise zio.FormatError(f"{path}: {len(rows)} rows but {len(ids)} ids")
    if not len(rows):
        return EmbeddingMatrix(np.zeros((0, 1 if rows.ndim < 2 else rows.shape[1])), ())
    return EmbeddingMatrix.normalized(rows, ids) if normalize else EmbeddingMatrix(rows, ids)


# -- dataset-level estimation ------------------------------------------------------

def _image_jobs(dataset, masks_root):
    jobs = []
    for sid in zio.list_scenes(dataset):
        cams = zio.read_scene_camera(dataset, sid)
        index = read_mask_index(masks_root, sid)
        for im in sorted(cams):
            jobs.append((sid, im, cams[im], index.get(im, [])))
    return jobs


def estimate_dataset(dataset, masks_root, embeddings_root, models: Mapping[int, PreparedModel],
                     cfg: PipelineConfig, timing: bool = True,
                     threads: Optional[int] = None) -> list[zio.SceneEstimate]:
    templates = read_embeddings(Path(embeddings_root) / "templates.zspf")
    jobs = _image_jobs(dataset, masks_root)

    def run(job):
        sid, im, (cam, scale), entries = job
        depth = zio.read_depth(dataset, sid, im, cam, scale)
        masks = load_masks(masks_root, sid, entries)
        if not masks:
            return []
        emb = read_embeddings(Path(embeddings_root) / f"{sid:06d}" / f"{im:06d}.zspf")
        return estimate_scene(sid, im, depth, masks, emb, templates, models, cfg, timing)

    threads = threads or thread_count()
    if threads == 1:
        results = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, jobs))
    out = [e for r in results for e in r]
    return sorted(out, key=lambda e: (e.key(), -e.score))


# -- templates ---------------------------------------------------------------------

def render_templates(meshes: Mapping[int, TriangleMesh], n_views: int, out_dir,
                     size: int = 128) -> dict:
    """Depth templates per object from ``n_views`` sampled orientations.

    The camera sits at three circumradii from the object centroid, which keeps
    the whole object inside the 90 degree field of view.
    """
    out_dir = Path(out_dir)
    cam = template_camera(size)
    summary = {}
    for oid, mesh in sorted(meshes.items()):
        centre = mesh.vertices.mean(axis=0)
        radius = float(np.linalg.norm(mesh.vertices - centre, axis=1).max())
        poses = template_poses(view_set(n_views, 3.0 * radius), centre)
        d = out_dir / f"obj_{oid:06d}"
        (d / "depth").mkdir(parents=True, exist_ok=True)
        (d / "mask").mkdir(parents=True, exist_ok=True)
        meta = []
        for v, pose in enumerate(poses):
            r = render_depth(mesh, pose, cam)
            zio.write_depth_png(d / "depth" / f"{v:06d}.png", r.depth.data, TEMPLATE_DEPTH_SCALE)
            zio.write_mask_png(d / "mask" / f"{v:06d}.png", r.object_mask)
            meta.append({"view_id": v, **zio.pose_to_json(pose)})
        zio.dump_json(d / "templates.json", {"camera": zio.camera_to_json(cam, TEMPLATE_DEPTH_SCALE),
                                             "views": meta})
        summary[oid] = len(poses)
    return summary


# -- evaluation ----------------------------------------------------------------------

def _match_estimates(ests: Sequence[zio.SceneEstimate], gts: Sequence[tuple[int, Pose]],
                     meshes: Mapping[int, TriangleMesh]) -> list[Optional[zio.SceneEstimate]]:
    """Greedy assignment in descending score order: each estimate takes the
    unmatched GT instance of the same object with the smallest MSSD."""
    matched: list[Optional[zio.SceneEstimate]] = [None] * len(gts)
    for e in sorted(ests, key=lambda e: -e.score):
        cands = [(mssd(e.pose, g, meshes[o]), i) for i, (o, g) in enumerate(gts)
                 if o == e.obj_id and matched[i] is None]
        if cands:
            matched[min(cands)[1]] = e
    return matched


def evaluate_poses(results: Sequence[zio.SceneEstimate], dataset, meshes: Mapping[int, TriangleMesh],
                   info: Mapping[int, dict], config: ArConfig = ArConfig()) -> dict:
    diameters = {oid: float(info.get(oid, {}).get("diameter") or mesh_diameter(m))
                 for oid, m in meshes.items()}
    by_image = {}
    for e in results:
        by_image.setdefault((e.scene_id, e.im_id), []).append(e)
    records = []
    width = None
    for sid in zio.list_scenes(dataset):
        cams = zio.read_scene_camera(dataset, sid)
        gt = zio.read_scene_gt(dataset, sid)
        for im in sorted(gt):
            cam, scale = cams[im]
            width = width or cam.width
            depth = zio.read_depth(dataset, sid, im, cam, scale)
            items = gt[im]
            for (oid, g), e in zip(items, _match_estimates(by_image.get((sid, im), []), items, meshes)):
                if oid not in meshes:
                    raise GeometryError(f"missing model for object {oid}")
                if e is None:
                    records.append(PoseErrorRecord(sid, im, oid))
                    continue
                mesh = meshes[oid]
                try:
                    e_mspd = mspd(e.pose, g, mesh, cam)
                except GeometryError:
                    e_mspd = None  # estimate behind the camera counts as a miss
                records.append(PoseErrorRecord(
                    sid, im, oid,
                    tuple(vsd_errors(e.pose, g, mesh, depth, config.vsd_taus(diameters[oid]), config.delta)),
                    mssd(e.pose, g, mesh), e_mspd))
    report = pose_ar(records, diameters, width or 640, config)
    times = [e.runtime for e in results]
    report["n_estimates"] = len(results)
    report["mean_time_per_object"] = float(np.mean(times)) if times else 0.0
    report["config"] = config.to_dict()
    return report


def read_scored_masks(root) -> list[ScoredMask]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"missing directory: {root}")
    out = []
    for d in sorted(p for p in root.iterdir() if p.is_dir() and p.name.isdigit()):
        sid = int(d.name)
        for im, entries in sorted(read_mask_index(root, sid).items()):
            for e in entries:
                if "obj_id" not in e:
                    raise zio.FormatError(f"{d / 'index.json'}: mask {e['file']} has no obj_id")
                out.append(ScoredMask((sid, im), int(e["obj_id"]), zio.read_mask_png(d / e["file"]),
                                      float(e.get("score", 1.0))))
    return out


def evaluate_segmentation(pred_root, gt_root) -> dict:
    return seg_ap(read_scored_masks(pred_root), read_scored_masks(gt_root))


def write_predicted_masks(masks_root, out_root, results: Sequence[zio.SceneEstimate],
                          dataset, embeddings_root, cfg: PipelineConfig) -> None:
    """Labelled masks (object id + similarity score) for segmentation evaluation."""
    templates = read_embeddings(Path(embeddings_root) / "templates.zspf")
    for sid in zio.list_scenes(dataset):
        per_image = {}
        for im, entries in sorted(read_mask_index(masks_root, sid).items()):
            masks = load_masks(masks_root, sid, entries)
            items = []
            if masks:
                emb = read_embeddings(Path(embeddings_root) / f"{sid:06d}" / f"{im:06d}.zspf")
                keep = [i for i, m in enumerate(masks) if filter_masks([m], cfg.min_mask_area)]
                if keep:
                    sub = EmbeddingMatrix(emb.rows[[emb.ids.index(i) for i in keep]], tuple(keep))
                    for a in assign(similarity(sub, templates), cfg.threshold):
                        items.append((masks[a.mask_id], int(a.object_id), a.score))
            per_image[im] = items
        write_mask_set(out_root, sid, per_image)


# -- synthetic data -------------------------------------------------------------------

def demo_meshes(count: int = 4) -> dict[int, TriangleMesh]:
    """Bumpy spheres of ~45 mm radius; distinct seeds give distinct shapes."""
    return {i + 1: blob(seed=i) for i in range(count)}


def models_info(meshes: Mapping[int, TriangleMesh]) -> dict[int, dict]:
    return {oid: {"diameter": mesh_diameter(m),
                  "symmetries": [zio.pose_to_json(s) for s in m.symmetries
                                 if not np.allclose(s.matrix(), np.eye(4))]}
            for oid, m in sorted(meshes.items())}


def _place_objects(rng, radii: Sequence[float], cam: CameraIntrinsics, max_tries: int = 2000):
    """Object centres with disjoint bounding spheres whose projected disks
    stay inside the image and overlap by at most 20% of their radii."""
    placed = []
    for r in radii:
        for _ in range(max_tries):
            z = rng.uniform(500.0, 900.0)
            rp = r * cam.fx / z
            u = rng.uniform(rp, cam.width - rp)
            v = rng.uniform(rp, cam.height - rp)
            c = np.array([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])
            ok = True
            for c2, r2, u2, v2, rp2 in placed:
                if np.linalg.norm(c - c2) < r + r2:
                    ok = False
                    break
                if np.hypot(u - u2, v - v2) < 0.8 * (rp + rp2):
                    ok = False
                    break
            if ok:
                placed.append((c, r, u, v, rp))
                break
        else:
            raise GeometryError("could not place objects without collisions")
    return [p[0] for p in placed]


def synth_scenes(meshes: Mapping[int, TriangleMesh], n_scenes: int, seed: int, out_dir,
                 objects_per_scene: Optional[int] = None, n_views: int = 72,
                 info: Optional[Mapping[int, dict]] = None) -> Path:
    """Write a synthetic dataset: one image per scene, exact instance masks and
    one-hot embeddings (templates share their object's row)."""
    if not meshes:
        raise GeometryError("need at least one model")
    if n_scenes < 1:
        raise GeometryError("n_scenes must be >= 1")
    if objects_per_scene is not None and not 1 <= objects_per_scene <= 4:
        raise GeometryError("objects_per_scene must be in 1..4")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = sorted(meshes)
    dim = len(ids)
    eye = np.eye(dim)
    zio.write_models(out / "models", dict(meshes), dict(info) if info else models_info(meshes))
    write_embeddings(out / "embeddings" / "templates.zspf",
                     np.repeat(eye, n_views, axis=0), [(o, v) for o in ids for v in range(n_views)])
    rng = np.random.default_rng(seed)
    cam = SYNTH_CAMERA
    centred = {}
    for oid in ids:
        v = meshes[oid].vertices
        c = v.mean(axis=0)
        centred[oid] = (c, float(np.linalg.norm(v - c, axis=1).max()))
    for sid in range(n_scenes):
        n_obj = objects_per_scene or int(rng.integers(1, 5))
        chosen = [ids[i] for i in rng.choice(dim, size=n_obj, replace=n_obj > dim)]
        centres = _place_objects(rng, [centred[o][1] for o in chosen], cam)
        poses = []
        for oid, c in zip(chosen, centres):
            r = random_rotation(rng)
            poses.append(Pose(r, c - r @ centred[oid][0]))
        depth, labels = render_scene([meshes[o] for o in chosen], poses, cam)
        # quantize like the PNG so masks match stored depth validity
        q = np.round(depth.data / SYNTH_DEPTH_SCALE) * SYNTH_DEPTH_SCALE
        sd = zio.scene_dir(out, sid)
        (sd / "depth").mkdir(parents=True, exist_ok=True)
        zio.write_depth_png(sd / "depth" / f"{0:06d}.png", q, SYNTH_DEPTH_SCALE)
        zio.dump_json(sd / "scene_camera.json", {"0": zio.camera_to_json(cam, SYNTH_DEPTH_SCALE)})
        zio.dump_json(sd / "scene_gt.json", {"0": [zio.gt_to_json(o, p) for o, p in zip(chosen, poses)]})
        items, rows = [], []
        for k, oid in enumerate(chosen):
            mask = (labels == k) & (q > 0)
            if not mask.any():
                continue
            items.append((mask, oid, 1.0))
            rows.append(eye[ids.index(oid)])
        write_mask_set(out / "masks", sid, {0: items})
        write_embeddings(out / "embeddings" / f"{sid:06d}" / f"{0:06d}.zspf",
                         np.array(rows).reshape(len(rows), dim), list(range(len(rows))))
    return out
