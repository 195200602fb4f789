"""Synthetic registered views: planar scene, depth maps, feature grids, pairs.

The world holds a large background wall at ``z = wall_z`` plus a few
axis-aligned rectangular occluders between it and the cameras.  Cameras sit
near the origin and look roughly along +z.  Landmarks are points on these
surfaces, each with a canonical unit descriptor.

A view's feature grid marks the cell containing each visible landmark's
projection with a keypoint distribution whose soft-argmax is the projection,
and a noisy copy of the landmark descriptor.  A fraction of cells are
outliers ("repeated texture"): weakly confident keypoints whose descriptors
copy some other landmark seen in the same view.  The rest get dustbin mass
and random descriptors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError, GenerationError
from .features import CELL, DUSTBIN, FeatureGrid, argmax_detections, load_feature_grid, normalize_grid, \
    save_feature_grid
from .formats import ensure_dir
from .geometry.camera import (CameraIntrinsics, DepthMap, Pose, Visibility, occlusion_check,
                              relative_pose, rotation_angle_deg)

NO_LANDMARK = -1
OUTLIER_CELL = -2
_DETECT_EPS = 1e-3  # probability floor of every keypoint channel


@dataclass
class SynthConfig:
    grid_h: int = 8
    grid_w: int = 8
    n_views: int = 12
    landmark_count: int = 0  # 0 = automatic, 6.25 per cell
    descriptor_dim: int = 256
    descriptor_noise_sigma: float = 0.3
    outlier_fraction: float = 0.3
    depth_range: tuple[float, float] = (3.0, 6.0)  # occluder depths .. farthest wall depth
    baseline_range: tuple[float, float] = (0.3, 1.2)  # camera centre half-extent along z, along x/y
    max_rotation_deg: float = 10.0
    occluders: int = 2
    keypoint_jitter_px: float = 0.0
    landmark_confidence: tuple[float, float] = (0.6, 1.0)
    outlier_confidence: tuple[float, float] = (0.1, 0.5)
    empty_confidence: tuple[float, float] = (0.0, 0.1)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.outlier_fraction < 1:
            raise GenerationError("outlier_fraction must lie in [0, 1)")
        if self.grid_h < 1 or self.grid_w < 1 or self.n_views < 1:
            raise GenerationError("grid dims and view count must be positive")
        self.depth_range = tuple(self.depth_range)
        self.baseline_range = tuple(self.baseline_range)
        self.landmark_confidence = tuple(self.landmark_confidence)
        self.outlier_confidence = tuple(self.outlier_confidence)
        self.empty_confidence = tuple(self.empty_confidence)

    @property
    def image_h(self) -> int:
        return CELL * self.grid_h

    @property
    def image_w(self) -> int:
        return CELL * self.grid_w

    def intrinsics(self) -> CameraIntrinsics:
        f = float(max(self.image_h, self.image_w))
        return CameraIntrinsics(f, f, self.image_h / 2.0, self.image_w / 2.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class View:
    id: str
    global_pose: Pose  # camera-from-world
    intrinsics: CameraIntrinsics
    depth: DepthMap
    features: FeatureGrid
    cell_landmark: np.ndarray | None = field(default=None, repr=False)  # [h, w] landmark id / codes

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.features.image_h, self.features.image_w


@dataclass
class ScenePair:
    query: View
    reference: View
    relative_pose: Pose  # reference camera -> query camera
    overlap_fraction: float

    @property
    def id(self) -> str:
        return f"{self.query.id}__{self.reference.id}"


@dataclass(frozen=True)
class Landmarks:
    points: np.ndarray  # [L, 3] world
    descriptors: np.ndarray  # [L, D] unit


@dataclass(frozen=True)
class _Rect:
    z: float
    lo: np.ndarray  # (x, y) lower corner
    hi: np.ndarray


# ---------------------------------------------------------------------------
# Geometry of the planar world


def _ray_hits(origin: np.ndarray, dirs: np.ndarray, wall_z: float, rects: Sequence[_Rect]) -> np.ndarray:
    """Distance to the first surface along unit world rays ``dirs`` [..., 3]."""
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        best = np.where(dz > 1e-12, (wall_z - origin[2]) / dz, np.inf)
        for r in rects:
            lam = np.where(dz > 1e-12, (r.z - origin[2]) / dz, np.inf)
            hit = origin[:2] + lam[..., None] * dirs[..., :2]
            inside = ((hit >= r.lo) & (hit <= r.hi)).all(axis=-1) & (lam > 0)
            best = np.where(inside & (lam < best), lam, best)
    return best


def _pixel_grid(h_px: int, w_px: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h_px, dtype=np.float64), np.arange(w_px, dtype=np.float64), indexing="ij")
    return np.stack([ii, jj], axis=-1)


def render_depth(pose: Pose, intr: CameraIntrinsics, h_px: int, w_px: int, wall_z: float,
                 rects: Sequence[_Rect], edge_jump: float = 0.1) -> DepthMap:
    """Along-ray distances at pixel centers, f32-rounded; pixels next to a
    depth discontinuity are marked invalid so bilinear lookups never mix
    surfaces."""
    rays = intr.normalize(_pixel_grid(h_px, w_px))
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    dirs = rays @ pose.R  # camera -> world directions (R^T d)
    dist = _ray_hits(pose.center, dirs, wall_z, rects)
    bad = ~np.isfinite(dist)
    jump = np.zeros_like(bad)
    fin = np.where(bad, 0.0, dist)
    dx = np.abs(np.diff(fin, axis=0)) > edge_jump
    dy = np.abs(np.diff(fin, axis=1)) > edge_jump
    jump[1:] |= dx
    jump[:-1] |= dx
    jump[:, 1:] |= dy
    jump[:, :-1] |= dy
    values = np.where(bad | jump, -1.0, fin)
    return DepthMap.quantized(values)


def _random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(max_deg) * rng.uniform(0.0, 1.0)
    return Rotation.from_rotvec(axis * angle).as_matrix()


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _bilinear_weights(offset: np.ndarray) -> np.ndarray:
    """64-channel distribution whose expected (m, n) equals ``offset`` in [0, 7]^2."""
    m0 = int(min(np.floor(offset[0]), 6))
    n0 = int(min(np.floor(offset[1]), 6))
    fm, fn = offset[0] - m0, offset[1] - n0
    w = np.zeros(64)
    w[8 * m0 + n0] += (1 - fm) * (1 - fn)
    w[8 * m0 + n0 + 1] += (1 - fm) * fn
    w[8 * (m0 + 1) + n0] += fm * (1 - fn)
    w[8 * (m0 + 1) + n0 + 1] += fm * fn
    return w


def keypoint_logits(position_weights: np.ndarray, confidence: float) -> np.ndarray:
    """log of ``(1 - eps) [conf * w, 1 - conf] + eps / 65``."""
    k = np.append(confidence * position_weights, 1.0 - confidence)
    k = (1 - _DETECT_EPS) * k + _DETECT_EPS / 65.0
    return np.log(k)


def _noisy(rng: np.random.Generator, d: np.ndarray, sigma: float) -> np.ndarray:
    eps = rng.normal(0.0, 1.0 / np.sqrt(d.shape[-1]), size=d.shape)
    return _unit(d + sigma * eps)


def generate_scene(config: SynthConfig) -> tuple[list[View], Landmarks]:
    rng = np.random.default_rng(config.seed)
    intr = config.intrinsics()
    H, W = config.image_h, config.image_w
    h, w = config.grid_h, config.grid_w
    near, far = config.depth_range
    depth_spread, spread = config.baseline_range
    wall_z = far

    rects = []
    for _ in range(config.occluders):
        z = rng.uniform(near, max(near, far - 1.0))
        size = rng.uniform(0.4, 1.0, size=2) * z / 3.0
        centre = rng.uniform(-1.0, 1.0, size=2) * z / 3.0
        rects.append(_Rect(float(z), centre - size / 2, centre + size / 2))

    # cameras
    poses = []
    for _ in range(config.n_views):
        c = np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread),
                      rng.uniform(-depth_spread, depth_spread)])
        R = _random_rotation(rng, config.max_rotation_deg)
        poses.append(Pose.from_matrix(R, -R @ c))

    # landmarks on the surfaces each camera can see
    half = wall_z * max(H / intr.fx, W / intr.fy) / 2 + spread + wall_z * np.tan(np.radians(config.max_rotation_deg))
    count = config.landmark_count or int(round(6.25 * h * w))
    areas = [(2 * half) ** 2] + [float(np.prod(r.hi - r.lo)) for r in rects]
    probs = np.array(areas) / sum(areas)
    surf = rng.choice(len(areas), size=count, p=probs)
    pts = np.zeros((count, 3))
    for k, s in enumerate(surf):
        if s == 0:
            pts[k] = [rng.uniform(-half, half), rng.uniform(-half, half), wall_z]
        else:
            r = rects[s - 1]
            pts[k, :2] = rng.uniform(r.lo, r.hi)
            pts[k, 2] = r.z
    descs = _unit(rng.normal(size=(count, config.descriptor_dim)))

    depths = [render_depth(p, intr, H, W, wall_z, rects) for p in poses]

    # projections and visibility per view
    proj = np.zeros((config.n_views, count, 2))
    detect = np.zeros((config.n_views, count), dtype=bool)
    for v, (pose, dm) in enumerate(zip(poses, depths)):
        cam = pose.apply(pts)
        front = cam[:, 2] > 1e-6
        z = np.where(front, cam[:, 2], 1.0)
        pix = np.stack([intr.fx * cam[:, 0] / z + intr.cx, intr.fy * cam[:, 1] / z + intr.cy], axis=1)
        proj[v] = pix
        dist = np.linalg.norm(pts - pose.center, axis=1)
        hits = _ray_hits(pose.center, _unit(pts - pose.center), wall_z, rects)
        visible = front & (np.abs(hits - dist) < 1e-6 * np.maximum(dist, 1.0))
        inside = (pix[:, 0] >= 0) & (pix[:, 0] <= H - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= W - 1)
        off = pix - CELL * np.floor(pix / CELL)
        subcell = (off <= CELL - 1).all(axis=1)
        cand = visible & inside & subcell
        if cand.any():
            sampled, ok = dm.sample(np.where(cand[:, None], pix, 0.0))
            consistent = ok & (np.abs(sampled - dist) < 1e-3 * dist)
            detect[v] = cand & consistent

    seen = detect.sum(axis=0)
    if config.n_views >= 2 and not (seen >= 2).any():
        raise GenerationError("no landmark is visible in two views; views do not overlap")
    keep = seen >= min(2, config.n_views)
    if not keep.any():
        raise GenerationError("no landmark is visible")

    views = []
    n_out = int(round(config.outlier_fraction * h * w))
    for v, (pose, dm) in enumerate(zip(poses, depths)):
        logits = np.zeros((h, w, 65))
        desc = np.zeros((h, w, config.descriptor_dim))
        owner = np.full((h, w), NO_LANDMARK, dtype=np.int64)
        ids = np.nonzero(detect[v] & keep)[0]
        # nearest landmark wins a contested cell
        order = ids[np.argsort(np.linalg.norm(pts[ids] - pose.center, axis=1), kind="stable")]
        for lid in order:
            ci, cj = (np.floor(proj[v, lid] / CELL)).astype(int)
            if owner[ci, cj] == NO_LANDMARK:
                owner[ci, cj] = lid
        outlier_cells = rng.permutation(h * w)[:n_out]
        visible_ids = np.unique(owner[owner >= 0])
        for i in range(h):
            for j in range(w):
                lid = owner[i, j]
                if lid >= 0:
                    off = proj[v, lid] - CELL * np.array([i, j])
                    if config.keypoint_jitter_px > 0:
                        off = np.clip(off + rng.normal(0, config.keypoint_jitter_px, 2), 0, CELL - 1)
                    conf = rng.uniform(*config.landmark_confidence)
                    logits[i, j] = keypoint_logits(_bilinear_weights(off), conf)
                    desc[i, j] = _noisy(rng, descs[lid], config.descriptor_noise_sigma)
                else:
                    conf = rng.uniform(*config.empty_confidence)
                    logits[i, j] = keypoint_logits(_bilinear_weights(rng.uniform(0, CELL - 1, 2)), conf)
                    desc[i, j] = _unit(rng.normal(size=config.descriptor_dim))
        for cell in outlier_cells:
            i, j = divmod(int(cell), w)
            conf = rng.uniform(*config.outlier_confidence)
            logits[i, j] = keypoint_logits(_bilinear_weights(rng.uniform(0, CELL - 1, 2)), conf)
            if len(visible_ids):
                src = descs[visible_ids[rng.integers(len(visible_ids))]]
                desc[i, j] = _noisy(rng, src, config.descriptor_noise_sigma)
            else:
                desc[i, j] = _unit(rng.normal(size=config.descriptor_dim))
            owner[i, j] = OUTLIER_CELL
        grid = normalize_grid(logits, desc, H, W)
        views.append(View(f"v{v:03d}", pose, intr, dm, grid, owner))
    # indexed like View.cell_landmark; landmarks seen by fewer than two views own no cell
    return views, Landmarks(pts, descs)


# ---------------------------------------------------------------------------
# Pair selection


def _frustum_lattice(view: View, max_range_m: float, n: int) -> np.ndarray:
    H, W = view.image_shape
    fr = (np.arange(n) + 0.5) / n
    px = np.stack(np.meshgrid(fr * (H - 1), fr * (W - 1), indexing="ij"), axis=-1).reshape(-1, 2)
    rays = view.intrinsics.normalize(px)
    depths = max_range_m * (np.arange(n) + 1) / n
    cam = (rays[None, :, :] * depths[:, None, None]).reshape(-1, 3)  # z-depth lattice
    return view.global_pose.inverse().apply(cam)


def _in_frustum(view: View, world: np.ndarray, max_range_m: float) -> np.ndarray:
    H, W = view.image_shape
    cam = view.global_pose.apply(world)
    z = cam[:, 2]
    zs = np.where(z > 0, z, 1.0)
    x = view.intrinsics.fx * cam[:, 0] / zs + view.intrinsics.cx
    y = view.intrinsics.fy * cam[:, 1] / zs + view.intrinsics.cy
    return (z > 0) & (z <= max_range_m + 1e-9) & (x >= 0) & (x <= H - 1) & (y >= 0) & (y <= W - 1)


def frustum_overlap(a: View, b: View, max_range_m: float = 10.0, lattice: int = 5) -> float:
    """Mean fraction of each view's frustum lattice that lies inside the other frustum."""
    fa = _in_frustum(b, _frustum_lattice(a, max_range_m, lattice), max_range_m).mean()
    fb = _in_frustum(a, _frustum_lattice(b, max_range_m, lattice), max_range_m).mean()
    return float((fa + fb) / 2)


def compatible_pair(a: View, b: View, max_dist_m: float = 20.0, max_range_m: float = 10.0,
                    lattice: int = 5) -> bool:
    if np.linalg.norm(a.global_pose.center - b.global_pose.center) > max_dist_m:
        return False
    return frustum_overlap(a, b, max_range_m, lattice) > 0


def nontrivial_pair(pair: ScenePair, min_t_m: float = 0.5, min_r_deg: float = 5.0) -> bool:
    t = float(np.linalg.norm(pair.relative_pose.t))
    r = rotation_angle_deg(pair.relative_pose.R)
    return not (t <= min_t_m and r <= min_r_deg)


def make_pair(query: View, reference: View, max_range_m: float = 10.0) -> ScenePair:
    return ScenePair(query, reference, relative_pose(query.global_pose, reference.global_pose),
                     frustum_overlap(query, reference, max_range_m))


def build_pairs(views: Sequence[View], top_k: int = 64, max_dist_m: float = 20.0,
                max_range_m: float = 10.0, min_t_m: float = 0.5, min_r_deg: float = 5.0) -> list[ScenePair]:
    """For each query, compatible non-trivial references ranked by overlap, best ``top_k``."""
    pairs = []
    for q in views:
        cands = []
        for r in views:
            if r is q:
                continue
            if np.linalg.norm(q.global_pose.center - r.global_pose.center) > max_dist_m:
                continue
            p = make_pair(q, r, max_range_m)
            if p.overlap_fraction > 0 and nontrivial_pair(p, min_t_m, min_r_deg):
                cands.append(p)
        cands.sort(key=lambda p: -p.overlap_fraction)
        pairs.extend(cands[:top_k])
    return pairs


def retrieval_lists(queries: Sequence[View], database: Sequence[View], n: int = 16,
                    max_range_m: float = 10.0) -> dict[str, list[str]]:
    """Database ids ranked by frustum overlap with each query (stand-in for image retrieval)."""
    out = {}
    for q in queries:
        scored = [(-frustum_overlap(q, d, max_range_m), k, d.id) for k, d in enumerate(database)]
        scored.sort()
        out[q.id] = [i for _, _, i in scored[:n]]
    return out


# ---------------------------------------------------------------------------
# Scene adaptation


def scene_adaptation_targets(views: Sequence[View], pairs: Sequence[ScenePair],
                             extractor: Callable[[View], FeatureGrid],
                             margin: float = 0.05) -> dict[str, np.ndarray]:
    """Per-view keypoint labels (1..65, 65 = none) aggregated over paired views.

    Each view keeps its own argmax detections and receives detections of its
    paired views reprojected with ground-truth pose and depth; occluded
    reprojections are dropped.  A reprojection snaps to the nearest integer
    pixel, which fixes its cell and sub-cell channel.  Within a cell the
    candidate with the highest source confidence wins, own detections first
    on ties.
    """
    by_id = {v.id: v for v in views}
    dets = {}
    for v in views:
        ch, pix, conf = argmax_detections(extractor(v))
        dets[v.id] = (ch, pix, conf)

    best: dict[str, dict[tuple[int, int], tuple[float, int, int]]] = {v.id: {} for v in views}
    # rank: (confidence, priority) with own detections priority 1, reprojections 0

    def offer(vid, i, j, channel, conf, prio):
        cur = best[vid].get((i, j))
        if cur is None or (conf, prio) > (cur[0], cur[1]):
            best[vid][(i, j)] = (conf, prio, channel)

    for v in views:
        ch, _, conf = dets[v.id]
        for i, j in zip(*np.nonzero(ch != DUSTBIN)):
            offer(v.id, int(i), int(j), int(ch[i, j]), float(conf[i, j]), 1)

    directed = []
    for p in pairs:
        directed.append((p.reference.id, p.query.id))
        directed.append((p.query.id, p.reference.id))
    for src_id, dst_id in directed:
        if src_id not in by_id or dst_id not in by_id:
            continue
        src, dst = by_id[src_id], by_id[dst_id]
        rel = relative_pose(dst.global_pose, src.global_pose)
        ch, pix, conf = dets[src_id]
        H, W = dst.image_shape
        for i, j in zip(*np.nonzero(ch != DUSTBIN)):
            d = src.depth.nearest(pix[i, j])
            if d is None or d <= 0:
                continue
            status = occlusion_check(pix[i, j], d, rel, src.intrinsics, dst.depth, margin)
            if status != Visibility.VISIBLE:
                continue
            X = rel.apply(_ray_point(pix[i, j], d, src.intrinsics))
            q = np.array([dst.intrinsics.fx * X[0] / X[2] + dst.intrinsics.cx,
                          dst.intrinsics.fy * X[1] / X[2] + dst.intrinsics.cy])
            r = np.floor(q + 0.5).astype(int)
            if not (0 <= r[0] < H and 0 <= r[1] < W):
                continue
            ci, cj = r // CELL
            m, n = r - CELL * np.array([ci, cj])
            offer(dst_id, int(ci), int(cj), int(8 * m + n), float(conf[i, j]), 0)

    out = {}
    for v in views:
        h, w = v.features.cells_h, v.features.cells_w
        labels = np.full((h, w), DUSTBIN + 1, dtype=np.int64)
        for (i, j), (_, _, channel) in best[v.id].items():
            labels[i, j] = channel + 1
        out[v.id] = labels
    return out


def _ray_point(pixel, depth, intr: CameraIntrinsics) -> np.ndarray:
    ray = intr.normalize(np.asarray(pixel, dtype=np.float64))
    return ray / np.linalg.norm(ray) * depth


def targets_hash(targets: dict[str, np.ndarray]) -> str:
    import hashlib

    hsh = hashlib.sha256()
    for k in sorted(targets):
        hsh.update(k.encode())
        hsh.update(np.ascontiguousarray(targets[k], dtype="<i8").tobytes())
    return hsh.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Manifest I/O


def write_scene(directory, views: Sequence[View], pairs: Sequence[ScenePair],
                config: SynthConfig | None = None, name: str = "manifest.json") -> Path:
    d = ensure_dir(directory)
    ensure_dir(d / "views")
    entries = []
    for v in views:
        depth_path = f"views/{v.id}.dmap"
        feat_path = f"views/{v.id}.fgrd"
        v.depth.save(d / depth_path)
        save_feature_grid(v.features, d / feat_path)
        entries.append({"id": v.id, "pose": v.global_pose.to_dict(), "intrinsics": v.intrinsics.to_dict(),
                        "depth_path": depth_path, "features_path": feat_path})
    manifest = {"views": entries,
                "pairs": [{"query_id": p.query.id, "reference_id": p.reference.id} for p in pairs]}
    if config is not None:
        manifest["config"] = config.to_dict()
    path = d / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_scene(manifest_path) -> tuple[list[View], list[ScenePair]]:
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
        entries = manifest["views"]
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from None
    base = path.parent
    views = []
    for e in entries:
        try:
            views.append(View(str(e["id"]), Pose.from_dict(e["pose"]), CameraIntrinsics.from_dict(e["intrinsics"]),
                              DepthMap.load(base / e["depth_path"]), load_feature_grid(base / e["features_path"])))
        except (KeyError, OSError) as exc:
            raise FormatError(f"bad view entry {e.get('id')}: {exc}") from None
    by_id = {v.id: v for v in views}
    pairs = []
    for p in manifest.get("pairs", []):
        try:
            pairs.append(make_pair(by_id[p["query_id"]], by_id[p["reference_id"]]))
        except KeyError as exc:
            raise FormatError(f"pair refers to unknown view {exc}") from None
    return views, pairs


def read_retrieval(path) -> dict[str, list[str]]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read retrieval list {path}: {exc}") from None
    out = {}
    for q, ids in data.items():
        ids = [str(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise FormatError(f"duplicate ids in retrieval list of {q}")
        out[str(q)] = ids
    return out
