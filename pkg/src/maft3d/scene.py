"""Point-cloud data model: synthetic scenes, file I/O, bounds, voxel tokens.

Scenes live in meters with colors in [0, 1]; semantic labels in [0, K-1] or
-1 for ignore, instance labels in [0, n_inst-1] or -1. Voxelization produces
the token set the decoder attends over, with the voxel grid anchored at the
scene minimum so that rigid translations are exactly equivariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class SceneError(ValueError):
    """Scene content violates its invariants."""


class ParseError(ValueError):
    """Scene file is malformed; message carries the line number."""


class GenerationError(RuntimeError):
    """Instance placement failed after the rejection budget."""


IGNORE = -1


@dataclass
class Scene:
    points: np.ndarray  # (M, 3) meters
    colors: np.ndarray  # (M, 3) in [0, 1]
    sem_label: np.ndarray  # (M,) int, [0, K-1] or -1
    inst_label: np.ndarray  # (M,) int, [0, n_inst-1] or -1

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_instances(self) -> int:
        labeled = self.inst_label[self.inst_label >= 0]
        return int(labeled.max()) + 1 if labeled.size else 0

    def validate(self, n_classes: int | None = None) -> None:
        m = self.n_points
        if self.points.shape != (m, 3) or self.colors.shape != (m, 3):
            raise SceneError("points and colors must be (M, 3)")
        if self.sem_label.shape != (m,) or self.inst_label.shape != (m,):
            raise SceneError("labels must be (M,)")
        if not np.all(np.isfinite(self.points)):
            raise SceneError("non-finite coordinates")
        if self.colors.size and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise SceneError("colors must lie in [0, 1]")
        if np.any(self.inst_label < IGNORE):
            raise SceneError("instance labels must be >= -1")
        if np.any(self.sem_label < IGNORE):
            raise SceneError("semantic labels must be >= -1")
        if n_classes is not None and np.any(self.sem_label >= n_classes):
            raise SceneError(f"semantic labels must be < {n_classes}")
        n_inst = self.n_instances
        for i in range(n_inst):
            sel = self.inst_label == i
            if not sel.any():
                raise SceneError(f"instance id {i} labels no points")
            sems = np.unique(self.sem_label[sel])
            if sems.size != 1:
                raise SceneError(f"instance id {i} spans several semantic labels")
        if np.any((self.inst_label >= 0) & (self.sem_label < 0)):
            raise SceneError("instance points must carry a semantic label")


@dataclass
class SceneBounds:
    p_min: np.ndarray  # (3,)
    p_max: np.ndarray  # (3,)

    def __post_init__(self):
        if np.any(self.p_min > self.p_max):
            raise SceneError("bounds must satisfy p_min <= p_max")
        if np.all(self.p_min == self.p_max):
            raise SceneError("degenerate bounds: p_min equals p_max on every axis")

    @property
    def extent(self) -> np.ndarray:
        return self.p_max - self.p_min

    def safe_extent(self) -> np.ndarray:
        e = self.extent
        return np.where(e > 0.0, e, 1.0)


@dataclass
class SceneTokens:
    positions: np.ndarray  # (N, 3) member centroids
    features: np.ndarray  # (N, c) centroid color + bounds-normalized coords
    token_to_points: list[np.ndarray]  # partition of surviving point indices
    bounds: SceneBounds
    knn_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_tokens(self) -> int:
        return self.positions.shape[0]


@dataclass
class GroundTruth:
    masks: np.ndarray  # (n_inst, N) bool token masks
    classes: np.ndarray  # (n_inst,) int
    centers: np.ndarray  # (n_inst, 3) centroid of member token positions

    @property
    def n_instances(self) -> int:
        return self.masks.shape[0]


@dataclass
class GenParams:
    extent: tuple[float, float, float] = (8.0, 8.0, 3.0)
    n_inst: tuple[int, int] = (3, 8)
    shapes: tuple[str, ...] = ("box", "sphere", "cylinder")
    noise_sigma: float = 0.005
    clutter_fraction: float = 0.2
    inst_points: tuple[int, int] = (400, 700)
    min_separation: float = 0.3
    n_classes: int = 18

    def validate(self) -> None:
        if min(self.extent) <= 0.0:
            raise SceneError("extent must be positive")
        if not (1 <= self.n_inst[0] <= self.n_inst[1]):
            raise SceneError("n_inst range must satisfy 1 <= lo <= hi")
        if self.inst_points[0] < 50:
            raise SceneError("instances need at least 50 points")
        if not 0.0 <= self.clutter_fraction < 1.0:
            raise SceneError("clutter_fraction must lie in [0, 1)")
        if self.noise_sigma < 0.0:
            raise SceneError("noise_sigma must be >= 0")
        unknown = set(self.shapes) - {"box", "sphere", "cylinder"}
        if unknown:
            raise SceneError(f"unknown shapes {sorted(unknown)}")


def class_color(class_id: int, n_classes: int) -> np.ndarray:
    """Distinct base color per class so labels stay inferable from inputs."""
    t = 2.0 * np.pi * class_id / max(n_classes, 1)
    rgb = 0.5 + 0.42 * np.array([np.cos(t), np.cos(t + 2.0), np.cos(t + 4.0)])
    return np.clip(rgb, 0.0, 1.0)


def _sample_sphere(rng, n, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def _sample_box(rng, n, half):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        sel = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = u[sel, 0] * half[others[0]]
        pts[sel, others[1]] = u[sel, 1] * half[others[1]]
    return pts

def _sample_cylinder(rng, n, radius, half_h):
    lateral_area = 2.0 * np.pi * radius * 2.0 * half_h
    cap_area = np.pi * radius * radius
    p_lat = lateral_area / (lateral_area + 2.0 * cap_area)
    part = rng.uniform(size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    lat = part < p_lat
    pts[lat, 0] = radius * np.cos(theta[lat])
    pts[lat, 1] = radius * np.sin(theta[lat])
    pts[lat, 2] = rng.uniform(-half_h, half_h, size=int(lat.sum()))
    caps = ~lat
    r = radius * np.sqrt(rng.uniform(size=int(caps.sum())))
    pts[caps, 0] = r * np.cos(theta[caps])
    pts[caps, 1] = r * np.sin(theta[caps])
    pts[caps, 2] = np.where(rng.uniform(size=int(caps.sum())) < 0.5, -half_h, half_h)
    return pts


def generate_scene(seed: int, params: GenParams = GenParams()) -> Scene:
    """Deterministic synthetic scene: labeled shape surfaces over clutter."""
    params.validate()
    rng = np.random.default_rng(seed)
    ex, ey, ez = params.extent
    n_inst = int(rng.integers(params.n_inst[0], params.n_inst[1] + 1))

    extent = np.array([ex, ey, ez])
    margin = np.minimum(0.45, extent / 2.0)
    hi = np.maximum(extent - margin, margin)
    centers = []
    rejections = 0
    while len(centers) < n_inst:
        c = rng.uniform(margin, hi)
        if all(np.linalg.norm(c - p) >= params.min_separation for p in centers):
            centers.append(c)
        else:
            rejections += 1
            if rejections > 1000:
                raise GenerationError(
                    f"could not place {n_inst} instances after 1000 rejections"
                )

    pts, cols, sems, insts = [], [], [], []
    for i, center in enumerate(centers):
        cls = int(rng.integers(0, params.n_classes))
        shape = params.shapes[cls % len(params.shapes)]
        n_pts = int(rng.integers(params.inst_points[0], params.inst_points[1] + 1))
        size = 0.22 + 0.05 * ((cls // len(params.shapes)) % 4) + rng.uniform(0.0, 0.06)
        if shape == "sphere":
            local = _sample_sphere(rng, n_pts, size)
        elif shape == "box":
            half = size * np.array([1.0, 0.8, 0.7]) * rng.uniform(0.8, 1.2, size=3)
            local = _sample_box(rng, n_pts, half)
        else:
            local = _sample_cylinder(rng, n_pts, 0.75 * size, size)
        p = local + center
        if params.noise_sigma > 0.0:
            p = p + rng.normal(0.0, params.noise_sigma, size=p.shape)
        base = class_color(cls, params.n_classes)
        c = np.clip(base + rng.normal(0.0, 0.03, size=(n_pts, 3)), 0.0, 1.0)
        pts.append(p)
        cols.append(c)
        sems.append(np.full(n_pts, cls))
        insts.append(np.full(n_pts, i))

    n_obj = sum(len(p) for p in pts)
    n_clutter = int(params.clutter_fraction / (1.0 - params.clutter_fraction) * n_obj)
    if n_clutter > 0:
        n_floor = int(0.7 * n_clutter)
        floor = np.column_stack(
            [
                rng.uniform(0.0, ex, size=n_floor),
                rng.uniform(0.0, ey, size=n_floor),
                np.zeros(n_floor),
            ]
        )
        n_wall = n_clutter - n_floor
        wall_side = rng.integers(0, 4, size=n_wall)
        wall = np.empty((n_wall, 3))
        wall[:, 2] = rng.uniform(0.0, ez, size=n_wall)
        u = rng.uniform(size=n_wall)
        for side in range(4):
            sel = wall_side == side
            if side == 0:
                wall[sel, 0], wall[sel, 1] = 0.0, u[sel] * ey
            elif side == 1:
                wall[sel, 0], wall[sel, 1] = ex, u[sel] * ey
            elif side == 2:
                wall[sel, 0], wall[sel, 1] = u[sel] * ex, 0.0
            else:
                wall[sel, 0], wall[sel, 1] = u[sel] * ex, ey
        clutter = np.vstack([floor, wall])
        if params.noise_sigma > 0.0:
            clutter = clutter + rng.normal(0.0, params.noise_sigma, size=clutter.shape)
        grey = rng.uniform(0.35, 0.65, size=(n_clutter, 1)) * np.ones((1, 3))
        pts.append(clutter)
        cols.append(np.clip(grey + rng.normal(0.0, 0.02, size=(n_clutter, 3)), 0.0, 1.0))
        sems.append(np.full(n_clutter, IGNORE))
        insts.append(np.full(n_clutter, IGNORE))

    scene = Scene(
        points=np.vstack(pts),
        colors=np.vstack(cols),
        sem_label=np.concatenate(sems).astype(np.int64),
        inst_label=np.concatenate(insts).astype(np.int64),
    )
    order = rng.permutation(scene.n_points)
    scene = Scene(
        scene.points[order], scene.colors[order], scene.sem_label[order], scene.inst_label[order]
    )
    scene.validate(params.n_classes)
    return scene


def save_scene(scene: Scene, path) -> None:
    """Write the text format: header line, then one point per line."""
    k = int(scene.sem_label.max()) + 1 if np.any(scene.sem_label >= 0) else 0
    lines = [f"MAFT-SCENE v1 {scene.n_points} {k}"]
    pts = scene.points.tolist()
    cols = scene.colors.tolist()
    sems = scene.sem_label.tolist()
    insts = scene.inst_label.tolist()
    for i in range(scene.n_points):
        x, y, z = pts[i]
        r, g, b = cols[i]
        # shortest repr round-trips float64 exactly
        lines.append(f"{x!r} {y!r} {z!r} {r!r} {g!r} {b!r} {sems[i]} {insts[i]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: line 1: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "MAFT-SCENE" or head[1] != "v1":
        raise ParseError(f"{path}: line 1: bad header {lines[0]!r}")
    try:
        m = int(head[2])
        int(head[3])
    except ValueError:
        raise ParseError(f"{path}: line 1: bad counts in header") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != m:
        raise ParseError(f"{path}: line {len(lines)}: header says {m} points, found {len(body)}")
    pts = np.empty((m, 3))
    cols = np.empty((m, 3))
    sem = np.empty(m, dtype=np.int64)
    inst = np.empty(m, dtype=np.int64)
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 8:
            raise ParseError(f"{path}: line {i + 2}: expected 8 fields, got {len(parts)}")
        try:
            pts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
            cols[i] = [float(parts[3]), float(parts[4]), float(parts[5])]
            sem[i] = int(parts[6])
            inst[i] = int(parts[7])
        except ValueError:
            raise ParseError(f"{path}: line {i + 2}: malformed value") from None
    scene = Scene(pts, cols, sem, inst)
    try:
        scene.validate()
    except SceneError as exc:
        raise SceneError(f"{path}: {exc}") from None
    return scene


def scene_bounds(scene: Scene) -> SceneBounds:
    if scene.n_points == 0:
        raise SceneError("cannot compute bounds of an empty scene")
    return SceneBounds(scene.points.min(axis=0), scene.points.max(axis=0))


def _majority(labels: np.ndarray, inverse: np.ndarray, n_groups: int) -> np.ndarray:
    """Per-group majority label; ties go to the numerically lowest label."""
    order = np.lexsort((labels, inverse))
    gl = np.column_stack([inverse[order], labels[order]])
    uniq, counts = np.unique(gl, axis=0, return_counts=True)
    # sort by (group, -count, label): first row per group wins
    sel = np.lexsort((uniq[:, 1], -counts, uniq[:, 0]))
    uniq = uniq[sel]
    first = np.unique(uniq[:, 0], return_index=True)[1]
    out = np.empty(n_groups, dtype=np.int64)
    out[uniq[first, 0]] = uniq[first, 1]
    return out


def voxelize(scene: Scene, voxel_size: float) -> tuple[SceneTokens, GroundTruth]:
    """Pool points into one token per occupied voxel, grid anchored at p_min."""
    if voxel_size <= 0.0:
        raise SceneError(f"voxel_size must be positive, got {voxel_size}")
    bounds = scene_bounds(scene)
    keys3 = np.floor((scene.points - bounds.p_min) / voxel_size).astype(np.int64)
    span = keys3.max(axis=0) + 1
    flat = (keys3[:, 0] * span[1] + keys3[:, 1]) * span[2] + keys3[:, 2]
    uniq, inverse = np.unique(flat, return_inverse=True)
    n_tok = uniq.size
    counts = np.bincount(inverse, minlength=n_tok).astype(np.float64)

    pos = np.empty((n_tok, 3))
    col = np.empty((n_tok, 3))
    for a in range(3):
        pos[:, a] = np.bincount(inverse, weights=scene.points[:, a], minlength=n_tok) / counts
        col[:, a] = np.bincount(inverse, weights=scene.colors[:, a], minlength=n_tok) / counts

    tok_inst = _majority(scene.inst_label, inverse, n_tok)
    order = np.argsort(inverse, kind="stable")
    splits = np.cumsum(np.bincount(inverse, minlength=n_tok))[:-1]
    token_to_points = np.split(order, splits)

    feats = np.hstack([col, (pos - bounds.p_min) / bounds.safe_extent()])
    tokens = SceneTokens(pos, feats, token_to_points, bounds)

    masks, classes, centers = [], [], []
    for i in range(scene.n_instances):
        mask = tok_inst == i
        if not mask.any():
            continue  # instance lost every voxel vote; drop from supervision
        sel = scene.inst_label == i
        cls = int(scene.sem_label[sel][0])
        masks.append(mask)
        classes.append(cls)
        centers.append(pos[mask].mean(axis=0))
    gt = GroundTruth(
        masks=np.array(masks, dtype=bool).reshape(len(masks), n_tok),
        classes=np.array(classes, dtype=np.int64),
        centers=np.array(centers, dtype=np.float64).reshape(len(masks), 3),
    )
    return tokens, gt


def crop_to_limit(scene: Scene, max_points: int, rng: np.random.Generator) -> Scene:
    """Shrink a cubic window around a random labeled point until under budget."""
    if max_points <= 0:
        raise SceneError(f"max_points must be positive, got {max_points}")
    if scene.n_points <= max_points:
        return scene
    labeled = np.flatnonzero(scene.inst_label >= 0)
    anchor_pool = labeled if labeled.size else np.arange(scene.n_points)
    center = scene.points[rng.choice(anchor_pool)]
    side = float(scene.points.max(axis=0).max() - scene.points.min(axis=0).min())
    keep = np.ones(scene.n_points, dtype=bool)
    while keep.sum() > max_points:
        side *= 0.5
        keep = np.all(np.abs(scene.points - center) <= side / 2.0, axis=1)
    cropped = Scene(
        scene.points[keep].copy(),
        scene.colors[keep].copy(),
        scene.sem_label[keep].copy(),
        scene.inst_label[keep].copy(),
    )
    return compact_instances(cropped)


def compact_instances(scene: Scene) -> Scene:
    """Renumber instance ids so surviving ids are 0..k-1 in old-id order."""
    old = scene.inst_label
    present = np.unique(old[old >= 0])
    remap = np.full(int(old.max()) + 2 if old.size else 1, IGNORE, dtype=np.int64)
    for new_id, old_id in enumerate(present):
        remap[old_id] = new_id
    new = np.where(old >= 0, remap[np.maximum(old, 0)], IGNORE)
    return replace(scene, inst_label=new)
