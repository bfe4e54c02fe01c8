"""Point-cloud container, XYZ/manifest I/O, synthetic shapes and corruptions.

All generators are pure functions of their inputs and an integer seed.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

MIN_POINTS = 4


class PointCloudError(ValueError):
    pass


class XYZParseError(PointCloudError):
    def __init__(self, path, lineno: int, line: str):
        super().__init__(f"{path}:{lineno}: cannot parse point from {line!r}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An immutable N x 3 point set with an optional class label."""

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PointCloudError(f"points must be N x 3, got shape {pts.shape}")
        if pts.shape[0] < MIN_POINTS:
            raise PointCloudError(f"fewer than {MIN_POINTS} points (got {pts.shape[0]})")
        if not np.all(np.isfinite(pts)):
            raise PointCloudError("non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def centered(self) -> "PointCloud":
        return PointCloud(self.points - self.points.mean(axis=0), self.label)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.label)


def center(cloud: PointCloud) -> PointCloud:
    """Shift a cloud to zero mean; applied to every cloud before graph work."""
    return cloud.centered()


# ----------------------------------------------------------------------------
# XYZ files


def load_xyz(path, label: Optional[int] = None) -> PointCloud:
    path = Path(path)
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise XYZParseError(path, lineno, line.rstrip("\n"))
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise XYZParseError(path, lineno, line.rstrip("\n")) from None
    if len(rows) < MIN_POINTS:
        raise PointCloudError(f"{path}: fewer than {MIN_POINTS} points (got {len(rows)})")
    return PointCloud(np.asarray(rows, dtype=np.float64), label)


def save_xyz(cloud: PointCloud, path) -> None:
    # 17 significant digits round-trips every float64 exactly
    path = Path(path)
    lines = [f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in cloud.points.tolist()]
    try:
        with open(path, "w", newline="\n") as fh:
            fh.writelines(lines)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


# ----------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: Optional[int]
    split: str
    corruption: Optional[str] = None
    severity: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"path": self.path, "label": self.label, "split": self.split}
        if self.corruption is not None:
            d["corruption"] = self.corruption
            d["severity"] = self.severity
        return d


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load(self, entry: ManifestEntry) -> PointCloud:
        return load_xyz(self.resolve(entry), entry.label)

    def save(self, path) -> None:
        path = Path(path)
        doc = {"meta": self.meta, "entries": [e.to_dict() for e in self.entries]}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = []
    for raw in doc["entries"]:
        entries.append(
            ManifestEntry(
                path=raw["path"],
                label=raw.get("label"),
                split=raw["split"],
                corruption=raw.get("corruption"),
                severity=raw.get("severity"),
            )
        )
    return Manifest(entries, root=path.parent, meta=doc.get("meta", {}))


# ----------------------------------------------------------------------------
# Synthetic shapes


class Family(enum.IntEnum):
    SPHERE = 0
    CUBE = 1
    CYLINDER = 2
    CONE = 3
    TORUS = 4
    PLANE = 5
    HELIX = 6
    CROSS = 7

    @classmethod
    def parse(cls, name: str) -> "Family":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown shape family {name!r}") from None


FAMILY_NAMES = [f.name.lower() for f in Family]


@dataclass(frozen=True)
class ShapeFamily:
    family: Family
    n_points: int = 1024

    def __post_init__(self):
        if not isinstance(self.family, Family):
            object.__setattr__(self, "family", Family.parse(str(self.family)))
        if self.n_points < 64:
            raise ValueError(f"n_points must be >= 64, got {self.n_points}")


def _box_surface(rng, n, half):
    """Uniform samples on the surface of an axis-aligned box."""
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.asarray(half)
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    u[np.arange(n), axis] = sign * np.asarray(half)[axis]
    return u


def _disk(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    t = rng.uniform(0.0, 2 * np.pi, n)
    return r * np.cos(t), r * np.sin(t)


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cylinder(rng, n):
    r = rng.uniform(0.4, 0.6)
    h = rng.uniform(1.2, 2.0)
    side, cap = 2 * np.pi * r * h, np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    out = np.empty((n, 3))
    t = rng.uniform(0.0, 2 * np.pi, n)
    out[:, 0], out[:, 1] = r * np.cos(t), r * np.sin(t)
    out[:, 2] = rng.uniform(-h / 2, h / 2, n)
    for k, z in ((1, h / 2), (2, -h / 2)):
        idx = np.flatnonzero(part == k)
        out[idx, 0], out[idx, 1] = _disk(rng, idx.size, r)
        out[idx, 2] = z
    return out


def _cone(rng, n):
    r = rng.uniform(0.5, 0.8)
    h = rng.uniform(1.2, 1.8)
    slant = math.hypot(r, h)
    side, base = np.pi * r * slant, np.pi * r * r
    on_base = rng.uniform(0.0, 1.0, n) < base / (side + base)
    # area density on the lateral surface grows linearly with distance from apex
    s = np.sqrt(rng.uniform(0.0, 1.0, n))
    t = rng.uniform(0.0, 2 * np.pi, n)
    out = np.column_stack([s * r * np.cos(t), s * r * np.sin(t), h / 2 - s * h])
    idx = np.flatnonzero(on_base)
    out[idx, 0], out[idx, 1] = _disk(rng, idx.size, r)
    out[idx, 2] = -h / 2
    return out


def _torus(rng, n):
    big = rng.uniform(0.6, 0.8)
    small = rng.uniform(0.15, 0.3)
    # rejection sampling for uniform area density
    out = np.empty((0, 3))
    while out.shape[0] < n:
        u = rng.uniform(0.0, 2 * np.pi, 2 * n)
        v = rng.uniform(0.0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0.0, 1.0, 2 * n) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.vstack([out, np.column_stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)])])
    return out[:n]


def _plane(rng, n):
    sx, sy = rng.uniform(0.8, 1.2, 2)
    return np.column_stack([rng.uniform(-sx, sx, n), rng.uniform(-sy, sy, n), np.zeros(n)])


def _helix(rng, n):
    radius = rng.uniform(0.4, 0.6)
    turns = rng.uniform(2.0, 3.5)
    height = rng.uniform(1.6, 2.2)
    tube = rng.uniform(0.05, 0.09)
    t = rng.uniform(0.0, 1.0, n)
    ang = 2 * np.pi * turns * t
    center = np.column_stack([radius * np.cos(ang), radius * np.sin(ang), height * (t - 0.5)])
    tangent = np.column_stack(
        [-radius * np.sin(ang), radius * np.cos(ang), np.full(n, height / (2 * np.pi * turns))]
    )
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(n)])
    binormal = np.cross(tangent, normal)
    phi = rng.uniform(0.0, 2 * np.pi, n)[:, None]
    return center + tube * (np.cos(phi) * normal + np.sin(phi) * binormal)


def _cross(rng, n):
    width = rng.uniform(0.2, 0.35)
    thick = rng.uniform(0.1, 0.2)
    length = rng.uniform(0.9, 1.1)
    first = rng.uniform(0.0, 1.0, n) < 0.5
    pts = _box_surface(rng, n, (length, width / 2, thick / 2))
    pts[~first] = pts[~first][:, [1, 0, 2]]
    return pts


_GENERATORS = {
    Family.SPHERE: _sphere,
    Family.CUBE: lambda rng, n: _box_surface(rng, n, tuple(rng.uniform(0.8, 1.2, 3))),
    Family.CYLINDER: _cylinder,
    Family.CONE: _cone,
    Family.TORUS: _torus,
    Family.PLANE: _plane,
    Family.HELIX: _helix,
    Family.CROSS: _cross,
}


def _unit_radius(points: np.ndarray) -> np.ndarray:
    return points / np.linalg.norm(points, axis=1).max()


def synth_shape(spec: ShapeFamily, seed: int) -> PointCloud:
    """Sample a shape centred on its parametric centre and scaled to unit max radius.

    The family index is used as the class label.
    """
    rng = np.random.default_rng([int(spec.family), int(seed)])
    pts = _GENERATORS[spec.family](rng, spec.n_points)
    return PointCloud(_unit_radius(pts), int(spec.family))


def synth_chair(n_points: int = 1000, seed: int = 0) -> PointCloud:
    """Seat slab, back rest and four legs; a composite used for spectrum checks."""
    rng = np.random.default_rng([99, int(seed)])
    parts = [
        ((0.0, 0.0, 0.0), (0.5, 0.5, 0.04)),  # seat
        ((0.0, -0.46, 0.5), (0.5, 0.04, 0.5)),  # back
    ]
    for sx in (-0.44, 0.44):
        for sy in (-0.44, 0.44):
            parts.append(((sx, sy, -0.45), (0.04, 0.04, 0.45)))
    areas = np.array(
        [hx * hy + hy * hz + hx * hz for _, (hx, hy, hz) in parts]
    )
    counts = np.floor(n_points * areas / areas.sum()).astype(int)
    counts[0] += n_points - counts.sum()
    chunks = [
        _box_surface(rng, c, half) + np.asarray(offset) for (offset, half), c in zip(parts, counts)
    ]
    pts = np.vstack(chunks)
    pts -= pts.mean(axis=0)
    return PointCloud(_unit_radius(pts))


# ----------------------------------------------------------------------------
# Corruptions


class Corruption(str, enum.Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    BACKGROUND = "background"
    IMPULSE = "impulse"
    UPSAMPLING = "upsampling"
    SHEAR = "shear"
    ROTATION = "rotation"
    CUTOUT = "cutout"
    DENSITY_DEC = "density_dec"
    DISTORTION = "distortion"


CORRUPTIONS = [c.value for c in Corruption]

# Benchmark severity per kind. Units follow `corrupt`:
#   uniform      half-width of per-coordinate uniform noise
#   gaussian     per-coordinate standard deviation
#   background   injected outliers as a fraction of N
#   impulse      fraction of points displaced by +-IMPULSE_MAGNITUDE per axis
#   upsampling   added near-duplicate points as a fraction of N
#   shear        bound on the off-diagonal shear coefficients
#   rotation     bound on the rotation angle in radians
#   cutout       removed fraction (one kNN ball)
#   density_dec  removed fraction (75% thinning of a few kNN balls)
#   distortion   amplitude of a smooth sinusoidal displacement field
DEFAULT_SEVERITY = {
    "uniform": 0.2,
    "gaussian": 0.08,
    "background": 0.05,
    "impulse": 0.3,
    "upsampling": 0.5,
    "shear": 0.6,
    "rotation": 0.8,
    "cutout": 0.4,
    "density_dec": 0.8,
    "distortion": 0.2,
}

IMPULSE_MAGNITUDE = 0.1
UPSAMPLING_JITTER = 0.05
BACKGROUND_MIN_RADIUS = 1.5
BACKGROUND_CUBE_HALF = 2.0
DENSITY_DEC_CENTERS = 4
DENSITY_DEC_KEEP = 0.25


@dataclass(frozen=True)
class CorruptionSpec:
    kind: Corruption
    severity: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Corruption(self.kind))
        if not self.severity > 0:
            raise ValueError(f"severity must be positive, got {self.severity}")


def _nearest_indices(points, center_index, count):
    d2 = np.sum((points - points[center_index]) ** 2, axis=1)
    return np.argsort(d2, kind="stable")[:count]


def _random_rotation(rng, max_angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def background_outliers(points: np.ndarray, count: int, rng) -> np.ndarray:
    """Uniform samples from the bounding cube, rejected inside 1.5x the shape radius."""
    centroid = points.mean(axis=0)
    radius = np.linalg.norm(points - centroid, axis=1).max()
    half = BACKGROUND_CUBE_HALF * radius
    out = np.empty((0, 3))
    while out.shape[0] < count:
        cand = rng.uniform(-half, half, size=(2 * count + 8, 3))
        keep = np.linalg.norm(cand, axis=1) >= BACKGROUND_MIN_RADIUS * radius
        out = np.vstack([out, cand[keep]])
    return out[:count] + centroid


def corrupt(cloud: PointCloud, spec: CorruptionSpec) -> PointCloud:
    """Apply one corruption. Added points are appended after the originals."""
    rng = np.random.default_rng([CORRUPTIONS.index(spec.kind.value), int(spec.seed)])
    pts = cloud.points.copy()
    n = pts.shape[0]
    s = float(spec.severity)
    kind = spec.kind

    if kind is Corruption.UNIFORM:
        pts += rng.uniform(-s, s, size=pts.shape)
    elif kind is Corruption.GAUSSIAN:
        pts += s * rng.normal(size=pts.shape)
    elif kind is Corruption.BACKGROUND:
        pts = np.vstack([pts, background_outliers(pts, int(round(s * n)), rng)])
    elif kind is Corruption.IMPULSE:
        count = int(round(min(s, 1.0) * n))
        idx = rng.choice(n, size=count, replace=False)
        pts[idx] += IMPULSE_MAGNITUDE * rng.choice([-1.0, 1.0], size=(count, 3))
    elif kind is Corruption.UPSAMPLING:
        count = int(round(s * n))
        src = rng.integers(0, n, size=count)
        extra = pts[src] + rng.uniform(-UPSAMPLING_JITTER, UPSAMPLING_JITTER, size=(count, 3))
        pts = np.vstack([pts, extra])
    elif kind is Corruption.SHEAR:
        m = np.eye(3)
        off = ~np.eye(3, dtype=bool)
        m[off] = rng.uniform(-s, s, size=6)
        pts = pts @ m.T
    elif kind is Corruption.ROTATION:
        pts = pts @ _random_rotation(rng, s).T
    elif kind is Corruption.CUTOUT:
        count = min(int(round(s * n)), n - MIN_POINTS)
        drop = _nearest_indices(pts, int(rng.integers(n)), count)
        pts = np.delete(pts, drop, axis=0)
    elif kind is Corruption.DENSITY_DEC:
        target = min(int(round(s * n)), n - MIN_POINTS)
        per_center = int(math.ceil(target / DENSITY_DEC_CENTERS / (1 - DENSITY_DEC_KEEP)))
        removed = np.zeros(n, dtype=bool)
        for c in rng.permutation(n)[:DENSITY_DEC_CENTERS]:
            ball = _nearest_indices(pts, int(c), min(per_center, n))
            ball = ball[~removed[ball]]
            k = min(int(round(len(ball) * (1 - DENSITY_DEC_KEEP))), target - int(removed.sum()))
            removed[rng.permutation(ball)[:k]] = True
        short = target - int(removed.sum())
        if short > 0:
            removed[rng.permutation(np.flatnonzero(~removed))[:short]] = True
        pts = pts[~removed]
    elif kind is Corruption.DISTORTION:
        disp = np.zeros_like(pts)
        for axis in range(3):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            freq = rng.uniform(1.0, 2.0) * np.pi
            phase = rng.uniform(0.0, 2 * np.pi)
            disp[:, axis] = np.sin(freq * (pts @ direction) + phase)
        pts += s * disp
    else:  # pragma: no cover - enum is closed
        raise ValueError(kind)
    return PointCloud(pts, cloud.label)


# ----------------------------------------------------------------------------
# Dataset synthesis


TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 50
N_POINTS = 1024


def _split_seed(seed: int, split: str, family: int, index: int) -> int:
    split_id = {"train": 0, "test": 1}[split]
    ss = np.random.SeedSequence([int(seed), split_id, int(family), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def synth_dataset(
    families: Sequence[Family] = tuple(Family),
    train_per_class: int = TRAIN_PER_CLASS,
    test_per_class: int = TEST_PER_CLASS,
    n_points: int = N_POINTS,
    seed: int = 0,
) -> list[tuple[str, PointCloud]]:
    """Return (split, cloud) pairs in a fixed order: train then test, by class."""
    out = []
    for split, count in (("train", train_per_class), ("test", test_per_class)):
        for fam in families:
            spec = ShapeFamily(Family(fam), n_points)
            for i in range(count):
                out.append((split, synth_shape(spec, _split_seed(seed, split, fam, i))))
    return out


def write_dataset(
    root,
    items: Iterable[tuple[str, PointCloud]],
    meta: Optional[dict] = None,
    corruption: Optional[str] = None,
    severity: Optional[float] = None,
) -> Manifest:
    root = Path(root)
    entries = []
    counters: dict[str, int] = {}
    for split, cloud in items:
        i = counters.get(split, 0)
        counters[split] = i + 1
        rel = Path(split) / f"{split}_{i:05d}.xyz"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        save_xyz(cloud, root / rel)
        entries.append(ManifestEntry(rel.as_posix(), cloud.label, split, corruption, severity))
    manifest = Manifest(entries, root=root, meta=dict(meta or {}))
    return manifest
