"""Point files, manifests, synthetic shapes and augmentations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AugmentationSpec
from .geometry import PointCloud, farthest_point_sampling, fps_resample
from .numerics.errors import ParameterError

MANIFEST_VERSION = 1
PRIMITIVES = ("sphere", "cube", "cylinder", "cone", "torus")


class DataError(Exception):
    """Unreadable or inconsistent dataset input."""


# -- point files ---------------------------------------------------------------------
def parse_xyz(text: str, source: str = "<string>") -> PointCloud:
    points, labels = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split()
        if len(cols) not in (3, 4):
            raise DataError(f"{source}:{lineno}: expected 3 or 4 columns, got {len(cols)}")
        try:
            points.append([float(c) for c in cols[:3]])
            if len(cols) == 4:
                labels.append(int(cols[3]))
        except ValueError:
            raise DataError(f"{source}:{lineno}: malformed line {raw!r}") from None
    if not points:
        raise DataError(f"{source}: empty point file")
    if labels and len(labels) != len(points):
        raise DataError(f"{source}: part labels present on only some lines")
    return PointCloud(np.asarray(points, dtype=np.float64), np.asarray(labels) if labels else None)


def load_xyz(path: str | Path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such point file")
    return parse_xyz(path.read_text(), str(path))


def format_xyz(points: np.ndarray, labels: np.ndarray | None = None, extra: np.ndarray | None = None) -> str:
    """One point per line, 9 significant digits; optional integer label or float columns."""
    lines = []
    for i, p in enumerate(np.asarray(points, dtype=np.float64)):
        cols = [f"{v:.9g}" for v in p]
        if extra is not None:
            cols += [f"{v:.6g}" for v in extra[i]]
        if labels is not None:
            cols.append(str(int(labels[i])))
        lines.append(" ".join(cols))
    return "\n".join(lines) + "\n"


def write_xyz(path: str | Path, cloud: PointCloud) -> None:
    Path(path).write_text(format_xyz(cloud.points, cloud.labels))


# -- manifests ---------------------------------------------------------------------
@dataclass
class ManifestRecord:
    path: Path
    label: int
    split: str
    parts: Path | None = None


@dataclass
class DatasetManifest:
    classes: list[str]
    samples: list[ManifestRecord]
    version: int = MANIFEST_VERSION

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.samples if r.split == name]


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if raw.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {raw.get('version')!r}")
    classes = list(raw.get("classes", []))
    root = path.parent
    samples = []
    for i, s in enumerate(raw.get("samples", [])):
        label = s.get("label")
        if not isinstance(label, int) or not 0 <= label < len(classes):
            raise DataError(f"{path}: sample {i} label {label!r} outside class table of size {len(classes)}")
        split = s.get("split")
        if split not in ("train", "test"):
            raise DataError(f"{path}: sample {i} has split {split!r}, expected 'train' or 'test'")
        parts = s.get("parts")
        samples.append(ManifestRecord(root / s["path"], label, split, root / parts if parts else None))
    return DatasetManifest(classes, samples, raw["version"])


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    path = Path(path)
    root = path.parent

    def rel(p: Path) -> str:
        return str(Path(p).relative_to(root)) if Path(p).is_absolute() else str(p)

    samples = []
    for r in manifest.samples:
        entry = {"path": rel(r.path), "label": r.label, "split": r.split}
        if r.parts is not None:
            entry["parts"] = rel(r.parts)
        samples.append(entry)
    doc = {"version": manifest.version, "classes": manifest.classes, "samples": samples}
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_record(record: ManifestRecord) -> PointCloud:
    try:
        cloud = load_xyz(record.path)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"{record.path}: {exc}") from None
    if record.parts is not None:
        try:
            labels = np.loadtxt(record.parts, dtype=np.int64, ndmin=1)
        except Exception as exc:
            raise DataError(f"{record.parts}: {exc}") from None
        if len(labels) != len(cloud):
            raise DataError(f"{record.parts}: {len(labels)} part labels for {len(cloud)} points")
        cloud = PointCloud(cloud.points, labels)
    return cloud


@dataclass
class ShapeDataset:
    """In-memory clouds with class labels (and optional per-point part labels)."""

    clouds: list[PointCloud]
    labels: np.ndarray
    classes: list[str] = field(default_factory=list)
    categories: dict[int, list[int]] = field(default_factory=dict)  # class -> part ids

    def __len__(self) -> int:
        return len(self.clouds)

    def subset(self, indices) -> "ShapeDataset":
        indices = list(indices)
        return ShapeDataset([self.clouds[i] for i in indices], self.labels[indices], self.classes, self.categories)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split: str | None = None) -> "ShapeDataset":
        records = manifest.samples if split is None else manifest.split(split)
        clouds = [PointCloud(c.points.astype(np.float32), c.labels) for c in map(load_record, records)]
        labels = np.array([r.label for r in records], dtype=np.int64)
        categories: dict[int, set] = {}
        for c, lab in zip(clouds, labels):
            if c.labels is not None:
                categories.setdefault(int(lab), set()).update(np.unique(c.labels).tolist())
        return cls(clouds, labels, manifest.classes, {k: sorted(v) for k, v in categories.items()})


# -- synthetic shapes -------------------------------------------------------------------
@dataclass
class SyntheticShapeSpec:
    primitive: str
    size: tuple[float, ...] = (1.0,)
    noise: float = 0.0
    num_points: int = 8192
    seed: int = 0

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ParameterError(f"unknown primitive {self.primitive!r}; expected one of {PRIMITIVES}")
        if self.num_points < 1:
            raise ParameterError("num_points must be >= 1")
        if self.noise < 0:
            raise ParameterError("noise sigma must be >= 0")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sample_sphere(rng, n, radius):
    d = _unit(rng.standard_normal((n, 3)))
    return radius * d, d


def _sample_cube(rng, n, side):
    half = side / 2.0
    face = rng.integers(0, 6, size=n)
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    pts = rng.uniform(-half, half, size=(n, 3))
    rows = np.arange(n)
    pts[rows, axis] = sign * half
    normals = np.zeros((n, 3))
    normals[rows, axis] = sign
    return pts, normals


def _sample_cylinder(rng, n, radius, height):
    side = 2 * math.pi * radius * height
    cap = math.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * math.pi, size=n)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    lat = part == 0
    pts[lat, 0] = radius * np.cos(theta[lat])
    pts[lat, 1] = radius * np.sin(theta[lat])
    pts[lat, 2] = rng.uniform(-height / 2, height / 2, size=lat.sum())
    normals[lat, 0] = np.cos(theta[lat])
    normals[lat, 1] = np.sin(theta[lat])
    for code, z in ((1, -height / 2), (2, height / 2)):
        sel = part == code
        r = radius * np.sqrt(rng.uniform(0, 1, size=sel.sum()))
        pts[sel, 0] = r * np.cos(theta[sel])
        pts[sel, 1] = r * np.sin(theta[sel])
        pts[sel, 2] = z
        normals[sel, 2] = np.sign(z)
    return pts, normals


def _sample_cone(rng, n, radius, height):
    slant = math.hypot(radius, height)
    side = math.pi * radius * slant
    base = math.pi * radius**2
    on_side = rng.uniform(0, 1, size=n) < side / (side + base)
    theta = rng.uniform(0, 2 * math.pi, size=n)
    # fraction of the way from apex to base; sqrt gives uniform area density
    t = np.sqrt(rng.uniform(0, 1, size=n))
    r = radius * t
    z = np.where(on_side, height / 2 - t * height, -height / 2)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    side_normal = _unit(np.stack([height * np.cos(theta), height * np.sin(theta), np.full(n, radius)], axis=1))
    base_normal = np.tile([0.0, 0.0, -1.0], (n, 1))
    normals = np.where(on_side[:, None], side_normal, base_normal)
    return pts, normals


def _sample_torus(rng, n, major, minor):
    phi = rng.uniform(0, 2 * math.pi, size=n)
    theta = np.empty(n)
    filled = 0
    # rejection on the tube angle: surface density is proportional to (R + r cos theta)
    while filled < n:
        cand = rng.uniform(0, 2 * math.pi, size=2 * (n - filled))
        keep = cand[rng.uniform(0, 1, size=cand.size) < (major + minor * np.cos(cand)) / (major + minor)]
        take = keep[: n - filled]
        theta[filled:filled + take.size] = take
        filled += take.size
    ring = major + minor * np.cos(theta)
    pts = np.stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(theta)], axis=1)
    normals = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)], axis=1)
    return pts, normals


def generate_synthetic_shape(spec: SyntheticShapeSpec) -> PointCloud:
    """Uniform surface samples of a primitive with Gaussian noise along the surface normal."""
    rng = np.random.default_rng(spec.seed)
    n = spec.num_points
    size = tuple(float(s) for s in spec.size)
    if spec.primitive == "sphere":
        pts, normals = _sample_sphere(rng, n, size[0])
    elif spec.primitive == "cube":
        pts, normals = _sample_cube(rng, n, size[0])
    elif spec.primitive == "cylinder":
        pts, normals = _sample_cylinder(rng, n, *size[:2])
    elif spec.primitive == "cone":
        pts, normals = _sample_cone(rng, n, *size[:2])
    else:
        pts, normals = _sample_torus(rng, n, *size[:2])
    if spec.noise > 0:
        pts = pts + spec.noise * rng.standard_normal((n, 1)) * normals
    return PointCloud(pts)


def cylinder_part_labels(points: np.ndarray, height: float, bands: int = 3) -> np.ndarray:
    """Axial band index (0 = bottom) of each point of a z-aligned cylinder."""
    z = np.clip(np.asarray(points)[:, 2] + height / 2, 0.0, height)
    return np.minimum((z / height * bands).astype(np.int64), bands - 1)


def random_shape_spec(primitive: str, rng: np.random.Generator, num_points: int = 8192,
                      noise: float = 0.01) -> SyntheticShapeSpec:
    """Size parameters drawn per instance so each class has shape variation."""
    if primitive == "sphere":
        size = (rng.uniform(0.5, 1.0),)
    elif primitive == "cube":
        size = (rng.uniform(0.8, 1.6),)
    elif primitive == "cylinder":
        size = (rng.uniform(0.3, 0.6), rng.uniform(0.8, 2.0))
    elif primitive == "cone":
        size = (rng.uniform(0.4, 0.8), rng.uniform(0.8, 1.6))
    else:
        size = (rng.uniform(0.6, 0.9), rng.uniform(0.15, 0.3))
    return SyntheticShapeSpec(primitive, size, noise, num_points, int(rng.integers(2**31)))


def synthetic_classification_set(per_class: int, num_points: int = 8192, seed: int = 0,
                                 noise: float = 0.01) -> ShapeDataset:
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for label, prim in enumerate(PRIMITIVES):
        for _ in range(per_class):
            cloud = generate_synthetic_shape(random_shape_spec(prim, rng, num_points, noise))
            clouds.append(PointCloud(cloud.points.astype(np.float32)))
            labels.append(label)
    return ShapeDataset(clouds, np.array(labels), list(PRIMITIVES))


def synthetic_partseg_set(count: int, num_points: int = 2048, seed: int = 0, noise: float = 0.0,
                          bands: int = 3) -> ShapeDataset:
    """Cylinders whose points carry their axial band as part label (one object category)."""
    rng = np.random.default_rng(seed)
    clouds = []
    for _ in range(count):
        spec = random_shape_spec("cylinder", rng, num_points, noise)
        cloud = generate_synthetic_shape(spec)
        labels = cylinder_part_labels(cloud.points, spec.size[1], bands)
        clouds.append(PointCloud(cloud.points.astype(np.float32), labels))
    return ShapeDataset(clouds, np.zeros(count, dtype=np.int64), ["cylinder"], {0: list(range(bands))})


def write_dataset(out_dir: str | Path, train: ShapeDataset, test: ShapeDataset) -> Path:
    """Write .xyz files plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "points").mkdir(parents=True, exist_ok=True)
    records = []
    for split, ds in (("train", train), ("test", test)):
        for i, (cloud, label) in enumerate(zip(ds.clouds, ds.labels)):
            path = out_dir / "points" / f"{split}_{i:05d}.xyz"
            write_xyz(path, cloud)
            records.append(ManifestRecord(path, int(label), split))
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, DatasetManifest(list(train.classes), records))
    return manifest_path


# -- augmentation --------------------------------------------------------------------------
def augment_points(points: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Scale, anisotropic scale, gravity-axis rotation, recenter, unit-sphere rescale (each if enabled)."""
    src = np.asarray(points)
    pts = src.astype(np.float64)
    if spec.scale is not None:
        pts *= rng.uniform(spec.scale[0], spec.scale[1])
    if spec.anisotropic > 0:
        pts *= rng.uniform(1.0 - spec.anisotropic, 1.0 + spec.anisotropic, size=3)
    if spec.rotate:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        c, s = math.cos(angle), math.sin(angle)
        a, b = [ax for ax in range(3) if ax != spec.gravity_axis]
        u, v = pts[:, a].copy(), pts[:, b].copy()
        pts[:, a] = c * u - s * v
        pts[:, b] = s * u + c * v
    if spec.unit_sphere:
        pts -= pts.mean(axis=0)
        pts /= np.sqrt((pts * pts).sum(axis=1)).max()
    return pts.astype(np.float32) if src.dtype == np.float32 else pts


def augment(cloud: PointCloud, spec: AugmentationSpec, rng: np.random.Generator) -> PointCloud:
    return PointCloud(augment_points(cloud.points, spec, rng), cloud.labels)


def make_pretrain_sample(cloud: PointCloud, rng: np.random.Generator, num_points: int = 1024,
                         spec: AugmentationSpec | None = None) -> PointCloud:
    """FPS-resample to ``num_points`` then apply the pretraining augmentations."""
    if len(cloud) < num_points:
        raise DataError(f"cloud has {len(cloud)} points, need at least {num_points}")
    sub = fps_resample(cloud, num_points, rng=rng)
    if spec is None:
        spec = AugmentationSpec(scale=(0.8, 1.2), rotate=True)
    return augment(sub, spec, rng)


def resample_all(dataset: ShapeDataset, num_points: int, rng: np.random.Generator, chunk: int = 8) -> tuple[np.ndarray, list]:
    """FPS-resample every cloud to ``num_points``; returns stacked points and per-cloud part labels."""
    points = np.empty((len(dataset), num_points, 3), dtype=np.float32)
    parts: list = [None] * len(dataset)
    starts = [int(rng.integers(len(c))) for c in dataset.clouds]
    by_size: dict[int, list[int]] = {}
    for i, c in enumerate(dataset.clouds):
        if len(c) < num_points:
            raise DataError(f"sample {i} has {len(c)} points, need at least {num_points}")
        by_size.setdefault(len(c), []).append(i)
    for members in by_size.values():
        for lo in range(0, len(members), chunk):
            ids = members[lo:lo + chunk]
            stacked = np.stack([dataset.clouds[i].points for i in ids])
            idx = farthest_point_sampling(stacked, num_points, start=np.array([starts[i] for i in ids]))
            for row, i in enumerate(ids):
                points[i] = stacked[row, idx[row]]
                if dataset.clouds[i].labels is not None:
                    parts[i] = dataset.clouds[i].labels[idx[row]]
    return points, parts
