"""Point clouds, the ``.geopc`` text format, a synthetic dental-arch generator
and the weak/strong augmentation pair."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FILE_MAGIC = "GEOPC"
FILE_VERSION = "v1"


class CloudFormatError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class PointCloud:
    coords: np.ndarray
    n_classes: int
    labels: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {coords.shape}")
        if len(coords) < 1:
            raise ValueError("a cloud needs at least one point")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords must be finite")
        object.__setattr__(self, "coords", coords)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (len(coords),):
                raise ValueError("labels must have one entry per point")
            if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
                raise ValueError(f"labels must lie in [0, {self.n_classes})")
            object.__setattr__(self, "labels", labels)

    @property
    def n_points(self) -> int:
        return len(self.coords)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def with_coords(self, coords) -> "PointCloud":
        return replace(self, coords=coords)

    def unlabeled(self) -> "PointCloud":
        return replace(self, labels=None)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if self.n_classes != other.n_classes or self.labeled != other.labeled:
            return False
        if not np.array_equal(self.coords, other.coords):
            return False
        return not self.labeled or np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True)
class AugmentedPair:
    weak: PointCloud
    strong: PointCloud

    def __post_init__(self):
        if self.weak.n_points != self.strong.n_points:
            raise ValueError("weak and strong views must have the same points")


@dataclass(frozen=True)
class ArchSpec:
    """Synthetic arch layout.

    Tooth classes 1..C-1 sit along a parabola in the x/y plane, class index
    increasing with arc position; class 0 is a gum band underneath.  Each
    cloud draws its own shape variation from ``variation``.
    """

    n_classes: int = 9
    n_points: int = 1024
    arch_radius: float = 0.8
    tooth_spacing: float = 1.0
    cluster_spread: float = 0.05
    boundary_jitter: float = 0.15
    variation: float = 0.1
    gum_fraction: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_points < self.n_classes:
            raise ValueError(
                f"n_points ({self.n_points}) < n_classes ({self.n_classes}): cannot cover every class"
            )
        for name in ("arch_radius", "tooth_spacing"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("cluster_spread", "boundary_jitter", "variation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.gum_fraction < 1:
            raise ValueError("gum_fraction must lie in (0, 1)")


def _arch_point(s, radius, depth):
    """Arc-length-ish parameter ``s`` in [-1, 1] to a point on the parabola."""
    x = radius * s
    y = depth * (s * s) - 0.5 * depth
    return x, y


def _arch_normal(s, radius, depth):
    tx, ty = radius, 2 * depth * s
    norm = np.hypot(tx, ty)
    return ty / norm, -tx / norm


def generate_arch(spec: ArchSpec) -> PointCloud:
    """Sample one labelled arch; deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, N = spec.n_classes, spec.n_points
    n_teeth = C - 1
    var = spec.variation

    radius = spec.arch_radius * (1 + var * rng.uniform(-1, 1))
    depth = 0.7 * spec.arch_radius * (1 + var * rng.uniform(-1, 1))
    yaw = math.radians(100.0) * var * rng.uniform(-1, 1)
    shift = 0.5 * var * rng.uniform(-1, 1, size=3)
    # per-tooth widths, then normalised so the teeth fill [-span, span]
    widths = spec.tooth_spacing * (1 + 2 * var * rng.uniform(-1, 1, size=max(n_teeth, 1)))
    span = 0.9
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    edges = -span + 2 * span * edges / edges[-1]
    heights = 0.25 * (1 + var * rng.uniform(-1, 1, size=max(n_teeth, 1)))

    n_gum = max(1, int(round(spec.gum_fraction * N))) if n_teeth else N
    n_gum = min(n_gum, N - n_teeth)
    n_tooth = N - n_gum

    coords = np.empty((N, 3))
    labels = np.empty(N, dtype=np.int64)

    # teeth: guarantee one point per class first, then fill uniformly in s
    s = np.empty(n_tooth)
    if n_tooth:
        centres = 0.5 * (edges[:-1] + edges[1:])
        s[:n_teeth] = centres
        s[n_teeth:] = rng.uniform(-span, span, size=n_tooth - n_teeth)
        jitter = spec.boundary_jitter * (edges[1] - edges[0]) * rng.standard_normal(n_tooth)
        jitter[:n_teeth] = 0.0
        tooth_idx = np.clip(np.searchsorted(edges, s + jitter, side="right") - 1, 0, n_teeth - 1)
        # local position inside the tooth decides the crown height profile
        lo, hi = edges[tooth_idx], edges[tooth_idx + 1]
        u = np.clip((s - lo) / (hi - lo), 0, 1)
        crown = heights[tooth_idx] * np.sqrt(np.clip(1 - (2 * u - 1) ** 2, 0.05, 1))
        z = crown * rng.uniform(0, 1, size=n_tooth)
        z[:n_teeth] = 0.5 * heights
        off = spec.cluster_spread * rng.standard_normal(n_tooth)
        off[:n_teeth] = 0.0
        x, y = _arch_point(s, radius, depth)
        nx, ny = _arch_normal(s, radius, depth)
        coords[:n_tooth, 0] = x + off * nx
        coords[:n_tooth, 1] = y + off * ny
        coords[:n_tooth, 2] = z
        labels[:n_tooth] = tooth_idx + 1

    # gum band below the teeth, a little wider radially
    sg = rng.uniform(-1, 1, size=n_gum)
    xg, yg = _arch_point(sg, radius, depth)
    nxg, nyg = _arch_normal(sg, radius, depth)
    offg = 2.5 * spec.cluster_spread * rng.standard_normal(n_gum)
    zg = -0.2 * rng.uniform(0, 1, size=n_gum) - spec.cluster_spread * np.abs(rng.standard_normal(n_gum))
    coords[n_tooth:, 0] = xg + offg * nxg
    coords[n_tooth:, 1] = yg + offg * nyg
    coords[n_tooth:, 2] = zg
    labels[n_tooth:] = 0

    c, s_ = math.cos(yaw), math.sin(yaw)
    xy = coords[:, :2] @ np.array([[c, s_], [-s_, c]])
    coords[:, :2] = xy
    coords += shift
    np.clip(coords, -1.0, 1.0, out=coords)

    perm = rng.permutation(N)
    return PointCloud(coords[perm], C, labels[perm])


def tooth_centroids(cloud: PointCloud) -> dict[int, np.ndarray]:
    return {int(m): cloud.coords[cloud.labels == m].mean(axis=0) for m in np.unique(cloud.labels) if m != 0}


# augmentation ------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentRecipe:
    max_rotation_deg: float
    jitter_frac: float
    scale_range: tuple[float, float] = (1.0, 1.0)


WEAK = AugmentRecipe(max_rotation_deg=5.0, jitter_frac=0.005)
STRONG = AugmentRecipe(max_rotation_deg=30.0, jitter_frac=0.02, scale_range=(0.8, 1.2))


def bbox_diagonal(coords: np.ndarray) -> float:
    return float(np.linalg.norm(coords.max(axis=0) - coords.min(axis=0)))


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(cloud: PointCloud, recipe: AugmentRecipe, rng: np.random.Generator) -> PointCloud:
    """Rotate about the vertical (z) axis, scale per axis, then jitter.

    Point order and labels are untouched so views stay index-aligned.
    """
    lim = math.radians(recipe.max_rotation_deg)
    theta = rng.uniform(-lim, lim) if lim > 0 else 0.0
    lo, hi = recipe.scale_range
    scale = rng.uniform(lo, hi, size=3) if hi > lo else np.full(3, lo)
    coords = (cloud.coords @ rotation_z(theta).T) * scale
    if recipe.jitter_frac > 0:
        sd = recipe.jitter_frac * bbox_diagonal(cloud.coords)
        coords = coords + sd * rng.standard_normal(coords.shape)
    return cloud.with_coords(coords)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def augment_weak(cloud: PointCloud, seed=None, recipe: AugmentRecipe = WEAK) -> PointCloud:
    return augment(cloud, recipe, _rng(seed))


def augment_strong(cloud: PointCloud, seed=None, recipe: AugmentRecipe = STRONG) -> PointCloud:
    return augment(cloud, recipe, _rng(seed))


def augment_pair(cloud: PointCloud, seed=None) -> AugmentedPair:
    rng = _rng(seed)
    return AugmentedPair(augment_weak(cloud, rng), augment_strong(cloud, rng))


# file I/O -------------------------------------------------------------------------
def format_cloud(cloud: PointCloud) -> str:
    lines = [f"{FILE_MAGIC} {FILE_VERSION} {cloud.n_points} {cloud.n_classes}"]
    labels = cloud.labels if cloud.labeled else np.full(cloud.n_points, -1)
    for (x, y, z), lab in zip(cloud.coords.tolist(), labels.tolist()):
        lines.append(f"{x!r} {y!r} {z!r} {lab}")
    return "\n".join(lines) + "\n"


def write_cloud(cloud: PointCloud, path) -> None:
    Path(path).write_text(format_cloud(cloud), encoding="utf-8")


def parse_cloud(text: str, path=None) -> PointCloud:
    lines = text.splitlines()
    if not lines:
        raise CloudFormatError("empty file", path, 1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != FILE_MAGIC or head[1] != FILE_VERSION:
        raise CloudFormatError(f"malformed header {lines[0]!r}", path, 1)
    try:
        n, C = int(head[2]), int(head[3])
    except ValueError:
        raise CloudFormatError(f"malformed header {lines[0]!r}", path, 1) from None
    if n < 1 or C < 2:
        raise CloudFormatError("header needs N >= 1 and C >= 2", path, 1)
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise CloudFormatError(f"expected {n} points, found {len(rows)}", path, 1)
    coords = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows):
        lineno = i + 2
        parts = row.split()
        if len(parts) != 4:
            raise CloudFormatError(f"expected 4 fields, got {len(parts)}", path, lineno)
        try:
            coords[i] = [float(v) for v in parts[:3]]
            labels[i] = int(parts[3])
        except ValueError:
            raise CloudFormatError(f"bad row {row!r}", path, lineno) from None
        if not np.all(np.isfinite(coords[i])):
            raise CloudFormatError("non-finite coordinate", path, lineno)
        lab = labels[i]
        if lab < -1 or lab >= C:
            raise CloudFormatError(f"label {lab} outside [-1, {C})", path, lineno)
        if i > 0 and (lab == -1) != (labels[0] == -1):
            raise CloudFormatError("mixed labelled and unlabelled rows", path, lineno)
    return PointCloud(coords, C, None if labels[0] == -1 else labels)


def read_cloud(path) -> PointCloud:
    return parse_cloud(Path(path).read_text(encoding="utf-8"), path)


# dataset directories ------------------------------------------------------------
SPLITS = ("labeled", "unlabeled", "test")
# ground truth of the unlabeled split, kept for diagnostics only
TRUTH_DIR = "unlabeled_truth"


@dataclass
class Dataset:
    labeled: list[PointCloud] = field(default_factory=list)
    unlabeled: list[PointCloud] = field(default_factory=list)
    test: list[PointCloud] = field(default_factory=list)
    names: dict[str, list[str]] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        for split in (self.labeled, self.unlabeled, self.test):
            if split:
                return split[0].n_classes
        raise ValueError("empty dataset")


def read_split(directory) -> tuple[list[PointCloud], list[str]]:
    directory = Path(directory)
    files = sorted(directory.glob("*.geopc"))
    return [read_cloud(f) for f in files], [f.name for f in files]


def read_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    ds = Dataset()
    for split in SPLITS:
        sub = root / split
        clouds, names = read_split(sub) if sub.is_dir() else ([], [])
        setattr(ds, split, clouds)
        ds.names[split] = names
    return ds


def write_dataset(
    root,
    n_clouds: int,
    n_points: int,
    n_classes: int,
    labeled_ratio: float,
    seed: int,
    n_test: int | None = None,
    **arch_kw,
) -> Dataset:
    """Generate ``n_clouds`` training arches plus a test split under ``root``.

    The first ``round(labeled_ratio * n_clouds)`` clouds (after a seeded
    shuffle) keep their labels; the rest are written with label -1.
    """
    if not 0 <= labeled_ratio <= 1:
        raise ValueError("labeled ratio must lie in [0, 1]")
    if n_clouds < 1:
        raise ValueError("need at least one cloud")
    if n_test is None:
        n_test = max(1, n_clouds // 10)
    root = Path(root)
    seeds = np.random.SeedSequence(seed).generate_state(n_clouds + n_test)
    n_lab = int(round(labeled_ratio * n_clouds))
    order = np.random.default_rng(seed).permutation(n_clouds)
    is_lab = np.zeros(n_clouds, dtype=bool)
    is_lab[order[:n_lab]] = True

    for split in SPLITS + (TRUTH_DIR,):
        (root / split).mkdir(parents=True, exist_ok=True)
        for old in (root / split).iterdir():
            if old.suffix in (".geopc", ".labels"):
                old.unlink()
    ds = Dataset(names={s: [] for s in SPLITS})
    for i in range(n_clouds + n_test):
        spec = ArchSpec(n_classes=n_classes, n_points=n_points, seed=int(seeds[i]), **arch_kw)
        cloud = generate_arch(spec)
        if i >= n_clouds:
            split = "test"
        elif is_lab[i]:
            split = "labeled"
        else:
            split = "unlabeled"
            truth = " ".join(str(v) for v in cloud.labels.tolist())
            (root / TRUTH_DIR / f"cloud_{i:04d}.labels").write_text(truth + "\n", encoding="utf-8")
            cloud = cloud.unlabeled()
        name = f"cloud_{i:04d}.geopc"
        write_cloud(cloud, root / split / name)
        getattr(ds, split).append(cloud)
        ds.names[split].append(name)
    manifest = {
        "clouds": n_clouds,
        "points": n_points,
        "classes": n_classes,
        "labeled_ratio": labeled_ratio,
        "seed": seed,
        "test": n_test,
        **arch_kw,
    }
    text = "".join(f"{k} = {v}\n" for k, v in manifest.items())
    (root / "manifest.txt").write_text(text, encoding="utf-8")
    return ds
