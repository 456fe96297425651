"""Synthetic shape datasets and XYZ / OFF file ingestion.

Analytic shapes are sampled uniformly by surface area; polyhedra go through
the same triangle sampler as OFF meshes. Triangle selection uses systematic
sampling over the cumulative area, so per-face counts never deviate from
their area share by more than one point.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PointCloud, normalize_unit_sphere

FAMILIES = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "pyramid", "ellipsoid")


class ParseError(ValueError):
    """Malformed input file; ``line`` is 1-based."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = f"{path or '<input>'}:{line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass
class ShapeSpec:
    family: str
    jitter_sigma: float = 0.01
    scale_range: tuple = (0.85, 1.15)
    rotate: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        if not 0.0 <= self.jitter_sigma <= 0.05:
            raise ValueError("jitter_sigma must lie in [0, 0.05]")


@dataclass
class Dataset:
    train_points: np.ndarray  # (S, k, 3)
    train_labels: np.ndarray
    test_points: np.ndarray
    test_labels: np.ndarray
    class_names: list = field(default_factory=list)

    def train(self):
        return [PointCloud(p, int(l)) for p, l in zip(self.train_points, self.train_labels)]

    def test(self):
        return [PointCloud(p, int(l)) for p, l in zip(self.test_points, self.test_labels)]


# --- triangle meshes --------------------------------------------------------


def triangle_areas(vertices, faces):
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_mesh_surface(vertices, faces, k, rng):
    """Draw ``k`` points uniformly by area from a triangle mesh."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    areas = triangle_areas(vertices, faces)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    cdf = np.cumsum(areas) / total
    ticks = (rng.random() + np.arange(k)) / k
    tri = np.minimum(np.searchsorted(cdf, ticks, side="right"), len(faces) - 1)
    tri = rng.permutation(tri)
    u, v = rng.random(k), rng.random(k)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (vertices[faces[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


_CUBE_V = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
_CUBE_F = np.array(
    [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
     [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
)
_PYRAMID_V = np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0], [0, 0, 1.4]], float)
_PYRAMID_F = np.array([[0, 2, 1], [0, 3, 2], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])


def _unit_vectors(rng, k):
    v = rng.normal(size=(k, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _balanced_sphere(rng, k):
    """Uniform sphere samples in antipodal pairs, so the centroid is exactly
    the center and normalization leaves every point at radius 1. An odd
    ``k`` gets one great-circle triangle, which also sums to zero."""
    half = _unit_vectors(rng, (k - 3 * (k % 2)) // 2)
    parts = [half, -half]
    if k % 2:
        a = _unit_vectors(rng, 1)[0]
        b = np.cross(a, _unit_vectors(rng, 1)[0])
        b /= np.linalg.norm(b)
        t = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        parts.append(np.cos(t)[:, None] * a + np.sin(t)[:, None] * b)
    return rng.permutation(np.concatenate(parts))


def _sample_disk(rng, k, radius):
    r = radius * np.sqrt(rng.random(k))
    t = rng.uniform(0, 2 * np.pi, k)
    return r * np.cos(t), r * np.sin(t)


def _sample_cylinder(rng, k, radius=0.6, height=2.0):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    part = rng.choice(3, size=k, p=np.array([side, cap, cap]) / (side + 2 * cap))
    out = np.empty((k, 3))
    s = part == 0
    t = rng.uniform(0, 2 * np.pi, s.sum())
    out[s] = np.c_[radius * np.cos(t), radius * np.sin(t), rng.uniform(-height / 2, height / 2, s.sum())]
    for p, z in ((1, -height / 2), (2, height / 2)):
        m = part == p
        x, y = _sample_disk(rng, m.sum(), radius)
        out[m] = np.c_[x, y, np.full(m.sum(), z)]
    return out


def _sample_cone(rng, k, radius=1.0, height=1.8):
    slant = np.hypot(radius, height)
    lateral = np.pi * radius * slant
    base = np.pi * radius**2
    on_side = rng.random(k) < lateral / (lateral + base)
    out = np.empty((k, 3))
    n = on_side.sum()
    # distance from the apex grows like sqrt(u) for uniform lateral area
    frac = np.sqrt(rng.random(n))
    t = rng.uniform(0, 2 * np.pi, n)
    out[on_side] = np.c_[frac * radius * np.cos(t), frac * radius * np.sin(t), height * (1 - frac)]
    x, y = _sample_disk(rng, k - n, radius)
    out[~on_side] = np.c_[x, y, np.zeros(k - n)]
    return out


def _sample_torus(rng, k, major=1.0, minor=0.35):
    pts = []
    while sum(len(p) for p in pts) < k:
        u = rng.uniform(0, 2 * np.pi, 2 * k)
        v = rng.uniform(0, 2 * np.pi, 2 * k)
        keep = rng.random(2 * k) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        pts.append(np.c_[ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])
    return np.concatenate(pts)[:k]


def _sample_ellipsoid(rng, k, axes=(1.0, 0.6, 0.35)):
    a, b, c = axes
    gmax = max(a * b, a * c, b * c)
    pts = []
    while sum(len(p) for p in pts) < k:
        u = _unit_vectors(rng, 2 * k)
        g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        keep = rng.random(2 * k) < g / gmax
        pts.append(u[keep] * np.array(axes))
    return np.concatenate(pts)[:k]


def sample_shape(family, k, rng):
    """Surface samples of a canonical (unposed) shape."""
    if family == "sphere":
        return _balanced_sphere(rng, k)
    if family == "cube":
        return sample_mesh_surface(_CUBE_V, _CUBE_F, k, rng)
    if family == "cylinder":
        return _sample_cylinder(rng, k)
    if family == "cone":
        return _sample_cone(rng, k)
    if family == "torus":
        return _sample_torus(rng, k)
    if family == "plane":
        return np.c_[rng.uniform(-1, 1, (k, 2)), np.zeros(k)]
    if family == "pyramid":
        return sample_mesh_surface(_PYRAMID_V, _PYRAMID_F, k, rng)
    if family == "ellipsoid":
        return _sample_ellipsoid(rng, k)
    raise ValueError(f"unknown shape family {family!r}")


def make_cloud(spec, k, rng):
    pts = sample_shape(spec.family, k, rng)
    lo, hi = spec.scale_range
    pts = pts * rng.uniform(lo, hi, size=3)
    if spec.rotate:
        pts = Rotation.random(random_state=rng).apply(pts)
    if spec.jitter_sigma:
        pts = pts + rng.normal(0.0, spec.jitter_sigma, size=pts.shape)
    return normalize_unit_sphere(pts)


def generate_dataset(specs, per_class_counts, k=256, seed=0):
    """Build a labeled train/test dataset, one class per entry of ``specs``.

    ``per_class_counts`` is ``(train, test)``. Each class draws from its own
    seeded stream so adding a class does not perturb the others.
    """
    n_train, n_test = per_class_counts
    if len(specs) < 2:
        raise ValueError("need at least two classes")
    if k < 8:
        raise ValueError("k must be at least 8")
    if n_train < 0 or n_test < 0 or n_train + n_test == 0:
        raise ValueError("invalid per-class counts")
    seeds = np.random.SeedSequence(seed).spawn(len(specs))
    tr, te, tr_y, te_y = [], [], [], []
    for label, (spec, ss) in enumerate(zip(specs, seeds)):
        rng = np.random.default_rng(ss)
        clouds = [make_cloud(spec, k, rng) for _ in range(n_train + n_test)]
        tr += clouds[:n_train]
        te += clouds[n_train:]
        tr_y += [label] * n_train
        te_y += [label] * n_test
    empty = np.zeros((0, k, 3))
    return Dataset(
        np.array(tr) if tr else empty,
        np.array(tr_y, dtype=np.int64),
        np.array(te) if te else empty,
        np.array(te_y, dtype=np.int64),
        [s.family for s in specs],
    )


def default_specs(jitter_sigma=0.01):
    return [ShapeSpec(f, jitter_sigma=jitter_sigma) for f in FAMILIES]


# --- file formats -----------------------------------------------------------


def _content_lines(text):
    """Yield ``(line_number, tokens)`` skipping blanks and '#' comments."""
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line.split()


def read_xyz(path):
    """Raw ``(N, 3)`` coordinates of an XYZ file."""
    with open(path) as fh:
        text = fh.read()
    rows = []
    for no, tok in _content_lines(text):
        if len(tok) < 3:
            raise ParseError("expected 'x y z'", no, path)
        try:
            rows.append([float(t) for t in tok[:3]])
        except ValueError:
            raise ParseError(f"non-numeric coordinate in {tok[:3]}", no, path) from None
    if not rows:
        raise ParseError("no points found", None, path)
    pts = np.array(rows)
    if not np.all(np.isfinite(pts)):
        raise ParseError("non-finite coordinate", None, path)
    return pts


def write_xyz(path, points, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for p in np.asarray(points, dtype=np.float64):
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def load_xyz(path, k=None, seed=0, normalize=True):
    """Load an XYZ cloud, subsampled to ``k`` points without replacement.

    Survivors keep their file order; with exactly ``k`` points the file is
    taken as-is.
    """
    pts = read_xyz(path)
    if k is not None:
        if len(pts) < k:
            raise ValueError(f"{path}: {len(pts)} points, fewer than k={k}")
        keep = np.sort(np.random.default_rng(seed).choice(len(pts), size=k, replace=False))
        pts = pts[keep]
    return normalize_unit_sphere(pts) if normalize else pts


def read_off(path):
    """Parse an OFF mesh into ``(vertices, triangles)``; polygons are fanned."""
    with open(path) as fh:
        text = fh.read()
    lines = iter(_content_lines(text))
    try:
        no, tok = next(lines)
    except StopIteration:
        raise ParseError("empty file", 1, path) from None
    if tok[0] == "OFF":
        counts = tok[1:]
        if not counts:
            try:
                no, counts = next(lines)
            except StopIteration:
                raise ParseError("missing counts line", no + 1, path) from None
    elif tok[0].startswith("OFF") and tok[0][3:].isdigit():
        # some ModelNet files glue the counts onto the header
        counts = [tok[0][3:]] + tok[1:]
    else:
        raise ParseError(f"expected 'OFF' header, got {tok[0]!r}", no, path)
    try:
        n_vert, n_face = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise ParseError("bad counts line", no, path) from None
    verts = []
    for _ in range(n_vert):
        try:
            no, tok = next(lines)
        except StopIteration:
            raise ParseError(f"expected {n_vert} vertices, file ended", no + 1, path) from None
        try:
            verts.append([float(t) for t in tok[:3]])
        except ValueError:
            raise ParseError("bad vertex line", no, path) from None
        if len(tok) < 3:
            raise ParseError("vertex needs 3 coordinates", no, path)
    tris = []
    for _ in range(n_face):
        try:
            no, tok = next(lines)
        except StopIteration:
            raise ParseError(f"expected {n_face} faces, file ended", no + 1, path) from None
        try:
            cnt = int(tok[0])
            idx = [int(t) for t in tok[1 : 1 + cnt]]
        except ValueError:
            raise ParseError("bad face line", no, path) from None
        if cnt < 3 or len(idx) != cnt or min(idx) < 0 or max(idx) >= n_vert:
            raise ParseError("invalid face", no, path)
        tris += [[idx[0], idx[i], idx[i + 1]] for i in range(1, cnt - 1)]
    return np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64).reshape(-1, 3)


def load_off(path, k=1024, seed=0, normalize=True):
    """Area-weighted surface sample of an OFF mesh."""
    verts, tris = read_off(path)
    if len(tris) == 0:
        raise ParseError("mesh has no faces", None, path)
    pts = sample_mesh_surface(verts, tris, k, np.random.default_rng(seed))
    return normalize_unit_sphere(pts) if normalize else pts


# ASCII PLY with per-vertex colour:
#   ply / format ascii 1.0 / element vertex N /
#   property float x|y|z / property uchar red|green|blue / end_header
# followed by N lines "x y z r g b".

ORIGINAL_RGB = (0, 0, 255)
ADVERSARIAL_RGB = (255, 0, 0)


def write_ply(path, points, colors):
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.int64).reshape(-1, 3)
    if len(points) != len(colors):
        raise ValueError("points and colors differ in length")
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(points)}",
        "property double x", "property double y", "property double z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    lines += [f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c[0]} {c[1]} {c[2]}"
              for p, c in zip(points, colors)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path):
    """Read an ASCII PLY written by :func:`write_ply`; returns (points, colors)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1, path)
    count = None
    for no, line in enumerate(lines, start=1):
        tok = line.split()
        if tok[:2] == ["format", "ascii"] or tok[:1] in (["property"], ["comment"], ["ply"]):
            continue
        if tok[:2] == ["element", "vertex"]:
            count = int(tok[2])
        elif tok == ["end_header"]:
            body = lines[no : no + (count or 0)]
            if count is None or len(body) < count:
                raise ParseError("vertex data shorter than declared", no, path)
            rows = np.array([[float(t) for t in row.split()[:6]] for row in body])
            rows = rows.reshape(-1, 6)
            return rows[:, :3], rows[:, 3:].astype(np.int64)
        elif tok[:1] == ["format"]:
            raise ParseError("only ASCII PLY is supported", no, path)
    raise ParseError("missing end_header", None, path)
