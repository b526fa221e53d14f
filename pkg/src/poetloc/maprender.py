"""Depth rendering from a point-cloud map, plus training-time scene tools.

The renderer projects every map point into a virtual pinhole camera,
keeps the nearest point per pixel, and then runs a small occlusion pass
that zeroes pixels sitting far behind their local neighborhood.  Depth
values are raw meters; 0 marks "no return".

Also here: uniform pose perturbation sampling, horizontal mirroring of a
training triple (image, depth, regression target), a deterministic
synthetic desk-scale scene generator with a matching shaded RGB
renderer, and the file formats for maps and images.

Coordinate conventions: x right, y down, z forward.  The synthetic
ground plane therefore sits at positive y, below a camera at the origin,
and surface normals that face up point along -y.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose7D,
    project_points,
    quaternion_from_axis_angle,
    quaternion_multiply,
    transform_points,
)

MAP_MAGIC = b"POETMAP1"

# Occlusion pass defaults: a pixel is dropped when it is deeper than the
# minimum of its square window by more than the margin (meters).
OCCLUSION_WINDOW = 5
OCCLUSION_MARGIN = 0.5


@dataclass(eq=False)
class PointMap:
    """Points in the global frame, with optional per-point reflectance.

    Reflectance is carried through file I/O untouched; nothing downstream
    reads it.
    """

    points: np.ndarray
    reflectance: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("map points must be finite")
        self.points = pts
        if self.reflectance is not None:
            refl = np.asarray(self.reflectance, dtype=np.float64).reshape(-1)
            if refl.shape[0] != pts.shape[0]:
                raise ValueError("reflectance count must match point count")
            self.reflectance = refl

    def __len__(self):
        return self.points.shape[0]


@dataclass(eq=False)
class DepthImage:
    """Per-pixel depth in meters; 0 means no return at that pixel."""

    depth: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth must be a 2D array")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depth values must be finite and nonnegative")
        self.depth = d

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]


@dataclass(frozen=True)
class PerturbationRange:
    """Per-axis bounds for a uniform pose perturbation.

    ``max_translation`` is meters per axis, ``max_rotation`` degrees per
    Euler angle; both are half-widths of symmetric intervals around zero.
    """

    max_translation: float
    max_rotation: float

    def __post_init__(self):
        if self.max_translation < 0 or self.max_rotation < 0:
            raise ValueError("perturbation bounds must be nonnegative")


# -- rasterization -----------------------------------------------------------


def _rasterize(points_cam, k: CameraIntrinsics):
    """Z-buffer a camera-frame point set onto the pixel grid.

    Returns (depth, winner): depth is (H, W) meters with 0 for empty
    pixels, winner the index of the point that owns each pixel (-1 for
    empty).  Points are written far-to-near so the nearest one lands
    last; equal depths resolve to the lowest point index, which keeps the
    result independent of input memory layout.
    """
    u, v, z, valid = project_points(points_cam, k)
    idx = np.nonzero(valid)[0]
    depth = np.zeros((k.height, k.width))
    winner = np.full((k.height, k.width), -1, dtype=np.int64)
    if idx.size == 0:
        return depth, winner
    ui = np.floor(u[idx] + 0.5).astype(np.int64)
    vi = np.floor(v[idx] + 0.5).astype(np.int64)
    zc = z[idx]
    order = np.argsort(zc, kind="stable")[::-1]
    flat = vi * k.width + ui
    depth.reshape(-1)[flat[order]] = zc[order]
    winner.reshape(-1)[flat[order]] = idx[order]
    return depth, winner


def _window_min(depth, window):
    """Minimum over a square window, ignoring empty (zero) pixels."""
    h, w = depth.shape
    pad = window // 2
    padded = np.full((h + 2 * pad, w + 2 * pad), np.inf)
    padded[pad : pad + h, pad : pad + w] = np.where(depth > 0, depth, np.inf)
    out = np.full((h, w), np.inf)
    for dy in range(window):
        for dx in range(window):
            np.minimum(out, padded[dy : dy + h, dx : dx + w], out=out)
    return out


def render_depth(
    pmap: PointMap,
    pose: Pose7D,
    k: CameraIntrinsics,
    occlusion_window: int = OCCLUSION_WINDOW,
    occlusion_margin: float = OCCLUSION_MARGIN,
) -> DepthImage:
    """Render the map as a depth image seen from ``pose``.

    Nearest point per pixel wins; a pixel deeper than the minimum of its
    occlusion window by more than the margin is treated as seen-through
    background and zeroed.  Pure function of its arguments.
    """
    if len(pmap) == 0:
        raise ValueError("cannot render an empty map")
    cam = transform_points(pmap.points, pose)
    depth, _ = _rasterize(cam, k)
    if occlusion_window > 1:
        local = _window_min(depth, occlusion_window)
        keep = depth <= local + occlusion_margin
        depth = np.where(keep, depth, 0.0)
    return DepthImage(depth)


# -- training-time pose tools ------------------------------------------------


def sample_perturbation(prange: PerturbationRange, rng) -> Pose7D:
    """Draw a uniform pose offset within the given per-axis bounds.

    Translation components are i.i.d. uniform; the rotation comes from
    three i.i.d. uniform Euler angles applied about x, then y, then z.
    Draw order is fixed (translation first), so a seeded generator gives
    the same sequence every run.
    """
    t = rng.uniform(-prange.max_translation, prange.max_translation, size=3)
    ang = np.deg2rad(rng.uniform(-prange.max_rotation, prange.max_rotation, size=3))
    qx = quaternion_from_axis_angle([1.0, 0.0, 0.0], ang[0])
    qy = quaternion_from_axis_angle([0.0, 1.0, 0.0], ang[1])
    qz = quaternion_from_axis_angle([0.0, 0.0, 1.0], ang[2])
    return Pose7D(t, quaternion_multiply(qz, quaternion_multiply(qy, qx)))


def mirror_pose(p: Pose7D) -> Pose7D:
    """Conjugate a pose by the x-axis reflection.

    This is the pose whose matrix is S H(p) S with S = diag(-1, 1, 1):
    x-translation negates and the quaternion y and z components flip
    sign.  Applying it twice returns the original pose.
    """
    return Pose7D(
        np.array([-p.t[0], p.t[1], p.t[2]]),
        np.array([p.q[0], p.q[1], -p.q[2], -p.q[3]]),
    )


def mirror_horizontal(image, depth: DepthImage, target: Pose7D, k: CameraIntrinsics):
    """Flip a training triple left-right, keeping everything consistent.

    Both rasters flip along their width; the principal point moves to
    width-1-cx; the regression target is conjugated by the reflection so
    it still maps the flipped rendering onto the flipped image.  Returns
    (image, depth, target, intrinsics).
    """
    image = np.asarray(image)
    if image.shape[:2] != (depth.height, depth.width):
        raise ValueError("image and depth sizes must match")
    flipped_image = np.ascontiguousarray(image[:, ::-1])
    flipped_depth = DepthImage(np.ascontiguousarray(depth.depth[:, ::-1]))
    flipped_k = CameraIntrinsics(
        k.fx, k.fy, k.width - 1 - k.cx, k.cy, k.width, k.height
    )
    return flipped_image, flipped_depth, mirror_pose(target), flipped_k


def transform_point_map(pmap: PointMap, pose: Pose7D) -> PointMap:
    """Apply a rigid transform to every map point (frame change)."""
    pts = transform_points(pmap.points, pose)
    return PointMap(pts, None if pmap.reflectance is None else pmap.reflectance.copy())


# -- synthetic desk-scale scenes ---------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a generated desk-scale scene.

    The ground plane spans x in [-extent, extent] and z in
    [near_z, near_z + 2*extent], at height ground_y (remember y points
    down, so the plane sits below a camera at the origin).  Boxes and
    poles rest on the plane.
    """

    extent: float = 2.0
    near_z: float = 0.3
    ground_y: float = 0.8
    ground_spacing: float = 0.02
    object_spacing: float = 0.015
    n_boxes: int = 5
    n_poles: int = 4
    checker_period: float = 0.25

    def __post_init__(self):
        if self.ground_spacing <= 0 or self.object_spacing <= 0:
            raise ValueError("sample spacings must be positive")
        if self.n_boxes < 0 or self.n_poles < 0:
            raise ValueError("object counts must be nonnegative")
        if self.n_boxes + self.n_poles == 0:
            raise ValueError("scene needs at least one object")


def _axis_samples(lo, hi, spacing):
    n = max(2, int(round((hi - lo) / spacing)) + 1)
    return np.linspace(lo, hi, n)


def sample_ground_plane(spec: SceneSpec):
    """Grid-sample the ground plane; returns (points, normals)."""
    xs = _axis_samples(-spec.extent, spec.extent, spec.ground_spacing)
    zs = _axis_samples(spec.near_z, spec.near_z + 2 * spec.extent, spec.ground_spacing)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    pts = np.stack(
        [gx.ravel(), np.full(gx.size, spec.ground_y), gz.ravel()], axis=1
    )
    normals = np.tile(np.array([0.0, -1.0, 0.0]), (pts.shape[0], 1))
    return pts, normals


def sample_box_surface(center, size, spacing):
    """Grid-sample all six faces of an axis-aligned box.

    Returns (points, normals, face_index); corners and edges appear once
    per adjacent face, which is harmless for rendering.
    """
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(size, dtype=np.float64) / 2.0
    pts, normals, faces = [], [], []
    for face, (axis, sign) in enumerate(
        [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]
    ):
        a, b = [i for i in range(3) if i != axis]
        sa = _axis_samples(-half[a], half[a], spacing)
        sb = _axis_samples(-half[b], half[b], spacing)
        ga, gb = np.meshgrid(sa, sb, indexing="ij")
        p = np.empty((ga.size, 3))
        p[:, axis] = sign * half[axis]
        p[:, a] = ga.ravel()
        p[:, b] = gb.ravel()
        pts.append(p + center)
        n = np.zeros(3)
        n[axis] = sign
        normals.append(np.tile(n, (p.shape[0], 1)))
        faces.append(np.full(p.shape[0], face, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(normals), np.concatenate(faces)


def sample_pole_surface(x, z, ground_y, radius, height, spacing):
    """Ring-sample the lateral surface of a vertical pole.

    The pole stands on the ground plane and extends upward (toward -y).
    Returns (points, normals).
    """
    n_rings = max(2, int(round(height / spacing)) + 1)
    ys = np.linspace(ground_y - height, ground_y, n_rings)
    n_around = max(8, int(round(2 * math.pi * radius / spacing)))
    angles = np.linspace(0.0, 2 * math.pi, n_around, endpoint=False)
    ca, sa = np.cos(angles), np.sin(angles)
    ring = np.stack([ca * radius, np.zeros(n_around), sa * radius], axis=1)
    pts = (ring[None, :, :] + np.array([x, 0.0, z])).repeat(n_rings, axis=0)
    pts = pts.reshape(-1, 3)
    pts[:, 1] = np.repeat(ys, n_around)
    normals = np.tile(np.stack([ca, np.zeros(n_around), sa], axis=1), (n_rings, 1))
    return pts, normals


_LIGHT = np.array([0.25, -0.85, -0.45]) / np.linalg.norm([0.25, -0.85, -0.45])

# Gray value painted wherever no map point lands in a rendered camera image.
BACKGROUND_SHADE = 0.04


def _shade(normals, albedo):
    lit = np.maximum(0.0, normals @ _LIGHT)
    return np.clip(albedo * (0.25 + 0.75 * lit)[:, None], 0.0, 1.0)


@dataclass(eq=False)
class SyntheticScene:
    """A generated map plus everything needed to render its camera image."""

    point_map: PointMap
    colors: np.ndarray
    ground_count: int
    object_counts: list
    spec: SceneSpec

    def render_rgb(self, pose: Pose7D, k: CameraIntrinsics):
        """Shaded image of the scene from ``pose``, values in [0, 1].

        Uses the same projection and z-buffer as the depth renderer, so
        any pixel that carries depth also carries object shading.
        """
        cam = transform_points(self.point_map.points, pose)
        _, winner = _rasterize(cam, k)
        img = np.full((k.height, k.width, 3), BACKGROUND_SHADE)
        hit = winner >= 0
        img[hit] = self.colors[winner[hit]]
        return img


def generate_synthetic_scene(spec: SceneSpec, rng) -> SyntheticScene:
    """Build a ground plane with boxes and poles, deterministically.

    All randomness (object placement, sizes, albedos) comes from ``rng``
    in a fixed draw order, so the same seed reproduces the scene down to
    the last bit.  Shading is Lambertian under a fixed light with a
    checkerboard ground albedo, which gives the image encoder lateral
    structure to lock onto.
    """
    g_pts, g_normals = sample_ground_plane(spec)
    checker = (
        np.floor(g_pts[:, 0] / spec.checker_period)
        + np.floor(g_pts[:, 2] / spec.checker_period)
    ).astype(np.int64) % 2
    g_albedo = np.where(
        checker[:, None] == 0,
        np.array([0.32, 0.30, 0.28]),
        np.array([0.62, 0.60, 0.55]),
    )

    all_pts = [g_pts]
    all_colors = [_shade(g_normals, g_albedo)]
    object_counts = []

    for _ in range(spec.n_boxes):
        center_x = rng.uniform(-0.65 * spec.extent, 0.65 * spec.extent)
        center_z = rng.uniform(spec.near_z + 0.7, spec.near_z + 2 * spec.extent - 0.8)
        size = rng.uniform(0.2, 0.5, size=3)
        base = rng.uniform(0.25, 0.85, size=3)
        pts, normals, faces = sample_box_surface(
            [center_x, spec.ground_y - size[1] / 2.0, center_z], size, spec.object_spacing
        )
        albedo = base[None, :] * (0.85 + 0.03 * faces)[:, None]
        all_pts.append(pts)
        all_colors.append(_shade(normals, albedo))
        object_counts.append(pts.shape[0])

    for _ in range(spec.n_poles):
        x = rng.uniform(-0.65 * spec.extent, 0.65 * spec.extent)
        z = rng.uniform(spec.near_z + 0.7, spec.near_z + 2 * spec.extent - 0.8)
        radius = rng.uniform(0.02, 0.05)
        height = rng.uniform(0.4, 0.9)
        base = rng.uniform(0.25, 0.85, size=3)
        pts, normals = sample_pole_surface(
            x, z, spec.ground_y, radius, height, spec.object_spacing
        )
        all_pts.append(pts)
        all_colors.append(_shade(normals, np.tile(base, (pts.shape[0], 1))))
        object_counts.append(pts.shape[0])

    return SyntheticScene(
        point_map=PointMap(np.concatenate(all_pts)),
        colors=np.concatenate(all_colors),
        ground_count=g_pts.shape[0],
        object_counts=object_counts,
        spec=spec,
    )


# -- file formats ------------------------------------------------------------


def _atomic_write(path, payload: bytes):
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_point_map(pmap: PointMap, path):
    """Write the binary map format: magic, u64 count, float32 records.

    Records are x, y, z and, when the map carries reflectance, a fourth
    float; everything little-endian.  Readers tell the two layouts apart
    by file size.
    """
    count = len(pmap)
    parts = [MAP_MAGIC, np.uint64(count).astype("<u8").tobytes()]
    if pmap.reflectance is None:
        parts.append(pmap.points.astype("<f4").tobytes())
    else:
        rec = np.concatenate([pmap.points, pmap.reflectance[:, None]], axis=1)
        parts.append(rec.astype("<f4").tobytes())
    _atomic_write(path, b"".join(parts))


def load_point_map(path) -> PointMap:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAP_MAGIC:
        raise ValueError("not a point map file (bad magic)")
    count = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    body = blob[16:]
    if len(body) == count * 12:
        floats_per_point = 3
    elif len(body) == count * 16:
        floats_per_point = 4
    else:
        raise ValueError("point map payload size does not match its count")
    rec = np.frombuffer(body, dtype="<f4").reshape(count, floats_per_point)
    rec = rec.astype(np.float64)
    if floats_per_point == 3:
        return PointMap(rec)
    return PointMap(rec[:, :3], rec[:, 3])


def load_xyz(path) -> PointMap:
    """Read a plain-text map: one 'x y z' triple per line, '#' comments."""
    rows = []
    with open(path, "r") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 3:
                raise ValueError("xyz line needs at least three numbers: %r" % line)
            rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
    if not rows:
        raise ValueError("xyz file holds no points")
    return PointMap(np.array(rows))


def save_pgm16(depth: DepthImage, path):
    """Export depth as a 16-bit PGM in millimeters (big-endian samples)."""
    mm = np.clip(np.rint(depth.depth * 1000.0), 0, 65535).astype(">u2")
    header = ("P5\n%d %d\n65535\n" % (depth.width, depth.height)).encode("ascii")
    _atomic_write(path, header + mm.tobytes())


def load_pgm16(path) -> DepthImage:
    tokens, payload = _read_pnm_header(path, b"P5")
    w, h, maxval = tokens
    if maxval != 65535:
        raise ValueError("expected a 16-bit PGM")
    mm = np.frombuffer(payload[: w * h * 2], dtype=">u2").reshape(h, w)
    return DepthImage(mm.astype(np.float64) / 1000.0)


def save_ppm(rgb, path):
    """Export an RGB image in [0, 1] as an 8-bit binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    header = ("P6\n%d %d\n255\n" % (rgb.shape[1], rgb.shape[0])).encode("ascii")
    _atomic_write(path, header + data.tobytes())


def load_ppm(path):
    tokens, payload = _read_pnm_header(path, b"P6")
    w, h, maxval = tokens
    if maxval != 255:
        raise ValueError("expected an 8-bit PPM")
    data = np.frombuffer(payload[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


def _read_pnm_header(path, magic):
    """Parse a binary PNM header: magic, then three integers, then data.

    Comment lines starting with '#' are allowed anywhere in the header,
    per the format family's convention.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(magic):
        raise ValueError("unexpected image magic")
    pos = len(magic)
    values = []
    while len(values) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated image header")
        values.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after the header
    return (values[0], values[1], values[2]), blob[pos:]
