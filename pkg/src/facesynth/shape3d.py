"""Parametric 3D face-shape model and weak-perspective renderer.

The simulator side of the pipeline: a linear shape model (mean shape plus an
orthonormal deformation basis), landmark-based coefficient fitting, texture
lifting from a single still, and a small software rasterizer used to re-render
the face under arbitrary yaw/pitch/roll.

Conventions (fixed across the package):
  * image coordinates are (x, y) = (column, row), y pointing down;
  * the mesh uses the same handedness, so a projected vertex indexes the
    image directly with no flips;
  * the camera looks along -z, so larger camera-space z is closer;
  * rotations compose intrinsically as yaw (Y axis), then pitch (X), then
    roll (Z); angles are degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SUPPORTED_RESOLUTIONS = (32, 96)

# 2x3 orthographic drop of the z coordinate used by the weak-perspective camera.
ORTHO_PROJECTION = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

# Landmark anchors in the (u, v) parameter square of the synthetic mesh.
# u runs left->right, v runs chin->forehead.
_LANDMARK_UV = {
    "eye_l": (-0.38, 0.28),
    "eye_r": (0.38, 0.28),
    "nose_bridge": (0.0, 0.12),
    "nose_tip": (0.0, -0.10),
    "mouth_l": (-0.28, -0.46),
    "mouth_r": (0.28, -0.46),
    "mouth_c": (0.0, -0.50),
    "chin": (0.0, -0.82),
    "forehead": (0.0, 0.72),
    "cheek_l": (-0.60, -0.10),
    "cheek_r": (0.60, -0.10),
    "jaw_l": (-0.52, -0.56),
    "jaw_r": (0.52, -0.56),
}

LANDMARK_NAMES = tuple(_LANDMARK_UV)


class SingularFitError(ValueError):
    """Normal equations of the landmark fit are singular; use ridge > 0."""


@dataclass(frozen=True)
class CameraPose:
    """Weak-perspective camera: scaled rotation plus 2D translation (pixels)."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        for name in ("yaw", "pitch", "roll"):
            a = getattr(self, name)
            if not -180.0 <= a <= 180.0:
                raise ValueError(f"{name}={a} outside [-180, 180] degrees")

    @property
    def translation2d(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def with_frame(self, scale: float, tx: float, ty: float) -> "CameraPose":
        """Same rotation, different scale/translation."""
        return replace(self, scale=scale, tx=tx, ty=ty)

    def is_frontal(self, tol: float = 1e-12) -> bool:
        return abs(self.yaw) <= tol and abs(self.pitch) <= tol and abs(self.roll) <= tol


@dataclass(frozen=True)
class ShapeCoefficients:
    """Shape parameters, one per basis column, each clamped to [0, 1]."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float).reshape(-1)
        object.__setattr__(self, "alpha", np.clip(a, 0.0, 1.0))

    def __len__(self) -> int:
        return self.alpha.shape[0]

    @staticmethod
    def zeros(n: int) -> "ShapeCoefficients":
        return ShapeCoefficients(np.zeros(n))


@dataclass(frozen=True)
class PoseIdentityLabel:
    """(identity, pose) class indices attached to a simulated face."""

    identity: int
    pose: int
    identity_count: int
    pose_count: int

    def __post_init__(self):
        if not 0 <= self.identity < self.identity_count:
            raise ValueError(f"identity {self.identity} outside [0, {self.identity_count})")
        if not 0 <= self.pose < self.pose_count:
            raise ValueError(f"pose {self.pose} outside [0, {self.pose_count})")

    def one_hot(self) -> tuple[np.ndarray, np.ndarray]:
        hd = np.zeros(self.identity_count)
        hp = np.zeros(self.pose_count)
        hd[self.identity] = 1.0
        hp[self.pose] = 1.0
        return hd, hp


@dataclass(frozen=True)
class SimulatedFace:
    """A rendered posed face with its identity/pose label."""

    image: np.ndarray
    label: PoseIdentityLabel
    source_id: int

    def __post_init__(self):
        if self.label.identity != self.source_id:
            raise ValueError("label identity must equal source_id")


@dataclass(frozen=True)
class ShapeModel:
    """Linear shape model: vertices(alpha) = mean_shape + basis @ alpha.

    mean_shape is the flattened (3V,) vertex vector, basis is (3V, m-1) with
    orthonormal columns.  mirror_index[i] is i's partner under the x -> -x
    symmetry of the construction grid (used to fill self-occluded texture).
    """

    mean_shape: np.ndarray
    basis: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray
    landmark_names: tuple[str, ...] = field(default=LANDMARK_NAMES)
    mirror_index: np.ndarray | None = None

    @property
    def vertex_count(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def basis_count(self) -> int:
        return self.basis.shape[1]


def _grid_dims(vertex_count: int) -> tuple[int, int]:
    """Factor vertex_count into the most square (cols, rows) grid, dims >= 4."""
    best = None
    for gu in range(4, int(math.isqrt(vertex_count)) + 1):
        if vertex_count % gu == 0 and vertex_count // gu >= 4:
            best = (gu, vertex_count // gu)
    if best is None:
        raise ValueError(
            f"vertex_count={vertex_count} does not factor into a grid with both dims >= 4"
        )
    # wider than tall reads more face-like; keep u (columns) as the larger dim
    gu, gv = max(best), min(best)
    return gu, gv


def _smooth_field(rng: np.random.Generator, u: np.ndarray, v: np.ndarray, order: int = 3) -> np.ndarray:
    """Random smooth scalar field over the parameter square (low-order cosines)."""
    out = np.zeros_like(u)
    for p in range(order + 1):
        for q in range(order + 1):
            c = rng.normal() / (1.0 + p + q)
            out += c * np.cos(0.5 * math.pi * p * (u + 1.0)) * np.cos(0.5 * math.pi * q * (v + 1.0))
    return out


def build_synthetic_shape_model(seed: int, vertex_count: int = 256, basis_count: int = 8) -> ShapeModel:
    """Build a seeded face-like mesh with an orthonormal smooth deformation basis.

    The mean shape is the front half of an ellipsoid sampled on a regular
    (u, v) grid, with a nose bump and a flattened chin; the deformation basis
    is a QR-orthonormalized stack of random low-order smooth fields, so
    coefficients in [0, 1] produce mild, well-conditioned shape variation.

    Deterministic in seed; landmark vertices (eyes, nose tip, mouth corners,
    jaw/cheek/chin/forehead anchors) are resolved to their nearest grid nodes.
    """
    if vertex_count < 16:
        raise ValueError(f"vertex_count must be >= 16, got {vertex_count}")
    if basis_count < 1:
        raise ValueError(f"basis_count must be >= 1, got {basis_count}")
    gu, gv = _grid_dims(vertex_count)
    if basis_count > 3 * vertex_count - 1:
        raise ValueError("basis_count too large for this vertex count")

    u_lin = np.linspace(-1.0, 1.0, gu)
    v_lin = np.linspace(-1.0, 1.0, gv)
    u, v = np.meshgrid(u_lin, v_lin)  # (gv, gu), row-major by v

    # front half-ellipsoid; y grows downward (chin at +y) to match image rows
    phi = u * math.radians(72.0)
    psi = v * math.radians(78.0)
    a, b, c = 0.72, 1.0, 0.62
    x = a * np.sin(phi) * np.cos(psi)
    y = -b * np.sin(psi)
    z = c * np.cos(phi) * np.cos(psi)
    # nose bump and a slight brow shelf
    z = z + 0.20 * np.exp(-((u / 0.16) ** 2 + ((v + 0.10) / 0.24) ** 2))
    z = z + 0.04 * np.exp(-((v - 0.40) / 0.18) ** 2)

    mean_shape = np.stack([x, y, z], axis=-1).reshape(-1)  # vertex-major xyz

    rng = np.random.default_rng(seed)
    fields = np.empty((3 * vertex_count, basis_count))
    for k in range(basis_count):
        fx = _smooth_field(rng, u, v)
        fy = _smooth_field(rng, u, v)
        fz = _smooth_field(rng, u, v)
        fields[:, k] = np.stack([fx, fy, fz], axis=-1).reshape(-1)
    q, r = np.linalg.qr(fields)
    basis = q * np.sign(np.diag(r))  # canonical column signs

    # triangulate the grid
    tris = []
    for j in range(gv - 1):
        for i in range(gu - 1):
            v00 = j * gu + i
            v01 = j * gu + i + 1
            v10 = (j + 1) * gu + i
            v11 = (j + 1) * gu + i + 1
            tris.append((v00, v01, v10))
            tris.append((v01, v11, v10))
    triangles = np.array(tris, dtype=np.int64)

    # mirror partner: reflect the grid column index
    idx = np.arange(vertex_count).reshape(gv, gu)
    mirror = idx[:, ::-1].reshape(-1)

    landmarks = []
    for name in LANDMARK_NAMES:
        lu, lv = _LANDMARK_UV[name]
        d2 = (u - lu) ** 2 + (v - lv) ** 2
        landmarks.append(int(np.argmin(d2)))
    return ShapeModel(
        mean_shape=mean_shape,
        basis=basis,
        triangles=triangles,
        landmark_indices=np.array(landmarks, dtype=np.int64),
        landmark_names=LANDMARK_NAMES,
        mirror_index=mirror,
    )


def synthesize_shape(model: ShapeModel, coeffs: ShapeCoefficients) -> np.ndarray:
    """Linear shape synthesis: mean plus the coefficient-weighted basis columns."""
    if len(coeffs) != model.basis_count:
        raise ValueError(f"expected {model.basis_count} coefficients, got {len(coeffs)}")
    return model.mean_shape + model.basis @ coeffs.alpha


def rotation_matrix(pose: CameraPose) -> np.ndarray:
    """Rotation from intrinsic yaw(Y) -> pitch(X) -> roll(Z), angles in degrees."""
    cy, sy = math.cos(math.radians(pose.yaw)), math.sin(math.radians(pose.yaw))
    cp, sp = math.cos(math.radians(pose.pitch)), math.sin(math.radians(pose.pitch))
    cr, sr = math.cos(math.radians(pose.roll)), math.sin(math.radians(pose.roll))
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


def _camera_space(vertices: np.ndarray, pose: CameraPose) -> np.ndarray:
    verts3 = np.asarray(vertices, dtype=float).reshape(-1, 3)
    return verts3 @ rotation_matrix(pose).T


def project(vertices: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Weak-perspective projection of a flattened (3V,) vertex vector to (V, 2).

    Per vertex: scale * ORTHO_PROJECTION @ R @ s + translation2d.
    """
    cam = _camera_space(vertices, pose)
    return pose.scale * cam[:, :2] + np.array([pose.tx, pose.ty])


def _bilinear_sample(
    image: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear interpolation at (x, y) = (col, row); coords assumed in-bounds.

    With a mask, weights of uncovered corners are zeroed and renormalized
    (plain bilinear wherever all four corners are covered); returns the
    sampled values and an ok flag per point (False when no corner is covered).
    """
    h, w = image.shape
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    weights = [
        (1 - fx) * (1 - fy),
        fx * (1 - fy),
        (1 - fx) * fy,
        fx * fy,
    ]
    corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
    num = np.zeros_like(fx)
    den = np.zeros_like(fx)
    for wgt, (cy, cx) in zip(weights, corners):
        if mask is not None:
            wgt = wgt * mask[cy, cx]
        num += wgt * image[cy, cx]
        den += wgt
    ok = den > 1e-12
    out = np.zeros_like(num)
    out[ok] = num[ok] / den[ok]
    return out, ok


def _rasterize(
    proj: np.ndarray,
    z_cam: np.ndarray,
    triangles: np.ndarray,
    values: np.ndarray | None,
    height: int,
    width: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffered barycentric rasterization.

    Returns (image, zbuf); image is zeros where nothing was drawn and zbuf is
    -inf there.  When values is None only the z-buffer is filled.
    """
    img = np.zeros((height, width))
    zbuf = np.full((height, width), -np.inf)
    for t0, t1, t2 in triangles:
        xs = proj[[t0, t1, t2], 0]
        ys = proj[[t0, t1, t2], 1]
        zs = z_cam[[t0, t1, t2]]
        x_min = max(int(math.floor(xs.min())), 0)
        x_max = min(int(math.ceil(xs.max())), width - 1)
        y_min = max(int(math.floor(ys.min())), 0)
        y_max = min(int(math.ceil(ys.max())), height - 1)
        if x_min > x_max or y_min > y_max:
            continue
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-12:
            continue
        px, py = np.meshgrid(
            np.arange(x_min, x_max + 1, dtype=float),
            np.arange(y_min, y_max + 1, dtype=float),
        )
        w0 = (xs[1] - px) * (ys[2] - py) - (xs[2] - px) * (ys[1] - py)
        w1 = (xs[2] - px) * (ys[0] - py) - (xs[0] - px) * (ys[2] - py)
        w2 = area - w0 - w1
        inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        if not inside.any():
            continue
        b0 = w0 / area
        b1 = w1 / area
        b2 = w2 / area
        depth = b0 * zs[0] + b1 * zs[1] + b2 * zs[2]
        rows = py.astype(int)
        cols = px.astype(int)
        update = inside & (depth > zbuf[rows, cols])
        if not update.any():
            continue
        rr, cc = rows[update], cols[update]
        zbuf[rr, cc] = depth[update]
        if values is not None:
            vals = b0 * values[t0] + b1 * values[t1] + b2 * values[t2]
            img[rr, cc] = vals[update]
    return img, zbuf


def render(
    model: ShapeModel,
    coeffs: ShapeCoefficients,
    texture: np.ndarray,
    pose: CameraPose,
    resolution: int,
) -> np.ndarray:
    """Rasterize the textured shape at the given pose into [0, 1] grayscale."""
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"resolution must be one of {SUPPORTED_RESOLUTIONS}, got {resolution}")
    texture = np.asarray(texture, dtype=float).reshape(-1)
    if texture.shape[0] != model.vertex_count:
        raise ValueError(
            f"texture length {texture.shape[0]} != vertex count {model.vertex_count}"
        )
    vertices = synthesize_shape(model, coeffs)
    cam = _camera_space(vertices, pose)
    proj = pose.scale * cam[:, :2] + np.array([pose.tx, pose.ty])
    img, _ = _rasterize(proj, cam[:, 2], model.triangles, texture, resolution, resolution)
    return np.clip(img, 0.0, 1.0)


def extract_texture(
    still: np.ndarray,
    model: ShapeModel,
    coeffs: ShapeCoefficients,
    pose: CameraPose,
) -> np.ndarray:
    """Lift a per-vertex intensity map off a still image.

    Visible vertices (z-buffer test at their projected pixel) are sampled
    bilinearly within the model's projected footprint (weights renormalized
    at the silhouette); occluded ones inherit their mirror partner's sample;
    vertices that fall outside the image are filled from the nearest valid
    vertex in the image plane.
    """
    still = np.asarray(still, dtype=float)
    h, w = still.shape
    vertices = synthesize_shape(model, coeffs)
    cam = _camera_space(vertices, pose)
    proj = pose.scale * cam[:, :2] + np.array([pose.tx, pose.ty])
    z = cam[:, 2]
    _, zbuf = _rasterize(proj, z, model.triangles, None, h, w)
    footprint = np.isfinite(zbuf)

    x, y = proj[:, 0], proj[:, 1]
    in_bounds = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    tol = 0.05 * (z.max() - z.min() + 1e-12)
    cols = np.clip(np.round(x).astype(int), 0, w - 1)
    rows = np.clip(np.round(y).astype(int), 0, h - 1)
    visible = in_bounds & (z >= zbuf[rows, cols] - tol)

    tex = np.zeros(model.vertex_count)
    sampled_ok = np.zeros(model.vertex_count, dtype=bool)
    vals, ok = _bilinear_sample(still, x[in_bounds], y[in_bounds], mask=footprint)
    tex[in_bounds] = vals
    sampled_ok[in_bounds] = ok
    visible &= sampled_ok

    valid = visible.copy()
    if model.mirror_index is not None:
        partner = model.mirror_index
        fill = (~visible) & in_bounds & visible[partner]
        tex[fill] = tex[partner[fill]]
        valid |= fill

    if not valid.any():
        return np.zeros(model.vertex_count)
    invalid = ~valid
    if invalid.any():
        good = np.where(valid)[0]
        bad = np.where(invalid)[0]
        d2 = (proj[bad, None, 0] - proj[None, good, 0]) ** 2 + (
            proj[bad, None, 1] - proj[None, good, 1]
        ) ** 2
        tex[bad] = tex[good[np.argmin(d2, axis=1)]]
    return tex


def fit_coefficients(
    landmarks2d: np.ndarray,
    model: ShapeModel,
    pose: CameraPose,
    ridge: float = 1e-6,
) -> ShapeCoefficients:
    """Ridge least-squares shape fit from 2D landmark correspondences.

    Solves argmin_a sum_i ||project(landmark_i(a)) - landmarks2d_i||^2
    + ridge * ||a||^2 under the given camera, then clamps to [0, 1].
    """
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    lms = np.asarray(landmarks2d, dtype=float).reshape(-1, 2)
    idx = model.landmark_indices
    if lms.shape[0] != idx.shape[0]:
        raise ValueError(f"expected {idx.shape[0]} landmarks, got {lms.shape[0]}")
    rot = rotation_matrix(pose)
    m = model.basis_count
    a_mat = np.empty((2 * idx.shape[0], m))
    for k in range(m):
        col = model.basis[:, k].reshape(-1, 3)[idx]
        a_mat[:, k] = (pose.scale * (col @ rot.T)[:, :2]).reshape(-1)
    mean_lm = model.mean_shape.reshape(-1, 3)[idx]
    base = pose.scale * (mean_lm @ rot.T)[:, :2] + np.array([pose.tx, pose.ty])
    b_vec = (lms - base).reshape(-1)

    normal = a_mat.T @ a_mat + ridge * np.eye(m)
    eigvals = np.linalg.eigvalsh(normal)
    if eigvals[0] <= 1e-12 * max(eigvals[-1], 1.0):
        raise SingularFitError(
            "landmark normal equations are singular; refit with ridge > 0"
        )
    alpha = np.linalg.solve(normal, a_mat.T @ b_vec)
    return ShapeCoefficients(alpha)


def estimate_frontal_frame(
    landmarks2d: np.ndarray,
    model: ShapeModel,
    coeffs: ShapeCoefficients | None = None,
) -> CameraPose:
    """Estimate scale/translation of a frontal (identity-rotation) camera.

    Closed-form least squares of f * p_i + t = landmark_i over the model's
    landmark vertices; used to register an aligned still before shape fitting.
    """
    lms = np.asarray(landmarks2d, dtype=float).reshape(-1, 2)
    if coeffs is None:
        coeffs = ShapeCoefficients.zeros(model.basis_count)
    verts = synthesize_shape(model, coeffs).reshape(-1, 3)
    pts = verts[model.landmark_indices][:, :2]
    p_bar = pts.mean(axis=0)
    l_bar = lms.mean(axis=0)
    p_c = pts - p_bar
    l_c = lms - l_bar
    denom = (p_c**2).sum()
    if denom < 1e-12:
        raise ValueError("degenerate landmark geometry")
    f = float((p_c * l_c).sum() / denom)
    if f <= 0:
        raise ValueError("estimated non-positive scale; landmarks do not match the model")
    t = l_bar - f * p_bar
    return CameraPose(scale=f, tx=float(t[0]), ty=float(t[1]))


def fit_still(
    still: np.ndarray,
    model: ShapeModel,
    landmarks2d: np.ndarray | None,
    ridge: float = 1e-6,
) -> tuple[ShapeCoefficients, CameraPose, np.ndarray]:
    """Register an aligned frontal still: camera frame, coefficients, texture.

    The frontal registration is jointly linear in (scale, translation,
    scale * alpha), so one ridge solve recovers frame and shape together; a
    final fixed-frame fit polishes the clamped coefficients.  Without
    landmarks the mean shape under a standard frame is assumed.
    """
    still = np.asarray(still, dtype=float)
    res = still.shape[0]
    if landmarks2d is None:
        pose = standard_frame(res)
        coeffs = ShapeCoefficients.zeros(model.basis_count)
    else:
        lms = np.asarray(landmarks2d, dtype=float).reshape(-1, 2)
        idx = model.landmark_indices
        if lms.shape[0] != idx.shape[0]:
            raise ValueError(f"expected {idx.shape[0]} landmarks, got {lms.shape[0]}")
        m = model.basis_count
        n = idx.shape[0]
        mean_xy = model.mean_shape.reshape(-1, 3)[idx][:, :2]
        design = np.zeros((2 * n, 3 + m))
        design[0::2, 0] = mean_xy[:, 0]
        design[1::2, 0] = mean_xy[:, 1]
        design[0::2, 1] = 1.0
        design[1::2, 2] = 1.0
        for k in range(m):
            col_xy = model.basis[:, k].reshape(-1, 3)[idx][:, :2]
            design[0::2, 3 + k] = col_xy[:, 0]
            design[1::2, 3 + k] = col_xy[:, 1]
        target = lms.reshape(-1)
        reg = np.zeros(3 + m)
        reg[3:] = ridge
        normal = design.T @ design + np.diag(reg)
        eigvals = np.linalg.eigvalsh(normal)
        if eigvals[0] <= 1e-12 * max(eigvals[-1], 1.0):
            raise SingularFitError("frontal registration is singular; use ridge > 0")
        sol = np.linalg.solve(normal, design.T @ target)
        f = float(sol[0])
        if f <= 0:
            raise ValueError("estimated non-positive scale; landmarks do not match the model")
        pose = CameraPose(scale=f, tx=float(sol[1]), ty=float(sol[2]))
        coeffs = ShapeCoefficients(sol[3:] / f)
        coeffs = fit_coefficients(lms, model, pose, ridge=ridge)
    texture = extract_texture(still, model, coeffs, pose)
    return coeffs, pose, texture


def standard_frame(resolution: int) -> CameraPose:
    """Default centered frontal camera used by the procedural dataset."""
    return CameraPose(scale=0.40 * resolution, tx=resolution / 2.0, ty=resolution / 2.0)


def pose_grid(step_deg: float, min_deg: float, max_deg: float) -> list[CameraPose]:
    """Single-axis pose sweep: frontal plus +/-angles per axis.

    For each of yaw, pitch, roll independently, angles min, min+step, ..., max
    in both signs with the other two axes at zero; the frontal pose leads.
    Count = 1 + 3*2*floor((max-min)/step + 1); a 5-degree sweep of [5, 60]
    yields the 73-pose grid used for gallery synthesis.
    """
    if step_deg <= 0:
        raise ValueError("step must be positive")
    if step_deg > max_deg:
        raise ValueError("step must not exceed max")
    poses = [CameraPose()]
    if min_deg > max_deg:
        return poses
    n = int(math.floor((max_deg - min_deg) / step_deg + 1e-9)) + 1
    angles = [min_deg + i * step_deg for i in range(n)]
    for axis in ("yaw", "pitch", "roll"):
        for sign in (1.0, -1.0):
            for a in angles:
                poses.append(CameraPose(**{axis: sign * a}))
    return poses


def yaw_sweep(count: int, max_deg: float) -> list[CameraPose]:
    """Frontal plus a symmetric yaw-only fan of count-1 extra poses."""
    if count < 1:
        raise ValueError("count must be >= 1")
    poses = [CameraPose()]
    n_side = (count - 1) // 2
    step = max_deg / n_side if n_side else 0.0
    for i in range(1, n_side + 1):
        poses.append(CameraPose(yaw=i * step))
        poses.append(CameraPose(yaw=-i * step))
    if (count - 1) % 2:
        poses.append(CameraPose(pitch=max_deg / 2.0))
    return poses[:count]


def simulate(
    still: np.ndarray,
    identity: int,
    model: ShapeModel,
    grid: list[CameraPose],
    landmarks2d: np.ndarray | None = None,
    identity_count: int | None = None,
    ridge: float = 1e-6,
) -> list[SimulatedFace]:
    """Fit a still, lift its texture, and render one face per grid pose.

    Pose labels index into the grid; identity labels carry the input identity.
    """
    still = np.asarray(still, dtype=float)
    res = still.shape[0]
    if still.shape != (res, res) or res not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"still must be square with side in {SUPPORTED_RESOLUTIONS}")
    if not grid:
        return []
    k = identity_count if identity_count is not None else identity + 1
    coeffs, frame, texture = fit_still(still, model, landmarks2d, ridge=ridge)
    out = []
    for j, gp in enumerate(grid):
        pose = CameraPose(
            yaw=gp.yaw, pitch=gp.pitch, roll=gp.roll,
            scale=frame.scale, tx=frame.tx, ty=frame.ty,
        )
        img = render(model, coeffs, texture, pose, res)
        label = PoseIdentityLabel(identity, j, k, len(grid))
        out.append(SimulatedFace(image=img, label=label, source_id=identity))
    return out


def save_mesh_obj(model: ShapeModel, path, coeffs: ShapeCoefficients | None = None) -> None:
    """Write the (optionally deformed) mesh as Wavefront-style v/f text."""
    if coeffs is None:
        coeffs = ShapeCoefficients.zeros(model.basis_count)
    verts = synthesize_shape(model, coeffs).reshape(-1, 3)
    lines = [f"v {vx:.8f} {vy:.8f} {vz:.8f}" for vx, vy, vz in verts]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in model.triangles]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
