"""Ground-truth scene synthesis for the rotating-platform setup.

Scenes are analytic (ray-cast spheres, superellipsoids, or heightmap
expressions), so ground-truth depth and normals are exact.  Images are
rendered with the stratified Monte-Carlo integrator rather than the
trainer's quadrature, which keeps the inverse problem honest.  Rotation
angles follow constant velocity with optional monotone jitter.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .envlight import (EnvLight, env_to_latlong, init_rotation_angles,
                       load_light, rotation_matrix_y, save_light,
                       _eval_env_raw)
from .imagery import (Camera, FloatImage, ImageStack, norm_coord_grid,
                      read_image, read_mask_png, write_image, write_mask_png)
from .shading import (_cosine_dirs, _specular_batch, _stratified_uniforms,
                      default_roughness, diffuse_brdf)

DEFAULT_SPP = 4096


def default_gt_light() -> EnvLight:
    """Three-lobe light with one dominant warm source at mid latitude."""
    xi = np.array([
        [0.55, 0.45, 0.65],
        [-0.70, 0.25, 0.45],
        [0.10, -0.75, 0.60],
    ])
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    lam = np.array([10.0, 6.0, 4.0])
    mu = np.array([
        [2.6, 2.4, 2.2],
        [0.8, 0.9, 1.1],
        [0.40, 0.45, 0.50],
    ])
    return EnvLight(xi, lam, mu)


@dataclass
class SceneSpec:
    shape: str = "sphere"                  # sphere | superellipsoid | heightmap
    shape_params: dict = field(default_factory=dict)
    albedo: tuple = (0.75, 0.68, 0.60)
    spec_weight: float = 0.0               # uniform weight on one mid base
    spec_base: int = 6                     # which roughness base carries it
    two_tone: bool = False                 # azimuthal two-tone albedo pattern
    albedo_b: tuple = (0.25, 0.35, 0.60)
    light: EnvLight = None
    n_images: int = 36
    resolution: int = 128
    camera: Camera = None
    jitter: float = 0.0                    # rotation-velocity jitter fraction
    spp: int = DEFAULT_SPP

    def __post_init__(self):
        if self.light is None:
            self.light = default_gt_light()
        if self.camera is None:
            self.camera = Camera(50.0, 18.0, 18.0, self.resolution, self.resolution)
        if not 0.0 <= self.jitter < 0.5:
            raise ValueError("jitter fraction must lie in [0, 0.5)")
        if self.shape not in ("sphere", "superellipsoid", "heightmap"):
            raise ValueError(f"unknown shape '{self.shape}'")


# ---------------------------------------------------------------------------
# analytic geometry (camera frame: z = depth; normals exported in scene frame)
# ---------------------------------------------------------------------------

def _ray_grid(camera: Camera):
    xy = norm_coord_grid(camera)
    d = np.stack([xy[..., 0] * camera.sx / camera.focal,
                  xy[..., 1] * camera.sy / camera.focal,
                  np.ones(xy.shape[:2])], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _sphere_geometry(camera: Camera, center_z: float, radius: float):
    d = _ray_grid(camera)
    c = np.array([0.0, 0.0, center_z])
    b = d @ c
    disc = b * b - (c @ c - radius * radius)
    mask = disc > 0
    t = b - np.sqrt(np.clip(disc, 0.0, None))
    pts = d * t[..., None]
    n_out = (pts - c) / radius
    depth = pts[..., 2]
    return mask & (t > 0), depth, _to_scene_frame(n_out)


def _superellipsoid_geometry(camera: Camera, center_z,半=None, radii=(1.3, 1.1, 1.0),
                             power=4.0):
    d = _ray_grid(camera)
    c = np.array([0.0, 0.0, center_z])
    a = np.asarray(radii, dtype=np.float64)

    def implicit(t):
        p = (d * t[..., None] - c) / a
        return (np.abs(p) ** power).sum(axis=-1) - 1.0

    t_lo = np.full(d.shape[:2], center_z - a.max() * 1.5)
    t_hi = np.full(d.shape[:2], float(center_z))
    mask = implicit(t_hi) < 0            # ray reaches the interior by center depth
    for _ in range(64):                  # bisection on the entry point
        t_mid = 0.5 * (t_lo + t_hi)
        inside = implicit(t_mid) < 0
        t_hi = np.where(inside, t_mid, t_hi)
        t_lo = np.where(inside, t_lo, t_mid)
    t = 0.5 * (t_lo + t_hi)
    pts = d * t[..., None]
    p = (pts - c) / a
    grad = power * np.sign(p) * np.abs(p) ** (power - 1.0) / a
    n_out = grad / np.linalg.norm(grad, axis=-1, keepdims=True)
    return mask, pts[..., 2], _to_scene_frame(n_out)


def _heightmap_geometry(camera: Camera, expr: str, base_z: float, mask_radius: float):
    """Depth z(x, y) = base_z - expr(x, y) over a disk in normalized coords."""
    import sympy

    x_s, y_s = sympy.symbols("x y")
    h = sympy.sympify(expr)
    f_h = sympy.lambdify((x_s, y_s), h, "numpy")
    f_hx = sympy.lambdify((x_s, y_s), sympy.diff(h, x_s), "numpy")
    f_hy = sympy.lambdify((x_s, y_s), sympy.diff(h, y_s), "numpy")
    xy = norm_coord_grid(camera)
    x, y = xy[..., 0], xy[..., 1]
    mask = x * x + y * y < mask_radius * mask_radius
    z = base_z - np.broadcast_to(np.asarray(f_h(x, y), dtype=np.float64), x.shape)
    zx = -np.broadcast_to(np.asarray(f_hx(x, y), dtype=np.float64), x.shape)
    zy = -np.broadcast_to(np.asarray(f_hy(x, y), dtype=np.float64), x.shape)
    # surface S(x, y) = (x z sx/f, y z sy/f, z); normal from the two tangents
    fx, fy = camera.sx / camera.focal, camera.sy / camera.focal
    tx = np.stack([(z + x * zx) * fx, y * zx * fy, zx], axis=-1)
    ty = np.stack([x * zy * fx, (z + y * zy) * fy, zy], axis=-1)
    n = np.cross(tx, ty)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    n *= np.where(n[..., 2:3] > 0, -1.0, 1.0)     # toward the camera
    return mask, z, _to_scene_frame(n)


def _to_scene_frame(n_cam):
    """Outward camera-frame normals -> scene frame (+z toward camera)."""
    n = n_cam.copy()
    n[..., 2] = -n[..., 2]
    return n


def scene_geometry(spec: SceneSpec):
    """(mask, depth, normals) of the analytic scene; normals in scene frame."""
    cam = spec.camera
    z0 = 2.0 * cam.focal / cam.sx
    if spec.shape == "sphere":
        radius = spec.shape_params.get("radius", 0.25 * z0)
        center_z = spec.shape_params.get("center_z", z0)
        return _sphere_geometry(cam, center_z, radius)
    if spec.shape == "superellipsoid":
        radii = spec.shape_params.get("radii", (0.25 * z0, 0.21 * z0, 0.18 * z0))
        power = spec.shape_params.get("power", 4.0)
        center_z = spec.shape_params.get("center_z", z0)
        return _superellipsoid_geometry(cam, center_z, radii=radii, power=power)
    expr = spec.shape_params.get("expr", "0.8*exp(-(x**2+y**2)/0.18)")
    base_z = spec.shape_params.get("base_z", 2.0 * cam.focal / cam.sx)
    mask_radius = spec.shape_params.get("mask_radius", 0.75)
    return _heightmap_geometry(cam, expr, base_z, mask_radius)


def scene_materials(spec: SceneSpec, mask):
    """Per-pixel albedo (P, 3) and specular weights (P, N_S) on the mask."""
    iy, ix = np.nonzero(mask)
    n_bases = len(default_roughness())
    albedo = np.tile(np.asarray(spec.albedo, dtype=np.float64), (len(iy), 1))
    if spec.two_tone:
        h, w = mask.shape
        x = (2.0 * ix + 1.0) / w - 1.0
        y = (2.0 * iy + 1.0) / h - 1.0
        tone_b = np.sin(6.0 * np.arctan2(y, x)) > 0
        albedo[tone_b] = np.asarray(spec.albedo_b, dtype=np.float64)
    weights = np.zeros((len(iy), n_bases))
    if spec.spec_weight > 0:
        weights[:, spec.spec_base] = spec.spec_weight
    return albedo, weights


def jittered_angles(n_images: int, jitter: float, rng) -> np.ndarray:
    """Monotone angles over one turn with per-step velocity jitter."""
    base = init_rotation_angles(n_images)
    if jitter == 0.0:
        return base
    steps = 1.0 + jitter * rng.uniform(-1.0, 1.0, n_images)
    steps *= 2.0 * math.pi / steps.sum()
    th = np.concatenate([[0.0], np.cumsum(steps[:-1])])
    return th


# ---------------------------------------------------------------------------
# Monte-Carlo image synthesis
# ---------------------------------------------------------------------------

def _mc_render_image(light, theta, normals, views, albedo, weights, roughness,
                     spp, rng, chunk_px=512):
    """Per-pixel stratified cosine MC render; (P, 3) colors."""
    p_total = len(normals)
    out = np.zeros((p_total, 3))
    rot = rotation_matrix_y(theta)
    for lo in range(0, p_total, chunk_px):
        hi = min(lo + chunk_px, p_total)
        for p in range(lo, hi):
            u1, u2 = _stratified_uniforms(rng, spp)
            w = _cosine_dirs(normals[p], u1, u2)
            radiance = _eval_env_raw(light.xi, light.lam, light.mu, w @ rot.T)
            rho = diffuse_brdf(albedo[p])[None, :]
            if weights[p].any():
                rs = _specular_batch(views[p][None, :], w[None, :, :],
                                     normals[p][None, :], weights[p][None, :],
                                     roughness)[0]
                rho = rho + rs[:, None]
            out[p] = math.pi * (radiance * rho).mean(axis=0)
    return out


def synth_dataset(spec: SceneSpec, seed: int = 0):
    """Render the stack and return (stack, ground-truth dict).

    The ground truth holds 'normal' (H, W, 3) scene-frame unit normals,
    'depth' (H, W), and 'light'.  Per-image RNG streams derive from
    (seed, image index), so images are reproducible independently.
    """
    cam = spec.camera
    mask, depth, normals = scene_geometry(spec)
    iy, ix = np.nonzero(mask)
    n_px = len(iy)
    if n_px == 0:
        raise ValueError("scene produces an empty mask")
    albedo, weights = scene_materials(spec, mask)
    rough = default_roughness()
    x = (2.0 * ix + 1.0) / cam.width - 1.0
    y = (2.0 * iy + 1.0) / cam.height - 1.0
    views = np.stack([-x * cam.sx / cam.focal, -y * cam.sy / cam.focal,
                      np.ones(n_px)], axis=-1)
    views /= np.linalg.norm(views, axis=-1, keepdims=True)
    n_flat = normals[iy, ix]

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA5]))
    thetas = jittered_angles(spec.n_images, spec.jitter, rng)

    images = []
    for j in range(spec.n_images):
        rng_j = np.random.default_rng(np.random.SeedSequence([seed, j]))
        colors = _mc_render_image(spec.light, thetas[j], n_flat, views, albedo,
                                  weights, rough, spec.spp, rng_j)
        data = np.zeros((cam.height, cam.width, 3), dtype=np.float32)
        data[iy, ix] = colors.astype(np.float32)
        images.append(FloatImage(data, mask.copy()))
    stack = ImageStack(images, thetas, cam, mask)
    gt = {"normal": np.where(mask[..., None], normals, 0.0),
          "depth": np.where(mask, depth, 0.0),
          "light": spec.light,
          "albedo_px": albedo,
          "thetas": thetas}
    return stack, gt


# ---------------------------------------------------------------------------
# dataset directory layout
# ---------------------------------------------------------------------------

def save_dataset(out_dir, stack: ImageStack, gt: dict):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    for j, im in enumerate(stack.images):
        write_image(im, os.path.join(out_dir, "images", f"img_{j + 1:04d}.pfm"))
    write_mask_png(stack.mask, os.path.join(out_dir, "mask.png"))
    write_image(FloatImage(gt["normal"].astype(np.float32)),
                os.path.join(out_dir, "gt_normal.pfm"))
    write_image(FloatImage(gt["depth"].astype(np.float32)[..., None]),
                os.path.join(out_dir, "gt_depth.pfm"))
    save_light(gt["light"], os.path.join(out_dir, "gt_light.txt"))
    cam = stack.camera
    with open(os.path.join(out_dir, "meta.txt"), "w") as f:
        f.write(f"focal = {cam.focal:.17g}\n")
        f.write(f"sx = {cam.sx:.17g}\n")
        f.write(f"sy = {cam.sy:.17g}\n")
        f.write(f"width = {cam.width}\n")
        f.write(f"height = {cam.height}\n")
        f.write(f"n_images = {stack.n_images}\n")
        for j, th in enumerate(stack.thetas):
            f.write(f"theta_{j + 1:04d} = {th:.17g}\n")


def load_dataset(dataset_dir):
    """Read a dataset directory back into (stack, gt dict)."""
    meta = {}
    with open(os.path.join(dataset_dir, "meta.txt")) as f:
        for line in f:
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    cam = Camera(float(meta["focal"]), float(meta["sx"]), float(meta["sy"]),
                 int(meta["width"]), int(meta["height"]))
    n_images = int(meta["n_images"])
    thetas = np.array([float(meta[f"theta_{j + 1:04d}"]) for j in range(n_images)])
    mask = read_mask_png(os.path.join(dataset_dir, "mask.png"))
    images = []
    for j in range(n_images):
        im = read_image(os.path.join(dataset_dir, "images", f"img_{j + 1:04d}.pfm"))
        im.mask = mask.copy()
        images.append(im)
    stack = ImageStack(images, thetas, cam, mask)
    gt = {}
    npath = os.path.join(dataset_dir, "gt_normal.pfm")
    if os.path.exists(npath):
        gt["normal"] = read_image(npath).data.astype(np.float64)
    dpath = os.path.join(dataset_dir, "gt_depth.pfm")
    if os.path.exists(dpath):
        gt["depth"] = read_image(dpath).data[..., 0].astype(np.float64)
    lpath = os.path.join(dataset_dir, "gt_light.txt")
    if os.path.exists(lpath):
        gt["light"] = load_light(lpath)
    return stack, gt


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def mae_degrees(estimate, truth, mask) -> float:
    """Mean angular error between unit normal maps, in degrees."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    a = np.asarray(estimate, dtype=np.float64)[mask]
    b = np.asarray(truth, dtype=np.float64)[mask]
    dots = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())


def angular_error_map(estimate, truth, mask) -> np.ndarray:
    """(H, W) per-pixel angular error in degrees, zero outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    dots = np.clip(np.sum(np.asarray(estimate) * np.asarray(truth), axis=-1), -1.0, 1.0)
    err = np.degrees(np.arccos(dots))
    return np.where(mask, err, 0.0)


def encode_radiance(x, x0: float = 0.01):
    """Monotone perceptual-style encoding log2(1 + x / x0) for light metrics."""
    return np.log2(1.0 + np.clip(np.asarray(x, dtype=np.float64), 0.0, None) / x0)


def light_metrics(estimate: FloatImage, truth: FloatImage):
    """(PSNR dB, SSIM) between lat-long maps after perceptual encoding.

    The estimate is first scaled by the median truth/estimate ratio (the
    light's global intensity is not observable), both maps are encoded and
    normalized by the truth's encoded maximum, PSNR is capped at 99 dB.
    """
    if estimate.data.shape != truth.data.shape:
        raise ValueError("lat-long resolutions must match")
    est = estimate.data.astype(np.float64)
    tru = truth.data.astype(np.float64)
    if np.any(est < 0) or np.any(tru < 0):
        raise ValueError("radiance maps must be nonnegative")
    both = (est > 1e-12) & (tru > 1e-12)
    scale = np.median(tru[both] / est[both]) if both.any() else 1.0
    e = encode_radiance(est * scale)
    t = encode_radiance(tru)
    tmax = t.max()
    if tmax <= 0:
        raise ValueError("truth map is identically zero")
    e /= tmax
    t /= tmax
    mse = float(np.mean((e - t) ** 2))
    psnr = 99.0 if mse < 1e-12 else min(99.0, 10.0 * math.log10(1.0 / mse))
    from skimage.metrics import structural_similarity
    ssim = structural_similarity(t, e, channel_axis=2, data_range=1.0)
    return psnr, float(ssim)
