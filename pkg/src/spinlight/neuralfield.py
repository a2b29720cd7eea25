"""Coordinate networks for depth and material, and depth-to-normal fitting.

The depth head maps a positionally encoded pixel coordinate to a scalar
depth; the material head maps it to albedo plus specular base weights.
Normals come from the depths of the four 1-pixel neighbors lifted to camera
coordinates under perspective (shrinking-range computing interpolates those
depths from stride-k samples early in training).

Frames: network depths and the lifted points p' live in the camera frame
(z = depth, positive into the scene); fitted normals are reported in the
scene frame (+z toward the camera), matching the boundary normals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .envlight import EnvLight, init_rotation_angles
from .imagery import Camera, pixel_to_norm_coords
from .shading import N_SPEC_BASES, default_roughness

DEPTH_ENCODING_ORDER = 10
MATERIAL_ENCODING_ORDER = 6
HIDDEN_WIDTH = 128
HIDDEN_LAYERS = 4
GAMMA_EPS = 1e-12
ROUGHNESS_MIN = 1e-4


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

def positional_encode(p, order: int) -> np.ndarray:
    """(sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p), cos(2^{L-1} pi p))
    per scalar coordinate, concatenated over both coordinates; length 4L."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 2:
        raise ValueError("expected 2D coordinates")
    t = torch.from_numpy(np.atleast_2d(p))
    out = encode_coords(t, order).numpy()
    return out[0] if p.ndim == 1 else out


def encode_coords(p: torch.Tensor, order: int) -> torch.Tensor:
    """Torch positional encoding, (..., 2) -> (..., 4 * order)."""
    freqs = (2.0 ** torch.arange(order, dtype=p.dtype, device=p.device)) * math.pi
    ang = p[..., :, None] * freqs                       # (..., 2, L)
    feats = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., 2, L, 2)
    return feats.reshape(*p.shape[:-1], 4 * order)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def _trunk(in_dim):
    layers = []
    w = in_dim
    for _ in range(HIDDEN_LAYERS):
        layers += [nn.Linear(w, HIDDEN_WIDTH), nn.GELU()]
        w = HIDDEN_WIDTH
    return nn.Sequential(*layers)


class DepthField(nn.Module):
    """Scalar depth from encoded coordinates, initialized near the plane z0."""

    def __init__(self, z0: float, order: int = DEPTH_ENCODING_ORDER):
        super().__init__()
        self.order = order
        self.z_min = 0.1 * z0
        self.trunk = _trunk(4 * order)
        self.head = nn.Linear(HIDDEN_WIDTH, 1)
        # small head keeps the initial surface within a sliver of z0
        nn.init.normal_(self.head.weight, std=1e-3)
        nn.init.zeros_(self.head.bias)
        self.bias0 = math.log(math.expm1(z0 - self.z_min))

    def forward(self, p):
        raw = self.head(self.trunk(encode_coords(p, self.order))).squeeze(-1)
        return self.z_min + nn.functional.softplus(raw + self.bias0)


class MaterialField(nn.Module):
    """Albedo in [0,1]^3 plus nonnegative specular base weights."""

    def __init__(self, order: int = MATERIAL_ENCODING_ORDER,
                 n_bases: int = N_SPEC_BASES):
        super().__init__()
        self.order = order
        self.trunk = _trunk(4 * order)
        self.albedo_head = nn.Linear(HIDDEN_WIDTH, 3)
        self.spec_head = nn.Linear(HIDDEN_WIDTH, n_bases)
        nn.init.normal_(self.albedo_head.weight, std=1e-2)
        nn.init.zeros_(self.albedo_head.bias)
        nn.init.normal_(self.spec_head.weight, std=1e-2)
        nn.init.constant_(self.spec_head.bias, -3.0)

    def forward(self, p):
        h = self.trunk(encode_coords(p, self.order))
        albedo = torch.sigmoid(self.albedo_head(h))
        weights = nn.functional.softplus(self.spec_head(h))
        return albedo, weights


class SceneModel(nn.Module):
    """All trainable state: fields, light lobes, rotation angles, roughness.

    theta_1 is pinned at zero (the absolute rotation phase is unobservable);
    lobe directions are stored unnormalized and normalized on use; lobe
    sharpness is frozen unless ``lambda_trainable``.
    """

    def __init__(self, camera: Camera, n_images: int, light: EnvLight,
                 thetas=None, z0: float = None, dtype=torch.float32, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.camera = camera
        self.seed = seed
        if z0 is None:
            z0 = 2.0 * camera.focal / camera.sx
        self.z0 = float(z0)
        self.depth_field = DepthField(self.z0)
        self.material_field = MaterialField()
        if thetas is None:
            thetas = init_rotation_angles(n_images)
        thetas = np.asarray(thetas, dtype=np.float64)
        self.register_buffer("theta_init", torch.from_numpy(thetas.copy()))
        self.theta_free = nn.Parameter(torch.zeros(n_images - 1, dtype=torch.float64))
        self.xi_raw = nn.Parameter(torch.from_numpy(light.xi.copy()))
        self.mu_raw = nn.Parameter(torch.from_numpy(light.mu.copy()))
        self.lambda_trainable = light.lambda_trainable
        if light.lambda_trainable:
            self.lam = nn.Parameter(torch.from_numpy(light.lam.copy()))
        else:
            self.register_buffer("lam", torch.from_numpy(light.lam.copy()))
        self.roughness = nn.Parameter(torch.from_numpy(default_roughness().copy()))
        self.to(dtype)
        self.dtype_ = dtype

    @property
    def n_images(self):
        return len(self.theta_init)

    def thetas(self) -> torch.Tensor:
        return torch.cat([self.theta_init[:1].to(self.theta_free.dtype),
                          self.theta_init[1:].to(self.theta_free.dtype) + self.theta_free])

    def lobe_dirs(self) -> torch.Tensor:
        return self.xi_raw / self.xi_raw.norm(dim=1, keepdim=True)

    def lobe_amplitudes(self) -> torch.Tensor:
        return self.mu_raw.abs()

    def light_radiance(self, dirs: torch.Tensor) -> torch.Tensor:
        """L(dirs) for (..., 3) unit direction tensors."""
        cosang = dirs @ self.lobe_dirs().T
        g = torch.exp(self.lam.to(dirs.dtype) * (cosang - 1.0))
        return g @ self.lobe_amplitudes()

    def snapshot_light(self) -> EnvLight:
        with torch.no_grad():
            return EnvLight(self.lobe_dirs().double().numpy(),
                            self.lam.detach().double().numpy().copy(),
                            self.lobe_amplitudes().double().numpy(),
                            self.lambda_trainable)

    def snapshot_thetas(self) -> np.ndarray:
        with torch.no_grad():
            return self.thetas().double().numpy().copy()

    def parameter_manifest(self):
        return [(name, tuple(p.shape)) for name, p in self.named_parameters()]

    def flat_parameters(self) -> np.ndarray:
        with torch.no_grad():
            return np.concatenate([p.detach().double().numpy().ravel()
                                   for _, p in self.named_parameters()])

    def load_flat_parameters(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        with torch.no_grad():
            off = 0
            for _, p in self.named_parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(flat[off:off + n].reshape(p.shape)).to(p.dtype))
                off += n
        if off != len(flat):
            raise ValueError("parameter vector length mismatch")


# ---------------------------------------------------------------------------
# differentiation contract
# ---------------------------------------------------------------------------

@dataclass
class GradientTape:
    """Scalar objective plus its gradient in canonical parameter order."""

    value: float
    grad: np.ndarray
    manifest: list


def gradients(loss: torch.Tensor, model: SceneModel) -> GradientTape:
    """Exact reverse-mode gradient of ``loss`` for every trainable parameter."""
    if not torch.isfinite(loss):
        raise RuntimeError("objective is not finite")
    names = [n for n, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = []
    for name, p, g in zip(names, params, grads):
        if g is None:
            g = torch.zeros_like(p)
        if not torch.all(torch.isfinite(g)):
            raise RuntimeError(f"non-finite gradient in parameter '{name}'")
        flat.append(g.detach().double().numpy().ravel())
    return GradientTape(float(loss.detach()), np.concatenate(flat),
                        model.parameter_manifest())


# ---------------------------------------------------------------------------
# perspective geometry and normal fitting
# ---------------------------------------------------------------------------

def depth_to_point(px, depth, camera: Camera) -> np.ndarray:
    """Camera-frame 3D point of a pixel at the given positive depth."""
    if np.any(np.asarray(depth) <= 0):
        raise ValueError("depth must be positive")
    x, y = pixel_to_norm_coords(px, camera)
    return point_from_norm(x, y, depth, camera)


def point_from_norm(x, y, z, camera: Camera) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.stack(np.broadcast_arrays(
        np.asarray(x) * z * camera.sx / camera.focal,
        np.asarray(y) * z * camera.sy / camera.focal,
        z), axis=-1)


def fit_normal(p_query, neighbors, return_weights: bool = False):
    """Unit normal from a query point and its 4 cyclic neighbors (camera frame).

    Neighbor order is (+x, +y, -x, -y); each facet normal is the normalized
    cross product (p^{k+1} - p) x (p^k - p), blended with weights inversely
    proportional to |z^k + z^{k+1} - 2 z| (equal weights on a perfect plane).
    The result is expressed in the scene frame (+z toward the camera).
    """
    pq = torch.from_numpy(np.asarray(p_query, dtype=np.float64)).reshape(1, 3)
    nb = torch.from_numpy(np.asarray(neighbors, dtype=np.float64)).reshape(4, 1, 3)
    n, gam = fit_normals_torch(pq, nb, return_weights=True)
    n = n[0].numpy()
    if return_weights:
        return n, gam[0].numpy()
    return n


def fit_normals_torch(p_query: torch.Tensor, p_nb: torch.Tensor,
                      return_weights: bool = False):
    """Batched normal fitting: (P, 3) query points, (4, P, 3) neighbors."""
    z = p_query[:, 2]
    acc = 0.0
    wsum = 0.0
    weights = []
    for k in range(4):
        e1 = p_nb[(k + 1) % 4] - p_query
        e2 = p_nb[k] - p_query
        c = torch.cross(e1, e2, dim=-1)
        c = c / c.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        d = p_nb[k][:, 2] + p_nb[(k + 1) % 4][:, 2] - 2.0 * z
        w = 1.0 / (d.abs() + GAMMA_EPS)
        weights.append(w)
        acc = acc + w.unsqueeze(-1) * c
        wsum = wsum + w
    n = acc / acc.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    # orient toward the camera, then flip into the scene frame (z > 0)
    sigma = torch.where(n[:, 2] > 0, -1.0, 1.0).to(n.dtype)
    n = n * sigma.unsqueeze(-1)
    n = torch.stack([n[:, 0], n[:, 1], -n[:, 2]], dim=-1)
    if return_weights:
        gam = torch.stack(weights, dim=-1) / wsum.unsqueeze(-1)
        return n, gam
    return n


NEIGHBOR_OFFSETS = ((1, 0), (0, 1), (-1, 0), (0, -1))  # cyclic +x, +y, -x, -y


def src_neighbor_depths(depth_fn, px, k: int, camera: Camera) -> np.ndarray:
    """Depths at the four 1-pixel neighbors via shrinking-range computing.

    ``depth_fn(x, y)`` evaluates the depth field at normalized coordinates.
    For k = 1 the field is evaluated at the neighbors directly (exact); for
    k in {2, 3} the 1-pixel depth is interpolated between the query and the
    k-pixel sample: z_blue = z_query + (z_far - z_query) / k.
    """
    if k not in (1, 2, 3):
        raise ValueError("stride k must be 1, 2, or 3")
    ix, iy = int(px[0]), int(px[1])
    if not (k <= ix < camera.width - k and k <= iy < camera.height - k):
        raise ValueError("query pixel too close to the image edge for this stride")
    x, y = pixel_to_norm_coords((ix, iy), camera)
    dx, dy = 2.0 / camera.width, 2.0 / camera.height
    out = np.empty(4)
    if k == 1:
        for i, (ox, oy) in enumerate(NEIGHBOR_OFFSETS):
            out[i] = depth_fn(x + ox * dx, y + oy * dy)
        return out
    zq = float(depth_fn(x, y))
    for i, (ox, oy) in enumerate(NEIGHBOR_OFFSETS):
        zfar = float(depth_fn(x + k * ox * dx, y + k * oy * dy))
        out[i] = zq + (zfar - zq) / k
    return out


def field_forward(model: SceneModel, p) -> tuple:
    """(depth, albedo, spec_weights) of the fields at normalized coords p."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    t = torch.from_numpy(np.atleast_2d(p)).to(model.dtype_)
    with torch.no_grad():
        z = model.depth_field(t).double().numpy()
        albedo, weights = model.material_field(t)
    albedo = albedo.double().numpy()
    weights = weights.double().numpy()
    if single:
        return float(z[0]), albedo[0], weights[0]
    return z, albedo, weights


def field_normals(model: SceneModel, x: torch.Tensor, y: torch.Tensor, k: int):
    """Normals and depths of the depth field at full-resolution pixels.

    x, y are normalized coordinates of the query pixels (torch tensors).
    Evaluates the query and its four stride-k samples in one batch, applies
    the shrinking-range interpolation, lifts to camera coordinates, and fits
    the normals.  Returns (normals (P, 3) scene frame, depth (P,)).
    """
    cam = model.camera
    dx, dy = 2.0 / cam.width, 2.0 / cam.height
    offs = [(k * ox * dx, k * oy * dy) for ox, oy in NEIGHBOR_OFFSETS]
    xs = [x] + [x + ox for ox, _ in offs]
    ys = [y] + [y + oy for _, oy in offs]
    pts = torch.stack([torch.cat(xs), torch.cat(ys)], dim=-1)
    z_all = model.depth_field(pts)
    p = len(x)
    zq = z_all[:p]
    zfar = z_all[p:].reshape(4, p)
    if k == 1:
        zb = zfar
    else:
        zb = zq.unsqueeze(0) + (zfar - zq.unsqueeze(0)) / k
    fx, fy = cam.sx / cam.focal, cam.sy / cam.focal
    pq = torch.stack([x * zq * fx, y * zq * fy, zq], dim=-1)
    nbx = torch.stack([x + ox * dx for ox, _ in NEIGHBOR_OFFSETS]).reshape(4, p)
    nby = torch.stack([y + oy * dy for _, oy in NEIGHBOR_OFFSETS]).reshape(4, p)
    pnb = torch.stack([nbx * zb * fx, nby * zb * fy, zb], dim=-1)
    normals = fit_normals_torch(pq, pnb)
    return normals, zq
