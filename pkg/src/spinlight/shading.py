"""Forward shading: diffuse + SG-specular BRDF under the SG light.

The pixel color is the hemisphere integral

    m = s * integral L(R(theta) w) (rho_s + rho_d) max(w.n, 0) dw

discretized with fixed Fibonacci directions (equal weights summing to 4 pi).
An independent stratified cosine-weighted Monte-Carlo estimator of the same
integral serves as the verification oracle; the two must agree to a couple
of percent, which pins down quadrature resolution and BRDF sharpness.

All vectors here live in the scene frame (+z toward the camera).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envlight import EnvLight, fibonacci_lobes, rotation_matrix_y, _eval_env_raw
from .imagery import ImageStack

N_SPEC_BASES = 12
DEFAULT_QUAD_DIRS = 256
FRESNEL_F0 = 0.04
SHADOW_TAU = 0.2


def default_roughness(n_bases: int = N_SPEC_BASES) -> np.ndarray:
    """Roughness grid (0.1 + 0.9 (n - 1)) / (N_S - 1) over the bases."""
    n = np.arange(1, n_bases + 1, dtype=np.float64)
    return (0.1 + 0.9 * (n - 1.0)) / (n_bases - 1.0)


def sharpness_from_roughness(rough):
    """SG-NDF sharpness; the +0.1 floor keeps every lobe resolvable by the
    quadrature (and by 1e5 cosine-weighted MC samples).  Works elementwise
    on numpy arrays and torch tensors alike."""
    return 2.0 / (rough + 0.1)


@dataclass
class MaterialSample:
    """Isotropic material: albedo + weighted SG specular bases."""

    albedo: np.ndarray                                  # (3,) in [0, 1]
    spec_weights: np.ndarray = None                     # (N_S,) >= 0
    roughness: np.ndarray = None                        # (N_S,) in (0, 1]

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")
        if self.spec_weights is None:
            self.spec_weights = np.zeros(N_SPEC_BASES)
        self.spec_weights = np.asarray(self.spec_weights, dtype=np.float64).reshape(-1)
        if np.any(self.spec_weights < 0):
            raise ValueError("specular weights must be nonnegative")
        if self.roughness is None:
            self.roughness = default_roughness(len(self.spec_weights))
        self.roughness = np.asarray(self.roughness, dtype=np.float64).reshape(-1)
        if len(self.roughness) != len(self.spec_weights):
            raise ValueError("one roughness per specular base required")
        if np.any(self.roughness <= 0) or np.any(self.roughness > 1):
            raise ValueError("roughness must lie in (0, 1]")


@dataclass
class Quadrature:
    """Fixed spherical quadrature: directions and weights summing to 4 pi."""

    dirs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.dirs = np.asarray(self.dirs, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.dirs) != len(self.weights):
            raise ValueError("directions and weights must align")
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")


def build_quadrature(n_dirs: int = DEFAULT_QUAD_DIRS) -> Quadrature:
    return Quadrature(fibonacci_lobes(n_dirs), np.full(n_dirs, 4.0 * math.pi / n_dirs))


def diffuse_brdf(albedo) -> np.ndarray:
    """Energy-normalized Lambertian reflectance, albedo / pi."""
    return np.asarray(albedo, dtype=np.float64) / math.pi


def specular_brdf(v, w, n, mat: MaterialSample):
    """Specular reflectance for view v, light w, normal n (all unit).

    SG normal-distribution lobe about the half-vector, Schlick Fresnel
    (F0 = 0.04), Smith shadowing; reciprocal in v and w by construction.
    ``w`` may be a single direction or a (K, 3) batch; returns scalar or (K,).
    """
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    single = w.ndim == 1
    w2 = np.atleast_2d(w)
    out = _specular_batch(v[None, :], w2[None, :, :], n[None, :],
                          mat.spec_weights[None, :], mat.roughness)[0]
    return float(out[0]) if single else out


def _specular_batch(v, w, n, cweights, rough):
    """(P,3) views, (P,K,3) light dirs, (P,3) normals, (P,NS) weights -> (P,K)."""
    h = v[:, None, :] + w
    hn = np.linalg.norm(h, axis=-1, keepdims=True)
    good = hn[..., 0] > 1e-8
    h = np.where(hn > 1e-12, h / np.maximum(hn, 1e-12), 0.0)
    hdn = np.einsum("pka,pa->pk", h, n)
    hdv = np.einsum("pka,pa->pk", h, v)
    kappa = sharpness_from_roughness(rough)
    d_lobe = np.exp(kappa[None, None, :] * (hdn[..., None] - 1.0))
    fres = FRESNEL_F0 + (1.0 - FRESNEL_F0) * (1.0 - np.clip(hdv, 0.0, 1.0)) ** 5
    kg = rough / 2.0
    ndv = np.clip(np.einsum("pa,pa->p", n, v), 1e-6, None)
    ndw = np.clip(np.einsum("pka,pa->pk", w, n), 1e-6, None)
    g1 = lambda x, k: x / (x * (1.0 - k) + k)
    smith = g1(ndv[:, None, None], kg[None, None, :]) * g1(ndw[..., None], kg[None, None, :])
    rs = np.einsum("pn,pkn->pk", cweights, d_lobe * smith) * fres
    return np.where(good, rs, 0.0)


def render_pixel(light: EnvLight, theta: float, mat: MaterialSample, n, v,
                 s: float = 1.0, quad: Quadrature = None) -> np.ndarray:
    """Quadrature estimate of the pixel color under the rotated light."""
    quad = quad or build_quadrature()
    n = np.asarray(n, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = render_pixels(light, theta, n[None, :], v[None, :],
                        mat.albedo[None, :], mat.spec_weights[None, :],
                        mat.roughness, np.array([s]), quad)
    return out[0]


def render_pixels(light: EnvLight, theta: float, normals, views, albedo,
                  spec_weights, roughness, s, quad: Quadrature) -> np.ndarray:
    """Batched quadrature render: (P, ...) pixel arrays -> (P, 3) colors."""
    normals = np.asarray(normals, dtype=np.float64)
    views = np.asarray(views, dtype=np.float64)
    albedo = np.asarray(albedo, dtype=np.float64)
    spec_weights = np.asarray(spec_weights, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    rot = rotation_matrix_y(theta)
    wrot = quad.dirs @ rot.T
    radiance = _eval_env_raw(light.xi, light.lam, light.mu, wrot)      # (K, 3)
    cos = np.clip(normals @ quad.dirs.T, 0.0, None)                    # (P, K)
    rs = _specular_batch(views, np.broadcast_to(quad.dirs, (len(normals),) + quad.dirs.shape),
                         normals, spec_weights, roughness)             # (P, K)
    wk = quad.weights[None, :] * cos
    spec = (wk * rs) @ radiance                                        # (P, 3)
    diff = (wk @ radiance) * diffuse_brdf(albedo)                      # (P, 3)
    return s[:, None] * (spec + diff)


def _cosine_dirs(n, u1, u2):
    """Cosine-weighted directions about unit normal n from uniform (u1, u2)."""
    st = np.sqrt(u1)
    ph = 2.0 * math.pi * u2
    local = np.stack([st * np.cos(ph), st * np.sin(ph), np.sqrt(1.0 - u1)], axis=-1)
    a = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t = np.cross(a, n)
    t /= np.linalg.norm(t)
    b = np.cross(n, t)
    return local[:, 0:1] * t + local[:, 1:2] * b + local[:, 2:3] * n


def _stratified_uniforms(rng, count):
    g = int(math.floor(math.sqrt(count)))
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    u1 = (ii.ravel() + rng.random(g * g)) / g
    u2 = (jj.ravel() + rng.random(g * g)) / g
    rest = count - g * g
    if rest > 0:
        u1 = np.concatenate([u1, rng.random(rest)])
        u2 = np.concatenate([u2, rng.random(rest)])
    return u1, u2


def mc_render_oracle(light: EnvLight, theta: float, mat: MaterialSample, n, v,
                     s: float = 1.0, sample_count: int = 100_000,
                     seed: int = 0) -> np.ndarray:
    """Stratified cosine-weighted Monte-Carlo estimate of the same integral.

    Unbiased and seeded; independent of the quadrature path.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    n = np.asarray(n, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    rng = np.random.default_rng(seed)
    u1, u2 = _stratified_uniforms(rng, sample_count)
    w = _cosine_dirs(n, u1, u2)
    rot = rotation_matrix_y(theta)
    radiance = _eval_env_raw(light.xi, light.lam, light.mu, w @ rot.T)
    rs = _specular_batch(v[None, :], w[None, :, :], n[None, :],
                         mat.spec_weights[None, :], mat.roughness)[0]
    rho = rs[:, None] + diffuse_brdf(mat.albedo)[None, :]
    # pdf = cos/pi, integrand = L rho cos  =>  estimate = pi * mean(L rho)
    return s * math.pi * (radiance * rho).mean(axis=0)


def shadow_mask(stack: ImageStack, tau: float = SHADOW_TAU) -> np.ndarray:
    """Binary per-image shadow weights from the intensity profile.

    s_ij = 0 where the gray value drops below tau times the per-pixel median
    over the image sequence; fixed thereafter (never optimized).
    """
    grays = np.stack([im.data.astype(np.float64).mean(axis=2) for im in stack.images])
    med = np.median(grays, axis=0)
    s = (grays >= tau * med[None, :, :]).astype(np.float64)
    s[:, ~stack.mask] = 0.0
    return s
