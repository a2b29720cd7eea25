"""Spherical-Gaussian environment light: evaluation, rotation, export.

The light is a sum of N_L lobes, L(w) = sum_t mu_t * exp(lambda_t * (w.xi_t - 1)),
so each lobe peaks at its own amplitude mu_t in direction xi_t.  The platform
rotation is a 1-DoF rotation about the vertical (y) axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imagery import FloatImage

DEFAULT_N_LOBES = 64
UNIT_TOL = 1e-6


def default_sharpness(n_lobes: int) -> float:
    # lobe half-width roughly matching the lattice spacing; frozen in training
    return n_lobes / 4.0


@dataclass
class EnvLight:
    """Set of spherical-Gaussian lobes (direction, sharpness, RGB amplitude)."""

    xi: np.ndarray                    # (N, 3) unit directions
    lam: np.ndarray                   # (N,) sharpness >= 0
    mu: np.ndarray                    # (N, 3) amplitude >= 0
    lambda_trainable: bool = False

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.float64).reshape(-1, 3)
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        if not (len(self.xi) == len(self.lam) == len(self.mu)):
            raise ValueError("xi, lam, mu must have matching lobe counts")
        norms = np.linalg.norm(self.xi, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("lobe directions must be unit vectors")
        if np.any(self.lam < 0):
            raise ValueError("lobe sharpness must be nonnegative")
        if np.any(self.mu < 0):
            raise ValueError("lobe amplitudes must be nonnegative")

    @property
    def n_lobes(self):
        return len(self.xi)

    def dominant_lobe(self) -> np.ndarray:
        """Direction of the lobe with the largest gray amplitude."""
        gray = self.mu.mean(axis=1)
        return self.xi[int(np.argmax(gray))].copy()


def eval_env(light: EnvLight, dirs):
    """RGB radiance of the light in the given unit direction(s).

    ``dirs`` may be a single 3-vector or an (..., 3) array.
    """
    d = np.asarray(dirs, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-5):
        raise ValueError("directions must be unit vectors")
    out = _eval_env_raw(light.xi, light.lam, light.mu, d)
    return out[0] if single else out


def _eval_env_raw(xi, lam, mu, dirs):
    # dirs (..., 3) -> (..., 3); no validation, used by hot paths
    cosang = dirs @ xi.T                          # (..., N)
    g = np.exp(lam * (cosang - 1.0))              # (..., N)
    return g @ mu                                 # (..., 3)


def rotation_matrix_y(theta: float) -> np.ndarray:
    """Right-handed rotation about the +y (vertical) axis."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s],
                     [0.0, 1.0, 0.0],
                     [-s, 0.0, c]])


def rotate_direction(theta: float, direction):
    """Apply R(theta) about the vertical axis to a unit direction."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-5:
        raise ValueError("direction must be a unit vector")
    return rotation_matrix_y(theta) @ d


def rotate_lobes(light: EnvLight, theta: float) -> EnvLight:
    """Rotate every lobe direction by R(theta).

    The resulting light satisfies L'(w) = L(R(-theta) w).
    """
    xi = light.xi @ rotation_matrix_y(theta).T
    xi = xi / np.linalg.norm(xi, axis=1, keepdims=True)
    return EnvLight(xi, light.lam.copy(), light.mu.copy(), light.lambda_trainable)


def wrap_angle(theta):
    """Wrap angle(s) into [0, 2*pi)."""
    return np.mod(theta, 2.0 * math.pi)


def init_rotation_angles(n_images: int) -> np.ndarray:
    """Constant-velocity angles theta_j = 2*pi*(j - 1)/N_I, starting at 0."""
    if n_images < 2:
        raise ValueError("need at least 2 images for a rotation sequence")
    return 2.0 * math.pi * np.arange(n_images, dtype=np.float64) / n_images


def fibonacci_lobes(n: int) -> np.ndarray:
    """Near-uniform unit directions from a Fibonacci lattice (pole on +y)."""
    if n < 1:
        raise ValueError("need at least one lattice point")
    i = np.arange(n, dtype=np.float64) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - y * y, 0.0, None))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    th = golden * np.arange(n, dtype=np.float64)
    d = np.stack([r * np.cos(th), y, r * np.sin(th)], axis=-1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_fibonacci_light(n_lobes: int = DEFAULT_N_LOBES, amplitude=0.5,
                         sharpness: float = None) -> EnvLight:
    """Fibonacci-lattice light with uniform sharpness and amplitude."""
    lam = default_sharpness(n_lobes) if sharpness is None else sharpness
    mu = np.broadcast_to(np.asarray(amplitude, dtype=np.float64), (n_lobes, 3)).copy()
    return EnvLight(fibonacci_lobes(n_lobes), np.full(n_lobes, lam), mu)


def make_random_light(n_lobes: int = DEFAULT_N_LOBES, amplitude=0.5,
                      sharpness: float = None, seed: int = 0) -> EnvLight:
    """Random-direction light with uniform sharpness and amplitude."""
    rng = np.random.default_rng(seed)
    xi = rng.normal(size=(n_lobes, 3))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    lam = default_sharpness(n_lobes) if sharpness is None else sharpness
    mu = np.broadcast_to(np.asarray(amplitude, dtype=np.float64), (n_lobes, 3)).copy()
    return EnvLight(xi, np.full(n_lobes, lam), mu)


# ---------------------------------------------------------------------------
# lat-long export
# ---------------------------------------------------------------------------

def latlong_directions(height: int) -> np.ndarray:
    """(H, 2H, 3) unit directions of the equirectangular parameterization.

    Rows are stored bottom-first (south pole -y at row 0, north pole +y at
    the top row); the central column looks down +z.
    """
    if height < 2:
        raise ValueError("lat-long height must be at least 2")
    width = 2 * height
    iy, ix = np.mgrid[0:height, 0:width]
    lat = math.pi * (iy + 0.5) / height - math.pi / 2.0
    azi = 2.0 * math.pi * (ix + 0.5) / width - math.pi
    cl = np.cos(lat)
    return np.stack([cl * np.sin(azi), np.sin(lat), cl * np.cos(azi)], axis=-1)


def env_to_latlong(light: EnvLight, height: int) -> FloatImage:
    """Equirectangular radiance map of the light, width = 2 * height."""
    dirs = latlong_directions(height)
    vals = _eval_env_raw(light.xi, light.lam, light.mu, dirs.reshape(-1, 3))
    return FloatImage(vals.reshape(height, 2 * height, 3).astype(np.float32))


def latlong_argmax_direction(img: FloatImage) -> np.ndarray:
    """Direction of the brightest pixel of a lat-long map (gray intensity)."""
    gray = img.data.mean(axis=2)
    iy, ix = np.unravel_index(int(np.argmax(gray)), gray.shape)
    return latlong_directions(img.height)[iy, ix].copy()


# ---------------------------------------------------------------------------
# plain-text lobe table
# ---------------------------------------------------------------------------

def save_light(light: EnvLight, path):
    """One lobe per line: 'xi_x xi_y xi_z lambda mu_r mu_g mu_b'."""
    with open(path, "w") as f:
        for t in range(light.n_lobes):
            row = [*light.xi[t], light.lam[t], *light.mu[t]]
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_light(path) -> EnvLight:
    table = np.loadtxt(path, dtype=np.float64).reshape(-1, 7)
    xi = table[:, 0:3]
    xi = xi / np.linalg.norm(xi, axis=1, keepdims=True)
    return EnvLight(xi, table[:, 3], table[:, 4:7])
