"""Occluding-boundary extraction and the rotating light probe.

A silhouette pixel's surface normal is perpendicular both to its view ray
and to the image-space contour tangent.  Sweeping those normals through the
per-image platform rotations turns the boundary pixels into a sparse light
probe: sample direction R(theta_j) . n_b, sample value = that pixel's color
in image j.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .envlight import rotation_matrix_y
from .imagery import Camera, ImageStack, pixel_to_norm_coords, _view_dir_from_norm

DEFAULT_BETA = 0.1
MIN_MASK_AREA = 100


@dataclass
class LightProbe:
    """Direction/value samples on the unit sphere."""

    dirs: np.ndarray       # (M, 3) unit vectors
    values: np.ndarray     # (M, C) with C in {1, 3}, nonnegative

    def __post_init__(self):
        self.dirs = np.asarray(self.dirs, dtype=np.float64).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.dirs) != len(self.values):
            raise ValueError("probe dirs and values must align")

    def __len__(self):
        return len(self.dirs)

    def gray(self) -> np.ndarray:
        if self.values.shape[1] == 1:
            return self.values[:, 0]
        w = np.array([0.299, 0.587, 0.114])
        return self.values @ w


def extract_boundary(mask):
    """Ordered 8-connected outer contour of the object mask.

    Returns (pixels (M, 2) int [ix, iy], tangents (M, 2) float, valid (M,) bool)
    where tangents come from central differences along the closed contour in
    normalized-coordinate units and ``valid`` flags non-degenerate tangents.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError("mask must be 2D")
    area = int(m.sum())
    if area == 0:
        raise ValueError("empty object mask")
    if area < MIN_MASK_AREA:
        raise ValueError(f"object mask too small ({area} px < {MIN_MASK_AREA})")
    u8 = m.astype(np.uint8)
    n_comp, _ = cv2.connectedComponents(u8, connectivity=8)
    if n_comp != 2:  # background + object
        raise ValueError(f"object mask must be a single connected component, found {n_comp - 1}")
    contours, _ = cv2.findContours(u8, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    pts = contours[0][:, 0, :].astype(np.int64)  # (M, 2) as (ix, iy)
    if len(pts) < 4:
        raise ValueError("degenerate contour")
    h, w = m.shape
    nxt = np.roll(pts, -1, axis=0).astype(np.float64)
    prv = np.roll(pts, 1, axis=0).astype(np.float64)
    diff = nxt - prv
    # central differences in normalized units (2/W per pixel step)
    diff[:, 0] *= 2.0 / w
    diff[:, 1] *= 2.0 / h
    norms = np.linalg.norm(diff, axis=1)
    valid = norms > 1e-12
    tangents = np.zeros_like(diff)
    tangents[valid] = diff[valid] / norms[valid, None]
    return pts, tangents, valid


def boundary_normals(pixels, tangents, camera: Camera, beta: float = DEFAULT_BETA,
                     valid=None):
    """Scene-frame unit normals of the occluding-boundary pixels.

    The pre-offset normal is perpendicular to the view ray and to the lifted
    contour tangent, oriented away from the mask interior; the z component
    then receives the small +beta offset (detected contours sit slightly
    inside the true silhouette) and the vector is renormalized.

    Returns (normals (M, 3), valid (M,) bool).
    """
    pixels = np.asarray(pixels)
    tangents = np.asarray(tangents, dtype=np.float64)
    if valid is None:
        valid = np.ones(len(pixels), dtype=bool)
    valid = np.asarray(valid, dtype=bool).copy()
    x, y = pixel_to_norm_coords((pixels[:, 0], pixels[:, 1]), camera)
    v = _view_dir_from_norm(x, y, camera, scene_frame=True)        # (M, 3)
    t3 = np.concatenate([tangents, np.zeros((len(tangents), 1))], axis=1)
    n = np.cross(v, t3)
    norms = np.linalg.norm(n, axis=1)
    valid &= norms > 1e-12
    n[valid] /= norms[valid, None]
    # orient outward: away from the contour centroid in the image plane
    cx, cy = x[valid].mean(), y[valid].mean()
    outward = (n[:, 0] * (x - cx) + n[:, 1] * (y - cy)) < 0
    n[outward] = -n[outward]
    n[:, 2] += beta
    norms = np.linalg.norm(n, axis=1)
    n[valid] /= norms[valid, None]
    n[~valid] = 0.0
    return n, valid


def assemble_probe(stack: ImageStack, normals, pixels, valid=None,
                   saturation: float = 0.99) -> LightProbe:
    """Sweep boundary normals through the per-image rotations.

    One sample per (boundary pixel, image): direction R(theta_j) . n_b, value
    that pixel's RGB in image j.  Masked-out pixels and saturated pixels (any
    channel >= ``saturation``; pass None to disable) are dropped.  Samples are
    ordered by image index, then contour index.
    """
    pixels = np.asarray(pixels)
    normals = np.asarray(normals, dtype=np.float64)
    if valid is None:
        valid = np.ones(len(pixels), dtype=bool)
    ix, iy = pixels[:, 0], pixels[:, 1]
    dirs, vals = [], []
    for j in range(stack.n_images):
        img = stack.images[j]
        data = img.data
        vj = np.asarray(img.mask[iy, ix], dtype=bool) & valid
        pix = data[iy, ix].astype(np.float64)
        if pix.shape[1] == 1:
            pix = np.repeat(pix, 3, axis=1)
        if saturation is not None:
            vj &= ~(pix >= saturation).any(axis=1)
        rot = rotation_matrix_y(stack.thetas[j])
        dirs.append(normals[vj] @ rot.T)
        vals.append(pix[vj])
    dirs = np.concatenate(dirs, axis=0)
    vals = np.concatenate(vals, axis=0)
    if len(dirs) == 0:
        raise ValueError("no usable probe samples (all masked or saturated)")
    return LightProbe(dirs, vals)


def save_probe(probe: LightProbe, path):
    """Plain-text dump: 'wx wy wz r g b' per sample."""
    vals = probe.values
    if vals.shape[1] == 1:
        vals = np.repeat(vals, 3, axis=1)
    with open(path, "w") as f:
        for d, val in zip(probe.dirs, vals):
            f.write(" ".join(f"{x:.17g}" for x in (*d, *val)) + "\n")


def load_probe(path) -> LightProbe:
    table = np.loadtxt(path, dtype=np.float64).reshape(-1, 6)
    return LightProbe(table[:, :3], table[:, 3:])
