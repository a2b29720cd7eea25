"""Rasters, camera geometry, and image file IO.

Conventions used across the package:

* ``FloatImage.data`` is stored with row 0 at the BOTTOM of the picture.
  This matches the PFM scanline order, so HDR files round-trip without
  reshuffling, and it makes the camera's y axis increase with the row
  index.
* The camera sits at the origin of its own frame and looks down +z with
  x pointing right and y up; depth values are positive.  Surface normals
  and light directions elsewhere in the package are expressed in the
  "scene frame" obtained by flipping z (so +z points from the object back
  toward the camera and visible surfaces have a positive z component).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as _PILImage


@dataclass
class FloatImage:
    """H x W x C linear-radiance raster with a per-pixel validity mask."""

    data: np.ndarray           # (H, W, C) float32, C in {1, 3}
    mask: np.ndarray = None    # (H, W) bool

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"image data must be (H, W, 1|3), got {self.data.shape}")
        if self.mask is None:
            self.mask = np.ones(self.data.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.data.shape[:2]:
            raise ValueError("mask shape does not match image")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def validate(self):
        vals = self.data[self.mask]
        if not np.all(np.isfinite(vals)):
            raise ValueError("masked-in pixels contain non-finite values")
        if np.any(vals < 0):
            raise ValueError("masked-in pixels contain negative radiance")
        return self


@dataclass
class Camera:
    """Perspective camera: focal length and half frame sizes in mm."""

    focal: float = 50.0
    sx: float = 18.0           # half frame width
    sy: float = 18.0           # half frame height
    width: int = 512
    height: int = 512

    def __post_init__(self):
        if self.focal <= 0 or self.sx <= 0 or self.sy <= 0:
            raise ValueError("focal and frame half-sizes must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be positive")


@dataclass
class ImageStack:
    """The observed sequence: images, per-image rotation angles, geometry."""

    images: list                      # N_I FloatImages, shared resolution
    thetas: np.ndarray                # (N_I,) radians
    camera: Camera
    mask: np.ndarray                  # (H, W) bool object mask
    shadow: np.ndarray = None         # (N_I, H, W) float in [0,1], or None

    def __post_init__(self):
        if len(self.images) < 2:
            raise ValueError("an image stack needs at least 2 images")
        h, w = self.images[0].data.shape[:2]
        for im in self.images:
            if im.data.shape[:2] != (h, w):
                raise ValueError("all images in a stack must share resolution")
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        if len(self.thetas) != len(self.images):
            raise ValueError("one rotation angle per image required")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (h, w):
            raise ValueError("object mask must match image resolution")

    @property
    def n_images(self):
        return len(self.images)


# ---------------------------------------------------------------------------
# pixel <-> normalized coordinates, view directions
# ---------------------------------------------------------------------------

def pixel_to_norm_coords(px, camera: Camera):
    """Map integer pixel indices (ix, iy) to normalized coords in [-1, 1]^2.

    Pixel centers are sampled: corner pixels land on +-(1 - 1/W, 1 - 1/H).
    Accepts scalars or arrays.
    """
    ix = np.asarray(px[0])
    iy = np.asarray(px[1])
    if np.any(ix < 0) or np.any(ix >= camera.width) or np.any(iy < 0) or np.any(iy >= camera.height):
        raise ValueError("pixel index outside the camera resolution")
    x = (2.0 * ix + 1.0) / camera.width - 1.0
    y = (2.0 * iy + 1.0) / camera.height - 1.0
    return x, y


def norm_to_pixel_coords(xy, camera: Camera):
    """Inverse of :func:`pixel_to_norm_coords` (continuous pixel coords)."""
    x = np.asarray(xy[0])
    y = np.asarray(xy[1])
    ix = ((x + 1.0) * camera.width - 1.0) / 2.0
    iy = ((y + 1.0) * camera.height - 1.0) / 2.0
    return ix, iy


def norm_coord_grid(camera: Camera):
    """(H, W, 2) array of normalized pixel-center coordinates."""
    iy, ix = np.mgrid[0:camera.height, 0:camera.width]
    x, y = pixel_to_norm_coords((ix, iy), camera)
    return np.stack([x, y], axis=-1)


def view_direction(px, camera: Camera):
    """Unit vector from the 3D point toward the camera center (camera frame).

    The principal pixel maps to (0, 0, -1); the camera looks down +z.
    """
    x, y = pixel_to_norm_coords(px, camera)
    return _view_dir_from_norm(x, y, camera, scene_frame=False)


def scene_view_direction(px, camera: Camera):
    """View direction in the scene frame (+z toward the camera)."""
    x, y = pixel_to_norm_coords(px, camera)
    return _view_dir_from_norm(x, y, camera, scene_frame=True)


def _view_dir_from_norm(x, y, camera: Camera, scene_frame: bool):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    zsign = 1.0 if scene_frame else -1.0
    v = np.stack(np.broadcast_arrays(
        -x * camera.sx / camera.focal,
        -y * camera.sy / camera.focal,
        zsign * np.ones_like(x)), axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# sRGB transfer function
# ---------------------------------------------------------------------------

def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


# ---------------------------------------------------------------------------
# file IO: PFM (bit-exact HDR) and PNG (sRGB LDR)
# ---------------------------------------------------------------------------

def read_image(path) -> FloatImage:
    path = str(path)
    if path.lower().endswith(".pfm"):
        return _read_pfm(path)
    if path.lower().endswith(".png"):
        return _read_png(path)
    raise ValueError(f"unsupported image format: {path}")


def write_image(image: FloatImage, path):
    path = str(path)
    if not np.all(np.isfinite(image.data)):
        raise ValueError("refusing to write non-finite pixel values")
    if path.lower().endswith(".pfm"):
        _write_pfm(image, path)
    elif path.lower().endswith(".png"):
        _write_png(image, path)
    else:
        raise ValueError(f"unsupported image format: {path}")


def _read_pfm(path) -> FloatImage:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file (bad magic {magic!r}): {path}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError(f"malformed PFM dimensions line in {path}")
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        if scale >= 0:
            raise ValueError("big-endian PFM not supported")
        raw = f.read(width * height * channels * 4)
        if len(raw) != width * height * channels * 4:
            raise ValueError(f"truncated PFM payload in {path}")
    data = np.frombuffer(raw, dtype="<f4").reshape(height, width, channels)
    # PFM stores the bottom row first, which is this package's native order.
    return FloatImage(data.copy())


def _write_pfm(image: FloatImage, path):
    data = np.ascontiguousarray(image.data, dtype="<f4")
    magic = b"PF" if image.channels == 3 else b"Pf"
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{image.width} {image.height}\n".encode())
        f.write(b"-1.0\n")
        f.write(data.tobytes())


def _read_png(path) -> FloatImage:
    img = _PILImage.open(path)
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    arr = arr[::-1]  # PNG rows are top-first; flip to bottom-first storage
    if arr.shape[2] == 4:
        mask = arr[:, :, 3] > 0
        rgb = arr[:, :, :3]
    elif arr.shape[2] in (1, 3):
        mask = None
        rgb = arr
    else:
        raise ValueError(f"unsupported PNG channel count {arr.shape[2]} in {path}")
    if rgb.dtype != np.uint8:
        raise ValueError("only 8-bit PNG is supported")
    linear = srgb_to_linear(rgb.astype(np.float64) / 255.0)
    return FloatImage(linear.astype(np.float32), mask)


def _write_png(image: FloatImage, path):
    srgb = linear_to_srgb(image.data.astype(np.float64))
    u8 = np.round(srgb * 255.0).astype(np.uint8)
    if image.channels == 1:
        u8 = np.repeat(u8, 3, axis=2)
    if np.all(image.mask):
        arr = u8
    else:
        alpha = (image.mask.astype(np.uint8) * 255)[:, :, None]
        arr = np.concatenate([u8, alpha], axis=2)
    _PILImage.fromarray(arr[::-1]).save(path)


def write_mask_png(mask: np.ndarray, path):
    """Binary object mask as an 8-bit grayscale PNG (255 inside)."""
    u8 = (np.asarray(mask, dtype=bool).astype(np.uint8) * 255)
    _PILImage.fromarray(u8[::-1], mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    img = _PILImage.open(path).convert("L")
    arr = np.asarray(img)[::-1]
    return arr > 127
