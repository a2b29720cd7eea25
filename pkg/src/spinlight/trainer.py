"""Three-stage optimization of the inverse-rendering objective.

Stage 1 trains with the rendering, boundary, and color losses plus all
smoothness terms; stage 2 drops the albedo smoothness and raises the normal
smoothness weight; stage 3 keeps only the data terms.  Each iteration draws
4 images and one interval-sampling sub-image; the shrinking-range stride
goes 3 -> 2 -> 1 across the schedule.  Everything trainable (both fields,
lobe directions and amplitudes, rotation angles, specular roughness) is
updated by Adam; a run is bit-reproducible given its seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from . import boundary as boundary_mod
from .envlight import EnvLight, env_to_latlong, wrap_angle
from .imagery import Camera, FloatImage, ImageStack
from .neuralfield import (NEIGHBOR_OFFSETS, SceneModel, field_normals,
                          fit_normals_torch)
from .shading import (FRESNEL_F0, build_quadrature, shadow_mask,
                      sharpness_from_roughness)

CHECKPOINT_MAGIC = b"SPNLCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    stage_epochs: tuple = (500, 1000, 500)
    lr: float = 0.001
    batch_images: int = 4
    lambda_color: float = 0.5
    lambda_albedo_tv: float = 0.01
    lambda_normal_tv: float = 0.02
    lambda_normal_tv_stage2: float = 0.05
    lambda_spec_tv: float = 0.01
    n_blocks: int = 4                 # interval-sampling block side N_B
    quad_dirs: int = 96               # training-time quadrature resolution
    boundary_batch: int = 128         # contour samples per iteration (0 = all)
    use_is: bool = True
    use_src: bool = True
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 100
    n_lobes: int = 64

    def __post_init__(self):
        self.stage_epochs = tuple(int(e) for e in self.stage_epochs)
        if any(e < 0 for e in self.stage_epochs):
            raise ValueError("stage epochs must be nonnegative")
        if self.batch_images < 1 or self.n_blocks < 1:
            raise ValueError("batch size and block side must be positive")

    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


# ---------------------------------------------------------------------------
# interval sampling
# ---------------------------------------------------------------------------

def subimage_pixel_grid(height, width, n_blocks, index):
    """Full-resolution (iy, ix) index grids of sub-image ``index`` = (u, v)."""
    u, v = index
    if not (0 <= u < n_blocks and 0 <= v < n_blocks):
        raise ValueError("sub-image index out of range")
    hs = -(-height // n_blocks)
    ws = -(-width // n_blocks)
    iy = v + n_blocks * np.arange(hs)
    ix = u + n_blocks * np.arange(ws)
    return np.meshgrid(iy, ix, indexing="ij")


def interval_subimage(image: FloatImage, n_blocks: int, index) -> FloatImage:
    """Sub-image taking pixel (u, v) of every N_B x N_B block.

    The N_B^2 sub-images partition the original pixels exactly; images whose
    sides are not divisible by N_B are padded with masked-out pixels.
    """
    iy, ix = subimage_pixel_grid(image.height, image.width, n_blocks, index)
    inside = (iy < image.height) & (ix < image.width)
    iy_c = np.clip(iy, 0, image.height - 1)
    ix_c = np.clip(ix, 0, image.width - 1)
    data = image.data[iy_c, ix_c]
    data[~inside] = 0.0
    mask = image.mask[iy_c, ix_c] & inside
    return FloatImage(data, mask)


# ---------------------------------------------------------------------------
# loss functions (public numpy surface; torch twins drive training)
# ---------------------------------------------------------------------------

def render_loss(pred, obs) -> float:
    """Mean absolute error over pixels and channels."""
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("empty batch")
    return float(np.abs(pred - obs).mean())


def color_loss(albedo, mean_obs) -> float:
    """Mean distance between unit-normalized albedo and observed colors."""
    a = torch.from_numpy(np.asarray(albedo, dtype=np.float64))
    m = torch.from_numpy(np.asarray(mean_obs, dtype=np.float64))
    return float(_color_loss_torch(a, m))


def _color_loss_torch(albedo, mean_obs):
    na = albedo.norm(dim=-1)
    nm = mean_obs.norm(dim=-1)
    valid = (na > 1e-9) & (nm > 1e-9)
    if not bool(valid.any()):
        return albedo.sum() * 0.0
    da = albedo[valid] / na[valid].unsqueeze(-1)
    dm = mean_obs[valid] / nm[valid].unsqueeze(-1)
    return (da - dm).norm(dim=-1).mean()


def boundary_loss(n_est, n_pre) -> float:
    """Mean (1 - cos) between estimated and precomputed boundary normals."""
    n_est = np.asarray(n_est, dtype=np.float64)
    n_pre = np.asarray(n_pre, dtype=np.float64)
    return float(np.mean(1.0 - np.sum(n_est * n_pre, axis=-1)))


def tv_loss(values, mask=None) -> float:
    """Total-variation smoothness |d/dx + d/dy| with forward differences.

    ``values`` is (H, W) or (H, W, C) on the grid the term operates on; the
    two partials are summed inside a single absolute value (per channel,
    channels then summed) and averaged over pixels whose +x and +y neighbors
    are inside the mask.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[:, :, None]
    h, w = v.shape[:2]
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    valid = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1]
    if not valid.any():
        return 0.0
    dx = v[:-1, 1:] - v[:-1, :-1]
    dy = v[1:, :-1] - v[:-1, :-1]
    t = np.abs(dx + dy).sum(axis=-1)
    return float(t[valid].mean())


def _tv_gathered_torch(values, idx_x, idx_y):
    """TV over a flat pixel set with precomputed +x/+y neighbor indices."""
    valid = (idx_x >= 0) & (idx_y >= 0)
    if not bool(valid.any()):
        return values.sum() * 0.0
    base = values[valid]
    dx = values[idx_x[valid]] - base
    dy = values[idx_y[valid]] - base
    return (dx + dy).abs().sum(dim=-1).mean()


# ---------------------------------------------------------------------------
# differentiable render kernel (torch twin of shading.render_pixels)
# ---------------------------------------------------------------------------

def _view_geometry(views, quad_dirs):
    """Iteration-invariant half-vector tensors for a pixel set."""
    h = views.unsqueeze(1) + quad_dirs.unsqueeze(0)
    hn = h.norm(dim=-1, keepdim=True)
    good = hn[..., 0] > 1e-8
    h = torch.where(hn > 1e-12, h / hn.clamp_min(1e-12), torch.zeros_like(h))
    hdv = torch.einsum("pka,pa->pk", h, views)
    fres = FRESNEL_F0 + (1.0 - FRESNEL_F0) * (1.0 - hdv.clamp(0.0, 1.0)) ** 5
    fres = torch.where(good, fres, torch.zeros_like(fres))
    return h, fres


def render_batch_torch(model: SceneModel, normals, views, albedo, cweights,
                       thetas, quad_dirs, quad_weights, shadow, geom=None):
    """(P,...) pixel tensors + (J,) angles -> (P, J, 3) predicted colors."""
    if geom is None:
        geom = _view_geometry(views, quad_dirs)
    h, fres = geom
    ct, st = torch.cos(thetas), torch.sin(thetas)
    wx, wy, wz = quad_dirs[:, 0], quad_dirs[:, 1], quad_dirs[:, 2]
    wrot = torch.stack([ct[:, None] * wx + st[:, None] * wz,
                        wy.expand(len(thetas), -1),
                        -st[:, None] * wx + ct[:, None] * wz], dim=-1)
    radiance = model.light_radiance(wrot)                                # (J, K, 3)
    cos = (normals @ quad_dirs.T).clamp_min(0.0)                         # (P, K)
    rough = model.roughness
    kappa = sharpness_from_roughness(rough)
    hdn = torch.einsum("pka,pa->pk", h, normals)
    d_lobe = torch.exp(kappa.view(1, 1, -1) * (hdn.unsqueeze(-1) - 1.0))
    kg = rough / 2.0
    ndv = torch.einsum("pa,pa->p", normals, views).clamp_min(1e-6)
    ndw = cos.clamp_min(1e-6)
    g1v = ndv.view(-1, 1, 1) / (ndv.view(-1, 1, 1) * (1.0 - kg.view(1, 1, -1)) + kg.view(1, 1, -1))
    g1l = ndw.unsqueeze(-1) / (ndw.unsqueeze(-1) * (1.0 - kg.view(1, 1, -1)) + kg.view(1, 1, -1))
    rs = torch.einsum("pn,pkn->pk", cweights, d_lobe * g1v * g1l) * fres
    wk = quad_weights.unsqueeze(0) * cos
    spec = torch.einsum("pk,jkc->pjc", wk * rs, radiance)
    diff = torch.einsum("pk,jkc->pjc", wk, radiance) * (albedo / math.pi).unsqueeze(1)
    return shadow.unsqueeze(-1) * (spec + diff)


# ---------------------------------------------------------------------------
# training engine
# ---------------------------------------------------------------------------

class _PixelBundle:
    """Everything the loss needs about one set of full-resolution pixels."""

    __slots__ = ("x", "y", "views", "geom", "obs", "shadow", "color_target",
                 "tv_ix", "tv_iy")

    def __init__(self, x, y, views, geom, obs, shadow, color_target, tv_ix, tv_iy):
        self.x, self.y = x, y
        self.views = views
        self.geom = geom
        self.obs = obs
        self.shadow = shadow
        self.color_target = color_target
        self.tv_ix, self.tv_iy = tv_ix, tv_iy


class Trainer:
    """Owns the model, the cached tensors, and the optimization loop."""

    def __init__(self, stack: ImageStack, init_light: EnvLight, cfg: TrainConfig):
        self.stack = stack
        self.cfg = cfg
        self.dtype = cfg.torch_dtype()
        cam = stack.camera
        # dead lobes (exactly zero amplitude) would never receive gradient
        mu = np.maximum(init_light.mu, 1e-4)
        light = EnvLight(init_light.xi, init_light.lam, mu, init_light.lambda_trainable)
        self.model = SceneModel(cam, stack.n_images, light,
                                dtype=self.dtype, seed=cfg.seed)
        quad = build_quadrature(cfg.quad_dirs)
        self.quad_dirs = torch.from_numpy(quad.dirs).to(self.dtype)
        self.quad_weights = torch.from_numpy(quad.weights).to(self.dtype)

        if stack.shadow is None:
            stack.shadow = shadow_mask(stack)
        self._obs = torch.from_numpy(
            np.stack([im.data for im in stack.images]).astype(np.float64)).to(self.dtype)
        self._shadow = torch.from_numpy(stack.shadow).to(self.dtype)
        self._mean_obs = self._obs.mean(dim=0)

        # boundary prior: contour pixels, their precomputed normals
        px, tn, valid = boundary_mod.extract_boundary(stack.mask)
        nb, valid = boundary_mod.boundary_normals(px, tn, cam, valid=valid)
        self._contour_px = px[valid]
        self._contour_nb = torch.from_numpy(nb[valid]).to(self.dtype)
        cx = (2.0 * self._contour_px[:, 0] + 1.0) / cam.width - 1.0
        cy = (2.0 * self._contour_px[:, 1] + 1.0) / cam.height - 1.0
        self._contour_x = torch.from_numpy(cx).to(self.dtype)
        self._contour_y = torch.from_numpy(cy).to(self.dtype)

        self._bundles = {}
        if cfg.use_is:
            for u in range(cfg.n_blocks):
                for v in range(cfg.n_blocks):
                    b = self._build_is_bundle((u, v))
                    if b is not None:
                        self._bundles[(u, v)] = b
            if not self._bundles:
                raise ValueError("object mask is empty on every sub-image")
        self._bundle_keys = sorted(self._bundles.keys())
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.epoch_counter = 0

    # -- bundle construction -------------------------------------------------

    def _bundle_from_pixels(self, iy, ix, sub_shape=None, sub_pos=None, stride=1):
        cam = self.stack.camera
        mask = self.stack.mask
        x = (2.0 * ix + 1.0) / cam.width - 1.0
        y = (2.0 * iy + 1.0) / cam.height - 1.0
        vx = -x * cam.sx / cam.focal
        vy = -y * cam.sy / cam.focal
        views = np.stack([vx, vy, np.ones_like(vx)], axis=-1)
        views /= np.linalg.norm(views, axis=-1, keepdims=True)
        views_t = torch.from_numpy(views).to(self.dtype)
        geom = _view_geometry(views_t, self.quad_dirs)
        obs = self._obs[:, iy, ix].permute(1, 0, 2).contiguous()
        shadow = self._shadow[:, iy, ix].permute(1, 0).contiguous()
        color_target = self._mean_obs[iy, ix]
        # +x / +y neighbor positions within the set, stride pixels apart
        pos_map = -np.ones(mask.shape, dtype=np.int64)
        pos_map[iy, ix] = np.arange(len(ix))
        tv_ix = np.full(len(ix), -1, dtype=np.int64)
        ok = ix + stride < mask.shape[1]
        tv_ix[ok] = pos_map[iy[ok], ix[ok] + stride]
        tv_iy = np.full(len(ix), -1, dtype=np.int64)
        ok = iy + stride < mask.shape[0]
        tv_iy[ok] = pos_map[iy[ok] + stride, ix[ok]]
        return _PixelBundle(
            torch.from_numpy(x).to(self.dtype), torch.from_numpy(y).to(self.dtype),
            views_t, geom, obs, shadow, color_target,
            torch.from_numpy(tv_ix), torch.from_numpy(tv_iy))

    def _build_is_bundle(self, uv):
        iy, ix = subimage_pixel_grid(self.stack.mask.shape[0],
                                     self.stack.mask.shape[1],
                                     self.cfg.n_blocks, uv)
        sel = self.stack.mask[iy, ix]
        if not sel.any():
            return None
        return self._bundle_from_pixels(iy[sel].ravel(), ix[sel].ravel(),
                                        stride=self.cfg.n_blocks)

    def _build_patch_bundle(self, n_patches):
        """'w/o interval sampling' mode: random 3x3 patches at full resolution."""
        mask = self.stack.mask
        h, w = mask.shape
        cand = np.argwhere(mask[1:h - 1, 1:w - 1]) + 1
        pick = cand[self.rng.choice(len(cand), size=min(n_patches, len(cand)),
                                    replace=False)]
        oy, ox = np.mgrid[-1:2, -1:2]
        iy = (pick[:, 0:1] + oy.ravel()[None, :]).ravel()
        ix = (pick[:, 1:2] + ox.ravel()[None, :]).ravel()
        keep = mask[iy, ix]
        iy, ix = iy[keep], ix[keep]
        flat = iy.astype(np.int64) * w + ix
        uniq = np.unique(flat)
        iy, ix = uniq // w, uniq % w
        return self._bundle_from_pixels(iy, ix, stride=1)

    # -- loss evaluation ------------------------------------------------------

    def src_stride(self, stage: int, epoch_in_stage: int) -> int:
        if not self.cfg.use_src:
            return 1
        if stage == 1:
            return 3
        if stage == 2:
            return 2 if epoch_in_stage < self.cfg.stage_epochs[1] // 2 else 1
        return 1

    def _normal_stride(self, k):
        """SRC stride; without SRC the neighbors sit at the sub-grid spacing."""
        if self.cfg.use_src:
            return k, True
        if self.cfg.use_is:
            return self.cfg.n_blocks, False
        return 1, False

    def batch_losses(self, bundle: _PixelBundle, img_idx, k: int, stage: int,
                     contour_sel=None):
        """All loss terms for one iteration; returns (total, parts)."""
        cfg = self.cfg
        model = self.model
        stride, interp = self._normal_stride(k)
        n_px = len(bundle.x)
        cx = self._contour_x if contour_sel is None else self._contour_x[contour_sel]
        cy = self._contour_y if contour_sel is None else self._contour_y[contour_sel]
        nb = self._contour_nb if contour_sel is None else self._contour_nb[contour_sel]
        xs = torch.cat([bundle.x, cx])
        ys = torch.cat([bundle.y, cy])
        normals, _ = _field_normals_stride(model, xs, ys, stride, interp)
        n_q = normals[:n_px]
        n_c = normals[n_px:]
        albedo, cweights = model.material_field(torch.stack([bundle.x, bundle.y], -1))
        thetas = model.thetas().to(self.dtype)[list(img_idx)]
        pred = render_batch_torch(model, n_q, bundle.views, albedo, cweights,
                                  thetas, self.quad_dirs, self.quad_weights,
                                  bundle.shadow[:, list(img_idx)], bundle.geom)
        obs = bundle.obs[:, list(img_idx)]
        parts = {"render": (pred - obs).abs().mean()}
        parts["boundary"] = (1.0 - (n_c * nb).sum(dim=-1)).mean()
        parts["color"] = _color_loss_torch(albedo, bundle.color_target)
        total = parts["render"] + parts["boundary"] + cfg.lambda_color * parts["color"]
        tv_parts = []
        if stage <= 2:
            lam_n = cfg.lambda_normal_tv if stage == 1 else cfg.lambda_normal_tv_stage2
            tv_n = _tv_gathered_torch(n_q, bundle.tv_ix, bundle.tv_iy)
            tv_parts.append(lam_n * tv_n)
        if stage == 1:
            tv_parts.append(cfg.lambda_albedo_tv *
                            _tv_gathered_torch(albedo, bundle.tv_ix, bundle.tv_iy))
            tv_parts.append(cfg.lambda_spec_tv *
                            _tv_gathered_torch(cweights, bundle.tv_ix, bundle.tv_iy))
        parts["tv"] = sum(tv_parts) if tv_parts else torch.zeros((), dtype=self.dtype)
        total = total + parts["tv"]
        return total, parts

    # -- optimization loop ----------------------------------------------------

    def run(self, log_path=None, ckpt_dir=None) -> SceneModel:
        cfg = self.cfg
        log_f = open(log_path, "w") if log_path else None
        try:
            for stage in (1, 2, 3):
                for ep in range(cfg.stage_epochs[stage - 1]):
                    self._run_epoch(stage, ep, log_f, ckpt_dir)
        finally:
            if log_f:
                log_f.close()
        if ckpt_dir is not None:
            save_checkpoint(self.model, f"{ckpt_dir}/ckpt_final.bin", self.stack)
        return self.model

    def _run_epoch(self, stage, ep, log_f, ckpt_dir):
        cfg = self.cfg
        n_img = self.stack.n_images
        k = self.src_stride(stage, ep)
        perm = self.rng.permutation(n_img)
        sums = {"render": 0.0, "boundary": 0.0, "color": 0.0, "tv": 0.0}
        n_batches = 0
        for lo in range(0, n_img, cfg.batch_images):
            img_idx = perm[lo:lo + cfg.batch_images]
            if cfg.use_is:
                uv = self._bundle_keys[int(self.rng.integers(len(self._bundle_keys)))]
                bundle = self._bundles[uv]
            else:
                n_patches = max(4, (int(self.stack.mask.sum()) // (cfg.n_blocks ** 2)) // 9)
                bundle = self._build_patch_bundle(n_patches)
            contour_sel = None
            ncon = len(self._contour_x)
            if cfg.boundary_batch and ncon > cfg.boundary_batch:
                contour_sel = np.sort(self.rng.choice(ncon, cfg.boundary_batch,
                                                      replace=False))
            self.opt.zero_grad(set_to_none=True)
            total, parts = self.batch_losses(bundle, img_idx, k, stage, contour_sel)
            if not torch.isfinite(total):
                raise RuntimeError(
                    f"training diverged (non-finite loss) at stage {stage} epoch {ep}")
            total.backward()
            self.opt.step()
            with torch.no_grad():
                self.model.roughness.clamp_(1e-4, 1.0)
            for key in sums:
                sums[key] += float(parts[key])
            n_batches += 1
        self.epoch_counter += 1
        if log_f:
            theta_dev = self.model.snapshot_thetas() - np.asarray(
                self.model.theta_init.double().numpy())
            rms = float(np.sqrt(np.mean(theta_dev ** 2)))
            log_f.write(f"{stage} {self.epoch_counter} "
                        f"{sums['render'] / n_batches:.6g} "
                        f"{sums['boundary'] / n_batches:.6g} "
                        f"{sums['color'] / n_batches:.6g} "
                        f"{sums['tv'] / n_batches:.6g} {rms:.6g}\n")
            log_f.flush()
        if ckpt_dir is not None and self.epoch_counter % self.cfg.checkpoint_every == 0:
            save_checkpoint(self.model,
                            f"{ckpt_dir}/ckpt_{self.epoch_counter:06d}.bin", self.stack)


def _field_normals_stride(model, x, y, stride, interp):
    """field_normals with optionally non-interpolating coarse neighbors."""
    if interp:
        return field_normals(model, x, y, stride)
    cam = model.camera
    dx, dy = stride * 2.0 / cam.width, stride * 2.0 / cam.height
    xs = [x] + [x + ox * dx for ox, _ in NEIGHBOR_OFFSETS]
    ys = [y] + [y + oy * dy for _, oy in NEIGHBOR_OFFSETS]
    pts = torch.stack([torch.cat(xs), torch.cat(ys)], dim=-1)
    z_all = model.depth_field(pts)
    p = len(x)
    zq = z_all[:p]
    zn = z_all[p:].reshape(4, p)
    fx, fy = cam.sx / cam.focal, cam.sy / cam.focal
    pq = torch.stack([x * zq * fx, y * zq * fy, zq], dim=-1)
    nbx = torch.stack([x + ox * dx for ox, _ in NEIGHBOR_OFFSETS])
    nby = torch.stack([y + oy * dy for _, oy in NEIGHBOR_OFFSETS])
    pnb = torch.stack([nbx * zn * fx, nby * zn * fy, zn], dim=-1)
    return fit_normals_torch(pq, pnb), zq


def train(stack: ImageStack, init_light: EnvLight, cfg: TrainConfig = None,
          log_path=None, ckpt_dir=None) -> SceneModel:
    """Run the full three-stage optimization and return the trained model."""
    cfg = cfg or TrainConfig()
    return Trainer(stack, init_light, cfg).run(log_path, ckpt_dir)


# ---------------------------------------------------------------------------
# full-resolution evaluation
# ---------------------------------------------------------------------------

def evaluate_full(model: SceneModel, camera: Camera, mask, latlong_height=64,
                  chunk=16384):
    """Full-resolution maps at stride 1; masked-out pixels zeroed.

    Returns dict with 'normal' (H,W,3), 'depth' (H,W), 'albedo' (H,W,3),
    'spec_weights' (H,W,N_S), and 'latlong' (FloatImage).
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    iy, ix = np.nonzero(mask)
    normal = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    albedo = np.zeros((h, w, 3))
    nspec = model.material_field.spec_head.out_features
    cweights = np.zeros((h, w, nspec))
    with torch.no_grad():
        for lo in range(0, len(iy), chunk):
            sl = slice(lo, lo + chunk)
            x = torch.from_numpy((2.0 * ix[sl] + 1.0) / w - 1.0).to(model.dtype_)
            y = torch.from_numpy((2.0 * iy[sl] + 1.0) / h - 1.0).to(model.dtype_)
            n, z = field_normals(model, x, y, 1)
            a, c = model.material_field(torch.stack([x, y], -1))
            normal[iy[sl], ix[sl]] = n.double().numpy()
            depth[iy[sl], ix[sl]] = z.double().numpy()
            albedo[iy[sl], ix[sl]] = a.double().numpy()
            cweights[iy[sl], ix[sl]] = c.double().numpy()
    return {
        "normal": normal,
        "depth": depth,
        "albedo": albedo,
        "spec_weights": cweights,
        "latlong": env_to_latlong(model.snapshot_light(), latlong_height),
        "thetas": wrap_angle(model.snapshot_thetas()),
    }


# ---------------------------------------------------------------------------
# checkpoints: versioned binary blob with a manifest
# ---------------------------------------------------------------------------

def save_checkpoint(model: SceneModel, path, stack: ImageStack = None):
    cam = model.camera
    manifest = {
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "camera": [cam.focal, cam.sx, cam.sy, cam.width, cam.height],
        "n_images": model.n_images,
        "n_lobes": int(model.xi_raw.shape[0]),
        "z0": model.z0,
        "lambda_trainable": model.lambda_trainable,
        "dtype": "float64" if model.dtype_ == torch.float64 else "float32",
        "parameters": [[n, list(s)] for n, s in model.parameter_manifest()],
        "buffers": [[n, list(b.shape)] for n, b in model.named_buffers()],
    }
    params = model.flat_parameters()
    bufs = np.concatenate([b.detach().double().numpy().ravel()
                           for _, b in model.named_buffers()]) if manifest["buffers"] else np.zeros(0)
    manifest["param_count"] = len(params)
    manifest["buffer_count"] = len(bufs)
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(params.astype("<f8").tobytes())
        f.write(bufs.astype("<f8").tobytes())


def load_checkpoint(path) -> SceneModel:
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode())
        params = np.frombuffer(f.read(manifest["param_count"] * 8), dtype="<f8")
        bufs = np.frombuffer(f.read(manifest["buffer_count"] * 8), dtype="<f8")
    focal, sx, sy, w, h = manifest["camera"]
    cam = Camera(focal, sx, sy, int(w), int(h))
    n_lobes = manifest["n_lobes"]
    placeholder = EnvLight(np.tile([0.0, 1.0, 0.0], (n_lobes, 1)),
                           np.full(n_lobes, 1.0), np.zeros((n_lobes, 3)),
                           manifest["lambda_trainable"])
    dtype = torch.float64 if manifest["dtype"] == "float64" else torch.float32
    model = SceneModel(cam, manifest["n_images"], placeholder,
                       z0=manifest["z0"], dtype=dtype, seed=manifest["seed"])
    off = 0
    with torch.no_grad():
        for name, b in model.named_buffers():
            n = b.numel()
            b.copy_(torch.from_numpy(bufs[off:off + n].reshape(b.shape).copy()).to(b.dtype))
            off += n
    model.load_flat_parameters(params)
    return model
