"""Light initialization from the boundary probe.

Pipeline (in this exact order): drop the brightest samples, low-pass the
remaining values over the sphere, convert to gray, then fit the SG light to
the filtered probe by gradient descent on the squared error.  The bright
samples are usually specular and would pull lobes toward mirrored source
positions; the low-pass stands in for a 3rd-order spherical-harmonics cut.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .boundary import LightProbe, assemble_probe, boundary_normals, extract_boundary
from .envlight import EnvLight, make_fibonacci_light
from .imagery import ImageStack

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class FilterConfig:
    bright_fraction: float = 0.2      # top quantile removed by the threshold filter
    smooth_sigma_deg: float = 20.0    # angular Gaussian, bandwidth of an order-3 SH cut
    fit_epochs: int = 1000
    fit_lr: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.bright_fraction < 1.0:
            raise ValueError("bright_fraction must be in (0, 1)")
        if self.smooth_sigma_deg <= 0:
            raise ValueError("smooth_sigma_deg must be positive")


def threshold_filter(probe: LightProbe, frac: float) -> LightProbe:
    """Remove the top ``frac`` quantile of samples by gray intensity.

    Ties are broken by sample order (earliest kept); survivors keep their
    original order.  Exactly ceil((1 - frac) * n) samples survive.
    """
    if len(probe) == 0:
        raise ValueError("empty probe")
    n = len(probe)
    keep = int(math.ceil((1.0 - frac) * n))
    if keep <= 0:
        raise ValueError("threshold filter would remove every sample")
    order = np.argsort(probe.gray(), kind="stable")
    kept = np.sort(order[:keep])
    return LightProbe(probe.dirs[kept], probe.values[kept])


def spherical_smooth(probe: LightProbe, sigma_deg: float) -> LightProbe:
    """Gaussian-weighted angular average, rescaled to the input value range.

    Each sample value is replaced by the average of all samples weighted by
    exp(-angle^2 / (2 sigma^2)); the result is then affinely rescaled per
    channel so its min/max match the input probe's min/max.
    """
    if len(probe) == 0:
        raise ValueError("empty probe")
    sigma = math.radians(sigma_deg)
    dirs = probe.dirs
    vals = probe.values
    n = len(probe)
    out = np.zeros_like(vals)
    chunk = max(1, int(2e7) // max(n, 1))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        cosang = np.clip(dirs[lo:hi] @ dirs.T, -1.0, 1.0)
        ang = np.arccos(cosang)
        w = np.exp(-0.5 * (ang / sigma) ** 2)
        tot = w.sum(axis=1)
        if np.any(tot <= 0):
            raise ValueError("zero total smoothing weight")
        out[lo:hi] = (w @ vals) / tot[:, None]
    for c in range(vals.shape[1]):
        in_lo, in_hi = vals[:, c].min(), vals[:, c].max()
        out_lo, out_hi = out[:, c].min(), out[:, c].max()
        scale = (in_hi - in_lo) / (out_hi - out_lo) if out_hi - out_lo > 1e-12 else 1.0
        out[:, c] = (out[:, c] - out_lo) * scale + in_lo
    return LightProbe(dirs.copy(), out)


def to_gray(probe: LightProbe) -> LightProbe:
    """Collapse RGB to gray (0.299 R + 0.587 G + 0.114 B), single channel."""
    return LightProbe(probe.dirs.copy(), probe.gray()[:, None])


def filter_probe(probe: LightProbe, cfg: FilterConfig = None) -> LightProbe:
    """Threshold, then smooth, then gray: the full filter pipeline."""
    cfg = cfg or FilterConfig()
    return to_gray(spherical_smooth(threshold_filter(probe, cfg.bright_fraction),
                                    cfg.smooth_sigma_deg))


def fit_sg(probe: LightProbe, light: EnvLight, cfg: FilterConfig = None) -> EnvLight:
    """Fit lobe directions and amplitudes to the probe by gradient descent.

    Minimizes J = sum_b (L(w_b) - m_b)^2 with the sharpness frozen.  Plain
    full-batch descent with a backtracking step size (halved whenever a step
    would increase J), so J is monotonically non-increasing.  Gray probes fit
    a single channel that is broadcast to RGB.
    """
    cfg = cfg or FilterConfig()
    if len(probe) == 0:
        raise ValueError("empty probe")
    gray_target = probe.values.shape[1] == 1
    target_np = probe.values if not gray_target else probe.values[:, [0]]

    dirs = torch.from_numpy(probe.dirs)
    target = torch.from_numpy(target_np)
    lam = torch.from_numpy(light.lam)
    xi = torch.from_numpy(light.xi.copy())
    mu = torch.from_numpy(light.mu[:, :1].copy() if gray_target else light.mu.copy())

    def objective(xi_, mu_):
        g = torch.exp(lam * (dirs @ xi_.T - 1.0))
        resid = g @ mu_ - target
        return (resid * resid).sum()

    j_prev = objective(xi, mu)
    if not torch.isfinite(j_prev):
        raise RuntimeError("non-finite objective at the start of the SG fit")
    eta = cfg.fit_lr
    for step in range(cfg.fit_epochs):
        xi_p = xi.clone().requires_grad_(True)
        mu_p = mu.clone().requires_grad_(True)
        j = objective(xi_p / xi_p.norm(dim=1, keepdim=True), mu_p)
        if not torch.isfinite(j):
            raise RuntimeError(f"non-finite SG-fit objective at step {step}")
        gx, gm = torch.autograd.grad(j, [xi_p, mu_p])
        accepted = False
        for _ in range(40):
            xi_new = xi - eta * gx
            xi_new = xi_new / xi_new.norm(dim=1, keepdim=True)
            mu_new = torch.clamp(mu - eta * gm, min=0.0)
            j_new = objective(xi_new, mu_new)
            if torch.isfinite(j_new) and j_new <= j_prev:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        xi, mu, j_prev = xi_new, mu_new, j_new
        eta = min(eta * 2.0, cfg.fit_lr)

    xi_out = (xi / xi.norm(dim=1, keepdim=True)).numpy()
    mu_out = mu.numpy()
    if gray_target:
        mu_out = np.repeat(mu_out, 3, axis=1)
    return EnvLight(xi_out, light.lam.copy(), mu_out, light.lambda_trainable)


def initial_amplitude(probe: LightProbe, n_lobes: int, sharpness: float) -> float:
    """Amplitude making a uniform lattice light match the probe's mean value."""
    # expected kernel sum at any direction: N * (1 - exp(-2 lam)) / (2 lam)
    ksum = n_lobes * (1.0 - math.exp(-2.0 * sharpness)) / (2.0 * sharpness)
    return float(probe.gray().mean() / max(ksum, 1e-9))


def init_light_from_stack(stack: ImageStack, cfg: FilterConfig = None,
                          n_lobes: int = 64):
    """Boundary probe -> filters -> SG fit: the whole initialization.

    Returns (fitted light, filtered probe, raw probe).
    """
    cfg = cfg or FilterConfig()
    pixels, tangents, valid = extract_boundary(stack.mask)
    normals, valid = boundary_normals(pixels, tangents, stack.camera, valid=valid)
    raw = assemble_probe(stack, normals, pixels, valid)
    filtered = filter_probe(raw, cfg)
    start = make_fibonacci_light(n_lobes)
    amp = initial_amplitude(filtered, n_lobes, float(start.lam[0]))
    start = EnvLight(start.xi, start.lam, np.full((n_lobes, 3), amp))
    fitted = fit_sg(filtered, start, cfg)
    return fitted, filtered, raw
