"""Frame reconstruction losses: L1, MS-SSIM and gradient difference.

All functions take tensors shaped (..., H, W) and are differentiable. The
``*_per_sample`` variants return one value per leading index; the public
scalar versions average those.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ShapeMismatch, TooSmallForScales

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DEFAULT_MSSSIM_SCALES = 3
# floor applied before fractional exponents; keeps gradients finite
MSSSIM_FLOOR = 1e-6


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.dim() < 2:
        raise ShapeMismatch("expected at least 2 dimensions (H, W)")


def l1_per_sample(pred, target):
    _check_shapes(pred, target)
    return (pred - target).abs().mean(dim=(-2, -1))


def l1_loss(pred, target) -> torch.Tensor:
    """Mean absolute pixel difference."""
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    return l1_per_sample(pred, target).mean()


def max_msssim_scales(frame_size, cap: int = DEFAULT_MSSSIM_SCALES) -> int:
    """Largest scale count whose coarsest level still fits an 11x11 window."""
    m = min(frame_size)
    scales = 0
    while scales < cap and m >= 2**scales * SSIM_WINDOW:
        scales += 1
    return scales


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x, g):
    # separable valid-mode Gaussian filter on (N, 1, H, W)
    x = F.conv2d(x, g.view(1, 1, 1, -1))
    return F.conv2d(x, g.view(1, 1, -1, 1))


def _ssim_components(x, y, g, data_range=1.0):
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter(x, g)
    mu_y = _filter(y, g)
    sxx = _filter(x * x, g) - mu_x * mu_x
    syy = _filter(y * y, g) - mu_y * mu_y
    sxy = _filter(x * y, g) - mu_x * mu_y
    luminance = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return luminance, cs


def msssim_per_sample(pred, target, scales: int | None = None):
    _check_shapes(pred, target)
    h, w = pred.shape[-2:]
    if scales is None:
        scales = max_msssim_scales((h, w))
    if scales < 1 or min(h, w) < 2 ** (scales - 1) * SSIM_WINDOW:
        raise TooSmallForScales(f"{h}x{w} frames are too small for {scales} MS-SSIM scale(s)")
    if scales > len(MSSSIM_WEIGHTS):
        raise ValueError(f"at most {len(MSSSIM_WEIGHTS)} scales are supported")
    lead = pred.shape[:-2]
    x = pred.reshape(-1, 1, h, w)
    y = target.reshape(-1, 1, h, w)
    g = gaussian_window(dtype=pred.dtype)
    beta = torch.tensor(MSSSIM_WEIGHTS[:scales], dtype=pred.dtype)
    beta = beta / beta.sum()

    terms = []
    for j in range(scales):
        lum, cs = _ssim_components(x, y, g)
        if j == scales - 1:
            terms.append((lum * cs).mean(dim=(-3, -2, -1)))
        else:
            terms.append(cs.mean(dim=(-3, -2, -1)))
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    if scales == 1:
        value = terms[0]
    else:
        value = torch.ones_like(terms[0])
        for t, b in zip(terms, beta):
            value = value * t.clamp_min(MSSSIM_FLOOR) ** b
    return (1.0 - value).reshape(lead)


def msssim_loss(pred, target, scales: int | None = None) -> torch.Tensor:
    """``1 - MS-SSIM`` with an 11x11 Gaussian window (sigma 1.5) and unit dynamic range.

    Standard per-scale exponents are renormalized to the number of scales
    used. With ``scales=None`` the largest count (up to 3) that fits is used.
    """
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    return msssim_per_sample(pred, target, scales).mean()


def gdl_per_sample(pred, target, alpha: float = 1.0):
    _check_shapes(pred, target)
    if pred.shape[-1] < 2 or pred.shape[-2] < 2:
        raise ShapeMismatch("gradient difference loss needs H, W >= 2")
    dh_p = (pred[..., :, 1:] - pred[..., :, :-1]).abs()
    dh_t = (target[..., :, 1:] - target[..., :, :-1]).abs()
    dv_p = (pred[..., 1:, :] - pred[..., :-1, :]).abs()
    dv_t = (target[..., 1:, :] - target[..., :-1, :]).abs()
    horiz = (dh_t - dh_p).abs() ** alpha
    vert = (dv_t - dv_p).abs() ** alpha
    return horiz.mean(dim=(-2, -1)) + vert.mean(dim=(-2, -1))


def gdl_loss(pred, target, alpha: float = 1.0) -> torch.Tensor:
    """Gradient difference loss with forward differences.

    Each direction is averaged over its own valid offsets (H*(W-1) horizontal,
    (H-1)*W vertical) and the two means are added.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    return gdl_per_sample(pred, target, alpha).mean()

