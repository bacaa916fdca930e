"""Stochastic image augmentation with per-view parameter draws.

Parameters for each view come from a caller-supplied rng stream, so a view's
pixels depend only on (raw sample, its own draw) and never on batch
composition or evaluation order. Application is batched; a view whose draw is
the identity passes through bitwise.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

# ITU-R 601 luma weights, as used for grayscale conversion
_LUMA = (0.2989, 0.587, 0.114)


@dataclass
class ViewParams:
    crop_x0: float
    crop_y0: float
    crop_w: float
    crop_h: float
    flip: bool
    jitter: bool
    brightness: float
    contrast: float
    saturation: float
    hue: float
    grayscale: bool
    blur_sigma: float  # 0 = no blur

    def is_identity(self, height, width):
        return (
            not self.flip
            and not self.jitter
            and not self.grayscale
            and self.blur_sigma == 0.0
            and self.crop_x0 == 0.0
            and self.crop_y0 == 0.0
            and self.crop_w == width
            and self.crop_h == height
        )


def draw_view_params(spec, rng, height, width):
    """One independent augmentation draw.

    Always consumes the same number of rng variates regardless of which
    transforms end up active, so streams stay aligned.
    """
    area_frac = rng.uniform(spec.crop_scale_min, spec.crop_scale_max)
    log_ratio = rng.uniform(np.log(spec.crop_ratio_min), np.log(spec.crop_ratio_max))
    u_y = rng.uniform()
    u_x = rng.uniform()
    flip_u = rng.uniform()
    jitter_u = rng.uniform()
    fb = rng.uniform(max(0.0, 1.0 - spec.jitter_brightness), 1.0 + spec.jitter_brightness)
    fc = rng.uniform(max(0.0, 1.0 - spec.jitter_contrast), 1.0 + spec.jitter_contrast)
    fs = rng.uniform(max(0.0, 1.0 - spec.jitter_saturation), 1.0 + spec.jitter_saturation)
    fh = rng.uniform(-spec.jitter_hue, spec.jitter_hue)
    gray_u = rng.uniform()
    blur_u = rng.uniform()
    sigma = rng.uniform(spec.blur_sigma_min, spec.blur_sigma_max)

    target_area = area_frac * height * width
    ratio = float(np.exp(log_ratio))
    if area_frac >= 1.0:
        # a full-area draw snaps to the exact frame (no resample), matching
        # the identity contract of a scale range pinned at 1
        crop_x0, crop_y0, crop_w, crop_h = 0.0, 0.0, float(width), float(height)
    else:
        crop_w = min(float(np.sqrt(target_area * ratio)), float(width))
        crop_h = min(float(np.sqrt(target_area / ratio)), float(height))
        crop_x0 = u_x * (width - crop_w)
        crop_y0 = u_y * (height - crop_h)

    return ViewParams(
        crop_x0=crop_x0,
        crop_y0=crop_y0,
        crop_w=crop_w,
        crop_h=crop_h,
        flip=bool(flip_u < spec.p_flip),
        jitter=bool(jitter_u < spec.p_jitter),
        brightness=float(fb),
        contrast=float(fc),
        saturation=float(fs),
        hue=float(fh),
        grayscale=bool(gray_u < spec.p_grayscale),
        blur_sigma=float(sigma) if blur_u < spec.p_blur else 0.0,
    )


def _grayscale(x):
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    return _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b


def _rgb_to_hsv(x, eps=1e-8):
    maxc, _ = x.max(dim=1)
    minc, _ = x.min(dim=1)
    v = maxc
    delta = maxc - minc
    s = delta / (maxc + eps)
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    safe = delta + eps
    hr = ((g - b) / safe) % 6.0
    hg = (b - r) / safe + 2.0
    hb = (r - g) / safe + 4.0
    h = torch.where(maxc == r, hr, torch.where(maxc == g, hg, hb))
    h = torch.where(delta > 0, h / 6.0, torch.zeros_like(h)) % 1.0
    return h, s, v

def _hsv_to_rgb(h, s, v):
    h6 = h * 6.0
    i = torch.floor(h6)
    f = h6 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.long() % 6
    out = torch.stack(
        [
            torch.where(i == 0, v, torch.where(i == 1, q, torch.where(i == 2, p, torch.where(i == 3, p, torch.where(i == 4, t, v))))),
            torch.where(i == 0, t, torch.where(i == 1, v, torch.where(i == 2, v, torch.where(i == 3, q, torch.where(i == 4, p, p))))),
            torch.where(i == 0, p, torch.where(i == 1, p, torch.where(i == 2, t, torch.where(i == 3, v, torch.where(i == 4, v, q))))),
        ],
        dim=1,
    )
    return out


def _blur(x, sigmas, radius=1):
    """Separable gaussian blur with a per-view kernel; sigma 0 is identity."""
    b, c, h, w = x.shape
    offsets = torch.arange(-radius, radius + 1, dtype=x.dtype)
    sig = torch.as_tensor(sigmas, dtype=x.dtype).clamp(min=0.0)
    safe = torch.where(sig > 0, sig, torch.ones_like(sig))
    kernel = torch.exp(-0.5 * (offsets[None, :] / safe[:, None]) ** 2)
    identity = (offsets == 0).to(x.dtype).expand(b, -1)
    kernel = torch.where((sig > 0)[:, None], kernel, identity)
    kernel = kernel / kernel.sum(dim=1, keepdim=True)
    kx = kernel[:, None, None, :].repeat_interleave(c, dim=0)  # (b*c,1,1,k)
    merged = x.reshape(1, b * c, h, w)
    merged = F.pad(merged, (radius, radius, 0, 0), mode="reflect")
    merged = F.conv2d(merged, kx, groups=b * c)
    merged = F.pad(merged, (0, 0, radius, radius), mode="reflect")
    merged = F.conv2d(merged, kx.transpose(2, 3), groups=b * c)
    return merged.reshape(b, c, h, w)


def apply_view_params(images, params):
    """Apply one ViewParams per image row; returns a tensor of the same shape."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError("expected images of shape (B, 3, H, W)")
    if len(params) != images.shape[0]:
        raise ValueError("one ViewParams per image row required")
    b, _, h, w = images.shape
    x = images

    # crop-resize + flip via a batched affine sample; full-frame rows bypass
    # interpolation so a do-nothing draw is bitwise exact
    identity_rows = torch.tensor([p.is_identity(h, w) for p in params])
    full_frame = torch.tensor([
        p.crop_x0 == 0 and p.crop_y0 == 0 and p.crop_w == w and p.crop_h == h for p in params
    ])
    flips = torch.tensor([p.flip for p in params])
    needs_warp = ~full_frame
    if bool(needs_warp.any()):
        theta = torch.zeros(b, 2, 3, dtype=images.dtype)
        for i, p in enumerate(params):
            sx = p.crop_w / w
            sy = p.crop_h / h
            theta[i, 0, 0] = -sx if p.flip else sx
            theta[i, 0, 2] = (2.0 * p.crop_x0 + p.crop_w) / w - 1.0
            theta[i, 1, 1] = sy
            theta[i, 1, 2] = (2.0 * p.crop_y0 + p.crop_h) / h - 1.0
        grid = F.affine_grid(theta, list(images.shape), align_corners=False)
        warped = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
        x = torch.where(needs_warp[:, None, None, None], warped, x)
    pure_flip = full_frame & flips
    if bool(pure_flip.any()):
        x = torch.where(pure_flip[:, None, None, None], torch.flip(x, dims=(3,)), x)

    jit = torch.tensor([p.jitter for p in params])
    if bool(jit.any()):
        fb = torch.tensor([p.brightness if p.jitter else 1.0 for p in params], dtype=x.dtype)
        fc = torch.tensor([p.contrast if p.jitter else 1.0 for p in params], dtype=x.dtype)
        fs = torch.tensor([p.saturation if p.jitter else 1.0 for p in params], dtype=x.dtype)
        fh = torch.tensor([p.hue if p.jitter else 0.0 for p in params], dtype=x.dtype)
        x = (x * fb[:, None, None, None]).clamp(0.0, 1.0)
        mean_gray = _grayscale(x).mean(dim=(1, 2))[:, None, None, None]
        x = (mean_gray + fc[:, None, None, None] * (x - mean_gray)).clamp(0.0, 1.0)
        gray_pix = _grayscale(x)[:, None]
        x = (gray_pix + fs[:, None, None, None] * (x - gray_pix)).clamp(0.0, 1.0)
        if bool((fh != 0).any()):
            hch, s, v = _rgb_to_hsv(x)
            shifted = _hsv_to_rgb((hch + fh[:, None, None]) % 1.0, s, v).clamp(0.0, 1.0)
            x = torch.where(jit[:, None, None, None], shifted, x)

    gray = torch.tensor([p.grayscale for p in params])
    if bool(gray.any()):
        g3 = _grayscale(x)[:, None].expand_as(x)
        x = torch.where(gray[:, None, None, None], g3, x)

    sigmas = [p.blur_sigma for p in params]
    if any(s > 0 for s in sigmas):
        x = _blur(x, sigmas).clamp(0.0, 1.0)

    if bool(identity_rows.any()):
        x = torch.where(identity_rows[:, None, None, None], images, x)
    return x
