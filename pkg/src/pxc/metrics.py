"""Full-reference image quality metrics.

PSNR, SSIM and MS-SSIM are implemented directly on torch tensors and are
differentiable with respect to both inputs, so they can sit inside a training
loss as well as drive evaluation. VMAF is delegated to an external tool
through :mod:`pxc.vmaf`.

All metrics take batches shaped (B, C, H, W) with float values in [0, 1] and
return one score per batch item.
"""

import enum
import math

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, InvalidInputError

PSNR_CAP_DB = 100.0

SSIM_WINDOW_SIZE = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# Per-scale exponents for MS-SSIM, coarse scales last.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class QualityModel(enum.Enum):
    """Selects which quality metric drives scoring (and training targets)."""

    PSNR = "psnr"
    SSIM = "ssim"
    MSSSIM = "msssim"
    VMAF_EXTERNAL = "vmaf"

    @classmethod
    def from_name(cls, name):
        key = str(name).strip().lower()
        aliases = {"vmaf_external": "vmaf", "ms-ssim": "msssim", "ms_ssim": "msssim"}
        key = aliases.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        raise ConfigError("target_metric", f"unknown quality model '{name}'")

    @property
    def max_score(self):
        """Upper end of the metric's native scale (best possible quality)."""
        return {
            QualityModel.PSNR: 100.0,
            QualityModel.SSIM: 1.0,
            QualityModel.MSSSIM: 1.0,
            QualityModel.VMAF_EXTERNAL: 100.0,
        }[self]


def _check_pair(ref, dist, min_size=1):
    if ref.dim() != 4 or dist.dim() != 4:
        raise DimensionError(
            f"expected 4D (B,C,H,W) tensors, got {ref.dim()}D and {dist.dim()}D"
        )
    if ref.shape != dist.shape:
        raise DimensionError(f"shape mismatch: {tuple(ref.shape)} vs {tuple(dist.shape)}")
    if min(ref.shape[-2], ref.shape[-1]) < min_size:
        raise InvalidInputError(
            f"spatial size {tuple(ref.shape[-2:])} is below the minimum {min_size}"
        )


def psnr(ref, dist):
    """Peak signal-to-noise ratio in dB, peak value 1.0, capped at 100 dB.

    The cap makes psnr(x, x) finite and equal to 100, which keeps the score
    on the same bounded scale as the other metrics.
    """
    _check_pair(ref, dist)
    mse = (ref - dist).pow(2).flatten(1).mean(dim=1)
    eps = torch.tensor(10.0 ** (-PSNR_CAP_DB / 10.0), dtype=mse.dtype, device=mse.device)
    return -10.0 * torch.log10(torch.maximum(mse, eps))


def gaussian_window(size=SSIM_WINDOW_SIZE, sigma=SSIM_SIGMA, dtype=torch.float32, device=None):
    """1D gaussian tap vector normalized to sum 1."""
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return g.to(dtype=dtype, device=device)


def _blur(x, window):
    # Separable valid-mode convolution, one group per channel.
    c = x.shape[1]
    wv = window.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    wh = window.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    return F.conv2d(F.conv2d(x, wv, groups=c), wh, groups=c)


def _ssim_components(ref, dist, window):
    mu_x = _blur(ref, window)
    mu_y = _blur(dist, window)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    # Biased (window-weighted) second moments, as in the original formulation.
    sigma_xx = _blur(ref * ref, window) - mu_xx
    sigma_yy = _blur(dist * dist, window) - mu_yy
    sigma_xy = _blur(ref * dist, window) - mu_xy
    lum = (2.0 * mu_xy + SSIM_C1) / (mu_xx + mu_yy + SSIM_C1)
    cs = (2.0 * sigma_xy + SSIM_C2) / (sigma_xx + sigma_yy + SSIM_C2)
    return lum, cs


def ssim(ref, dist, window_size=SSIM_WINDOW_SIZE, sigma=SSIM_SIGMA):
    """Mean structural similarity over an 11x11 gaussian window.

    Uses valid-mode filtering (no padding), so border pixels closer than half
    a window to the edge do not contribute. For identical inputs the result
    is exactly 1.
    """
    _check_pair(ref, dist, min_size=window_size)
    window = gaussian_window(window_size, sigma, dtype=ref.dtype, device=ref.device)
    lum, cs = _ssim_components(ref, dist, window)
    return (lum * cs).flatten(1).mean(dim=1)


def ms_ssim(ref, dist, weights=MS_SSIM_WEIGHTS, window_size=SSIM_WINDOW_SIZE):
    """Multi-scale SSIM over up to five dyadic scales.

    Scales whose downsampled side would drop below the filter window are
    dropped and the remaining exponents are renormalized to sum to 1, so the
    metric stays defined for small crops. Contrast terms are clamped at zero
    before exponentiation to keep the product real; the result lies in [0, 1].
    """
    _check_pair(ref, dist, min_size=window_size)
    min_side = min(ref.shape[-2], ref.shape[-1])
    usable = min(len(weights), int(math.log2(min_side // window_size)) + 1)
    scale_weights = torch.tensor(weights[:usable], dtype=ref.dtype, device=ref.device)
    scale_weights = scale_weights / scale_weights.sum()

    window = gaussian_window(window_size, SSIM_SIGMA, dtype=ref.dtype, device=ref.device)
    terms = []
    x, y = ref, dist
    for level in range(usable):
        lum, cs = _ssim_components(x, y, window)
        if level == usable - 1:
            value = (lum * cs).flatten(1).mean(dim=1)
        else:
            value = cs.flatten(1).mean(dim=1)
            x = F.avg_pool2d(x, kernel_size=2)
            y = F.avg_pool2d(y, kernel_size=2)
        terms.append(torch.relu(value))
    stacked = torch.stack(terms, dim=0)
    return torch.prod(stacked ** scale_weights.view(-1, 1), dim=0)


def quality_batch(model, ref, dist, vmaf=None):
    """Score a batch of (reference, distorted) pairs with the chosen metric.

    Returns a detached (B,) tensor; use the individual metric functions when
    gradients are needed. VMAF requires a configured client, and its scores
    come back in input order regardless of how the client schedules work.
    """
    _check_pair(ref, dist)
    if model is QualityModel.VMAF_EXTERNAL:
        if vmaf is None:
            raise ConfigError("vmaf_cmd", "VMAF scoring requested but no tool configured")
        scores = vmaf.score_batch(ref, dist)
        return torch.tensor(scores, dtype=ref.dtype, device=ref.device)
    with torch.no_grad():
        if model is QualityModel.PSNR:
            return psnr(ref, dist)
        if model is QualityModel.SSIM:
            return ssim(ref, dist)
        if model is QualityModel.MSSSIM:
            return ms_ssim(ref, dist)
    raise ConfigError("target_metric", f"unhandled quality model {model}")
