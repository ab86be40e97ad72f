"""Autoencoder codec: analysis/synthesis transforms, GDN, quantizer, prior.

The analysis transform maps an RGB image to a latent tensor at 1/16 spatial
resolution. During training the latent is perturbed with uniform noise as a
differentiable stand-in for rounding; at inference it is rounded and fed both
to the synthesis transform and to the entropy coder. The factorized prior
models each latent channel with a learned monotone CDF and provides the rate
estimate that enters the training loss.
"""

import enum
import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, InvalidInputError

PMF_FLOOR = 2.0 ** -15
DOWNSAMPLE_FACTOR = 16


class _LowerBound(torch.autograd.Function):
    """max(x, bound) whose gradient can still push x back up from below."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x, bound)
        return torch.max(x, bound)

    @staticmethod
    def backward(ctx, grad_output):
        x, bound = ctx.saved_tensors
        passthrough = (x >= bound) | (grad_output < 0)
        return passthrough.type(grad_output.dtype) * grad_output, None


def lower_bound(x, bound):
    if not torch.is_tensor(bound):
        bound = torch.tensor(bound, dtype=x.dtype, device=x.device)
    return _LowerBound.apply(x, bound)


class GDN(nn.Module):
    """Generalized divisive normalization across channels.

    z_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2), or the multiplicative
    inverse when ``inverse=True``. beta and gamma are stored through a
    squared reparameterization with a small pedestal so that beta >= beta_min
    and gamma >= 0 always hold while gradients keep flowing at the bounds.
    """

    REPARAM_OFFSET = 2.0 ** -18
    BETA_MIN = 1e-6

    def __init__(self, channels, inverse=False):
        super().__init__()
        self.channels = channels
        self.inverse = inverse
        self.pedestal = self.REPARAM_OFFSET ** 2
        self.beta_bound = (self.BETA_MIN + self.pedestal) ** 0.5
        self.gamma_bound = self.REPARAM_OFFSET

        beta_init = torch.sqrt(torch.ones(channels) + self.pedestal)
        gamma_init = torch.sqrt(0.1 * torch.eye(channels) + self.pedestal)
        self.beta = nn.Parameter(beta_init)
        self.gamma = nn.Parameter(gamma_init)

    def constrained(self):
        """Returns (beta, gamma) mapped back to their constrained values."""
        beta = lower_bound(self.beta, self.beta_bound) ** 2 - self.pedestal
        gamma = lower_bound(self.gamma, self.gamma_bound) ** 2 - self.pedestal
        return beta, gamma

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise DimensionError(
                f"expected (B,{self.channels},H,W), got {tuple(x.shape)}"
            )
        beta, gamma = self.constrained()
        norm = F.conv2d(x * x, gamma.view(self.channels, self.channels, 1, 1), beta)
        norm = torch.sqrt(norm)
        return x * norm if self.inverse else x / norm


class AnalysisTransform(nn.Module):
    """Image to latent: 9x9/s4 conv, GDN, two 5x5/s2 convs with GDN between.

    The final convolution is linear. Total downsampling is 16 in each
    dimension.
    """

    def __init__(self, filters=192, in_channels=3):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels, filters, 9, stride=4, padding=4)
        self.gdn1 = GDN(filters)
        self.conv2 = nn.Conv2d(filters, filters, 5, stride=2, padding=2)
        self.gdn2 = GDN(filters)
        self.conv3 = nn.Conv2d(filters, filters, 5, stride=2, padding=2)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"expected (B,{self.in_channels},H,W), got {tuple(x.shape)}"
            )
        if x.shape[-2] % DOWNSAMPLE_FACTOR or x.shape[-1] % DOWNSAMPLE_FACTOR:
            raise InvalidInputError(
                f"spatial size {tuple(x.shape[-2:])} is not a multiple of "
                f"{DOWNSAMPLE_FACTOR}; pad the input first"
            )
        x = self.gdn1(self.conv1(x))
        x = self.gdn2(self.conv2(x))
        return self.conv3(x)


class SynthesisTransform(nn.Module):
    """Latent to image: mirror of the analysis transform with inverse GDN."""

    def __init__(self, filters=192, out_channels=3):
        super().__init__()
        self.deconv1 = nn.ConvTranspose2d(filters, filters, 5, stride=2, padding=2, output_padding=1)
        self.igdn1 = GDN(filters, inverse=True)
        self.deconv2 = nn.ConvTranspose2d(filters, filters, 5, stride=2, padding=2, output_padding=1)
        self.igdn2 = GDN(filters, inverse=True)
        self.deconv3 = nn.ConvTranspose2d(filters, out_channels, 9, stride=4, padding=4, output_padding=3)

    def forward(self, y):
        y = self.igdn1(self.deconv1(y))
        y = self.igdn2(self.deconv2(y))
        return self.deconv3(y)


class QuantMode(enum.Enum):
    TRAIN_NOISE = "train_noise"
    INFER_ROUND = "infer_round"


def quantize(y, mode, generator=None):
    """Additive U(-1/2, 1/2) noise for training, or round-to-integer for inference.

    Rounding ties away from zero (0.5 -> 1, -0.5 -> -1) so encoder and
    decoder agree on symbol values regardless of the platform's default
    rounding mode.
    """
    if mode is QuantMode.TRAIN_NOISE:
        noise = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
        return y + noise
    if mode is QuantMode.INFER_ROUND:
        return torch.sign(y) * torch.floor(torch.abs(y) + 0.5)
    raise InvalidInputError(f"unknown quantization mode {mode!r}")


class FactorizedPrior(nn.Module):
    """Fully factorized entropy model with one learned CDF per latent channel.

    Each channel's CDF is a composition of small monotone affine units:
    matrices are kept positive through softplus, the interleaved
    nonlinearities are x + tanh(a) * tanh(x), and a final sigmoid maps to
    (0, 1). Probability of an integer symbol v is c(v + 1/2) - c(v - 1/2),
    floored at PMF_FLOOR when used in the rate estimate.
    """

    def __init__(self, channels, units=(3, 3, 3), init_scale=10.0):
        super().__init__()
        self.channels = channels
        self.units = tuple(units)
        sizes = (1,) + self.units + (1,)
        scale = init_scale ** (1.0 / (len(self.units) + 1))

        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(len(self.units) + 1):
            init = math.log(math.expm1(1.0 / scale / sizes[i + 1]))
            matrix = torch.full((channels, sizes[i + 1], sizes[i]), init)
            self._matrices.append(nn.Parameter(matrix))
            bias = torch.empty((channels, sizes[i + 1], 1)).uniform_(-0.5, 0.5)
            self._biases.append(nn.Parameter(bias))
            if i < len(self.units):
                self._factors.append(nn.Parameter(torch.zeros((channels, sizes[i + 1], 1))))

    def _logits(self, values):
        """values: (C, 1, N) points per channel -> pre-sigmoid CDF logits."""
        logits = values
        for i, matrix in enumerate(self._matrices):
            logits = torch.bmm(F.softplus(matrix), logits) + self._biases[i]
            if i < len(self._factors):
                logits = logits + torch.tanh(self._factors[i]) * torch.tanh(logits)
        return logits

    def cdf(self, values):
        """Cumulative distribution per channel; values shaped (C, N)."""
        if values.dim() != 2 or values.shape[0] != self.channels:
            raise DimensionError(
                f"expected ({self.channels}, N) values, got {tuple(values.shape)}"
            )
        return torch.sigmoid(self._logits(values.unsqueeze(1))).squeeze(1)

    def pmf(self, values):
        """P(symbol == values) per channel, before flooring; values (C, N)."""
        if values.dim() != 2 or values.shape[0] != self.channels:
            raise DimensionError(
                f"expected ({self.channels}, N) values, got {tuple(values.shape)}"
            )
        v = values.unsqueeze(1)
        lower = self._logits(v - 0.5)
        upper = self._logits(v + 0.5)
        # Evaluate both sigmoids on their stable side; the difference is the
        # same either way because sigmoid(-x) = 1 - sigmoid(x).
        sign = -torch.sign(lower + upper).detach()
        pmf = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return pmf.squeeze(1)


def rate_bits(y_quantized, prior):
    """Estimated code length of a quantized latent batch, in bits.

    Sums -log2 of the per-symbol probabilities under the prior, with each
    probability floored at PMF_FLOOR so the estimate stays finite and matches
    what a coded table can represent.
    """
    if y_quantized.dim() != 4 or y_quantized.shape[1] != prior.channels:
        raise DimensionError(
            f"expected (B,{prior.channels},H,W) latents, got {tuple(y_quantized.shape)}"
        )
    b, c = y_quantized.shape[0], y_quantized.shape[1]
    values = y_quantized.permute(1, 0, 2, 3).reshape(c, -1)
    pmf = lower_bound(prior.pmf(values), PMF_FLOOR)
    return -torch.sum(torch.log2(pmf))


class Codec(nn.Module):
    """Analysis transform, synthesis transform and prior bundled together."""

    def __init__(self, filters=192):
        super().__init__()
        self.filters = filters
        self.analysis = AnalysisTransform(filters)
        self.synthesis = SynthesisTransform(filters)
        self.prior = FactorizedPrior(filters)

    def forward(self, x, generator=None, mode=QuantMode.TRAIN_NOISE):
        """Returns (reconstruction, quantized latent, estimated bits)."""
        y = self.analysis(x)
        y_q = quantize(y, mode, generator)
        x_hat = self.synthesis(y_q)
        bits = rate_bits(y_q, self.prior)
        return x_hat, y_q, bits

    @torch.no_grad()
    def reconstruct(self, x):
        """Deterministic inference path: round the latent, clamp the output."""
        y_q = quantize(self.analysis(x), QuantMode.INFER_ROUND)
        return torch.clamp(self.synthesis(y_q), 0.0, 1.0), y_q
