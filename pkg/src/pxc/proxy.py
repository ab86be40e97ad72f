"""Differentiable proxy for a full-reference quality metric.

A small CNN regressor takes a (reference, distorted) pair stacked along the
channel axis and predicts the metric score the real tool would produce. The
codec trains against the proxy's prediction (which is differentiable), while
the proxy itself is periodically refit to fresh reconstructions scored by the
true metric.
"""

import torch
from torch import nn

from .errors import DimensionError, TrainingDivergenceError


class ProxyNet(nn.Module):
    """Three conv stages (16, 32, 64 channels) with 2x2 max pools, then a
    fully-connected readout to a single unbounded score.

    The readout layer is sized for a fixed patch size agreed at construction
    time; inputs must be H = W = patch_size with H and W divisible by 8.
    """

    STAGE_CHANNELS = (16, 32, 64)

    def __init__(self, patch_size=128, in_channels=6):
        super().__init__()
        if patch_size % 8 != 0:
            raise DimensionError(f"patch size {patch_size} is not a multiple of 8")
        self.patch_size = patch_size
        self.in_channels = in_channels
        chans = (in_channels,) + self.STAGE_CHANNELS
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 5, stride=1, padding=2)
            for i in range(len(self.STAGE_CHANNELS))
        )
        self.pool = nn.MaxPool2d(2)
        flat = self.STAGE_CHANNELS[-1] * (patch_size // 8) ** 2
        self.fc = nn.Linear(flat, 1)
        self._init_weights()

    def _init_weights(self):
        for module in list(self.convs) + [self.fc]:
            nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(module.bias)

    def forward(self, ref, dist):
        if ref.shape != dist.shape:
            raise DimensionError(f"shape mismatch: {tuple(ref.shape)} vs {tuple(dist.shape)}")
        if ref.dim() != 4 or ref.shape[-2] != self.patch_size or ref.shape[-1] != self.patch_size:
            raise DimensionError(
                f"expected (B,C,{self.patch_size},{self.patch_size}) inputs, got {tuple(ref.shape)}"
            )
        x = torch.cat([ref, dist], dim=1)
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"stacked pair has {x.shape[1]} channels, expected {self.in_channels}"
            )
        for conv in self.convs:
            x = self.pool(torch.relu(conv(x)))
        return self.fc(x.flatten(1)).squeeze(-1)


def metric_loss(predicted, truth):
    """Mean squared error between predicted and true metric scores."""
    if predicted.shape != truth.shape:
        raise DimensionError(
            f"score shape mismatch: {tuple(predicted.shape)} vs {tuple(truth.shape)}"
        )
    return torch.mean((predicted - truth) ** 2)


def proxy_loss(proxy, ref, dist, m_max):
    """Quality shortfall (m_max minus predicted score), averaged over the batch.

    Minimizing this pushes reconstructions toward the top of the metric's
    scale. Gradients flow into ``dist``; the caller is responsible for
    freezing the proxy's own parameters during codec updates.
    """
    return torch.mean(m_max - proxy(ref, dist))


def proxy_update(proxy, optimizer, ref, dist, truth, step=None):
    """One regression step fitting the proxy to true metric scores.

    ``dist`` should be detached from the codec graph. If the loss is not
    finite the optimizer step is skipped and a divergence error is raised;
    parameters are left exactly as they were. Returns the loss value and the
    (detached) predictions that produced it.
    """
    predictions = proxy(ref, dist.detach())
    loss = metric_loss(predictions, truth)
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(
            f"non-finite proxy regression loss {loss.item()!r}", step=step, phase="proxy"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach()), predictions.detach()
