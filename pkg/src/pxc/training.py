"""Alternating optimization of the codec and the proxy quality network.

Each training step has two phases. Phase one updates the codec: forward with
noise quantization, total loss combining the proxy's quality shortfall, the
pixel MSE and the bpp rate estimate, backward into codec parameters only.
Phase two refits the proxy: reconstruct the same batch again without
gradients, score the pairs with the true metric, and regress the proxy onto
those scores. Keeping the proxy current on exactly the reconstructions the
codec now produces is what stops the codec from drifting into regions where
the proxy is flattering but wrong.
"""

import dataclasses
import logging
import math
import os

import torch
from torch import nn

from .codec import Codec, QuantMode, quantize, rate_bits
from .config import config_echo, config_mapping
from .container import save_checkpoint
from .data import PatchStream, batch_to_tensor
from .errors import ConfigError, DimensionError, TrainingDivergenceError
from .metrics import QualityModel, quality_batch
from .proxy import ProxyNet, proxy_loss, proxy_update
from .vmaf import VmafClient

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "step", "pixel_loss", "proxy_loss", "rate_bpp", "total_loss",
    "true_mean", "true_std", "proxy_mean", "proxy_std",
)


def pixel_loss(x, x_hat):
    """Mean squared error over every element of the batch."""
    if x.shape != x_hat.shape:
        raise DimensionError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return torch.mean((x - x_hat) ** 2)


def total_loss(l_proxy, l_pixel, l_rate_bpp, rd_lambda, alpha):
    """Combined objective: lambda * [alpha*proxy + (1-alpha)*pixel] + rate."""
    for name, value in (("proxy", l_proxy), ("pixel", l_pixel), ("rate", l_rate_bpp)):
        finite = torch.isfinite(value) if torch.is_tensor(value) else math.isfinite(value)
        if not finite:
            raise TrainingDivergenceError(f"non-finite {name} loss term: {value!r}")
    return rd_lambda * (alpha * l_proxy + (1.0 - alpha) * l_pixel) + l_rate_bpp


def target_scores(model, ref, dist, m_max=100.0, vmaf=None):
    """True metric scores rescaled so a perfect reconstruction scores m_max.

    SSIM and MS-SSIM natively top out at 1 and get multiplied by 100 under
    the default m_max; PSNR (capped at 100 dB) and VMAF already live on a
    0-100 scale.
    """
    scores = quality_batch(model, ref, dist, vmaf=vmaf)
    return scores * (m_max / model.max_score)


def optimizer_param_groups(module, weight_decay):
    """Two AdamW groups: conv/linear kernels with decay, everything else without.

    Normalization and prior parameters are positivity-constrained through
    reparameterizations; decaying them would drag them toward their bounds,
    so only plain kernels get weight decay.
    """
    decay, no_decay = [], []
    for sub in module.modules():
        if isinstance(sub, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            decay.append(sub.weight)
            if sub.bias is not None:
                no_decay.append(sub.bias)
    seen = {id(p) for p in decay} | {id(p) for p in no_decay}
    no_decay.extend(p for p in module.parameters() if id(p) not in seen)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def _checksum(module):
    with torch.no_grad():
        return float(sum(p.double().sum().item() for p in module.parameters()))


@dataclasses.dataclass
class StepRecord:
    step: int
    pixel_loss: float
    proxy_loss: float
    rate_bpp: float
    total_loss: float
    true_mean: float
    true_std: float
    proxy_mean: float
    proxy_std: float

    def csv_row(self):
        return "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f" % (
            self.step, self.pixel_loss, self.proxy_loss, self.rate_bpp,
            self.total_loss, self.true_mean, self.true_std,
            self.proxy_mean, self.proxy_std,
        )


class AlternatingTrainer:
    """Owns both networks, their optimizers, and the training log."""

    def __init__(self, cfg, stream=None, vmaf=None):
        cfg.validate()
        self.cfg = cfg
        torch.set_num_threads(max(1, cfg.workers))
        torch.manual_seed(cfg.seed)
        self.codec = Codec(filters=cfg.filters)
        self.proxy = ProxyNet(patch_size=cfg.patch_size)
        self.opt_codec = torch.optim.AdamW(
            optimizer_param_groups(self.codec, cfg.weight_decay),
            lr=cfg.lr, betas=(0.9, 0.999),
        )
        self.opt_proxy = torch.optim.AdamW(
            optimizer_param_groups(self.proxy, cfg.weight_decay),
            lr=cfg.lr, betas=(0.9, 0.999),
        )
        self.noise = torch.Generator().manual_seed(cfg.seed + 1)
        if stream is None and cfg.data_dir:
            stream = PatchStream(
                cfg.data_dir, batch_size=cfg.batch_size,
                patch_size=cfg.patch_size, seed=cfg.seed,
            )
        self._batches = iter(stream) if stream is not None else None
        self.vmaf = vmaf
        if vmaf is None and cfg.target_metric is QualityModel.VMAF_EXTERNAL:
            if cfg.vmaf_cmd:
                self.vmaf = VmafClient(cfg.vmaf_cmd, timeout=cfg.vmaf_timeout, workers=cfg.workers)
            else:
                self.vmaf = VmafClient.from_env(timeout=cfg.vmaf_timeout, workers=cfg.workers)
        self.step = 0
        self.records = []
        self.lr_scale = 1.0
        self._halved_once = False

    def _apply_lr(self):
        cutoff = self.cfg.steps - int(self.cfg.steps * self.cfg.lr_final_fraction)
        base = self.cfg.lr if self.step < cutoff else self.cfg.lr_final
        lr = base * self.lr_scale
        for opt in (self.opt_codec, self.opt_proxy):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def _proxy_frozen(self):
        after = self.cfg.freeze_proxy_after
        return after > 0 and self.step >= after

    def _effective_alpha(self):
        # The freshly initialized proxy emits noise; letting it steer the
        # codec before it has fit the metric wrecks the early training
        # phase at short step budgets. Hold the proxy term out of the
        # codec loss until the warm-up has passed.
        if self.step < self.cfg.alpha_warmup:
            return 0.0
        return self.cfg.alpha

    def _codec_phase(self, batch):
        cfg = self.cfg
        for p in self.proxy.parameters():
            p.requires_grad_(False)
        proxy_before = _checksum(self.proxy)
        try:
            y = self.codec.analysis(batch)
            y_noisy = quantize(y, QuantMode.TRAIN_NOISE, self.noise)
            x_hat = self.codec.synthesis(y_noisy)
            bits = rate_bits(y_noisy, self.codec.prior)
            l_pixel = pixel_loss(batch, x_hat)
            l_proxy = proxy_loss(self.proxy, batch, x_hat, cfg.m_max)
            bpp = bits / float(batch.shape[0] * batch.shape[2] * batch.shape[3])
            loss = total_loss(l_proxy, l_pixel, bpp, cfg.rd_lambda, self._effective_alpha())
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite codec loss {float(loss)!r}", step=self.step, phase="codec"
                )
            self.opt_codec.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_codec.step()
        finally:
            for p in self.proxy.parameters():
                p.requires_grad_(True)
        if _checksum(self.proxy) != proxy_before:
            raise TrainingDivergenceError(
                "proxy parameters moved during the codec phase", step=self.step, phase="codec"
            )
        return (
            float(l_pixel.detach()),
            float(l_proxy.detach()),
            float(bpp.detach()),
            float(loss.detach()),
        )

    def _proxy_phase(self, batch):
        cfg = self.cfg
        codec_before = _checksum(self.codec)
        with torch.no_grad():
            y = self.codec.analysis(batch)
            y_noisy = quantize(y, QuantMode.TRAIN_NOISE, self.noise)
            x_hat = self.codec.synthesis(y_noisy)
        truth = target_scores(cfg.target_metric, batch, x_hat, cfg.m_max, vmaf=self.vmaf)
        if not bool(torch.isfinite(truth).all()):
            raise TrainingDivergenceError(
                "non-finite true metric score", step=self.step, phase="proxy"
            )
        if self._proxy_frozen():
            with torch.no_grad():
                predictions = self.proxy(batch, x_hat)
        else:
            _, predictions = proxy_update(
                self.proxy, self.opt_proxy, batch, x_hat, truth, step=self.step
            )
        if _checksum(self.codec) != codec_before:
            raise TrainingDivergenceError(
                "codec parameters moved during the proxy phase", step=self.step, phase="proxy"
            )
        return truth, predictions

    def alternating_step(self, batch):
        """Runs both phases on one batch; returns the StepRecord, or None if
        the step was rejected after a first divergence (lr halved once)."""
        batch = batch_to_tensor(batch)
        self._apply_lr()
        try:
            l_pixel, l_proxy, bpp, total = self._codec_phase(batch)
            truth, predictions = self._proxy_phase(batch)
        except TrainingDivergenceError as exc:
            if self._halved_once:
                raise TrainingDivergenceError(
                    f"diverged again after halving the learning rate: {exc}",
                    step=self.step, phase=exc.phase,
                )
            self._halved_once = True
            self.lr_scale = 0.5
            log.warning("step %d rejected (%s); halving learning rate once", self.step, exc)
            return None
        true_std, true_mean = torch.std_mean(truth, correction=0)
        pred_std, pred_mean = torch.std_mean(predictions, correction=0)
        record = StepRecord(
            step=self.step,
            pixel_loss=l_pixel,
            proxy_loss=l_proxy,
            rate_bpp=bpp,
            total_loss=total,
            true_mean=float(true_mean),
            true_std=float(true_std),
            proxy_mean=float(pred_mean),
            proxy_std=float(pred_std),
        )
        self.records.append(record)
        self.step += 1
        return record

    def _save(self, path):
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        save_checkpoint(path, self.codec, proxy=self.proxy, config=config_mapping(self.cfg))

    def train(self):
        """Runs the configured number of steps; returns the checkpoint path."""
        cfg = self.cfg
        if self._batches is None:
            raise ConfigError("data_dir", "trainer was built without a data stream")
        for line in config_echo(cfg):
            log.info("config: %s", line)
        log_fh = None
        if cfg.log_csv:
            os.makedirs(os.path.dirname(os.path.abspath(cfg.log_csv)), exist_ok=True)
            log_fh = open(cfg.log_csv, "w")
            for line in config_echo(cfg):
                log_fh.write(f"# {line}\n")
            log_fh.write(",".join(LOG_COLUMNS) + "\n")
        try:
            if cfg.steps == 0:
                self._save(cfg.checkpoint)
                return cfg.checkpoint
            while self.step < cfg.steps:
                record = self.alternating_step(next(self._batches))
                if record is None:
                    continue
                if log_fh is not None:
                    log_fh.write(record.csv_row() + "\n")
                if record.step % 500 == 0 or record.step == cfg.steps - 1:
                    log.info(
                        "step %d: pixel %.5f, proxy %.2f, rate %.3f bpp, true %.2f, pred %.2f",
                        record.step, record.pixel_loss, record.proxy_loss,
                        record.rate_bpp, record.true_mean, record.proxy_mean,
                    )
                done = self.step
                if done % cfg.checkpoint_every == 0 and done < cfg.steps:
                    self._save(f"{cfg.checkpoint}.step{done}")
            self._save(cfg.checkpoint)
        finally:
            if log_fh is not None:
                log_fh.close()
        return cfg.checkpoint


def train(cfg, stream=None, vmaf=None):
    """Convenience wrapper: build a trainer, run it, return the checkpoint path."""
    return AlternatingTrainer(cfg, stream=stream, vmaf=vmaf).train()
