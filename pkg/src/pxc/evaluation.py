"""Rate-distortion evaluation: sweeps, BD-rate, reports and runtime timing.

RD points travel as CSV with the fixed column set

    codec,image,bpp,psnr,ssim,msssim,vmaf

which doubles as plot data (bpp on x, any metric on y, one series per
codec). External codecs are compared by ingesting their points from the same
CSV shape rather than by invoking them.
"""

import csv
import dataclasses
import io
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch
from scipy import interpolate

from .container import decode_array, encode_array, load_checkpoint
from .data import list_images, load_image, to_tensor
from .errors import ConfigError, InvalidInputError, NoOverlapError
from .metrics import ms_ssim, psnr, ssim
from .rangecoder import build_cdf_tables

log = logging.getLogger(__name__)

CSV_COLUMNS = ("codec", "image", "bpp", "psnr", "ssim", "msssim", "vmaf")
METRIC_COLUMNS = ("psnr", "ssim", "msssim", "vmaf")
BD_SAMPLES = 1000
MIN_CURVE_POINTS = 4


@dataclasses.dataclass
class RDPoint:
    codec: str
    image: str
    bpp: float
    psnr: float
    ssim: float
    msssim: float
    vmaf: float = None

    def score(self, metric):
        value = getattr(self, metric)
        return None if value is None else float(value)


def _format_score(value):
    return "" if value is None else "%.6f" % value


def write_rd_csv(path, points):
    """Writes points sorted by (codec, image, bpp); stable byte-for-byte."""
    ordered = sorted(points, key=lambda p: (p.codec, p.image, p.bpp))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for p in ordered:
            fh.write(
                "%s,%s,%.6f,%s,%s,%s,%s\n"
                % (
                    p.codec, p.image, p.bpp,
                    _format_score(p.psnr), _format_score(p.ssim),
                    _format_score(p.msssim), _format_score(p.vmaf),
                )
            )


def read_rd_csv(path):
    """Parses an RD CSV; empty metric cells become None."""
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InvalidInputError(f"{path}: missing CSV columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                bpp = float(row["bpp"])
                scores = {
                    m: (float(row[m]) if row[m] not in (None, "") else None)
                    for m in METRIC_COLUMNS
                }
            except (TypeError, ValueError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad numeric value ({exc})")
            if bpp <= 0 or not math.isfinite(bpp):
                raise InvalidInputError(f"{path}:{lineno}: bpp must be positive and finite")
            for m, v in scores.items():
                if v is not None and not math.isfinite(v):
                    raise InvalidInputError(f"{path}:{lineno}: non-finite {m} score")
            points.append(RDPoint(codec=row["codec"], image=row["image"], bpp=bpp, **scores))
    return points


def group_curves(points):
    """Groups points into {codec: {image: [points sorted by bpp]}}."""
    curves = {}
    for p in points:
        curves.setdefault(p.codec, {}).setdefault(p.image, []).append(p)
    for images in curves.values():
        for image_points in images.values():
            image_points.sort(key=lambda p: p.bpp)
    return curves


def _curve_arrays(points, metric):
    """(rates, distortions) for one curve, dropping points without the metric."""
    pairs = [(p.bpp, p.score(metric)) for p in points if p.score(metric) is not None]
    if len(pairs) < MIN_CURVE_POINTS:
        raise InvalidInputError(
            f"curve has {len(pairs)} usable points for '{metric}', needs {MIN_CURVE_POINTS}"
        )
    rates = np.array([r for r, _ in pairs], dtype=np.float64)
    dists = np.array([d for _, d in pairs], dtype=np.float64)
    if np.any(rates <= 0):
        raise InvalidInputError("curve contains non-positive rates")
    # Strictly increasing distortion is required for interpolation; collapse
    # duplicates to the cheapest point and re-sort.
    order = np.lexsort((rates, dists))
    rates, dists = rates[order], dists[order]
    keep = np.ones(len(dists), dtype=bool)
    keep[1:] = np.diff(dists) > 0
    if not keep.all():
        log.warning(
            "dropping %d duplicate-distortion point(s) from a curve (keeping lowest rate)",
            int((~keep).sum()),
        )
        rates, dists = rates[keep], dists[keep]
    if len(dists) < 2:
        raise InvalidInputError("curve degenerates to fewer than 2 distinct distortions")
    return rates, dists


def bd_rate(ref_points, test_points, metric):
    """Average bitrate change (percent) of test vs reference at equal quality.

    log10(rate) is interpolated as a monotone piecewise-cubic function of the
    chosen metric for both curves, the difference is averaged over the shared
    quality interval with a 1000-sample trapezoid rule, and the result maps
    back through 10**delta - 1. Negative means the test codec spends fewer
    bits for the same quality.
    """
    ref_rates, ref_dists = _curve_arrays(ref_points, metric)
    test_rates, test_dists = _curve_arrays(test_points, metric)
    lo = max(ref_dists.min(), test_dists.min())
    hi = min(ref_dists.max(), test_dists.max())
    if not lo < hi:
        raise NoOverlapError(
            (float(ref_dists.min()), float(ref_dists.max())),
            (float(test_dists.min()), float(test_dists.max())),
        )
    samples = np.linspace(lo, hi, BD_SAMPLES)
    ref_log = interpolate.pchip_interpolate(ref_dists, np.log10(ref_rates), samples)
    test_log = interpolate.pchip_interpolate(test_dists, np.log10(test_rates), samples)
    delta = np.trapezoid(test_log - ref_log, samples) / (hi - lo)
    return float((10.0 ** delta - 1.0) * 100.0)


@dataclasses.dataclass
class BDRateReport:
    baseline: str
    # {codec: {metric: {"mean": float|None, "per_image": {...}, "skipped": {...}}}}
    results: dict

    def to_json(self):
        return json.dumps(
            {"baseline": self.baseline, "results": self.results},
            sort_keys=True, indent=2,
        )

    def to_text(self):
        out = io.StringIO()
        out.write(f"BD-rate vs baseline '{self.baseline}' (negative = bits saved)\n")
        header = f"{'codec':<20}" + "".join(f"{m:>10}" for m in METRIC_COLUMNS)
        out.write(header + "\n")
        for codec in sorted(self.results):
            row = f"{codec:<20}"
            for metric in METRIC_COLUMNS:
                cell = self.results[codec].get(metric, {})
                mean = cell.get("mean")
                row += f"{mean:>9.2f}%" if mean is not None else f"{'-':>10}"
            out.write(row + "\n")
            for metric in METRIC_COLUMNS:
                skipped = self.results[codec].get(metric, {}).get("skipped", {})
                for image, reason in sorted(skipped.items()):
                    out.write(f"    [{metric}] {image} skipped: {reason}\n")
        return out.getvalue()


def evaluate_report(points, baseline, metrics=METRIC_COLUMNS):
    """Per-image BD-rates against a baseline codec, averaged per codec/metric.

    Images whose curves cannot be compared (no quality overlap, too few
    usable points) are listed under "skipped" and left out of the mean.
    """
    curves = group_curves(points)
    if baseline not in curves:
        raise ConfigError("baseline", f"no points for baseline codec '{baseline}'")
    base_images = curves[baseline]
    results = {}
    for codec in sorted(curves):
        per_codec = {}
        for metric in metrics:
            per_image = {}
            skipped = {}
            for image in sorted(curves[codec]):
                if image not in base_images:
                    raise ConfigError(
                        "baseline", f"baseline '{baseline}' has no curve for image '{image}'"
                    )
                try:
                    per_image[image] = bd_rate(
                        base_images[image], curves[codec][image], metric
                    )
                except NoOverlapError as exc:
                    skipped[image] = f"no quality overlap ({exc.ref_range} vs {exc.test_range})"
                except InvalidInputError as exc:
                    skipped[image] = str(exc)
            mean = sum(per_image.values()) / len(per_image) if per_image else None
            per_codec[metric] = {"mean": mean, "per_image": per_image, "skipped": skipped}
        results[codec] = per_codec
    return BDRateReport(baseline=baseline, results=results)


def _codec_label(path, bundle):
    lam = bundle.config.get("lambda")
    stem = os.path.splitext(os.path.basename(path))[0]
    return f"{stem}" if lam is None else f"{stem}(lambda={lam})"


def _score_pair(ref_t, dist_t, vmaf, ref_img, dist_img):
    values = {
        "psnr": float(psnr(ref_t, dist_t)[0]),
        "ssim": float(ssim(ref_t, dist_t)[0]),
        "msssim": float(ms_ssim(ref_t, dist_t)[0]),
        "vmaf": None,
    }
    if vmaf is not None:
        values["vmaf"] = float(vmaf.score_pair(ref_img, dist_img))
    return values


def rd_sweep(checkpoint_paths, image_dir, out_csv=None, workers=1, vmaf=None, labels=None):
    """Codes every image through every checkpoint and scores the results.

    Returns the RD points (sorted as the CSV orders them) and optionally
    writes the CSV. Without a VMAF client the vmaf column is left empty and a
    warning is logged once; the other metrics are always computed.
    """
    if len(checkpoint_paths) < MIN_CURVE_POINTS:
        raise ConfigError(
            "checkpoints",
            f"need at least {MIN_CURVE_POINTS} checkpoints for usable curves, "
            f"got {len(checkpoint_paths)}",
        )
    image_paths = list_images(image_dir)
    if not image_paths:
        raise ConfigError("image_dir", f"no images found in {image_dir}")
    if vmaf is None:
        log.warning("no VMAF tool configured; vmaf column will be empty")
    if labels is not None and len(labels) != len(checkpoint_paths):
        raise ConfigError("labels", "one label per checkpoint required")

    points = []
    for idx, ckpt_path in enumerate(checkpoint_paths):
        bundle = load_checkpoint(ckpt_path)
        codec = bundle.build_codec()
        tables = build_cdf_tables(codec.prior)
        label = labels[idx] if labels is not None else _codec_label(ckpt_path, bundle)

        def one_image(image_path):
            image = load_image(image_path)
            blob, stats = encode_array(codec, image, tables=tables, digest=bundle.digest)
            recon, _ = decode_array(codec, blob, tables=tables, digest=bundle.digest)
            scores = _score_pair(
                to_tensor(image), to_tensor(recon), vmaf, image, recon
            )
            name = os.path.splitext(os.path.basename(image_path))[0]
            return RDPoint(codec=label, image=name, bpp=stats.bpp, **scores)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                points.extend(pool.map(one_image, image_paths))
        else:
            points.extend(one_image(p) for p in image_paths)
        log.info("swept %s over %d images", label, len(image_paths))

    points.sort(key=lambda p: (p.codec, p.image, p.bpp))
    if out_csv:
        write_rd_csv(out_csv, points)
    return points


def runtime_bench(checkpoint_path, image_dir, repetitions=3, workers=1):
    """Mean encode/decode wall-clock per image, model load time excluded.

    The checkpoint is loaded (and the CDF tables built) exactly once, timed
    separately; per-image numbers cover only the coding work.
    """
    torch.set_num_threads(max(1, workers))
    image_paths = list_images(image_dir)
    if not image_paths:
        raise ConfigError("image_dir", f"no images found in {image_dir}")

    t0 = time.perf_counter()
    bundle = load_checkpoint(checkpoint_path)
    codec = bundle.build_codec()
    tables = build_cdf_tables(codec.prior)
    load_seconds = time.perf_counter() - t0

    encode_ms, decode_ms = [], []
    per_image = {}
    for image_path in image_paths:
        image = load_image(image_path)
        name = os.path.splitext(os.path.basename(image_path))[0]
        enc_samples, dec_samples = [], []
        for _ in range(repetitions):
            blob, enc_stats = encode_array(codec, image, tables=tables, digest=bundle.digest)
            _, dec_stats = decode_array(codec, blob, tables=tables, digest=bundle.digest)
            enc_samples.append(enc_stats.seconds * 1000.0)
            dec_samples.append(dec_stats.seconds * 1000.0)
        encode_ms.extend(enc_samples)
        decode_ms.extend(dec_samples)
        per_image[name] = {
            "encode_ms": sum(enc_samples) / len(enc_samples),
            "decode_ms": sum(dec_samples) / len(dec_samples),
        }
    return {
        "hardware": {
            "platform": platform.platform(),
            "machine": platform.machine(),
            "cpu_count": os.cpu_count(),
            "torch_threads": torch.get_num_threads(),
            "torch_version": torch.__version__,
        },
        "checkpoint": os.path.basename(checkpoint_path),
        "images": len(image_paths),
        "repetitions": repetitions,
        "load_seconds": load_seconds,
        "encode_ms_mean": sum(encode_ms) / len(encode_ms),
        "decode_ms_mean": sum(decode_ms) / len(decode_ms),
        "per_image": per_image,
    }
