"""Client for an external VMAF scoring tool.

The tool is configured as a command template containing ``{ref}``, ``{dist}``
and ``{out}`` placeholders, e.g.::

    vmaf --reference {ref} --distorted {dist} --json --output {out}

For each scored pair the client writes the two images as 8-bit PNGs into a
temporary directory, substitutes the paths plus a JSON report path into the
template, runs the command without a shell, and pulls the pooled VMAF score
out of the report.
"""

import json
import os
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from .errors import ConfigError, ExternalToolError, ExternalToolTimeout

ENV_VAR = "VMAF_CMD"
DEFAULT_TIMEOUT = 120.0


def _to_uint8_image(array):
    """Accepts (C,H,W) or (H,W,C) float [0,1] (torch or numpy), returns HWC uint8."""
    if hasattr(array, "detach"):
        array = array.detach().cpu().numpy()
    array = np.asarray(array)
    if array.ndim != 3:
        raise ExternalToolError(f"expected a 3D image, got shape {array.shape}")
    if array.shape[0] in (1, 3) and array.shape[2] not in (1, 3):
        array = np.transpose(array, (1, 2, 0))
    return np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)


def extract_pooled_score(report):
    """Finds the pooled VMAF score in a JSON report, tolerating layout variants."""
    try:
        return float(report["pooled_metrics"]["vmaf"]["mean"])
    except (KeyError, TypeError):
        pass
    try:
        frames = report["frames"]
        scores = [float(f["metrics"]["vmaf"]) for f in frames]
        if scores:
            return sum(scores) / len(scores)
    except (KeyError, TypeError):
        pass
    try:
        return float(report["vmaf"])
    except (KeyError, TypeError, ValueError):
        raise ExternalToolError(
            f"could not locate a VMAF score in tool report (keys: {sorted(report)[:8]})"
        )


class VmafClient:
    """Runs the configured VMAF command, optionally over several processes."""

    def __init__(self, cmd_template, timeout=DEFAULT_TIMEOUT, workers=1):
        if not cmd_template or not cmd_template.strip():
            raise ConfigError("vmaf_cmd", "empty command template")
        for placeholder in ("{ref}", "{dist}", "{out}"):
            if placeholder not in cmd_template:
                raise ConfigError("vmaf_cmd", f"template is missing the {placeholder} placeholder")
        self.cmd_template = cmd_template
        self.timeout = timeout
        self.workers = max(1, int(workers))

    @classmethod
    def from_env(cls, timeout=DEFAULT_TIMEOUT, workers=1):
        template = os.environ.get(ENV_VAR)
        if not template:
            raise ConfigError("vmaf_cmd", f"no template configured and ${ENV_VAR} is unset")
        return cls(template, timeout=timeout, workers=workers)

    def _run_one(self, ref, dist):
        with tempfile.TemporaryDirectory(prefix="vmaf_") as workdir:
            ref_path = os.path.join(workdir, "ref.png")
            dist_path = os.path.join(workdir, "dist.png")
            out_path = os.path.join(workdir, "report.json")
            Image.fromarray(_to_uint8_image(ref)).save(ref_path)
            Image.fromarray(_to_uint8_image(dist)).save(dist_path)
            cmd = self.cmd_template.format(ref=ref_path, dist=dist_path, out=out_path)
            argv = shlex.split(cmd)
            try:
                proc = subprocess.run(
                    argv, capture_output=True, text=True, timeout=self.timeout
                )
            except subprocess.TimeoutExpired:
                raise ExternalToolTimeout(
                    f"VMAF tool exceeded {self.timeout:.0f}s: {argv[0]}"
                )
            except FileNotFoundError:
                raise ExternalToolError(f"VMAF tool not found: {argv[0]}")
            if proc.returncode != 0:
                raise ExternalToolError(
                    f"VMAF tool exited with status {proc.returncode}",
                    stdout=proc.stdout,
                    stderr=proc.stderr,
                )
            try:
                with open(out_path) as fh:
                    report = json.load(fh)
            except FileNotFoundError:
                raise ExternalToolError(
                    "VMAF tool succeeded but wrote no report",
                    stdout=proc.stdout,
                    stderr=proc.stderr,
                )
            except json.JSONDecodeError as exc:
                raise ExternalToolError(f"VMAF report is not valid JSON: {exc}")
            return extract_pooled_score(report)

    def score_pair(self, ref, dist):
        """Scores one (reference, distorted) image pair."""
        return self._run_one(ref, dist)

    def score_batch(self, refs, dists):
        """Scores pairs concurrently; the result list follows the input order."""
        if len(refs) != len(dists):
            raise ExternalToolError(
                f"batch length mismatch: {len(refs)} references vs {len(dists)} distorted"
            )
        if self.workers == 1 or len(refs) == 1:
            return [self._run_one(r, d) for r, d in zip(refs, dists)]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(self._run_one, refs, dists))
