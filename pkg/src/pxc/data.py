"""Image loading and the training patch pipeline.

Training batches are cut from a directory of images through a fixed chain:
dequantization noise, a random downsample, a coarse crop, then the final
patch crop. The stream is infinite and fully determined by its seed.
"""

import logging
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, InvalidInputError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")

NOISE_WIDTH = 1.0 / 255.0
SCALE_RANGE = (0.6, 1.0)
COARSE_CROP = 256


def list_images(directory):
    """Sorted paths of all recognizable image files directly in a directory."""
    if not os.path.isdir(directory):
        raise ConfigError("data_dir", f"not a directory: {directory}")
    names = sorted(
        n for n in os.listdir(directory) if n.lower().endswith(IMAGE_EXTENSIONS)
    )
    return [os.path.join(directory, n) for n in names]


def load_image(path):
    """Decodes an image file to float32 RGB (H, W, 3) in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def save_image(path, array):
    """Writes float [0, 1] (H, W, 3) or (3, H, W) data as an 8-bit PNG."""
    if hasattr(array, "detach"):
        array = array.detach().cpu().numpy()
    array = np.asarray(array)
    if array.ndim == 4 and array.shape[0] == 1:
        array = array[0]
    if array.ndim == 3 and array.shape[0] in (1, 3):
        array = np.transpose(array, (1, 2, 0))
    if array.dtype != np.uint8:
        array = np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(array).save(path)


def to_tensor(image):
    """(H, W, 3) float array to a (1, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.transpose(image, (2, 0, 1))))[None]


class PatchStream:
    """Infinite, seeded stream of training batches shaped (B, P, P, 3).

    Every sample picks one source image and applies, in order: uniform pixel
    noise one quantization bin wide (clipped back to [0, 1]), an area
    downsample by a factor drawn from SCALE_RANGE, a coarse random crop, and
    the final patch crop. Undecodable or too-small files are skipped with a
    warning; an empty directory (or one with no usable file) is a
    configuration error.
    """

    def __init__(self, data_dir, batch_size=8, patch_size=128, seed=0):
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.seed = seed
        self.images = []
        self.paths = []
        for path in list_images(data_dir):
            try:
                with Image.open(path) as img:
                    rgb = img.convert("RGB")
                    pixels = np.asarray(rgb, dtype=np.uint8)
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping undecodable image %s (%s)", path, exc)
                continue
            if min(pixels.shape[0], pixels.shape[1]) < patch_size:
                log.warning(
                    "skipping %s: %dx%d is smaller than the %d patch",
                    path, pixels.shape[1], pixels.shape[0], patch_size,
                )
                continue
            self.images.append(pixels)
            self.paths.append(path)
        if not self.images:
            raise ConfigError("data_dir", f"no usable training images in {data_dir}")

    def __len__(self):
        return len(self.images)

    def _sample_patch(self, rng):
        pixels = self.images[rng.integers(len(self.images))]
        x = pixels.astype(np.float32) / 255.0
        noise = (rng.random(x.shape, dtype=np.float32) - 0.5) * NOISE_WIDTH
        x = np.clip(x + noise, 0.0, 1.0)

        factor = rng.uniform(*SCALE_RANGE)
        h, w = x.shape[0], x.shape[1]
        new_h = max(self.patch_size, int(round(h * factor)))
        new_w = max(self.patch_size, int(round(w * factor)))
        if (new_h, new_w) != (h, w):
            t = torch.from_numpy(np.transpose(x, (2, 0, 1)))[None]
            t = F.interpolate(t, size=(new_h, new_w), mode="area")
            x = np.transpose(t[0].numpy(), (1, 2, 0))
            h, w = new_h, new_w

        for crop in (COARSE_CROP, self.patch_size):
            ch, cw = min(crop, h), min(crop, w)
            top = int(rng.integers(h - ch + 1))
            left = int(rng.integers(w - cw + 1))
            x = x[top:top + ch, left:left + cw]
            h, w = ch, cw
        return x

    def batches(self):
        """Yields (B, P, P, 3) float32 arrays forever."""
        rng = np.random.default_rng(self.seed)
        while True:
            patches = [self._sample_patch(rng) for _ in range(self.batch_size)]
            yield np.stack(patches)

    def __iter__(self):
        return self.batches()


def batch_to_tensor(batch):
    """(B, H, W, 3) array to a contiguous (B, 3, H, W) float32 tensor."""
    if torch.is_tensor(batch):
        return batch
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


def pad_to_multiple(x, multiple):
    """Replicate-pads a (B, C, H, W) tensor on the bottom/right edges."""
    h, w = x.shape[-2], x.shape[-1]
    pad_h = (multiple - h % multiple) % multiple
    pad_w = (multiple - w % multiple) % multiple
    if pad_h == 0 and pad_w == 0:
        return x
    if min(h, w) < 1:
        raise InvalidInputError(f"cannot pad empty image of shape {tuple(x.shape)}")
    return F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
