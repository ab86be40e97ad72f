"""On-disk containers: model checkpoints and coded image bitstreams.

Checkpoint layout (all integers big-endian):

    magic 'PXCK' | version u8 | header_len u32 | header JSON | tensor blob

The JSON header carries the resolved config echo, a tensor directory (name
and shape, in blob order), and the hex model digest. Tensor data is raw
little-endian float32, concatenated in directory order, so a load/save
round trip reproduces the section byte for byte.

Bitstream layout:

    magic 'PXC1' | version u8 | width u16 | height u16
    | latent H,W,C u16 each | model digest 8 bytes | payload_len u32 | payload

Width and height are the original (pre-padding) image size; reported bpp is
file bytes * 8 over that pixel count. The digest ties a stream to the
checkpoint that produced it: decoding with any other model is refused.
"""

import dataclasses
import hashlib
import json
import struct
import time

import numpy as np
import torch

from .codec import Codec, QuantMode, quantize
from .data import load_image, pad_to_multiple, save_image, to_tensor
from .errors import (
    CorruptStreamError,
    InvalidInputError,
    UnsupportedSizeError,
    WrongModelError,
)
from .proxy import ProxyNet
from .rangecoder import build_cdf_tables, decode_latent, encode_latent

CHECKPOINT_MAGIC = b"PXCK"
BITSTREAM_MAGIC = b"PXC1"
FORMAT_VERSION = 1
DIGEST_BYTES = 8
PAD_MULTIPLE = 16

_BITSTREAM_HEADER = struct.Struct(">4sBHHHHH8sI")


def _tensor_bytes(array):
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def model_digest(tensors):
    """8-byte digest over the codec tensors, taken in sorted name order.

    Only names under 'codec/' participate, so adding or dropping proxy and
    optimizer sections never invalidates existing bitstreams.
    """
    h = hashlib.sha256()
    for name in sorted(tensors):
        if name.startswith("codec/"):
            h.update(_tensor_bytes(tensors[name]))
    return h.digest()[:DIGEST_BYTES]


def _module_tensors(module, prefix):
    return {
        prefix + name: param.detach().cpu().numpy()
        for name, param in module.state_dict().items()
    }


def codec_digest(codec):
    """Digest of a live codec, equal to what its checkpoint would carry."""
    return model_digest(_module_tensors(codec, "codec/"))


@dataclasses.dataclass
class CheckpointBundle:
    config: dict
    tensors: dict
    digest: bytes

    def build_codec(self):
        """Reconstructs the codec module from the stored tensors."""
        key = "codec/analysis.conv1.weight"
        if key not in self.tensors:
            raise CorruptStreamError("checkpoint holds no codec tensors")
        filters = self.tensors[key].shape[0]
        codec = Codec(filters=filters)
        state = {
            name[len("codec/"):]: torch.from_numpy(arr.copy())
            for name, arr in self.tensors.items()
            if name.startswith("codec/")
        }
        try:
            codec.load_state_dict(state)
        except RuntimeError as exc:
            raise CorruptStreamError(f"checkpoint tensors do not fit the codec: {exc}")
        codec.eval()
        return codec

    def build_proxy(self):
        """Reconstructs the proxy network, or returns None if absent."""
        key = "proxy/fc.weight"
        if key not in self.tensors:
            return None
        flat = self.tensors[key].shape[1]
        side = int(round((flat / ProxyNet.STAGE_CHANNELS[-1]) ** 0.5)) * 8
        net = ProxyNet(patch_size=side)
        state = {
            name[len("proxy/"):]: torch.from_numpy(arr.copy())
            for name, arr in self.tensors.items()
            if name.startswith("proxy/")
        }
        try:
            net.load_state_dict(state)
        except RuntimeError as exc:
            raise CorruptStreamError(f"checkpoint tensors do not fit the proxy: {exc}")
        net.eval()
        return net


def save_checkpoint(path, codec, proxy=None, config=None):
    """Writes codec (and optionally proxy) weights plus a config echo."""
    tensors = _module_tensors(codec, "codec/")
    if proxy is not None:
        tensors.update(_module_tensors(proxy, "proxy/"))
    directory = []
    blob = bytearray()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        directory.append({"name": name, "shape": list(arr.shape)})
        blob += _tensor_bytes(arr)
    header = {
        "config": {k: str(v) for k, v in (config or {}).items()},
        "digest": model_digest(tensors).hex(),
        "tensors": directory,
    }
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(">BI", FORMAT_VERSION, len(encoded)))
        fh.write(encoded)
        fh.write(blob)


def load_checkpoint(path):
    """Reads a checkpoint file back into a CheckpointBundle, verifying it."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 9 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptStreamError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack(">BI", data[4:9])
    if version != FORMAT_VERSION:
        raise CorruptStreamError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 9 + header_len:
        raise CorruptStreamError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[9:9 + header_len].decode("utf-8"))
        directory = header["tensors"]
        stored_digest = bytes.fromhex(header["digest"])
        config = dict(header.get("config", {}))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptStreamError(f"{path}: malformed checkpoint header ({exc})")
    tensors = {}
    offset = 9 + header_len
    for entry in directory:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise CorruptStreamError(f"{path}: truncated tensor data at '{entry['name']}'")
        arr = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr
        offset = end
    if offset != len(data):
        raise CorruptStreamError(f"{path}: {len(data) - offset} trailing bytes after tensors")
    digest = model_digest(tensors)
    if digest != stored_digest:
        raise CorruptStreamError(f"{path}: tensor data does not match the stored digest")
    return CheckpointBundle(config=config, tensors=tensors, digest=digest)


def _check_image_size(height, width):
    if height < 1 or width < 1:
        raise InvalidInputError(f"empty image ({width}x{height})")
    if height > 0xFFFF or width > 0xFFFF:
        raise UnsupportedSizeError(
            f"{width}x{height} exceeds the 65535-pixel header limit"
        )


def write_bitstream(path, width, height, latent_shape, digest, payload):
    c, h, w = latent_shape
    for name, dim in (("channels", c), ("latent height", h), ("latent width", w)):
        if not 1 <= dim <= 0xFFFF:
            raise UnsupportedSizeError(f"latent {name} {dim} does not fit the header")
    header = _BITSTREAM_HEADER.pack(
        BITSTREAM_MAGIC, FORMAT_VERSION, width, height, h, w, c, digest, len(payload)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    return len(header) + len(payload)


def read_bitstream(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _BITSTREAM_HEADER.size or data[:4] != BITSTREAM_MAGIC:
        raise CorruptStreamError(f"{path}: not a coded image (bad magic)")
    magic, version, width, height, h, w, c, digest, payload_len = _BITSTREAM_HEADER.unpack(
        data[:_BITSTREAM_HEADER.size]
    )
    if version != FORMAT_VERSION:
        raise CorruptStreamError(f"{path}: unsupported bitstream version {version}")
    if min(width, height, c, h, w) < 1:
        raise CorruptStreamError(f"{path}: zero dimension in header")
    payload = data[_BITSTREAM_HEADER.size:]
    if len(payload) != payload_len:
        raise CorruptStreamError(
            f"{path}: payload is {len(payload)} bytes, header declares {payload_len}"
        )
    expected_latent = (-(-height // PAD_MULTIPLE), -(-width // PAD_MULTIPLE))
    if (h, w) != expected_latent:
        raise CorruptStreamError(
            f"{path}: latent grid {(h, w)} inconsistent with image size {(width, height)}"
        )
    return width, height, (c, h, w), digest, payload


@dataclasses.dataclass
class EncodeStats:
    bpp: float
    file_bytes: int
    latent_shape: tuple
    seconds: float


@dataclasses.dataclass
class DecodeStats:
    width: int
    height: int
    seconds: float


@torch.no_grad()
def encode_array(codec, image, tables=None, digest=None):
    """Codes one (H, W, 3) float image; returns (header+payload bytes, stats).

    Passing prebuilt CDF ``tables`` (and the codec ``digest``) lifts their
    construction out of the timed section, which is what batch evaluation
    wants.
    """
    x = to_tensor(image)
    height, width = x.shape[-2], x.shape[-1]
    _check_image_size(height, width)
    if tables is None:
        tables = build_cdf_tables(codec.prior)
    if digest is None:
        digest = codec_digest(codec)
    start = time.perf_counter()
    padded = pad_to_multiple(x, PAD_MULTIPLE)
    y = quantize(codec.analysis(padded), QuantMode.INFER_ROUND)
    latent = y[0].cpu().numpy().astype(np.int64)
    payload = encode_latent(latent, tables)
    seconds = time.perf_counter() - start
    header = _BITSTREAM_HEADER.pack(
        BITSTREAM_MAGIC, FORMAT_VERSION, width, height,
        latent.shape[1], latent.shape[2], latent.shape[0], digest, len(payload),
    )
    blob = header + payload
    stats = EncodeStats(
        bpp=8.0 * len(blob) / (width * height),
        file_bytes=len(blob),
        latent_shape=tuple(latent.shape),
        seconds=seconds,
    )
    return blob, stats


@torch.no_grad()
def decode_array(codec, blob, tables=None, digest=None):
    """Inverse of encode_array; returns ((H, W, 3) float image, stats)."""
    if len(blob) < _BITSTREAM_HEADER.size or blob[:4] != BITSTREAM_MAGIC:
        raise CorruptStreamError("not a coded image (bad magic)")
    magic, version, width, height, h, w, c, stream_digest, payload_len = (
        _BITSTREAM_HEADER.unpack(blob[:_BITSTREAM_HEADER.size])
    )
    if version != FORMAT_VERSION:
        raise CorruptStreamError(f"unsupported bitstream version {version}")
    if min(width, height, c, h, w) < 1:
        raise CorruptStreamError("zero dimension in bitstream header")
    if (h, w) != (-(-height // PAD_MULTIPLE), -(-width // PAD_MULTIPLE)):
        raise CorruptStreamError(
            f"latent grid {(h, w)} inconsistent with image size {(width, height)}"
        )
    payload = blob[_BITSTREAM_HEADER.size:]
    if len(payload) != payload_len:
        raise CorruptStreamError(
            f"payload is {len(payload)} bytes, header declares {payload_len}"
        )
    if digest is None:
        digest = codec_digest(codec)
    if stream_digest != digest:
        raise WrongModelError(
            f"bitstream was made with model {stream_digest.hex()}, "
            f"loaded model is {digest.hex()}"
        )
    if tables is None:
        tables = build_cdf_tables(codec.prior)
    start = time.perf_counter()
    latent = decode_latent(payload, tables, (c, h, w))
    y = torch.from_numpy(latent.astype(np.float32))[None]
    x_hat = torch.clamp(codec.synthesis(y), 0.0, 1.0)
    x_hat = x_hat[..., :height, :width]
    seconds = time.perf_counter() - start
    image = x_hat[0].permute(1, 2, 0).cpu().numpy()
    return image, DecodeStats(width=width, height=height, seconds=seconds)


def encode_image(codec, image_path, out_path, tables=None, digest=None):
    """File-to-file encode; returns EncodeStats."""
    image = load_image(image_path)
    blob, stats = encode_array(codec, image, tables=tables, digest=digest)
    with open(out_path, "wb") as fh:
        fh.write(blob)
    return stats


def decode_image(codec, bitstream_path, out_path, tables=None, digest=None):
    """File-to-file decode; writes an 8-bit PNG and returns DecodeStats."""
    with open(bitstream_path, "rb") as fh:
        blob = fh.read()
    # Re-run the path checks so errors carry the file name.
    try:
        image, stats = decode_array(codec, blob, tables=tables, digest=digest)
    except CorruptStreamError as exc:
        raise CorruptStreamError(f"{bitstream_path}: {exc}")
    save_image(out_path, image)
    return stats
