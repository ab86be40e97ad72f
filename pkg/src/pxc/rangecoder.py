"""Range coder and quantized CDF tables for latent transport.

Symbols are coded against per-channel frequency tables quantized to a fixed
16-bit total. Every table carries a final escape slot; values outside the
table's integer support are coded as the escape followed by the raw value in
four uniformly-coded bytes (a fixed 32-bit cost). The coder itself is a
carry-propagating range coder with a 48-bit active window and byte-wise
renormalization, so its overhead over the table entropy is a few bytes per
stream plus a vanishing truncation loss.
"""

import bisect

import numpy as np
import torch

from .errors import CorruptStreamError, InvalidInputError

PRECISION = 16
TOTAL = 1 << PRECISION

RANGE_BITS = 48
RANGE_MASK = (1 << RANGE_BITS) - 1
RENORM_THRESHOLD = 1 << (RANGE_BITS - 8)
_TOP_BYTE_SHIFT = RANGE_BITS - 8

ESCAPE_RAW_BITS = 32
_RAW_OFFSET = 1 << 31
_BYTE_FREQ = TOTAL // 256

SEARCH_LIMIT = 1 << 20
DEFAULT_MAX_SYMBOLS = 4096
TAIL_MASS = 2.0 ** -15


class ChannelCdf:
    """Quantized distribution of one latent channel.

    ``freqs`` holds one integer frequency per in-support symbol plus the
    escape slot last; frequencies are all >= 1 and sum exactly to TOTAL, so
    the cumulative array is strictly increasing. ``offset`` is the integer
    value the first slot represents.
    """

    __slots__ = ("offset", "freqs", "cum")

    def __init__(self, offset, freqs):
        freqs = [int(f) for f in freqs]
        if len(freqs) < 2:
            raise InvalidInputError("table needs at least one symbol plus the escape slot")
        if any(f < 1 for f in freqs):
            raise InvalidInputError("every table frequency must be >= 1")
        if sum(freqs) != TOTAL:
            raise InvalidInputError(
                f"table frequencies sum to {sum(freqs)}, expected {TOTAL}"
            )
        self.offset = int(offset)
        self.freqs = freqs
        cum = [0]
        for f in freqs:
            cum.append(cum[-1] + f)
        self.cum = cum

    @property
    def num_symbols(self):
        """In-support symbol count, escape excluded."""
        return len(self.freqs) - 1

    @property
    def escape_index(self):
        return len(self.freqs) - 1

    def index_of(self, value):
        """Slot index for an integer value; the escape index if out of support."""
        idx = value - self.offset
        if 0 <= idx < self.num_symbols:
            return idx
        return self.escape_index


class RangeEncoder:
    """Carry-propagating range encoder, byte-oriented output."""

    def __init__(self):
        self._low = 0
        self._range = RANGE_MASK
        self._cache = 0
        self._pending = 0
        self._out = bytearray()
        self._finished = False

    def _shift(self):
        low = self._low
        if low < (0xFF << _TOP_BYTE_SHIFT) or low > RANGE_MASK:
            carry = low >> RANGE_BITS
            self._out.append((self._cache + carry) & 0xFF)
            if self._pending:
                self._out.extend(bytes([(0xFF + carry) & 0xFF]) * self._pending)
                self._pending = 0
            self._cache = (low >> _TOP_BYTE_SHIFT) & 0xFF
        else:
            self._pending += 1
        self._low = (low << 8) & RANGE_MASK

    def encode(self, cum_lo, freq, total=TOTAL):
        if self._finished:
            raise InvalidInputError("encoder already finished")
        r = self._range // total
        self._low += r * cum_lo
        self._range = r * freq
        while self._range < RENORM_THRESHOLD:
            self._shift()
            self._range <<= 8

    def encode_value(self, table, value):
        """Codes one integer against a channel table, escaping if needed."""
        idx = table.index_of(value)
        self.encode(table.cum[idx], table.freqs[idx])
        if idx == table.escape_index:
            raw = value + _RAW_OFFSET
            if not 0 <= raw < (1 << 32):
                raise InvalidInputError(f"latent value {value} exceeds the raw escape range")
            for shift in (24, 16, 8, 0):
                b = (raw >> shift) & 0xFF
                self.encode(b * _BYTE_FREQ, _BYTE_FREQ)

    def finish(self):
        """Flushes the window; returns the complete byte stream."""
        if not self._finished:
            for _ in range(RANGE_BITS // 8 + 1):
                self._shift()
            self._finished = True
        return bytes(self._out)


class RangeDecoder:
    """Mirror of RangeEncoder; reads symbols back out of a byte stream."""

    def __init__(self, data):
        if len(data) < RANGE_BITS // 8 + 1:
            raise CorruptStreamError(
                f"range-coded payload of {len(data)} bytes is shorter than the coder window"
            )
        self._data = data
        self._pos = 1  # the first byte is the encoder's cache priming byte
        self._range = RANGE_MASK
        self._code = 0
        self._r = 0
        for _ in range(RANGE_BITS // 8):
            self._code = (self._code << 8) | self._next_byte()

    def _next_byte(self):
        if self._pos >= len(self._data):
            raise CorruptStreamError("range-coded payload truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def _target(self, total=TOTAL):
        self._r = self._range // total
        t = self._code // self._r
        return t if t < total else total - 1

    def _advance(self, cum_lo, freq):
        self._code -= self._r * cum_lo
        self._range = self._r * freq
        while self._range < RENORM_THRESHOLD:
            self._code = ((self._code << 8) | self._next_byte()) & RANGE_MASK
            self._range <<= 8

    def decode_value(self, table):
        """Decodes one integer coded with RangeEncoder.encode_value."""
        t = self._target()
        idx = bisect.bisect_right(table.cum, t) - 1
        self._advance(table.cum[idx], table.freqs[idx])
        if idx != table.escape_index:
            return table.offset + idx
        raw = 0
        for _ in range(4):
            b = self._target() // _BYTE_FREQ
            self._advance(b * _BYTE_FREQ, _BYTE_FREQ)
            raw = (raw << 8) | b
        return raw - _RAW_OFFSET


def quantize_pmf(pmf, total=TOTAL):
    """Scales raw probabilities to integer frequencies summing to ``total``.

    One count is reserved for every slot up front so no frequency is zero;
    the rest is apportioned by largest remainder, which keeps the rounding
    deterministic and the KL gap to the input distribution small.
    """
    p = np.maximum(np.asarray(pmf, dtype=np.float64), 0.0)
    n = p.size
    if n == 0:
        raise InvalidInputError("empty pmf")
    if n > total:
        raise InvalidInputError(f"{n} slots cannot each get >= 1 of {total} counts")
    s = p.sum()
    budget = total - n
    if s <= 0.0:
        scaled = np.full(n, budget / n)
    else:
        scaled = p / s * budget
    base = np.floor(scaled).astype(np.int64)
    remainder = budget - int(base.sum())
    if remainder:
        order = np.argsort(-(scaled - base), kind="stable")
        base[order[:remainder]] += 1
    return base + 1


@torch.no_grad()
def build_cdf_tables(prior, tail_mass=TAIL_MASS, max_symbols=DEFAULT_MAX_SYMBOLS):
    """Builds one quantized table per latent channel from a factorized prior.

    The integer support covers all but ``tail_mass`` of probability on each
    side (widened to always include zero, clipped to ``max_symbols`` around
    the median); whatever mass falls outside goes to the escape slot.
    """
    channels = prior.channels
    limit = SEARCH_LIMIT

    def cdf_at(values):
        # values: (C,) int64 evaluated at value - 0.5 or + 0.5 by the caller
        return prior.cdf(values.to(torch.float32).unsqueeze(1)).squeeze(1).double()

    def largest_true(pred):
        a = torch.full((channels,), -limit, dtype=torch.int64)
        b = torch.full((channels,), limit, dtype=torch.int64)
        pa = pred(a)
        pb = pred(b)
        a = torch.where(pb, b, a)
        for _ in range(2 * limit.bit_length()):
            if torch.all(b - a <= 1):
                break
            mid = (a + b) // 2
            pm = pred(mid)
            a = torch.where(pm & pa, mid, a)
            b = torch.where(pm & pa, b, mid)
        return a

    lower = largest_true(lambda v: cdf_at(v.double() - 0.5) <= tail_mass)
    # smallest v with upper-tail mass <= tail_mass, via the mirrored search
    neg_upper = largest_true(lambda v: (1.0 - cdf_at((-v).double() + 0.5)) <= tail_mass)
    upper = -neg_upper

    lower = torch.minimum(lower, torch.zeros_like(lower))
    upper = torch.maximum(upper, torch.zeros_like(upper))

    width = upper - lower + 1
    if int(width.max()) > max_symbols:
        median = largest_true(lambda v: cdf_at(v.double() - 0.5) <= 0.5)
        half = max_symbols // 2
        lower = torch.maximum(lower, median - half)
        upper = torch.minimum(upper, lower + max_symbols - 1)
        upper = torch.maximum(upper, lower)

    max_width = int((upper - lower + 1).max())
    grid = lower.unsqueeze(1) + torch.arange(max_width, dtype=torch.int64).unsqueeze(0)
    grid_f = grid.to(torch.float32)
    cdf_hi = prior.cdf(grid_f + 0.5).double()
    cdf_lo = prior.cdf(grid_f - 0.5).double()
    pmf = (cdf_hi - cdf_lo).clamp_min(0.0).cpu().numpy()

    lower_np = lower.cpu().numpy()
    upper_np = upper.cpu().numpy()
    edge_lo = prior.cdf(lower.to(torch.float32).unsqueeze(1) - 0.5).double().squeeze(1).cpu().numpy()
    edge_hi = prior.cdf(upper.to(torch.float32).unsqueeze(1) + 0.5).double().squeeze(1).cpu().numpy()

    tables = []
    for c in range(channels):
        n = int(upper_np[c] - lower_np[c] + 1)
        p = pmf[c, :n]
        escape_mass = max(0.0, float(edge_lo[c]) + max(0.0, 1.0 - float(edge_hi[c])))
        freqs = quantize_pmf(np.concatenate([p, [escape_mass]]))
        tables.append(ChannelCdf(int(lower_np[c]), freqs))
    return tables


def encode_latent(latent, tables):
    """Range-codes an integer latent (C, H, W) channel by channel."""
    if torch.is_tensor(latent):
        latent = latent.detach().cpu().numpy()
    latent = np.asarray(latent)
    if latent.ndim != 3 or latent.shape[0] != len(tables):
        raise InvalidInputError(
            f"latent shape {latent.shape} does not match {len(tables)} channel tables"
        )
    if not np.all(latent == np.rint(latent)):
        raise InvalidInputError("latent must be integer-valued; quantize it first")
    enc = RangeEncoder()
    values = latent.astype(np.int64)
    for c in range(values.shape[0]):
        table = tables[c]
        for v in values[c].ravel():
            enc.encode_value(table, int(v))
    return enc.finish()


def decode_latent(data, tables, shape):
    """Inverse of encode_latent; ``shape`` is the (C, H, W) latent shape."""
    c, h, w = shape
    if c != len(tables):
        raise CorruptStreamError(
            f"stream declares {c} channels but the model provides {len(tables)} tables"
        )
    dec = RangeDecoder(data)
    out = np.empty((c, h * w), dtype=np.int64)
    for ch in range(c):
        table = tables[ch]
        row = out[ch]
        for i in range(h * w):
            row[i] = dec.decode_value(table)
    return out.reshape(c, h, w)


def table_bits(latent, tables):
    """Ideal code length of a latent under the quantized tables, in bits.

    Escapes cost their slot probability plus the fixed 32 raw bits. The
    actual coder output exceeds this by only its small fixed overhead.
    """
    latent = np.asarray(latent).astype(np.int64)
    log_total = np.log2(TOTAL)
    bits = 0.0
    for c in range(latent.shape[0]):
        table = tables[c]
        for v in latent[c].ravel():
            idx = table.index_of(int(v))
            bits += log_total - np.log2(table.freqs[idx])
            if idx == table.escape_index:
                bits += ESCAPE_RAW_BITS
    return bits
