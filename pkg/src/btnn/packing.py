"""Bit-packed code planes and multiplication-free inference kernels.

A code plane packs into one bit per element (sign) plus, for planes that may
contain zeros, a second bit (nonzero mask).  Elements map to bits LSB-first
inside 64-bit little-endian words; trailing pad bits are zero.  Dot products
and convolutions over packed weights reduce to masked sums of activations:
``sum_i code_i * a_i = 2*S_pos - S_nonzero`` per plane, then one multiply by
the scale per output.  Accumulation is in float64, results are float32.

Serialized layout (all integers little-endian):

    magic   4 bytes  b"BQT1"
    u8      scheme id (1=binary, 2=ternary, 3=bt)
    u8      granularity (0=per-tensor, 1=per-channel)
    u8      plane count
    u8      reserved, zero
    u32     ndim, then u32 per dimension
    u32     scale count, then f32 per scale
    per plane: u8 has_mask, sign words (u64), mask words if has_mask
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .convops import im2col
from .quant import Granularity, QuantKind, QuantScheme, QuantTensor

MAGIC = b"BQT1"
WORD_SIZE = 64
WORD_DTYPE = np.dtype("<u8")

_SCHEME_IDS = {QuantKind.BINARY: 1, QuantKind.TERNARY: 2, QuantKind.BT: 3}
_IDS_SCHEME = {v: k for k, v in _SCHEME_IDS.items()}


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean vector into little-endian uint64 words, LSB-first."""
    raw = np.packbits(np.ascontiguousarray(bits, dtype=bool), bitorder="little")
    n_words = (bits.size + WORD_SIZE - 1) // WORD_SIZE
    padded = np.zeros(n_words * 8, dtype=np.uint8)
    padded[: raw.size] = raw
    return padded.view(WORD_DTYPE)


def _unpack_bits(words: np.ndarray, length: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype=WORD_DTYPE).view(np.uint8)
    return np.unpackbits(raw, bitorder="little", count=length).astype(bool)


@dataclass(frozen=True)
class PackedPlane:
    """One bit-packed code plane.

    ``nonzero_mask`` is None for planes guaranteed free of zero codes;
    sign bits of zero-coded elements are stored as 0 so packing is canonical.
    """

    sign_bits: np.ndarray
    nonzero_mask: np.ndarray | None
    length: int
    word_size: int = WORD_SIZE

    @property
    def nbytes(self) -> int:
        n = self.sign_bits.nbytes
        if self.nonzero_mask is not None:
            n += self.nonzero_mask.nbytes
        return n

    def signs(self) -> np.ndarray:
        return _unpack_bits(self.sign_bits, self.length)

    def mask(self) -> np.ndarray | None:
        if self.nonzero_mask is None:
            return None
        return _unpack_bits(self.nonzero_mask, self.length)

    def codes(self) -> np.ndarray:
        sign = np.where(self.signs(), 1, -1).astype(np.int8)
        mask = self.mask()
        if mask is None:
            return sign
        return np.where(mask, sign, 0).astype(np.int8)


@dataclass(frozen=True)
class PackedQuantTensor:
    """Immutable packed form of a QuantTensor: planes, scales, shape."""

    planes: tuple[PackedPlane, ...]
    alpha: np.ndarray
    shape: tuple[int, ...]
    scheme: QuantScheme

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def nbytes(self) -> int:
        """Payload bytes: packed planes plus scales (header excluded)."""
        return sum(p.nbytes for p in self.planes) + self.alpha.nbytes


def _pack_plane(codes: np.ndarray, with_mask: bool) -> PackedPlane:
    flat = np.ascontiguousarray(codes, dtype=np.int8).ravel()
    if with_mask:
        mask = flat != 0
        return PackedPlane(_pack_bits(flat > 0), _pack_bits(mask), flat.size)
    if np.any(flat == 0):
        raise ValueError("plane packed without a mask contains zero codes")
    return PackedPlane(_pack_bits(flat > 0), None, flat.size)


def pack(q: QuantTensor) -> PackedQuantTensor:
    """Losslessly pack code planes: 1 bit/element binary, 2 bits ternary."""
    kind = q.scheme.kind
    if kind is QuantKind.BINARY:
        mask_flags = [False]
    elif kind is QuantKind.TERNARY:
        mask_flags = [True]
    elif kind is QuantKind.BT:
        mask_flags = [False, True]
    else:
        raise ValueError(f"cannot pack scheme kind {kind}")
    if len(q.planes) != len(mask_flags):
        raise ValueError(
            f"{kind.value} expects {len(mask_flags)} planes, got {len(q.planes)}"
        )
    planes = tuple(
        _pack_plane(plane, flag) for plane, flag in zip(q.planes, mask_flags)
    )
    alpha = np.asarray(q.alpha, dtype=np.float32)
    return PackedQuantTensor(planes, alpha, tuple(q.shape), q.scheme)


def unpack(p: PackedQuantTensor) -> QuantTensor:
    """Reconstruct the QuantTensor (stage scales do not survive packing)."""
    planes = [plane.codes().reshape(p.shape) for plane in p.planes]
    return QuantTensor(tuple(p.shape), planes, p.alpha, p.scheme, ())


def _plane_dots(
    activ: np.ndarray, sign: np.ndarray, mask: np.ndarray | None
) -> np.ndarray:
    """Per-row, per-filter code dot via masked sums.

    ``activ`` is (L, D) float; ``sign``/``mask`` are (F, D) bool.  Only
    additions touch the activations; no weight values are multiplied in.
    Gathers run on the transposed activations so each filter's selected
    coordinates are contiguous rows.
    """
    n_filters = sign.shape[0]
    at = np.ascontiguousarray(activ.T)
    out = np.empty((activ.shape[0], n_filters), dtype=np.float64)
    if mask is None:
        s_all = activ.sum(axis=1, dtype=np.float64)
        for f in range(n_filters):
            pos = np.flatnonzero(sign[f])
            s_pos = at.take(pos, axis=0).sum(axis=0, dtype=np.float64)
            out[:, f] = 2.0 * s_pos - s_all
    else:
        for f in range(n_filters):
            pos = np.flatnonzero(sign[f])
            nz = np.flatnonzero(mask[f])
            s_pos = at.take(pos, axis=0).sum(axis=0, dtype=np.float64)
            s_nz = at.take(nz, axis=0).sum(axis=0, dtype=np.float64)
            out[:, f] = 2.0 * s_pos - s_nz
    return out


def packed_dot(p: PackedQuantTensor, a) -> float:
    """``alpha * sum_i code_i * a_i`` without multiplying by weights."""
    a = np.asarray(a, dtype=np.float32).ravel()
    if a.size != p.size:
        raise ValueError(f"length mismatch: packed {p.size} vs activations {a.size}")
    if p.alpha.ndim != 0:
        raise ValueError("packed_dot needs a per-tensor scale")
    total = 0.0
    for plane in p.planes:
        sign = plane.signs()
        mask = plane.mask()
        s_pos = a[sign].sum(dtype=np.float64)
        s_nz = a.sum(dtype=np.float64) if mask is None else a[mask].sum(dtype=np.float64)
        total += 2.0 * s_pos - s_nz
    return float(np.float32(float(p.alpha) * total))


def packed_matmul(p: PackedQuantTensor, x: np.ndarray) -> np.ndarray:
    """Rows of a packed (out, in) weight matrix dotted against (N, in) input."""
    if len(p.shape) != 2:
        raise ValueError(f"packed_matmul needs a 2-D weight shape, got {p.shape}")
    out_dim, in_dim = p.shape
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ValueError(f"input shape {x.shape} does not match weight {p.shape}")
    acc = np.zeros((x.shape[0], out_dim), dtype=np.float64)
    for plane in p.planes:
        sign = plane.signs().reshape(out_dim, in_dim)
        mask = plane.mask()
        if mask is not None:
            mask = mask.reshape(out_dim, in_dim)
        acc += _plane_dots(x, sign, mask)
    alpha = p.alpha if p.alpha.ndim == 0 else p.alpha[np.newaxis, :]
    return (acc * alpha).astype(np.float32)


def packed_conv2d(
    p: PackedQuantTensor, x, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """2-D convolution with packed filters over float NCHW activations.

    Equivalent to a dense convolution with the dequantized weights; the
    weight dimension is reduced purely by masked sums.
    """
    if len(p.shape) != 4:
        raise ValueError(f"packed_conv2d needs (F, C, kh, kw) filters, got {p.shape}")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError(f"input must be NCHW, got shape {x.shape}")
    n_filters, c, kh, kw = p.shape
    if x.shape[1] != c:
        raise ValueError(f"channel mismatch: filters want {c}, input has {x.shape[1]}")
    patches, ho, wo = im2col(x, kh, kw, stride=stride, padding=padding)

    d = c * kh * kw
    acc = np.zeros((patches.shape[0], n_filters), dtype=np.float64)
    for plane in p.planes:
        sign = plane.signs().reshape(n_filters, d)
        mask = plane.mask()
        if mask is not None:
            mask = mask.reshape(n_filters, d)
        acc += _plane_dots(patches, sign, mask)
    alpha = p.alpha if p.alpha.ndim == 0 else p.alpha[np.newaxis, :]
    out = (acc * alpha).astype(np.float32)
    return out.reshape(x.shape[0], ho, wo, n_filters).transpose(0, 3, 1, 2)


def to_bytes(p: PackedQuantTensor) -> bytes:
    """Serialize to the bit-exact cross-platform layout (see module doc)."""
    gran = 1 if p.scheme.granularity is Granularity.PER_CHANNEL else 0
    parts = [
        MAGIC,
        struct.pack("<BBBB", _SCHEME_IDS[p.scheme.kind], gran, len(p.planes), 0),
        struct.pack("<I", len(p.shape)),
        struct.pack(f"<{len(p.shape)}I", *p.shape),
    ]
    scales = np.atleast_1d(p.alpha).astype("<f4")
    parts.append(struct.pack("<I", scales.size))
    parts.append(scales.tobytes())
    for plane in p.planes:
        parts.append(struct.pack("<B", 0 if plane.nonzero_mask is None else 1))
        parts.append(np.ascontiguousarray(plane.sign_bits, WORD_DTYPE).tobytes())
        if plane.nonzero_mask is not None:
            parts.append(np.ascontiguousarray(plane.nonzero_mask, WORD_DTYPE).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError("truncated packed-tensor data")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> PackedQuantTensor:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ValueError("bad magic: not a packed quantized tensor")
    scheme_id, gran, n_planes, _ = r.unpack("<BBBB")
    if scheme_id not in _IDS_SCHEME:
        raise ValueError(f"unknown scheme id {scheme_id}")
    (ndim,) = r.unpack("<I")
    shape = r.unpack(f"<{ndim}I")
    (n_scales,) = r.unpack("<I")
    scales = np.frombuffer(r.take(4 * n_scales), dtype="<f4").astype(np.float32)
    alpha = np.float32(scales[0]) if n_scales == 1 and gran == 0 else scales
    length = int(np.prod(shape)) if shape else 1
    n_words = (length + WORD_SIZE - 1) // WORD_SIZE
    planes = []
    for _ in range(n_planes):
        (has_mask,) = r.unpack("<B")
        sign = np.frombuffer(r.take(8 * n_words), dtype=WORD_DTYPE)
        mask = np.frombuffer(r.take(8 * n_words), dtype=WORD_DTYPE) if has_mask else None
        planes.append(PackedPlane(sign, mask, length))
    if r.pos != len(buf):
        raise ValueError("trailing bytes after packed-tensor data")
    scheme = QuantScheme(
        _IDS_SCHEME[scheme_id],
        granularity=Granularity.PER_CHANNEL if gran else Granularity.PER_TENSOR,
    )
    return PackedQuantTensor(tuple(planes), np.asarray(alpha, np.float32), shape, scheme)
