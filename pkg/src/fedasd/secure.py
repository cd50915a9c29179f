"""Approximate additively homomorphic encryption for blind weighted averaging.

This is a small RLWE public-key scheme in the spirit of CKKS, cut down to the
two operations weighted averaging needs: ciphertext + ciphertext and
ciphertext * plaintext scalar. Reals are encoded as fixed-point integers in
polynomial coefficients (no slot rotation, so coefficient encoding suffices),
and ciphertexts live in Z_q[X]/(X^N + 1) with q = 2^64 so arithmetic is
native uint64 wraparound.

Each ciphertext carries a scale (log2) and a declared bound on the magnitude
of its plaintext. Scaling by a plaintext multiplies the scale by
``2**weight_bits``; an operation whose result could exceed the 2^63 signed
range is refused instead of silently wrapping.

Server-side functions (:func:`he_add`, :func:`he_scale`,
:func:`secure_weighted_sum`, :func:`secure_fedavg`) only ever accept
ciphertexts and a :class:`PublicKey`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CryptoError, KeyMismatchError

SCHEME_VERSION = 1
_LIMB_BITS = 16
_LIMB_MASK = np.uint64((1 << _LIMB_BITS) - 1)
# signed plaintext headroom kept below the 2^63 wrap point
_BUDGET_BITS = 62


@dataclass(frozen=True)
class HEParams:
    poly_degree: int = 4096
    scale_bits: int = 30
    weight_bits: int = 20
    error_std: float = 3.2
    value_bound: float = 16.0

    def __post_init__(self):
        n = self.poly_degree
        if n < 16 or n & (n - 1):
            raise CryptoError("poly_degree must be a power of two >= 16")
        if n > 1 << 15:
            # keeps limb convolutions exactly representable in float64
            raise CryptoError("poly_degree above 32768 is not supported")
        if not 8 <= self.scale_bits <= 48 or not 1 <= self.weight_bits <= 30:
            raise CryptoError("scale_bits must lie in [8, 48] and weight_bits in [1, 30]")
        if self.error_std <= 0 or self.value_bound <= 0:
            raise CryptoError("error_std and value_bound must be positive")
        if self.scale_bits + self.weight_bits + np.log2(self.value_bound) >= _BUDGET_BITS:
            raise CryptoError("value_bound does not fit the precision budget")


@dataclass(frozen=True, eq=False)
class PublicKey:
    params: HEParams
    a: np.ndarray
    b: np.ndarray
    key_id: str


@dataclass(frozen=True, eq=False)
class SecretKey:
    params: HEParams
    s: np.ndarray
    key_id: str

    def __repr__(self) -> str:
        return f"SecretKey(key_id={self.key_id!r})"


@dataclass(frozen=True, eq=False)
class HEKeys:
    public: PublicKey
    secret: SecretKey


@dataclass(frozen=True, eq=False)
class CipherVector:
    c0: np.ndarray
    c1: np.ndarray
    plaintext_length: int
    scale_log2: int
    bound: float
    key_id: str
    poly_degree: int

    def to_bytes(self) -> bytes:
        """``version | u32 header length | JSON header | u64 payload length | payload``."""
        header = json.dumps(
            {
                "plaintext_length": self.plaintext_length,
                "scale_log2": self.scale_log2,
                "bound": self.bound,
                "key_id": self.key_id,
                "poly_degree": self.poly_degree,
                "n_poly": int(self.c0.shape[0]),
            },
            sort_keys=True,
        ).encode("utf-8")
        payload = self.c0.astype("<u8").tobytes() + self.c1.astype("<u8").tobytes()
        return (
            struct.pack("<BI", SCHEME_VERSION, len(header))
            + header
            + struct.pack("<Q", len(payload))
            + payload
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> CipherVector:
        version, hlen = struct.unpack_from("<BI", blob, 0)
        if version != SCHEME_VERSION:
            raise CryptoError(f"unsupported ciphertext version {version}")
        offset = 5
        header = json.loads(blob[offset : offset + hlen].decode("utf-8"))
        offset += hlen
        (plen,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if len(blob) - offset != plen:
            raise CryptoError("truncated ciphertext payload")
        shape = (header["n_poly"], header["poly_degree"])
        words = np.frombuffer(blob, dtype="<u8", count=2 * shape[0] * shape[1], offset=offset)
        words = words.astype(np.uint64).reshape(2, *shape)
        return cls(
            words[0].copy(),
            words[1].copy(),
            header["plaintext_length"],
            header["scale_log2"],
            header["bound"],
            header["key_id"],
            header["poly_degree"],
        )


def dump_ciphers(ciphers: Sequence[CipherVector]) -> bytes:
    """Concatenate ciphertexts, each prefixed by its u64 byte length."""
    out = [struct.pack("<Q", len(ciphers))]
    for c in ciphers:
        blob = c.to_bytes()
        out.append(struct.pack("<Q", len(blob)))
        out.append(blob)
    return b"".join(out)


def load_ciphers(data: bytes) -> list[CipherVector]:
    (count,) = struct.unpack_from("<Q", data, 0)
    offset = 8
    ciphers = []
    for _ in range(count):
        (size,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        ciphers.append(CipherVector.from_bytes(data[offset : offset + size]))
        offset += size
    if offset != len(data):
        raise CryptoError("trailing bytes after ciphertext stream")
    return ciphers


def _mul_small(a: np.ndarray, small: np.ndarray) -> np.ndarray:
    """Negacyclic product of a uint64 polynomial with a small signed one, mod 2^64.

    ``a`` is split into 16-bit limbs so every limb convolution stays far
    below 2^53 and is recovered exactly from a float64 FFT.
    """
    n = a.shape[-1]
    fs = np.fft.rfft(small.astype(np.float64), 2 * n)
    acc = np.zeros(np.broadcast_shapes(a.shape, small.shape), dtype=np.uint64)
    for i in range(64 // _LIMB_BITS):
        limb = ((a >> np.uint64(i * _LIMB_BITS)) & _LIMB_MASK).astype(np.float64)
        full = np.rint(np.fft.irfft(np.fft.rfft(limb, 2 * n) * fs, 2 * n)).astype(np.int64)
        conv = full[..., :n] - full[..., n:]
        acc += conv.astype(np.uint64) << np.uint64(i * _LIMB_BITS)
    return acc


def _ternary(rng, shape) -> np.ndarray:
    return rng.integers(-1, 2, size=shape).astype(np.int64)


def _gauss(rng, shape, std) -> np.ndarray:
    return np.rint(rng.normal(0.0, std, size=shape)).astype(np.int64)


def _key_id(a: np.ndarray, b: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(a.astype("<u8").tobytes())
    h.update(b.astype("<u8").tobytes())
    return h.hexdigest()[:32]


def keygen(params: HEParams | None = None, rng: np.random.Generator | None = None) -> HEKeys:
    """Fresh key pair; pass a seeded ``rng`` only in tests and simulations."""
    params = params or HEParams()
    rng = rng if rng is not None else np.random.default_rng()
    n = params.poly_degree
    s = _ternary(rng, (n,))
    a = rng.integers(0, np.iinfo(np.uint64).max, size=n, dtype=np.uint64, endpoint=True)
    e = _gauss(rng, (n,), params.error_std)
    b = e.astype(np.uint64) - _mul_small(a, s)
    kid = _key_id(a, b)
    return HEKeys(PublicKey(params, a, b, kid), SecretKey(params, s, kid))


def encrypt(v, public: PublicKey, rng: np.random.Generator | None = None) -> CipherVector:
    if not isinstance(public, PublicKey):
        raise TypeError("encrypt takes a PublicKey")
    p = public.params
    rng = rng if rng is not None else np.random.default_rng()
    v = np.asarray(v, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise CryptoError("cannot encrypt non-finite values")
    if v.size and np.max(np.abs(v)) > p.value_bound:
        raise CryptoError(f"plaintext magnitude exceeds value_bound={p.value_bound}")
    n = p.poly_degree
    n_poly = max(1, -(-v.size // n))
    m = np.zeros(n_poly * n, dtype=np.int64)
    m[: v.size] = np.rint(v * 2.0**p.scale_bits).astype(np.int64)
    m = m.reshape(n_poly, n).astype(np.uint64)
    u = _ternary(rng, (n_poly, n))
    e1 = _gauss(rng, (n_poly, n), p.error_std).astype(np.uint64)
    e2 = _gauss(rng, (n_poly, n), p.error_std).astype(np.uint64)
    c0 = _mul_small(public.b, u) + e1 + m
    c1 = _mul_small(public.a, u) + e2
    return CipherVector(c0, c1, int(v.size), p.scale_bits, p.value_bound, public.key_id, n)


def decrypt(c: CipherVector, secret: SecretKey) -> np.ndarray:
    if not isinstance(secret, SecretKey):
        raise TypeError("decrypt takes a SecretKey")
    if c.key_id != secret.key_id:
        raise KeyMismatchError("ciphertext was produced under a different key")
    m = (c.c0 + _mul_small(c.c1, secret.s)).view(np.int64)
    return m.ravel()[: c.plaintext_length].astype(np.float64) / 2.0**c.scale_log2


def _check_budget(scale_log2: int, bound: float) -> None:
    if bound * 2.0**scale_log2 >= 2.0**_BUDGET_BITS:
        raise CryptoError("operation would exceed the ciphertext precision budget")


def he_add(c1: CipherVector, c2: CipherVector) -> CipherVector:
    if c1.key_id != c2.key_id:
        raise KeyMismatchError("cannot add ciphertexts under different keys")
    if c1.plaintext_length != c2.plaintext_length or c1.c0.shape != c2.c0.shape:
        raise CryptoError("ciphertext lengths differ")
    if c1.scale_log2 != c2.scale_log2:
        raise CryptoError("ciphertext scales differ")
    bound = c1.bound + c2.bound
    _check_budget(c1.scale_log2, bound)
    return CipherVector(
        c1.c0 + c2.c0, c1.c1 + c2.c1, c1.plaintext_length, c1.scale_log2, bound,
        c1.key_id, c1.poly_degree,
    )


def he_scale(c: CipherVector, s: float, weight_bits: int = 20) -> CipherVector:
    """Multiply by a plaintext real, quantized to ``2**-weight_bits``."""
    if not np.isfinite(s):
        raise CryptoError("scale factor must be finite")
    f = int(round(s * 2**weight_bits))
    scale_log2 = c.scale_log2 + weight_bits
    bound = c.bound * abs(f) / 2**weight_bits
    _check_budget(scale_log2, bound)
    fu = np.uint64(f % (1 << 64))
    return CipherVector(
        c.c0 * fu, c.c1 * fu, c.plaintext_length, scale_log2, bound, c.key_id, c.poly_degree
    )


def secure_weighted_sum(
    ciphers: Sequence[CipherVector], weights: Sequence[float], public: PublicKey
) -> CipherVector:
    """Blind sum of ``w_k * c_k``; only public material is involved."""
    if not isinstance(public, PublicKey):
        raise TypeError("the server side only accepts a PublicKey")
    if not ciphers or len(ciphers) != len(weights):
        raise CryptoError("need one weight per ciphertext and at least one ciphertext")
    for c in ciphers:
        if c.key_id != public.key_id:
            raise KeyMismatchError("ciphertext does not belong to this public key")
    wb = public.params.weight_bits
    acc = he_scale(ciphers[0], weights[0], wb)
    for c, w in zip(ciphers[1:], weights[1:]):
        acc = he_add(acc, he_scale(c, w, wb))
    return acc


def secure_fedavg(
    ciphers: Sequence[CipherVector], num_samples: Sequence[int], public: PublicKey
) -> CipherVector:
    n = np.asarray(num_samples, dtype=np.float64)
    if n.size != len(ciphers) or n.sum() <= 0:
        raise CryptoError("sample counts must be aligned and sum to a positive value")
    return secure_weighted_sum(ciphers, list(n / n.sum()), public)
