"""Token fusion strategies for two views and the random token fusion branch.

All functions accept single token sets ``[T, D]`` or batches ``[B, T, D]``;
the token axis is always the second to last one.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .vit import TokenSet


class FusionStrategy(str, Enum):
    AVERAGE = "average"
    CLS_CAT = "clscat"
    CONCAT = "concat"

    @classmethod
    def parse(cls, value) -> "FusionStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown fusion strategy {value!r}; choose from {names}") from None


def output_token_count(strategy: FusionStrategy, n1: int, n2: int) -> int:
    strategy = FusionStrategy.parse(strategy)
    if strategy is FusionStrategy.AVERAGE:
        return n1
    if strategy is FusionStrategy.CLS_CAT:
        return 2
    return n1 + n2


def _check_pair(z1: TokenSet, z2: TokenSet, same_count: bool, op: str) -> None:
    a, b = z1.tokens.shape, z2.tokens.shape
    if len(a) != len(b) or a[:-2] != b[:-2] or a[-1] != b[-1] or (same_count and a[-2] != b[-2]):
        raise DimensionError(f"{op}: token sets {a} and {b} are incompatible")


def fuse_average(z1: TokenSet, z2: TokenSet) -> TokenSet:
    _check_pair(z1, z2, True, "fuse_average")
    return TokenSet(T.mul_scalar(T.add(z1.tokens, z2.tokens), 0.5), (0,))


def fuse_cls_cat(z1: TokenSet, z2: TokenSet) -> TokenSet:
    _check_pair(z1, z2, False, "fuse_cls_cat")
    return TokenSet(T.concat_along([z1.cls(), z2.cls()], axis=-2), (0, 1))


def fuse_concat(z1: TokenSet, z2: TokenSet) -> TokenSet:
    _check_pair(z1, z2, False, "fuse_concat")
    return TokenSet(T.concat_along([z1.tokens, z2.tokens], axis=-2), (0, z1.count))


def fuse(strategy, z1: TokenSet, z2: TokenSet) -> TokenSet:
    strategy = FusionStrategy.parse(strategy)
    if strategy is FusionStrategy.AVERAGE:
        return fuse_average(z1, z2)
    if strategy is FusionStrategy.CLS_CAT:
        return fuse_cls_cat(z1, z2)
    return fuse_concat(z1, z2)


@dataclass
class RtfMask:
    """Spatial-token selection bits (True takes the view-1 token) and the draw probability.

    ``bits`` is ``[N]`` for one sample or ``[B, N]`` for a batch, with ``p``
    a float or ``[B]`` array accordingly.
    """

    bits: np.ndarray
    p: object

    def __len__(self) -> int:
        return self.bits.shape[-1]

    def complement(self) -> "RtfMask":
        return RtfMask(~self.bits, 1.0 - np.asarray(self.p))

    def to_bitstring(self):
        """Bits as '0'/'1' text, first character is spatial token 1."""
        if self.bits.ndim == 1:
            return "".join("1" if b else "0" for b in self.bits)
        return ["".join("1" if b else "0" for b in row) for row in self.bits]

    @classmethod
    def from_bitstring(cls, text: str) -> "RtfMask":
        bits = np.array([c == "1" for c in text], dtype=bool)
        return cls(bits, float(bits.mean()) if bits.size else 0.0)


def sample_rtf_mask(n: int, rng) -> RtfMask:
    """Draw ``p ~ U(0, 1)`` once, then ``n`` independent Bernoulli(p) bits."""
    if n < 1:
        raise ContractError(f"mask length must be at least 1, got {n}")
    p = float(rng.random())
    bits = np.asarray(rng.random(n)) < p
    return RtfMask(bits, p)


def sample_rtf_masks(batch: int, n: int, rng) -> RtfMask:
    """Independent masks for every sample of a batch, each with its own ``p``."""
    if n < 1 or batch < 1:
        raise ContractError(f"need batch >= 1 and n >= 1, got {batch}, {n}")
    p = np.asarray(rng.random(batch), dtype=np.float64)
    bits = np.asarray(rng.random((batch, n))) < p[:, None]
    return RtfMask(bits, p)


def rtf_fuse(z1: TokenSet, z2: TokenSet, mask: RtfMask) -> TokenSet:
    """Pick each spatial token from one view per the mask and average the CLS tokens."""
    _check_pair(z1, z2, True, "rtf_fuse")
    n = z1.count - 1
    bits = np.asarray(mask.bits, dtype=bool)
    expected = z1.tokens.shape[:-2] + (n,)
    if bits.shape != expected:
        raise DimensionError(f"rtf_fuse: mask shape {bits.shape} does not match spatial rows {expected}")
    spatial = T.select_rows(bits, z1.spatial(), z2.spatial())
    cls = T.mul_scalar(T.add(z1.cls(), z2.cls()), 0.5)
    return TokenSet(T.concat_along([cls, spatial], axis=-2), (0,))
