"""Sample-ID intersection between the two parties.

Threat model for the hashed variant: honest-but-curious peers sharing a
secret salt.  A peer learns the salted SHA-256 digests of the other side's
IDs and the intersection itself; anyone holding the salt can test guesses
against the digests.  This is not a cryptographic PSI.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DIGEST_SIZE = 32
SALT_SIZE = 16


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AlignedCohort:
    ids: tuple[str, ...]
    order_seed: int

    def __len__(self):
        return len(self.ids)

    def to_bytes(self) -> bytes:
        """Canonical byte form used to compare cohorts across parties."""
        out = bytearray(self.order_seed.to_bytes(8, "big"))
        for sid in self.ids:
            raw = sid.encode("utf-8")
            out += len(raw).to_bytes(4, "big") + raw
        return bytes(out)


def _check_unique(ids: Sequence, what: str) -> None:
    seen = set()
    for sid in ids:
        if sid in seen:
            raise AlignmentError(f"duplicate {what} id {sid!r}")
        seen.add(sid)


def order_cohort(common: Iterable[str], order_seed: int) -> AlignedCohort:
    """Lexicographic sort (by code point), then a seeded shuffle."""
    ids = sorted(common)
    perm = np.random.default_rng(order_seed).permutation(len(ids))
    return AlignedCohort(tuple(ids[i] for i in perm), int(order_seed))


def intersect_plain(local_ids: Sequence[str], remote_ids: Sequence[str], order_seed: int = 0) -> AlignedCohort:
    _check_unique(local_ids, "local")
    _check_unique(remote_ids, "remote")
    for sid in (*local_ids, *remote_ids):
        if not sid:
            raise AlignmentError("sample ids must be non-empty strings")
    return order_cohort(set(local_ids) & set(remote_ids), order_seed)


def digest_id(sample_id: str, salt: bytes) -> bytes:
    return hashlib.sha256(salt + sample_id.encode("utf-8")).digest()


def digest_ids(ids: Sequence[str], salt: bytes) -> list[bytes]:
    if len(salt) != SALT_SIZE:
        raise AlignmentError(f"salt must be {SALT_SIZE} bytes, got {len(salt)}")
    _check_unique(ids, "local")
    return [digest_id(sid, salt) for sid in ids]


def intersect_hashed(local_ids: Sequence[str], remote_digests: Sequence[bytes], salt: bytes,
                     order_seed: int = 0) -> AlignedCohort:
    """Intersect local raw IDs with the peer's salted digests.

    Gives the same cohort as :func:`intersect_plain` on the underlying IDs.
    """
    for d in remote_digests:
        if len(d) != DIGEST_SIZE:
            raise AlignmentError(f"digest of length {len(d)}, expected {DIGEST_SIZE}")
    _check_unique(remote_digests, "remote digest")
    local = digest_ids(local_ids, salt)
    remote = set(remote_digests)
    return order_cohort((sid for sid, d in zip(local_ids, local) if d in remote), order_seed)
