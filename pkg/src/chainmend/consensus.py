"""Hash-target proof of work and a stake-weighted slot lottery."""

from __future__ import annotations

import hashlib
from bisect import bisect_left
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .core import (
    Account,
    AccountState,
    Address,
    Block,
    Digest,
    H,
    Header,
    PosData,
    PowData,
    enc_bytes,
    enc_int,
)

TWO_256 = 1 << 256


class NotSlotLeader(Exception):
    """Raised when an account that did not win the slot tries to seal."""


@dataclass(frozen=True)
class EpochParams:
    ell: int
    f: float

    def __post_init__(self):
        if self.ell < 1:
            raise ValueError("ell must be >= 1")
        if not 0 < self.f <= 1:
            raise ValueError("f must be in (0, 1]")


# -- proof of work ------------------------------------------------------------


def pow_target(difficulty: int) -> int:
    if difficulty < 1:
        raise ValueError("difficulty must be >= 1")
    return TWO_256 // difficulty


def chk_pow(h: Header) -> bool:
    cd = h.consensus
    if not isinstance(cd, PowData) or cd.difficulty < 1:
        return False
    return int.from_bytes(h.digest, "big") < pow_target(cd.difficulty)


def pow_seal(h: Header, max_attempts: int, start: int = 0) -> Header | None:
    """Search ctr = start, start+1, ... for a header meeting its difficulty target.

    Returns None (not found) once ``max_attempts`` counters have failed.
    """
    cd = h.consensus
    if not isinstance(cd, PowData):
        raise TypeError("pow_seal needs PoW consensus data")
    target = pow_target(cd.difficulty)
    encoded = h.encode()
    base = hashlib.sha256(encoded[:-8])
    for ctr in range(start, start + max_attempts):
        hh = base.copy()
        hh.update(enc_int(ctr))
        if int.from_bytes(hh.digest(), "big") < target:
            return replace(h, consensus=replace(cd, ctr=ctr))
    return None


# -- proof of stake -----------------------------------------------------------


def win_probability(bal: int, total_stake: int, f: float) -> float:
    """phi_f = 1 - (1 - f) ** (bal / S)."""
    if total_stake <= 0:
        raise ValueError("total stake must be positive")
    return 1.0 - (1.0 - f) ** (bal / total_stake)


def lottery_draw(slot_seed: Digest, address: Address) -> float:
    return int.from_bytes(H(slot_seed + address)[:8], "big") / 2.0**64


def slot_lottery(acc: Account, total_stake: int, f: float, slot_seed: Digest) -> bool:
    if acc.bal <= 0:
        return False
    return lottery_draw(slot_seed, acc.address) < win_probability(acc.bal, total_stake, f)


def epoch_of(slot: int, ell: int) -> int:
    return slot // ell


def epoch_window(e: int, ell: int) -> tuple[int, int]:
    return e * ell, (e + 1) * ell - 1


def slot_seed(epoch: int, beacon: Digest, slot: int) -> Digest:
    return H(enc_int(epoch) + beacon + enc_int(slot))


def snapshot_index(slots: Sequence[int], epoch: int, ell: int) -> int:
    """Index of the last block before the epoch starts (genesis for epoch 0)."""
    return max(bisect_left(slots, epoch * ell) - 1, 0)


def beacon_index(slots: Sequence[int], epoch: int, ell: int) -> int:
    """Index of the last block of epoch e-2 (genesis when e < 2)."""
    if epoch < 2:
        return 0
    return max(bisect_left(slots, (epoch - 1) * ell) - 1, 0)


def pos_context(chain: Sequence[Block], slot: int, ell: int, slots: Sequence[int] | None = None):
    """Stake snapshot and slot seed governing ``slot`` given the prefix ``chain``."""
    if slots is None:
        slots = [b.header.slot for b in chain]
    e = epoch_of(slot, ell)
    snap = chain[snapshot_index(slots, e, ell)].state
    beacon = chain[beacon_index(slots, e, ell)].digest
    return snap, slot_seed(e, beacon, slot)


def is_leader(snapshot: AccountState, address: Address, f: float, seed: Digest) -> bool:
    total = snapshot.total_supply()
    if total <= 0:
        return False
    return slot_lottery(snapshot.get_account(address), total, f, seed)


def encode_payload(payload: tuple[Digest, Digest, Digest]) -> bytes:
    parent, txr, str_ = payload
    return enc_bytes(parent) + enc_bytes(txr) + enc_bytes(str_)


def pos_proof(key: bytes, payload: tuple[Digest, Digest, Digest], slot: int) -> bytes:
    return H(key + encode_payload(payload) + enc_int(slot))


def prf_pos(
    chain: Sequence[Block],
    key: bytes,
    address: Address,
    payload: tuple[Digest, Digest, Digest],
    slot: int,
    params: EpochParams,
    slots: Sequence[int] | None = None,
) -> bytes:
    snap, seed = pos_context(chain, slot, params.ell, slots)
    if not is_leader(snap, address, params.f, seed):
        raise NotSlotLeader(f"{address.hex()} did not win slot {slot}")
    return pos_proof(key, payload, slot)


def vfy_pos(
    chain: Sequence[Block],
    hd: PosData,
    payload: tuple[Digest, Digest, Digest],
    slot: int,
    params: EpochParams,
    registry: Mapping[Address, bytes],
    slots: Sequence[int] | None = None,
) -> bool:
    if not isinstance(hd, PosData):
        return False
    key = registry.get(hd.leader)
    if key is None:
        return False
    snap, seed = pos_context(chain, slot, params.ell, slots)
    if not is_leader(snap, hd.leader, params.f, seed):
        return False
    return pos_proof(key, payload, slot) == hd.proof
