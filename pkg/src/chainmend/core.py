"""Block, transaction and account model with canonical encodings and Merkle commitments.

Every value here is immutable. Encodings are length-prefixed field concatenations
in declaration order with 8-byte big-endian integers; both the header hash and the
body commitments are SHA-256 over those encodings.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence, Union

DIGEST_LEN = 32
ADDRESS_LEN = 20
ZERO_DIGEST = bytes(DIGEST_LEN)
ZERO_ADDRESS = bytes(ADDRESS_LEN)

Digest = bytes
Address = bytes


def H(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


EMPTY_ROOT = H(b"")


def special_address(last_byte: int) -> Address:
    return bytes(ADDRESS_LEN - 1) + bytes([last_byte])


PARAMS_ADDR = special_address(0x10)
REGISTRY_ADDR = special_address(0x11)
REQ_ADDR = special_address(0x13)
VOTE_ADDR = special_address(0x14)


def enc_int(n: int) -> bytes:
    if n < 0 or n >= 1 << 64:
        raise ValueError(f"integer out of 64-bit range: {n}")
    return struct.pack(">Q", n)


def enc_bytes(b: bytes) -> bytes:
    return enc_int(len(b)) + b


def key_address(key: bytes) -> Address:
    """Address owned by a MAC key: first 20 bytes of H(H(key))."""
    return H(H(key))[:ADDRESS_LEN]


def contract_address(creator: Address, nonce: int) -> Address:
    return H(creator + enc_int(nonce))[:ADDRESS_LEN]


# -- transactions -------------------------------------------------------------


@dataclass(frozen=True)
class Transaction:
    frm: Address
    to: Address
    value: int
    nonce: int
    data: bytes = b""
    auth: bytes = ZERO_DIGEST

    def payload(self) -> bytes:
        return (
            enc_bytes(self.frm)
            + enc_bytes(self.to)
            + enc_int(self.value)
            + enc_int(self.nonce)
            + enc_bytes(self.data)
        )

    def encode(self) -> bytes:
        return self.payload() + enc_bytes(self.auth)

    @cached_property
    def digest(self) -> Digest:
        return H(self.encode())

    def signed(self, key: bytes) -> "Transaction":
        return Transaction(self.frm, self.to, self.value, self.nonce, self.data, sign(key, self.payload()))


@dataclass(frozen=True)
class RedactedStub:
    """Placeholder left behind by a redaction; carries only H(encode(tx))."""

    digest: Digest


TxEntry = Union[Transaction, RedactedStub]


def sign(key: bytes, payload: bytes) -> bytes:
    return H(key + payload)


def make_tx(key: bytes, to: Address, value: int, nonce: int, data: bytes = b"") -> Transaction:
    return Transaction(key_address(key), to, value, nonce, data).signed(key)


def leaf_hash(entry: TxEntry) -> Digest:
    return entry.digest


def merkle_root(leaves: Sequence[Digest]) -> Digest:
    """Binary Merkle root; odd levels duplicate their last node, no leaves gives H("")."""
    if not leaves:
        return EMPTY_ROOT
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [H(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def tx_root(txs: Iterable[TxEntry]) -> Digest:
    return merkle_root([e.digest for e in txs])


STUB_TAG = b"\xff"


def proposal_root(txs: Iterable[TxEntry]) -> Digest:
    # like tx_root, but stubs are domain-separated so a redaction is told apart from the original
    return merkle_root([H(STUB_TAG + e.digest) if isinstance(e, RedactedStub) else e.digest for e in txs])


# -- accounts -----------------------------------------------------------------


@dataclass(frozen=True)
class Account:
    address: Address
    bal: int = 0
    nonce: int = 0
    code: bytes = b""
    storage: tuple[tuple[bytes, bytes], ...] = ()

    def encode(self) -> bytes:
        out = enc_bytes(self.address) + enc_int(self.bal) + enc_int(self.nonce) + enc_bytes(self.code)
        out += enc_int(len(self.storage))
        for k, v in self.storage:
            out += enc_bytes(k) + enc_bytes(v)
        return out

    @property
    def is_contract(self) -> bool:
        return bool(self.code)

    def stored(self, key: bytes) -> bytes | None:
        for k, v in self.storage:
            if k == key:
                return v
        return None

    def with_storage(self, key: bytes, value: bytes) -> "Account":
        items = dict(self.storage)
        items[key] = value
        return Account(self.address, self.bal, self.nonce, self.code, tuple(sorted(items.items())))


class AccountState(Mapping[Address, Account]):
    """Immutable address -> Account map, iterated in ascending address order."""

    __slots__ = ("_accounts", "_root", "_encoded")

    def __init__(self, accounts: Iterable[Account] = ()):
        items = {a.address: a for a in accounts}
        self._accounts = dict(sorted(items.items()))
        self._root: Digest | None = None
        self._encoded: bytes | None = None

    def __getitem__(self, address: Address) -> Account:
        return self._accounts[address]

    def __iter__(self):
        return iter(self._accounts)

    def __len__(self) -> int:
        return len(self._accounts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AccountState):
            return NotImplemented
        return self is other or self._accounts == other._accounts

    def __hash__(self) -> int:
        return hash(self.root)

    def __repr__(self) -> str:
        return f"AccountState({list(self._accounts.values())!r})"

    def get_account(self, address: Address) -> Account:
        acc = self._accounts.get(address)
        return acc if acc is not None else Account(address)

    def balance(self, address: Address) -> int:
        acc = self._accounts.get(address)
        return acc.bal if acc is not None else 0

    def accounts(self) -> tuple[Account, ...]:
        return tuple(self._accounts.values())

    def total_supply(self) -> int:
        return sum(a.bal for a in self._accounts.values())

    def updated(self, changes: Mapping[Address, Account]) -> "AccountState":
        if not changes:
            return self
        merged = dict(self._accounts)
        merged.update(changes)
        return AccountState(merged.values())

    @property
    def root(self) -> Digest:
        if self._root is None:
            self._root = merkle_root([H(a.encode()) for a in self._accounts.values()])
        return self._root

    def encode(self) -> bytes:
        if self._encoded is None:
            self._encoded = enc_int(len(self._accounts)) + b"".join(a.encode() for a in self._accounts.values())
        return self._encoded


def state_root(st: AccountState) -> Digest:
    return st.root


# -- headers and blocks -------------------------------------------------------


@dataclass(frozen=True)
class PowData:
    difficulty: int
    ctr: int = 0
    miner: Address = ZERO_ADDRESS

    def encode(self) -> bytes:
        # ctr goes last so sealing can reuse a hasher primed with everything before it
        return enc_int(0) + enc_int(self.difficulty) + enc_bytes(self.miner) + enc_int(self.ctr)

    @property
    def producer(self) -> Address:
        return self.miner


@dataclass(frozen=True)
class PosData:
    proof: bytes = ZERO_DIGEST
    leader: Address = ZERO_ADDRESS

    def encode(self) -> bytes:
        return enc_int(1) + enc_bytes(self.proof) + enc_bytes(self.leader)

    @property
    def producer(self) -> Address:
        return self.leader


ConsensusData = Union[PowData, PosData]


@dataclass(frozen=True)
class Header:
    parent: Digest
    tx_root: Digest
    state_root: Digest
    slot: int
    consensus: ConsensusData

    def encode(self) -> bytes:
        return (
            enc_bytes(self.parent)
            + enc_bytes(self.tx_root)
            + enc_bytes(self.state_root)
            + enc_int(self.slot)
            + self.consensus.encode()
        )

    @cached_property
    def digest(self) -> Digest:
        return H(self.encode())

    @property
    def producer(self) -> Address:
        return self.consensus.producer


def hash_header(h: Header) -> Digest:
    return h.digest


@dataclass(frozen=True)
class Block:
    header: Header
    txs: tuple[TxEntry, ...]
    state: AccountState = field(compare=True)

    @property
    def digest(self) -> Digest:
        return self.header.digest

    def body_matches_header(self) -> bool:
        return tx_root(self.txs) == self.header.tx_root and self.state.root == self.header.state_root


Chain = tuple[Block, ...]


# -- chain prefix operations --------------------------------------------------


def prune(c: Sequence[Block], q: int) -> Chain:
    """Drop the q rightmost blocks."""
    if q < 0:
        raise ValueError("q must be non-negative")
    return tuple(c[: max(len(c) - q, 0)])


def prune_close(c: Sequence[Block], q: int) -> Chain:
    """Keep the first q blocks."""
    if q < 0:
        raise ValueError("q must be non-negative")
    return tuple(c[:q])


def prune_back(c: Sequence[Block], q: int) -> Chain:
    """Drop the q leftmost blocks."""
    if q < 0:
        raise ValueError("q must be non-negative")
    return tuple(c[q:])


def is_prefix(a: Sequence[Block], b: Sequence[Block]) -> bool:
    if len(a) > len(b):
        return False
    return all(x == y for x, y in zip(a, b))
