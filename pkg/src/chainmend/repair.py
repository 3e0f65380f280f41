"""Repair proposals, voting tallies and the cascading repair of a chain.

A repair replaces the transaction list of one stable block and recomputes every
later state; headers never change. The original contents of each touched block
are kept in a per-height record (``RdbEntry``) and every applied proposal is
logged at the height that applied it (``AdbEntry``), which together let any
node replay the chain from genesis.
"""

from __future__ import annotations

import enum
from bisect import bisect_left, bisect_right
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, MutableSequence, Sequence

from .consensus import epoch_of, epoch_window
from .core import (
    AccountState,
    Block,
    REQ_ADDR,
    VOTE_ADDR,
    Digest,
    H,
    RedactedStub,
    Transaction,
    TxEntry,
    make_tx,
    proposal_root,
)
from .params import ChainParams, Policy, read_genesis
from .state import (
    CallKind,
    Registry,
    apply_transactions,
    auth_ok,
    is_special_call,
    well_formed,
)


class RepairError(Exception):
    pass


class GenesisImmutable(RepairError):
    pass


class UnstableTarget(RepairError):
    pass


class MalformedReplacement(RepairError):
    pass


class UnknownProposal(RepairError):
    pass


class NotApproved(RepairError):
    pass


class AlreadyRedacted(RepairError):
    pass


class IndexOutOfRange(RepairError, IndexError):
    pass


class RepairKind(enum.Enum):
    REDACTION = "redaction"
    STATEFUL = "stateful"


class Status(enum.Enum):
    APPROVE = "approve"
    REJECT = "reject"
    VOTING = "voting"


@dataclass(frozen=True)
class ApprovalStatus:
    status: Status
    votes_for: int
    window_size: int


@dataclass(frozen=True)
class RepairProposal:
    target_height: int
    old_root: Digest
    new_txs: tuple[TxEntry, ...]
    new_state: AccountState
    kind: RepairKind

    @property
    def repair_data(self) -> bytes:
        """The 64-byte payload of the repair request: old root, then proposed root."""
        return self.old_root + proposal_root(self.new_txs)

    @property
    def id(self) -> Digest:
        return H(self.repair_data)


@dataclass(frozen=True)
class RdbEntry:
    txs: tuple[TxEntry, ...]
    state: AccountState


@dataclass(frozen=True)
class AdbEntry:
    """A proposal as applied by block ``approval_height``.

    ``applied`` is False for a due proposal that no longer satisfies the policy
    when its turn comes; it is logged so the omission is checkable, and has no effect.
    """

    approval_height: int
    proposal: RepairProposal
    applied: bool = True


@dataclass(frozen=True)
class RepairLayer:
    rdb: tuple[RdbEntry | None, ...]
    adb: tuple[tuple[AdbEntry, ...], ...]

    @classmethod
    def empty(cls, n: int) -> "RepairLayer":
        return cls((None,) * n, ((),) * n)


# -- proposal shape -------------------------------------------------------------


def retain_and_redact(txs: Sequence[TxEntry], redact_idx: Iterable[int]) -> tuple[TxEntry, ...]:
    out = list(txs)
    for i in set(redact_idx):
        if not 0 <= i < len(out):
            raise IndexOutOfRange(f"index {i} outside 0..{len(out) - 1}")
        if isinstance(out[i], RedactedStub):
            raise AlreadyRedacted(f"entry {i} is already a stub")
        out[i] = RedactedStub(out[i].digest)
    return tuple(out)


def redacted_digests(old: Sequence[TxEntry], new: Sequence[TxEntry]) -> set[Digest]:
    """Digests of entries that are full in ``old`` and stubbed in ``new`` at the same position."""
    return {
        a.digest
        for a, b in zip(old, new)
        if isinstance(a, Transaction) and isinstance(b, RedactedStub)
    }


def infer_kind(old: Sequence[TxEntry], new: Sequence[TxEntry]) -> RepairKind:
    """Redaction iff the lists differ only by full-to-stub substitutions of the same digest."""
    if len(old) != len(new):
        return RepairKind.STATEFUL
    substituted = False
    for a, b in zip(old, new):
        if a == b:
            continue
        if isinstance(a, Transaction) and isinstance(b, RedactedStub) and b.digest == a.digest:
            substituted = True
            continue
        return RepairKind.STATEFUL
    return RepairKind.REDACTION if substituted else RepairKind.STATEFUL


def kind_matches(old: Sequence[TxEntry], new: Sequence[TxEntry], kind: RepairKind) -> bool:
    """Is ``kind`` a consistent label for the change?

    A redaction may only turn full entries into their stubs. The target may already
    carry those stubs, as it does when rebuilt from stored originals during replay.
    """
    if kind is RepairKind.STATEFUL:
        return True
    if len(old) != len(new):
        return False
    return all(
        a == b or (isinstance(a, Transaction) and isinstance(b, RedactedStub) and b.digest == a.digest)
        for a, b in zip(old, new)
    )


def _field(tx: Transaction, name: str):
    return tx.frm if name == "from" else getattr(tx, name)


def _special(entries: Iterable[TxEntry]) -> Counter:
    return Counter(
        e.digest for e in entries if isinstance(e, Transaction) and is_special_call(e) is not CallKind.NORMAL
    )


def _stubs(entries: Iterable[TxEntry]) -> Counter:
    return Counter(e.digest for e in entries if isinstance(e, RedactedStub))


def malformed_replacement(new: Sequence[TxEntry], registry: Registry) -> str | None:
    for i, e in enumerate(new):
        if isinstance(e, Transaction) and not (well_formed(e) and auth_ok(e, registry)):
            return f"new transaction {i} fails format or auth checks"
    return None


def shape_violation(
    old: Sequence[TxEntry],
    new: Sequence[TxEntry],
    kind: RepairKind,
    policy: Policy,
    registry: Registry,
) -> str | None:
    """Checks that depend only on the two transaction lists and the policy."""
    bad = malformed_replacement(new, registry)
    if bad:
        return bad
    if not kind_matches(old, new, kind):
        return "declared kind does not match the change"
    if kind is RepairKind.REDACTION and not policy.allow_redaction:
        return "redaction not allowed by policy"
    if kind is RepairKind.STATEFUL and not policy.allow_stateful:
        return "stateful repair not allowed by policy"
    if _special(old) != _special(new):
        return "repair or vote transactions may not be added, removed or changed"
    old_stubs, new_stubs = _stubs(old), _stubs(new)
    if old_stubs - new_stubs:
        return "a redacted entry cannot be restored"
    if kind is RepairKind.STATEFUL and new_stubs - old_stubs:
        return "a stateful repair cannot introduce stubs"
    by_key = {(e.frm, e.nonce): e for e in old if isinstance(e, Transaction)}
    for e in new:
        if not isinstance(e, Transaction):
            continue
        prev = by_key.get((e.frm, e.nonce))
        if prev is None:
            continue
        for name in sorted(policy.forbidden_fields):
            if _field(prev, name) != _field(e, name):
                return f"field {name!r} of a retained transaction was modified"
    return None


def redaction_violation(
    old: Sequence[TxEntry],
    new: Sequence[TxEntry],
    params: ChainParams,
    neutral: bool,
) -> str | None:
    """Redactions must leave the block's state unchanged; PoW also tolerates zero-value payloads."""
    if neutral:
        return None
    if params.is_pos:
        return "redaction would change the block's state"
    gone = redacted_digests(old, new)
    for e in old:
        if isinstance(e, Transaction) and e.digest in gone and e.value != 0:
            return "only zero-value transactions may be redacted when the state changes"
    return None


# -- repair requests and votes -------------------------------------------------


def vote(c: Sequence[Block], rp: RepairProposal) -> Digest:
    """The vote id: hash of the repair request's data field."""
    del c  # the id depends on the proposal alone
    return rp.id


def build_repair_tx(key: bytes, rp: RepairProposal, nonce: int, value: int = 0) -> Transaction:
    return make_tx(key, REQ_ADDR, value, nonce, rp.repair_data)


def build_vote_tx(key: bytes, pid: Digest, nonce: int, value: int = 0) -> Transaction:
    return make_tx(key, VOTE_ADDR, value, nonce, pid)


# -- tallying -------------------------------------------------------------------


class ApprovalIndex:
    """Repair requests and endorsing blocks seen on one chain, by proposal id.

    A block endorses a proposal when it holds a vote for it sent (and authenticated)
    by the block's own producer; each block counts once per id.
    """

    def __init__(self):
        self.refs: dict[Digest, tuple[tuple[int, int], ...]] = {}
        self.votes: dict[Digest, tuple[int, ...]] = {}
        self.data: dict[Digest, bytes] = {}

    def copy(self) -> "ApprovalIndex":
        out = ApprovalIndex()
        out.refs = dict(self.refs)
        out.votes = dict(self.votes)
        out.data = dict(self.data)
        return out

    def add_block(self, height: int, block: Block, registry: Registry) -> list[Digest]:
        """Index ``block``; returns ids with a new repair request."""
        producer = block.header.producer
        seen: set[Digest] = set()
        new_ids = []
        for i, e in enumerate(block.txs):
            if not isinstance(e, Transaction) or not well_formed(e):
                continue
            kind = is_special_call(e)
            if kind is CallKind.NORMAL or not auth_ok(e, registry):
                continue
            if kind is CallKind.REPAIR:
                pid = H(e.data)
                self.refs[pid] = self.refs.get(pid, ()) + ((height, i),)
                self.data[pid] = e.data
                new_ids.append(pid)
            elif e.frm == producer and e.data not in seen:
                seen.add(e.data)
                self.votes[e.data] = self.votes.get(e.data, ()) + (height,)
        return new_ids

    def reference(self, pid: Digest, top: int, k: int) -> tuple[int, int] | None:
        """Latest repair request for ``pid`` that is k deep in the prefix ending at ``top``."""
        best = None
        for ref in self.refs.get(pid, ()):
            if ref[0] + k <= top:
                best = ref
        return best

    def approval(
        self,
        pid: Digest,
        top: int,
        slots: Sequence[int],
        policy: Policy,
        is_pos: bool,
    ) -> tuple[ApprovalStatus, tuple[int, int]]:
        ref = self.reference(pid, top, policy.k)
        if ref is None:
            raise UnknownProposal(pid.hex())
        stable_at = ref[0] + policy.k
        if is_pos:
            first, last = epoch_window(epoch_of(slots[stable_at], policy.ell) + 1, policy.ell)
            lo = bisect_left(slots, first, 0, top + 1)
            hi = bisect_right(slots, last, 0, top + 1)
            ended = slots[top] >= last
        else:
            lo, hi = stable_at + 1, min(stable_at + policy.ell, top) + 1
            ended = top >= stable_at + policy.ell
        heights = self.votes.get(pid, ())
        count = max(bisect_left(heights, hi) - bisect_left(heights, lo), 0)
        # under PoS empty slots are common, so the threshold is taken over the blocks actually in the epoch
        size = max(hi - lo, 0) if is_pos else policy.ell
        if not ended:
            status = Status.VOTING
        elif count > policy.rho * size:
            status = Status.APPROVE
        else:
            status = Status.REJECT
        return ApprovalStatus(status, count, size), ref


def chk_approval(policy: Policy, c: Sequence[Block], pid: Digest) -> ApprovalStatus:
    """Tally of ``pid`` on chain ``c`` (the caller prunes ``c`` to its stable part)."""
    params, registry = read_genesis(c[0])
    idx = ApprovalIndex()
    for h, b in enumerate(c):
        if h:
            idx.add_block(h, b, registry)
    slots = [b.header.slot for b in c]
    st, _ = idx.approval(pid, len(c) - 1, slots, policy, params.is_pos)
    if policy.vetoed(pid):
        return ApprovalStatus(Status.REJECT, st.votes_for, st.window_size)
    return st


# -- the cascade ----------------------------------------------------------------


def cascade(
    blocks: MutableSequence[Block],
    rdb: MutableSequence[RdbEntry | None],
    j: int,
    new_txs: tuple[TxEntry, ...],
    kind: RepairKind,
    registry: Registry,
) -> AccountState:
    """Replace block j's body, store originals on first touch, and recompute every later state.

    Works in place on the two lists and returns the new state of block j.
    """
    old = blocks[j]
    new_state = apply_transactions(blocks[j - 1].state, new_txs, old.header.producer, registry)
    if kind is RepairKind.REDACTION:
        gone = redacted_digests(old.txs, new_txs)
        base = rdb[j].txs if rdb[j] is not None else old.txs
        kept = tuple(RedactedStub(e.digest) if e.digest in gone else e for e in base)
        rdb[j] = RdbEntry(kept, rdb[j].state if rdb[j] is not None else old.state)
    elif rdb[j] is None:
        rdb[j] = RdbEntry(old.txs, old.state)
    blocks[j] = Block(old.header, new_txs, new_state)
    prev = new_state
    for i in range(j + 1, len(blocks)):
        b = blocks[i]
        if rdb[i] is None:
            rdb[i] = RdbEntry(b.txs, b.state)
        st = apply_transactions(prev, b.txs, b.header.producer, registry)
        if st != b.state:
            blocks[i] = Block(b.header, b.txs, st)
        prev = st
    return new_state


def apply_repair(
    c: Sequence[Block], layer: RepairLayer, rp: RepairProposal, registry: Registry
) -> tuple[tuple[Block, ...], RepairLayer]:
    """The bare cascade, without the approval gate. Inputs are left untouched."""
    if not 1 <= rp.target_height < len(c):
        raise IndexOutOfRange(f"target {rp.target_height} outside the chain")
    blocks, rdb = list(c), list(layer.rdb)
    cascade(blocks, rdb, rp.target_height, tuple(rp.new_txs), rp.kind, registry)
    return tuple(blocks), RepairLayer(tuple(rdb), layer.adb)


def repair_chain(
    c: Sequence[Block], layer: RepairLayer, rp: RepairProposal, policy: Policy | None = None
) -> tuple[tuple[Block, ...], RepairLayer]:
    """Apply an approved proposal to ``c``.

    The proposal must be approved on the stable part of ``c``. The resulting layer
    records the original contents; the log entry itself belongs to the block that
    applies the repair (see ``Ledger``).
    """
    params, registry = read_genesis(c[0])
    pol = policy or params.policy
    try:
        st = chk_approval(pol, tuple(c[: max(len(c) - pol.k, 1)]), rp.id)
    except UnknownProposal:
        raise NotApproved("no stable repair request carries this id") from None
    if st.status is not Status.APPROVE:
        raise NotApproved(f"status {st.status.value} with {st.votes_for}/{st.window_size} votes")
    return apply_repair(c, layer, rp, registry)


def stateful_heights(adb: Iterable[Iterable[AdbEntry]]) -> set[int]:
    return {
        e.proposal.target_height
        for entries in adb
        for e in entries
        if e.applied and e.proposal.kind is RepairKind.STATEFUL
    }
