"""Incremental, repair-aware chain validation and block production.

``Ledger`` holds one chain in its current (repaired) form together with its
repair layer, and grows it one block at a time. Validation of an exported chain
rebuilds the originally produced blocks from the stored originals and replays
them through a fresh ledger, re-performing every logged repair.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

from .consensus import NotSlotLeader, chk_pow, epoch_of, is_leader, pos_context, pow_seal, prf_pos, vfy_pos
from .core import (
    ZERO_DIGEST,
    Address,
    Block,
    Digest,
    Header,
    PosData,
    PowData,
    RedactedStub,
    Transaction,
    TxEntry,
    key_address,
    tx_root,
)
from .params import ChainParams, ParamsError, Policy, read_genesis
from .repair import (
    AdbEntry,
    ApprovalIndex,
    ApprovalStatus,
    GenesisImmutable,
    MalformedReplacement,
    RdbEntry,
    RepairKind,
    RepairLayer,
    RepairProposal,
    Status,
    UnknownProposal,
    UnstableTarget,
    cascade,
    infer_kind,
    kind_matches,
    malformed_replacement,
    redaction_violation,
    shape_violation,
)
from .state import apply_transactions, well_formed


class BlockInvalid(Exception):
    def __init__(self, clause: str, height: int | None = None):
        super().__init__(clause if height is None else f"height {height}: {clause}")
        self.clause = clause
        self.height = height


class CannotProduce(Exception):
    """The producer lacks the contents of a repair that the next block must apply."""


@dataclass(frozen=True)
class Verdict:
    ok: bool
    height: int | None = None
    clause: str = ""

    def __bool__(self) -> bool:
        return self.ok


class Ledger:
    def __init__(self, genesis: Block):
        try:
            self.params, self.registry = read_genesis(genesis)
        except ParamsError as exc:
            raise BlockInvalid(str(exc), 0) from None
        h = genesis.header
        if h.parent != ZERO_DIGEST or h.slot != 0 or not genesis.body_matches_header():
            raise BlockInvalid("malformed genesis", 0)
        if any(isinstance(e, RedactedStub) for e in genesis.txs):
            raise BlockInvalid("malformed genesis", 0)
        self.blocks: list[Block] = [genesis]
        self.rdb: list[RdbEntry | None] = [None]
        self.adb: list[tuple[AdbEntry, ...]] = [()]
        self.slots: list[int] = [0]
        self.index = ApprovalIndex()
        self.open: set[Digest] = set()
        self.closed: set[tuple[Digest, tuple[int, int]]] = set()
        self.stateful: set[int] = set()
        self.redacted: dict[int, frozenset[Digest]] = {}
        self.root_heights: dict[Digest, tuple[int, ...]] = {}

    # -- bookkeeping ------------------------------------------------------------

    @property
    def policy(self) -> Policy:
        return self.params.policy

    @property
    def tip(self) -> int:
        return len(self.blocks) - 1

    @property
    def stable_top(self) -> int:
        return self.tip - self.policy.k

    def chain(self) -> tuple[Block, ...]:
        return tuple(self.blocks)

    def layer(self) -> RepairLayer:
        return RepairLayer(tuple(self.rdb), tuple(self.adb))

    def clone(self) -> "Ledger":
        out = object.__new__(Ledger)
        out.params, out.registry = self.params, self.registry
        out.blocks, out.rdb, out.adb, out.slots = list(self.blocks), list(self.rdb), list(self.adb), list(self.slots)
        out.index = self.index.copy()
        out.open, out.closed, out.stateful = set(self.open), set(self.closed), set(self.stateful)
        out.redacted = dict(self.redacted)
        out.root_heights = dict(self.root_heights)
        return out

    def _index_root(self, root: Digest, height: int) -> None:
        self.root_heights[root] = self.root_heights.get(root, ()) + (height,)

    def _unindex_root(self, root: Digest, height: int) -> None:
        rest = tuple(h for h in self.root_heights.get(root, ()) if h != height)
        if rest:
            self.root_heights[root] = rest
        else:
            self.root_heights.pop(root, None)

    def _append(self, block: Block, entries: tuple[AdbEntry, ...]) -> None:
        h = len(self.blocks)
        self.blocks.append(block)
        self.rdb.append(None)
        self.adb.append(entries)
        self.slots.append(block.header.slot)
        self._index_root(tx_root(block.txs), h)
        self.open.update(self.index.add_block(h, block, self.registry))

    # -- approval ---------------------------------------------------------------

    def approval(self, pid: Digest, top: int | None = None) -> ApprovalStatus:
        """Tally of ``pid`` on the prefix ending at ``top`` (default: the stable part)."""
        top = self.stable_top if top is None else top
        if top < 0:
            raise UnknownProposal(pid.hex())
        st, _ = self.index.approval(pid, top, self.slots, self.policy, self.params.is_pos)
        return st

    def unique_target(self, pid: Digest) -> int | None:
        """The one stable non-genesis block whose current root the request names, if unambiguous."""
        old_root = self.index.data[pid][:32]
        hits = [h for h in self.root_heights.get(old_root, ()) if 1 <= h <= self.stable_top]
        return hits[0] if len(hits) == 1 else None

    def due(self, next_slot: int) -> list[Digest]:
        """Approved, not yet handled proposals that the block at ``next_slot`` must deal with."""
        top = self.stable_top
        if top < 0:
            return []
        if self.params.is_pos and epoch_of(next_slot, self.policy.ell) == epoch_of(self.slots[-1], self.policy.ell):
            return []
        found = []
        for pid in list(self.open):
            ref = self.index.reference(pid, top, self.policy.k)
            if ref is None:
                continue
            latest = ref == self.index.refs[pid][-1]
            if (pid, ref) in self.closed:
                if latest:
                    self.open.discard(pid)
                continue
            st, _ = self.index.approval(pid, top, self.slots, self.policy, self.params.is_pos)
            if st.status is Status.APPROVE:
                found.append((ref, pid))
            elif st.status is Status.REJECT:
                self.closed.add((pid, ref))
                if latest:
                    self.open.discard(pid)
        return [pid for _, pid in sorted(found)]

    def settled(self, pid: Digest) -> bool:
        """True once the latest request for ``pid`` has been applied or rejected on the stable chain."""
        refs = self.index.refs.get(pid)
        if not refs:
            return False
        return (pid, refs[-1]) in self.closed

    # -- proposals --------------------------------------------------------------

    def propose(self, j: int, new_txs: Sequence[TxEntry]) -> RepairProposal:
        if j == 0:
            raise GenesisImmutable("the genesis block cannot be repaired")
        if not 1 <= j <= self.stable_top:
            raise UnstableTarget(f"block {j} is not in the stable part (top {self.stable_top})")
        new_txs = tuple(new_txs)
        bad = malformed_replacement(new_txs, self.registry)
        if bad:
            raise MalformedReplacement(bad)
        block = self.blocks[j]
        st = apply_transactions(self.blocks[j - 1].state, new_txs, block.header.producer, self.registry)
        return RepairProposal(j, tx_root(block.txs), new_txs, st, infer_kind(block.txs, new_txs))

    def _content_violation(self, rp: RepairProposal) -> str | None:
        """Policy checks on a proposal against the target block's current contents."""
        j = rp.target_height
        old = self.blocks[j].txs
        bad = shape_violation(old, rp.new_txs, rp.kind, self.policy, self.registry)
        if bad:
            return bad
        if rp.kind is RepairKind.REDACTION:
            if j in self.stateful:
                return "block already received a stateful repair"
            prev = self.blocks[j - 1].state
            st = apply_transactions(prev, rp.new_txs, self.blocks[j].header.producer, self.registry)
            bad = redaction_violation(old, rp.new_txs, self.params, st == self.blocks[j].state)
            if bad:
                return bad
        return None

    def proposal_violation(self, rp: RepairProposal) -> str | None:
        j = rp.target_height
        if not 1 <= j <= self.stable_top:
            return "target is not a stable non-genesis block"
        if tx_root(self.blocks[j].txs) != rp.old_root:
            return "old root does not match the target block"
        if len(self.root_heights.get(rp.old_root, ())) != 1:
            return "old root names more than one block"
        bad = self._content_violation(rp)
        if bad:
            return bad
        st = apply_transactions(self.blocks[j - 1].state, rp.new_txs, self.blocks[j].header.producer, self.registry)
        if st != rp.new_state:
            return "new state is not the transition over the new transactions"
        return None

    # -- applying due repairs ---------------------------------------------------

    def _apply(self, rp: RepairProposal, height: int) -> AdbEntry:
        j = rp.target_height
        if self._content_violation(rp) is not None:
            return AdbEntry(height, replace(rp, new_state=self.blocks[j].state), applied=False)
        old_root = tx_root(self.blocks[j].txs)
        gone = {e.digest for e in rp.new_txs if isinstance(e, RedactedStub)} if rp.kind is RepairKind.REDACTION else set()
        st = cascade(self.blocks, self.rdb, j, rp.new_txs, rp.kind, self.registry)
        new_root = tx_root(rp.new_txs)
        if new_root != old_root:
            self._unindex_root(old_root, j)
            self._index_root(new_root, j)
        if rp.kind is RepairKind.STATEFUL:
            self.stateful.add(j)
        if gone:
            self.redacted[j] = self.redacted.get(j, frozenset()) | gone
        return AdbEntry(height, replace(rp, new_state=st))

    def _perform(
        self,
        next_slot: int,
        given: Sequence[AdbEntry] | None,
        pool: Mapping[Digest, RepairProposal] | None,
    ) -> tuple[AdbEntry, ...]:
        height = self.tip + 1
        ref_of = {}
        out: list[AdbEntry] = []
        pending = list(given) if given is not None else None
        for pid in self.due(next_slot):
            ref = self.index.reference(pid, self.stable_top, self.policy.k)
            ref_of[pid] = ref
            self.closed.add((pid, ref))
            j = self.unique_target(pid)
            if j is None:
                continue
            if pending is not None:
                if not pending:
                    raise BlockInvalid("an approved repair is missing", height)
                claimed = pending.pop(0)
                rp = claimed.proposal
                if rp.id != pid or rp.target_height != j or claimed.approval_height != height:
                    raise BlockInvalid("repair log does not match the approved repairs", height)
                if not kind_matches(self.blocks[j].txs, rp.new_txs, rp.kind):
                    raise BlockInvalid("repair log declares the wrong kind", height)
            else:
                rp = (pool or {}).get(pid)
                if rp is None:
                    raise CannotProduce(f"contents of approved repair {pid.hex()} unknown")
                if rp.target_height != j:
                    rp = replace(rp, target_height=j)
                rp = replace(rp, kind=infer_kind(self.blocks[j].txs, rp.new_txs))
                claimed = None
            entry = self._apply(rp, height)
            if claimed is not None and entry != claimed:
                raise BlockInvalid("repair log entry differs from the re-performed repair", height)
            out.append(entry)
        if pending:
            raise BlockInvalid("repair log holds an unapproved repair", height)
        return tuple(out)

    # -- validation -------------------------------------------------------------

    def _consensus_ok(self, block: Block) -> bool:
        h = block.header
        cd = h.consensus
        if self.params.is_pos:
            if not isinstance(cd, PosData):
                return False
            payload = (h.parent, h.tx_root, h.state_root)
            return vfy_pos(self.blocks, cd, payload, h.slot, self.params.epoch, self.registry, self.slots)
        return isinstance(cd, PowData) and cd.difficulty == self.params.difficulty and chk_pow(h)

    def extend(self, block: Block, entries: Sequence[AdbEntry] = ()) -> None:
        """Validate ``block`` in originally produced form plus the repairs it applies, then append.

        On failure the ledger may be left partially updated; validate on a clone
        when the ledger must survive.
        """
        height = self.tip + 1
        h = block.header
        for e in block.txs:
            if isinstance(e, Transaction) and not well_formed(e):
                raise BlockInvalid("malformed transaction", height)
        if h.parent != self.blocks[-1].digest:
            raise BlockInvalid("parent link", height)
        if h.slot <= self.slots[-1]:
            raise BlockInvalid("slot does not increase", height)
        if not block.body_matches_header():
            raise BlockInvalid("body does not match header commitments", height)
        applied = self._perform(h.slot, entries, None)
        if not self._consensus_ok(block):
            raise BlockInvalid("consensus proof", height)
        if not any(isinstance(e, RedactedStub) for e in block.txs):
            st = apply_transactions(self.blocks[-1].state, block.txs, h.producer, self.registry)
            if st != block.state:
                raise BlockInvalid("state transition", height)
        self._append(block, applied)

    # -- production -------------------------------------------------------------

    def may_lead(self, slot: int, address: Address) -> bool:
        """Cheap eligibility pre-check; True whenever repairs due at ``slot`` make it undecidable."""
        if not self.params.is_pos or slot <= self.slots[-1] or self.due(slot):
            return slot > self.slots[-1]
        snap, seed = pos_context(self.blocks, slot, self.params.epoch.ell, self.slots)
        return is_leader(snap, address, self.params.epoch.f, seed)

    def produce(
        self,
        slot: int,
        key: bytes,
        txs: Sequence[Transaction],
        pool: Mapping[Digest, RepairProposal] | None = None,
        max_attempts: int = 1 << 62,
    ) -> Block | None:
        """Build, seal and append the next block; None when this producer may not seal ``slot``.

        Raises ``CannotProduce`` when an approved repair is due but its contents are unknown.
        """
        if slot <= self.slots[-1]:
            return None
        work = self.clone() if self.due(slot) else self
        entries = work._perform(slot, None, pool)
        producer = key_address(key)
        body = tuple(t for t in txs if well_formed(t))
        parent = work.blocks[-1]
        st = apply_transactions(parent.state, body, producer, self.registry)
        root = tx_root(body)
        if self.params.is_pos:
            try:
                proof = prf_pos(work.blocks, key, producer, (parent.digest, root, st.root), slot,
                                       self.params.epoch, work.slots)
            except NotSlotLeader:
                return None
            header = Header(parent.digest, root, st.root, slot, PosData(proof, producer))
        else:
            draft = Header(parent.digest, root, st.root, slot, PowData(self.params.difficulty, 0, producer))
            header = pow_seal(draft, max_attempts)
            if header is None:
                return None
        block = Block(header, body, st)
        work._append(block, entries)
        if work is not self:
            self.__dict__.update(work.__dict__)
        return block

    # -- whole chains -----------------------------------------------------------

    @classmethod
    def replay(cls, chain: Sequence[Block], layer: RepairLayer) -> "Ledger":
        """Validate an exported chain with its repair layer; raises ``BlockInvalid``."""
        if not chain:
            raise BlockInvalid("empty chain")
        if len(layer.rdb) != len(chain) or len(layer.adb) != len(chain):
            raise BlockInvalid("repair layer length differs from the chain")
        if layer.rdb[0] is not None or layer.adb[0]:
            raise BlockInvalid("genesis carries repair data", 0)
        led = cls(chain[0])
        for j in range(1, len(chain)):
            hdr = chain[j].header
            orig = layer.rdb[j]
            if orig is None:
                block = chain[j]
            else:
                block = Block(hdr, orig.txs, orig.state)
                if tx_root(orig.txs) != hdr.tx_root or orig.state.root != hdr.state_root:
                    raise BlockInvalid("stored original does not match the header", j)
            led.extend(block, layer.adb[j])
        for j, (mine, theirs) in enumerate(zip(led.blocks, chain)):
            if mine != theirs:
                raise BlockInvalid("repaired body differs from the replayed one", j)
        for j, (mine, theirs) in enumerate(zip(led.rdb, layer.rdb)):
            if mine != theirs:
                raise BlockInvalid("stored original differs from the replayed one", j)
            if theirs is not None:
                stubs = {e.digest for e in theirs.txs if isinstance(e, RedactedStub)}
                if not stubs <= led.redacted.get(j, frozenset()):
                    raise BlockInvalid("stored original hides an entry no repair redacted", j)
        return led


def check_chain(chain: Sequence[Block], layer: RepairLayer) -> Verdict:
    try:
        Ledger.replay(chain, layer)
    except BlockInvalid as exc:
        return Verdict(False, exc.height, exc.clause)
    return Verdict(True)


def validate_chain(chain: Sequence[Block], layer: RepairLayer) -> bool:
    return check_chain(chain, layer).ok


def validate_block(
    chain: Sequence[Block], layer: RepairLayer, block: Block, entries: Sequence[AdbEntry] = ()
) -> tuple[tuple[Block, ...], RepairLayer] | None:
    """Extend a valid chain by ``block`` (in produced form) and the repairs it applies; None if invalid."""
    try:
        led = Ledger.replay(chain, layer)
        led.extend(block, entries)
    except BlockInvalid:
        return None
    return led.chain(), led.layer()


def propose_repair(chain: Sequence[Block], layer: RepairLayer, j: int, new_txs: Sequence[TxEntry]) -> RepairProposal:
    return Ledger.replay(chain, layer).propose(j, new_txs)


def validate_proposal(
    chain: Sequence[Block], layer: RepairLayer, rp: RepairProposal, policy: Policy | None = None
) -> bool:
    led = Ledger.replay(chain, layer)
    if policy is not None:
        led.params = replace(led.params, policy=policy)
    return led.proposal_violation(rp) is None


def update_proposal_pool(
    pool: Mapping[Digest, RepairProposal],
    ledger: Ledger,
    incoming: Sequence[RepairProposal],
    veto: Callable[[Digest], bool] | None = None,
) -> dict[Digest, RepairProposal]:
    """Admit valid, non-redundant proposals and drop those whose outcome is settled."""
    out = {pid: rp for pid, rp in pool.items() if not ledger.settled(pid)}
    for rp in incoming:
        pid = rp.id
        if pid in out or ledger.settled(pid):
            continue
        if veto is not None and veto(pid):
            continue
        if ledger.proposal_violation(rp) is None:
            out[pid] = rp
    return out

