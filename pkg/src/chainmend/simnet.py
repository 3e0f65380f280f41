"""Deterministic slot-driven network simulation of honest and byzantine nodes.

Each slot: scripted events fire, nodes issue workload transactions, eligible nodes
seal a block on their own best chain and broadcast a snapshot of it, then the
messages whose delivery slot has come are handed over. A node adopts a received
chain only when it is strictly longer than its own and passes full replay.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .consensus import EpochParams
from .core import (
    Account,
    Address,
    Block,
    Digest,
    RedactedStub,
    Transaction,
    key_address,
    make_tx,
)
from .ledger import BlockInvalid, CannotProduce, Ledger, update_proposal_pool
from .params import ChainParams, ParamsError, Policy, make_genesis
from .repair import RdbEntry, RepairKind, RepairLayer, RepairProposal, build_repair_tx, build_vote_tx, cascade
from .state import Abort, CallKind, encode_program, is_special_call

STRATEGIES = ("withhold", "spam-vote", "tamper-body", "tamper-rdb", "fork-extend")
EVENTS = ("propose", "veto", "partition", "heal")
SINK = bytes(19) + b"\x42"
TOTAL_STAKE = 6_000_000
MAX_BODY = 12


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    seed: int
    consensus: str = "pos"
    nodes: int = 6
    byzantine_fraction: float = 0.0
    max_delay: int = 1
    rounds: int = 80
    policy: Policy = field(default_factory=Policy)
    f: float = 0.5
    difficulty: int = 1
    hash_rate: int = 1
    tx_rate: float = 0.5
    strategies: tuple[str, ...] = STRATEGIES
    events: tuple[dict, ...] = ()

    def __post_init__(self):
        if self.nodes < 1 or self.rounds < 1 or self.max_delay < 0:
            raise ConfigError("need nodes >= 1, rounds >= 1 and max_delay >= 0")
        if not 0 <= self.byzantine_fraction < 1:
            raise ConfigError("byzantine_fraction must be in [0, 1)")
        if self.consensus not in ("pos", "pow"):
            raise ConfigError("consensus must be 'pos' or 'pow'")
        if self.consensus == "pow" and (self.difficulty < 1 or self.hash_rate < 1):
            raise ConfigError("PoW needs difficulty >= 1 and hash_rate >= 1")
        if self.consensus == "pos" and not 0 < self.f <= 1:
            raise ConfigError("f must be in (0, 1]")
        if not self.strategies or any(s not in STRATEGIES for s in self.strategies):
            raise ConfigError(f"strategies must be drawn from {STRATEGIES}")
        for ev in self.events:
            if not isinstance(ev, Mapping) or ev.get("event") not in EVENTS:
                raise ConfigError(f"bad event {ev!r}")
            if not isinstance(ev.get("slot"), int) or ev["slot"] < 1:
                raise ConfigError(f"event needs a slot >= 1: {ev!r}")
            if ev["event"] == "veto" and not (isinstance(ev.get("proposal", 0), int) and ev.get("proposal", 0) >= 0):
                raise ConfigError(f"veto needs a proposal index >= 0: {ev!r}")
        self.strategies = tuple(self.strategies)
        self.events = tuple(dict(e) for e in self.events)

    def chain_params(self) -> ChainParams:
        try:
            if self.consensus == "pos":
                return ChainParams("pos", self.policy, epoch=EpochParams(self.policy.ell, self.f))
            return ChainParams("pow", self.policy, difficulty=self.difficulty)
        except (ParamsError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> dict:
        out = asdict(self)
        out["policy"] = self.policy.to_json()
        out["strategies"] = list(self.strategies)
        out["events"] = [dict(e) for e in self.events]
        return out

    @classmethod
    def from_json(cls, raw: Mapping[str, Any]) -> "ScenarioConfig":
        if not isinstance(raw, Mapping) or "seed" not in raw:
            raise ConfigError("config needs a seed")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = dict(raw)
        try:
            if "policy" in kw:
                kw["policy"] = Policy.from_json(kw["policy"])
            if "strategies" in kw:
                kw["strategies"] = tuple(kw["strategies"])
            if "events" in kw:
                kw["events"] = tuple(kw["events"])
            for name in ("seed", "nodes", "max_delay", "rounds", "difficulty", "hash_rate"):
                if name in kw and (not isinstance(kw[name], int) or isinstance(kw[name], bool)):
                    raise ConfigError(f"{name} must be an integer")
            return cls(**kw)
        except (ParamsError, TypeError) as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class RunReport:
    final_digests: list[str]
    lengths: list[int]
    growth: float
    quality: float
    ecp_violations: int
    approvals: list[dict]
    timeline: list[list]

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    def timeline_csv(self) -> str:
        rows = ["slot,node,event,digest"]
        rows += [",".join(str(x) for x in row) for row in self.timeline]
        return "\n".join(rows) + "\n"


class Snapshot:
    """A broadcast chain; the replay verdict is computed once and shared by all receivers."""

    def __init__(self, chain: tuple[Block, ...], layer: RepairLayer):
        self.chain = chain
        self.layer = layer
        self._ledger: Ledger | None = None
        self.error: BlockInvalid | None = None
        self._checked = False

    def __len__(self) -> int:
        return len(self.chain)

    def ledger(self) -> Ledger | None:
        if not self._checked:
            self._checked = True
            try:
                self._ledger = Ledger.replay(self.chain, self.layer)
            except BlockInvalid as exc:
                self.error = exc
        return self._ledger


@dataclass
class Node:
    idx: int
    key: bytes
    byzantine: bool
    strategy: str | None
    ledger: Ledger
    attempts: int = 1
    mempool: dict[Digest, Transaction] = field(default_factory=dict)
    included: set[Digest] = field(default_factory=set)
    pool: dict[Digest, RepairProposal] = field(default_factory=dict)
    archive: dict[Digest, RepairProposal] = field(default_factory=dict)
    heard: list[RepairProposal] = field(default_factory=list)
    vetoed: set[Digest] = field(default_factory=set)
    lengths: list[int] = field(default_factory=list)

    @property
    def address(self) -> Address:
        return key_address(self.key)

    def reindex(self) -> None:
        self.included = {e.digest for b in self.ledger.blocks for e in b.txs}
        self.mempool = {d: t for d, t in self.mempool.items() if d not in self.included}


def _stakes(n: int, frac: float) -> tuple[list[bool], list[int]]:
    nb = 0 if frac == 0 else min(max(1, round(frac * n)), n - 1)
    byz = [i >= n - nb for i in range(n)]
    stakes = []
    for b in byz:
        share = frac / nb if b else (1 - frac) / (n - nb)
        stakes.append(max(int(TOTAL_STAKE * share), 1))
    return byz, stakes


class Simulation:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.params = cfg.chain_params()
        keys = [bytes([i + 1]) * 16 + cfg.seed.to_bytes(8, "big", signed=True) + bytes(8) for i in range(cfg.nodes)]
        self.byz, stakes = _stakes(cfg.nodes, cfg.byzantine_fraction)
        balances = {key_address(k): s for k, s in zip(keys, stakes)}
        sink = Account(SINK, 0, 0, encode_program([Abort()]))
        genesis = make_genesis(self.params, keys, balances, [sink])
        base = Ledger(genesis)
        strategies = list(cfg.strategies)
        self.nodes: list[Node] = []
        nb = 0
        for i, k in enumerate(keys):
            strat = None
            if self.byz[i]:
                strat = strategies[nb % len(strategies)]
                nb += 1
            attempts = max(1, round(cfg.hash_rate * stakes[i] * cfg.nodes / TOTAL_STAKE))
            self.nodes.append(Node(i, k, self.byz[i], strat, base.clone(), attempts, lengths=[1]))
        self.queue: dict[int, list[tuple[int, str, Any]]] = {}
        self.cut: list[set[int]] | None = None
        self.held: list[tuple[int, str, Any]] = []
        self.timeline: list[list] = []
        self.proposals: list[Digest] = []
        # the transaction each scripted proposal redacts or removes
        self.edited: dict[Digest, Transaction] = {}

    # -- messaging ------------------------------------------------------------

    def log(self, slot: int, node: int, event: str, digest: bytes | str = "") -> None:
        self.timeline.append([slot, node, event, digest.hex() if isinstance(digest, bytes) else digest])

    def _separated(self, a: int, b: int) -> bool:
        return self.cut is not None and not any(a in g and b in g for g in self.cut)

    def send(self, slot: int, src: int, kind: str, payload: Any, extra_delay: int = 0) -> None:
        for node in self.nodes:
            if node.idx == src:
                continue
            delay = self.rng.randint(0, self.cfg.max_delay) + extra_delay
            msg = (node.idx, kind, payload)
            if self._separated(src, node.idx):
                self.held.append(msg)
            else:
                self.queue.setdefault(slot + delay, []).append(msg)

    def deliver(self, slot: int) -> None:
        for dst, kind, payload in self.queue.pop(slot, []):
            node = self.nodes[dst]
            if kind == "tx":
                if payload.digest not in node.included:
                    node.mempool[payload.digest] = payload
            elif kind == "proposal":
                node.heard.append(payload)
            elif kind == "chain":
                self.receive(slot, node, payload)

    def receive(self, slot: int, node: Node, snap: Snapshot) -> None:
        margin = 2 if node.strategy == "fork-extend" else 1
        if len(snap) < len(node.ledger.blocks) + margin:
            return
        led = snap.ledger()
        if led is None:
            self.log(slot, node.idx, f"reject:{snap.error.clause}", snap.chain[-1].digest)
            return
        node.ledger = led.clone()
        node.reindex()
        self.log(slot, node.idx, "adopt", snap.chain[-1].digest)

    # -- scripted events ------------------------------------------------------

    def fire(self, slot: int, ev: Mapping[str, Any]) -> bool:
        """Run one scripted event; False when it must be retried next slot."""
        kind = ev["event"]
        if kind == "partition":
            self.cut = [set(g) for g in ev.get("groups", [])]
            self.log(slot, -1, "partition")
        elif kind == "heal":
            self.cut = None
            for msg in self.held:
                self.queue.setdefault(slot + self.rng.randint(0, self.cfg.max_delay), []).append(msg)
            self.held = []
            self.log(slot, -1, "heal")
        elif kind == "veto":
            i = ev.get("proposal", 0)
            if not 0 <= i < len(self.proposals):
                # the proposal it names has not been made yet
                return False
            pid = self.proposals[i]
            for node in self.nodes:
                if not node.byzantine:
                    node.vetoed.add(pid)
                    node.pool.pop(pid, None)
            self.log(slot, -1, "veto", pid)
        elif kind == "propose":
            return self.propose(slot, self.nodes[ev.get("node", 0) % len(self.nodes)], ev.get("action", "redact"))
        return True

    def propose(self, slot: int, node: Node, action: str) -> bool:
        led = node.ledger
        for j in range(led.stable_top, 0, -1):
            txs = led.blocks[j].txs
            for i, e in enumerate(txs):
                if not isinstance(e, Transaction) or is_special_call(e) is not CallKind.NORMAL:
                    continue
                if action == "redact" and e.to == SINK:
                    new = txs[:i] + (RedactedStub(e.digest),) + txs[i + 1:]
                elif action == "remove" and e.to != SINK and e.value > 0:
                    new = txs[:i] + txs[i + 1:]
                else:
                    continue
                rp = led.propose(j, new)
                if led.proposal_violation(rp) is not None:
                    continue
                self.proposals.append(rp.id)
                self.edited[rp.id] = e
                node.heard.append(rp)
                self.send(slot, node.idx, "proposal", rp)
                tx = build_repair_tx(node.key, rp, self._nonce(node))
                node.mempool[tx.digest] = tx
                self.send(slot, node.idx, "tx", tx)
                self.log(slot, node.idx, f"propose:{action}:{j}", rp.id)
                return True
        return False

    # -- workload and production ----------------------------------------------

    def _nonce(self, node: Node) -> int:
        base = node.ledger.blocks[-1].state.get_account(node.address).nonce
        mine = [t for t in node.mempool.values() if t.frm == node.address and t.to != SINK]
        return base + len(mine)

    def workload(self, slot: int, node: Node) -> None:
        if self.rng.random() >= self.cfg.tx_rate:
            return
        if self.rng.random() < 0.5:
            nonce = node.ledger.blocks[-1].state.get_account(node.address).nonce
            tx = make_tx(node.key, SINK, 0, nonce, b"note:" + slot.to_bytes(8, "big") + bytes([node.idx]))
        else:
            peer = self.nodes[self.rng.randrange(len(self.nodes))]
            tx = make_tx(node.key, peer.address, self.rng.randint(1, 5), self._nonce(node))
        node.mempool[tx.digest] = tx
        self.send(slot, node.idx, "tx", tx)

    def _votes(self, node: Node) -> list[Digest]:
        led = node.ledger
        if node.strategy == "withhold":
            return []
        if node.strategy == "spam-vote":
            return sorted(pid for pid in led.index.refs if not led.settled(pid))[:4]
        return sorted(pid for pid in node.pool if pid in led.index.refs and not led.settled(pid) and pid not in node.vetoed)

    def produce(self, slot: int, node: Node) -> None:
        led = node.ledger
        if not led.may_lead(slot, node.address):
            return
        # oldest first, so a backlog cannot starve any one transaction
        body = [t for d, t in node.mempool.items() if d not in node.included][:MAX_BODY]
        body.sort(key=lambda t: (t.frm, t.nonce))
        start = led.blocks[-1].state.get_account(node.address).nonce
        mine = sum(1 for t in body if t.frm == node.address and t.to != SINK)
        body += [build_vote_tx(node.key, pid, start + mine + i) for i, pid in enumerate(self._votes(node))]
        try:
            block = led.produce(slot, node.key, body, node.archive, max_attempts=node.attempts)
        except CannotProduce as exc:
            self.log(slot, node.idx, "stall", str(exc).split()[-2])
            return
        if block is None:
            return
        node.included.update(e.digest for e in block.txs)
        self.log(slot, node.idx, "produce", block.digest)
        snap = Snapshot(led.chain(), led.layer())
        if node.strategy == "withhold":
            self.send(slot, node.idx, "chain", snap, extra_delay=self.cfg.policy.ell)
        elif node.strategy == "tamper-body":
            self.send(slot, node.idx, "chain", self._tamper_body(led) or snap)
        elif node.strategy == "tamper-rdb":
            self.send(slot, node.idx, "chain", self._tamper_rdb(led) or snap)
        else:
            self.send(slot, node.idx, "chain", snap)

    def _tamper_body(self, led: Ledger) -> Snapshot | None:
        """An unapproved repair: drop a payment from a stable block and re-cascade."""
        for j in range(led.stable_top, 0, -1):
            txs = led.blocks[j].txs
            for i, e in enumerate(txs):
                if isinstance(e, Transaction) and e.value > 0 and is_special_call(e) is CallKind.NORMAL:
                    blocks, rdb = list(led.blocks), list(led.rdb)
                    cascade(blocks, rdb, j, txs[:i] + txs[i + 1:], RepairKind.STATEFUL, led.registry)
                    return Snapshot(tuple(blocks), RepairLayer(tuple(rdb), tuple(led.adb)))
        return None

    def _tamper_rdb(self, led: Ledger) -> Snapshot | None:
        """Serve a forged original for a block: credit the producer in the stored state."""
        j = max(led.stable_top, 1)
        if j >= len(led.blocks):
            return None
        b = led.blocks[j]
        rdb = list(led.rdb)
        orig = rdb[j] or RdbEntry(b.txs, b.state)
        acc = orig.state.get_account(b.header.producer)
        forged = orig.state.updated({acc.address: Account(acc.address, acc.bal + 1000, acc.nonce, acc.code, acc.storage)})
        rdb[j] = RdbEntry(orig.txs, forged)
        return Snapshot(led.chain(), RepairLayer(tuple(rdb), tuple(led.adb)))

    # -- main loop ------------------------------------------------------------

    def run(self) -> RunReport:
        events: dict[int, list[dict]] = {}
        for ev in self.cfg.events:
            events.setdefault(ev["slot"], []).append(ev)
        for slot in range(1, self.cfg.rounds + 1):
            for ev in events.pop(slot, []):
                if not self.fire(slot, ev):
                    # no eligible target yet, or the vetoed proposal is not made yet
                    events.setdefault(slot + 1, []).append(ev)
            for node in self.nodes:
                node.pool = update_proposal_pool(node.pool, node.ledger, node.heard, veto=node.vetoed.__contains__)
                for rp in node.heard:
                    if rp.id in node.pool:
                        node.archive[rp.id] = rp
                node.heard = [rp for rp in node.heard if rp.id not in node.pool and not node.ledger.settled(rp.id)]
                self.workload(slot, node)
            for node in self.nodes:
                self.produce(slot, node)
            self.deliver(slot)
            for node in self.nodes:
                node.lengths.append(len(node.ledger.blocks))
        # drain messages already in flight so that final views are comparable
        for slot in range(self.cfg.rounds + 1, self.cfg.rounds + 2 + self.cfg.max_delay):
            self.deliver(slot)
        return self.report()

    def report(self) -> RunReport:
        honest = [n for n in self.nodes if not n.byzantine]
        k = self.cfg.policy.k
        violations = 0
        for a in range(len(honest)):
            for b in range(a + 1, len(honest)):
                la, lb = honest[a].ledger, honest[b].ledger
                if len(la.blocks) > len(lb.blocks):
                    la, lb = lb, la
                if not check_editable_common_prefix(la.chain(), lb.chain(), la.layer(), lb.layer(), k):
                    violations += 1
        s = min(self.cfg.policy.ell, self.cfg.rounds)
        growth = min(measure_chain_growth(n.lengths, s) for n in honest) if honest else 0.0
        ref = honest[0] if honest else self.nodes[0]
        owners = {n.address: n.byzantine for n in self.nodes}
        quality = measure_chain_quality(ref.ledger.chain(), owners, self.cfg.policy.ell, ref.ledger.layer())
        approvals = [
            {
                "id": e.proposal.id.hex(),
                "target_height": e.proposal.target_height,
                "approval_height": e.approval_height,
                "kind": e.proposal.kind.value,
                "applied": e.applied,
            }
            for entries in ref.ledger.adb
            for e in entries
        ]
        return RunReport(
            [n.ledger.blocks[-1].digest.hex() for n in self.nodes],
            [len(n.ledger.blocks) for n in self.nodes],
            growth,
            quality,
            violations,
            approvals,
            self.timeline,
        )


def run_scenario(cfg: ScenarioConfig) -> RunReport:
    return Simulation(cfg).run()


# -- measurements -------------------------------------------------------------


def _covered(j: int, *layers: RepairLayer) -> bool:
    return any(
        e.applied and e.proposal.target_height <= j for layer in layers for entries in layer.adb for e in entries
    )


def check_editable_common_prefix(
    a: Sequence[Block], b: Sequence[Block], la: RepairLayer, lb: RepairLayer, k: int
) -> bool:
    """Is prune(a, k) a prefix of b, up to bodies changed by applied repairs?

    Headers must agree on the whole pruned prefix; a differing body at height j is
    tolerated only if some applied repair in either chain targets a height <= j.
    """
    if len(a) > len(b):
        a, b, la, lb = b, a, lb, la
    for j in range(max(len(a) - k, 0)):
        if a[j] == b[j]:
            continue
        if a[j].header != b[j].header or not _covered(j, la, lb):
            return False
    return True


def measure_chain_growth(lengths: Sequence[int], s: int) -> float:
    """Minimum length gain per slot over every window of ``s`` slots.

    ``lengths[t]`` is the chain length after slot t, with ``lengths[0]`` taken before slot 1.
    """
    if s < 1 or len(lengths) < s + 1:
        raise ValueError("trace must span at least s slots")
    return min((lengths[t + s] - lengths[t]) / s for t in range(len(lengths) - s))


def measure_chain_quality(
    chain: Sequence[Block],
    byzantine: Mapping[Address, bool],
    ell: int,
    layer: RepairLayer | None = None,
) -> float:
    """Largest fraction of byzantine-produced blocks in any window of ``ell`` consecutive blocks.

    Blocks whose contents were replaced by an applied repair count as honest.
    """
    endorsed = set()
    if layer is not None:
        endorsed = {e.proposal.target_height for entries in layer.adb for e in entries if e.applied}
    flags = [
        byzantine.get(b.header.producer, False) and h not in endorsed
        for h, b in enumerate(chain)
        if h > 0
    ]
    if not flags:
        return 0.0
    w = min(ell, len(flags))
    return max(sum(flags[t:t + w]) / w for t in range(len(flags) - w + 1))


def binomial_tail(ell: int, p: float) -> float:
    """P[X > ell/2] for X ~ Binomial(ell, p)."""
    return math.fsum(math.comb(ell, x) * p**x * (1 - p) ** (ell - x) for x in range(ell // 2 + 1, ell + 1))


def monte_carlo_malicious_approval(ell: int, rho_tilde: float, trials: int, seed: int = 0) -> tuple[float, float, float]:
    """Fraction of windows where byzantine blocks alone hold a strict majority of votes.

    Returns (empirical rate, exact binomial tail, ell * rho_tilde ** (ell/2 + 1)).
    """
    if ell < 1 or trials < 1 or not 0 <= rho_tilde <= 1:
        raise ValueError("need ell >= 1, trials >= 1 and rho_tilde in [0, 1]")
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 1 << 16
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        votes = (rng.random((m, ell)) < rho_tilde).sum(axis=1)
        hits += int((votes * 2 > ell).sum())
        done += m
    return hits / trials, binomial_tail(ell, rho_tilde), ell * rho_tilde ** (ell / 2 + 1)
