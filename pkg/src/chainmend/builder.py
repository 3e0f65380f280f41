"""Scripted single-chain construction on top of ``Ledger``."""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

from .core import Account, Address, Block, Digest, Transaction, TxEntry, key_address, make_tx
from .ledger import Ledger
from .params import ChainParams, make_genesis
from .repair import RepairProposal, build_repair_tx, build_vote_tx


def demo_key(i: int) -> bytes:
    """Deterministic 32-byte key for account ``i`` of a scenario."""
    return bytes([i % 256]) * 31 + bytes([i // 256 % 256])


class ChainBuilder:
    """Collects transactions, seals blocks and carries repair proposals through voting."""

    def __init__(
        self,
        params: ChainParams,
        keys: Sequence[bytes],
        balances: Mapping[Address, int],
        extra_accounts: Iterable[Account] = (),
    ):
        self.keys = list(keys)
        self.ledger = Ledger(make_genesis(params, keys, balances, extra_accounts))
        self.pending: list[Transaction] = []
        self.pool: dict[Digest, RepairProposal] = {}

    @property
    def params(self) -> ChainParams:
        return self.ledger.params

    @property
    def tip(self) -> int:
        return self.ledger.tip

    def next_nonce(self, address: Address) -> int:
        n = self.ledger.blocks[-1].state.get_account(address).nonce
        return n + sum(1 for t in self.pending if t.frm == address)

    def send(self, key: bytes, to: Address, value: int, data: bytes = b"") -> Transaction:
        tx = make_tx(key, to, value, self.next_nonce(key_address(key)), data)
        self.pending.append(tx)
        return tx

    def add(self, tx: Transaction) -> None:
        self.pending.append(tx)

    def request(self, key: bytes, rp: RepairProposal) -> Transaction:
        """Queue a repair request and remember the proposal's contents."""
        tx = build_repair_tx(key, rp, self.next_nonce(key_address(key)))
        self.pending.append(tx)
        self.pool[rp.id] = rp
        return tx

    def propose(self, j: int, new_txs: Sequence[TxEntry]) -> RepairProposal:
        return self.ledger.propose(j, new_txs)

    def _open_votes(self) -> list[Digest]:
        return [pid for pid in self.pool if pid in self.ledger.index.refs and not self.ledger.settled(pid)]

    def block(self, key: bytes | None = None, vote: bool | Iterable[Digest] = True, slot: int | None = None) -> Block:
        """Seal the pending transactions into the next block.

        Under PoS the first slot (from ``slot`` on) won by ``key``, or by any known
        key when ``key`` is None, is used. ``vote`` adds the producer's votes: True
        for every open proposal in the pool, or an explicit list of ids.
        """
        start = self.ledger.slots[-1] + 1 if slot is None else slot
        candidates = self.keys if key is None else [key]
        for s in range(start, start + 100_000):
            for k in candidates:
                body = list(self.pending)
                ids = self._open_votes() if vote is True else list(vote or ())
                addr = key_address(k)
                nonce = self.next_nonce(addr)
                body += [build_vote_tx(k, pid, nonce + i) for i, pid in enumerate(ids)]
                b = self.ledger.produce(s, k, body, self.pool)
                if b is not None:
                    self.pending.clear()
                    return b
            if not self.params.is_pos:
                break
        raise RuntimeError("no block could be sealed")

    def run(self, n: int, key: bytes | None = None, vote: bool | Iterable[Digest] = True) -> None:
        for _ in range(n):
            self.block(key, vote)
