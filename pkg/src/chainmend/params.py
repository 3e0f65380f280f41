"""Chain-wide parameters and the genesis block that commits to them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .consensus import EpochParams
from .core import (
    DIGEST_LEN,
    PARAMS_ADDR,
    REGISTRY_ADDR,
    ZERO_ADDRESS,
    ZERO_DIGEST,
    Account,
    AccountState,
    Address,
    Block,
    Digest,
    Header,
    PosData,
    PowData,
    Transaction,
    key_address,
    sign,
    tx_root,
)

FORBIDDEN_DEFAULT = frozenset({"from", "to", "value"})
FIELD_NAMES = frozenset({"from", "to", "value", "nonce", "data"})


class ParamsError(ValueError):
    pass


@dataclass(frozen=True)
class Policy:
    """Repair policy: voting window, approval fraction, and which repairs are allowed.

    ``external_veto`` is a node-local hook (id -> bool) standing in for off-chain
    judgement; it never travels with the chain.
    """

    ell: int = 10
    rho: float = 0.5
    k: int = 6
    allow_redaction: bool = True
    allow_stateful: bool = True
    forbidden_fields: frozenset = FORBIDDEN_DEFAULT
    protect_votes: bool = True
    protect_consensus_params: bool = True
    external_veto: Callable[[Digest], bool] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.protect_votes or not self.protect_consensus_params:
            raise ParamsError("vote and consensus-parameter protection cannot be disabled")
        if self.ell < 1 or self.k < 0:
            raise ParamsError("ell must be >= 1 and k >= 0")
        if not 0 < self.rho <= 1:
            raise ParamsError("rho must be in (0, 1]")
        object.__setattr__(self, "forbidden_fields", frozenset(self.forbidden_fields))
        if not self.forbidden_fields <= FIELD_NAMES:
            raise ParamsError(f"unknown forbidden fields: {sorted(self.forbidden_fields - FIELD_NAMES)}")

    @classmethod
    def bitcoin_style(cls, k: int = 6) -> "Policy":
        # more than half of 1024 consecutive blocks after the request is stable
        return cls(ell=1024, rho=0.5, k=k)

    def vetoed(self, pid: Digest) -> bool:
        return self.external_veto is not None and bool(self.external_veto(pid))

    def to_json(self) -> dict:
        return {
            "ell": self.ell,
            "rho": self.rho,
            "k": self.k,
            "allow_redaction": self.allow_redaction,
            "allow_stateful": self.allow_stateful,
            "forbidden_fields": sorted(self.forbidden_fields),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Policy":
        try:
            return cls(
                ell=int(obj["ell"]),
                rho=float(obj["rho"]),
                k=int(obj["k"]),
                allow_redaction=bool(obj["allow_redaction"]),
                allow_stateful=bool(obj["allow_stateful"]),
                forbidden_fields=frozenset(obj["forbidden_fields"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParamsError(f"bad policy: {exc}") from None


@dataclass(frozen=True)
class ChainParams:
    consensus: str  # "pow" or "pos"
    policy: Policy = Policy()
    difficulty: int = 1
    epoch: EpochParams | None = None

    def __post_init__(self):
        if self.consensus == "pow":
            if self.difficulty < 1:
                raise ParamsError("difficulty must be >= 1")
        elif self.consensus == "pos":
            if self.epoch is None:
                raise ParamsError("PoS needs epoch parameters")
            if self.epoch.ell != self.policy.ell:
                raise ParamsError("PoS voting window must coincide with the epoch (policy.ell == epoch.ell)")
        else:
            raise ParamsError(f"unknown consensus {self.consensus!r}")

    @property
    def is_pos(self) -> bool:
        return self.consensus == "pos"

    def to_json(self) -> dict:
        out: dict = {"consensus": self.consensus}
        if self.is_pos:
            out["f"] = self.epoch.f
            out["ell"] = self.epoch.ell
        else:
            out["difficulty"] = self.difficulty
        out["policy"] = self.policy.to_json()
        return out

    def encode(self) -> bytes:
        return json.dumps(self.to_json(), separators=(",", ":"), sort_keys=True).encode()

    @classmethod
    def from_json(cls, obj: Mapping) -> "ChainParams":
        try:
            policy = Policy.from_json(obj["policy"])
            if obj["consensus"] == "pos":
                return cls("pos", policy, epoch=EpochParams(int(obj["ell"]), float(obj["f"])))
            return cls(obj["consensus"], policy, difficulty=int(obj["difficulty"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParamsError(f"bad chain parameters: {exc}") from None

    def with_veto(self, veto: Callable[[Digest], bool] | None) -> "ChainParams":
        p = self.policy
        pol = Policy(p.ell, p.rho, p.k, p.allow_redaction, p.allow_stateful, p.forbidden_fields, external_veto=veto)
        return ChainParams(self.consensus, pol, self.difficulty, self.epoch)


def make_genesis(
    params: ChainParams,
    keys: Iterable[bytes],
    balances: Mapping[Address, int],
    extra_accounts: Iterable[Account] = (),
) -> Block:
    """Genesis block: a parameter record and one registration per key, plus the minted state."""
    txs: list[Transaction] = [Transaction(ZERO_ADDRESS, PARAMS_ADDR, 0, 0, params.encode())]
    for key in sorted(set(keys), key=key_address):
        if len(key) != DIGEST_LEN:
            raise ParamsError("keys are 32 bytes")
        addr = key_address(key)
        reg = Transaction(addr, REGISTRY_ADDR, 0, 0, key)
        txs.append(Transaction(reg.frm, reg.to, 0, 0, key, sign(key, reg.payload())))
    accounts = [Account(a, bal) for a, bal in balances.items()]
    state = AccountState([*accounts, *extra_accounts])
    if params.is_pos:
        cd = PosData()
    else:
        cd = PowData(params.difficulty, 0, ZERO_ADDRESS)
    header = Header(ZERO_DIGEST, tx_root(txs), state.root, 0, cd)
    return Block(header, tuple(txs), state)


def read_genesis(genesis: Block) -> tuple[ChainParams, dict[Address, bytes]]:
    """Recover parameters and the key registry from a genesis block."""
    txs = genesis.txs
    if not txs or not isinstance(txs[0], Transaction) or txs[0].to != PARAMS_ADDR:
        raise ParamsError("genesis lacks a parameter record")
    try:
        params = ChainParams.from_json(json.loads(txs[0].data.decode()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParamsError(f"bad parameter record: {exc}") from None
    if params.encode() != txs[0].data:
        raise ParamsError("parameter record is not canonical")
    registry: dict[Address, bytes] = {}
    for tx in txs[1:]:
        if not isinstance(tx, Transaction) or tx.to != REGISTRY_ADDR or len(tx.data) != DIGEST_LEN:
            raise ParamsError("malformed registration in genesis")
        if key_address(tx.data) != tx.frm or sign(tx.data, tx.payload()) != tx.auth:
            raise ParamsError("registration does not match its key")
        if tx.frm in registry:
            raise ParamsError("duplicate registration")
        registry[tx.frm] = tx.data
    cd = genesis.header.consensus
    expected_type = PosData if params.is_pos else PowData
    if not isinstance(cd, expected_type):
        raise ParamsError("genesis consensus data does not match the parameters")
    if isinstance(cd, PowData) and cd.difficulty != params.difficulty:
        raise ParamsError("genesis difficulty does not match the parameters")
    return params, registry
