"""Global state transition and a small contract machine.

Contracts are straight-line instruction lists stored as JSON text in the creating
transaction's data field, e.g.::

    [{"op": "REQUIRE_SENDER", "addr": "<40 hex>"},
     {"op": "PAY", "to": "<40 hex>", "amount": "full"},
     {"op": "STORE", "key": "<64 hex>", "value": "<64 hex>"},
     {"op": "HALT"}, {"op": "ABORT"}]

``amount`` is either the string ``"full"`` (whole contract balance) or an integer,
capped at the contract balance when executed.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

from .core import (
    ADDRESS_LEN,
    DIGEST_LEN,
    REQ_ADDR,
    VOTE_ADDR,
    Account,
    AccountState,
    Address,
    RedactedStub,
    Transaction,
    TxEntry,
    contract_address,
    sign,
)

FEE = 1
MAX_PROGRAM_LEN = 64
REPAIR_DATA_LEN = 64
VOTE_DATA_LEN = 32

Registry = Mapping[Address, bytes]


# -- instructions -------------------------------------------------------------


@dataclass(frozen=True)
class Pay:
    to: Address
    amount: int | None  # None pays the full balance


@dataclass(frozen=True)
class Store:
    key: bytes
    value: bytes


@dataclass(frozen=True)
class RequireSender:
    addr: Address


@dataclass(frozen=True)
class Halt:
    pass


@dataclass(frozen=True)
class Abort:
    pass


Instruction = Union[Pay, Store, RequireSender, Halt, Abort]


class ProgramError(ValueError):
    pass


def _hex_field(obj: dict, name: str, length: int) -> bytes:
    raw = obj.get(name)
    if not isinstance(raw, str) or len(raw) != 2 * length or raw != raw.lower():
        raise ProgramError(f"{name}: expected {length}-byte lowercase hex")
    try:
        return bytes.fromhex(raw)
    except ValueError as exc:
        raise ProgramError(str(exc)) from None


def encode_program(program: Sequence[Instruction]) -> bytes:
    if len(program) > MAX_PROGRAM_LEN:
        raise ProgramError("program too long")
    out = []
    for ins in program:
        if isinstance(ins, Pay):
            out.append({"op": "PAY", "to": ins.to.hex(), "amount": "full" if ins.amount is None else ins.amount})
        elif isinstance(ins, Store):
            out.append({"op": "STORE", "key": ins.key.hex(), "value": ins.value.hex()})
        elif isinstance(ins, RequireSender):
            out.append({"op": "REQUIRE_SENDER", "addr": ins.addr.hex()})
        elif isinstance(ins, Halt):
            out.append({"op": "HALT"})
        elif isinstance(ins, Abort):
            out.append({"op": "ABORT"})
        else:
            raise ProgramError(f"unknown instruction {ins!r}")
    return json.dumps(out, separators=(",", ":")).encode()


def decode_program(data: bytes) -> tuple[Instruction, ...]:
    try:
        raw = json.loads(data.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProgramError(f"not a program: {exc}") from None
    if not isinstance(raw, list) or not raw or len(raw) > MAX_PROGRAM_LEN:
        raise ProgramError("program must be a non-empty list of at most 64 instructions")
    program: list[Instruction] = []
    for obj in raw:
        if not isinstance(obj, dict):
            raise ProgramError("instruction must be an object")
        op = obj.get("op")
        if op == "PAY":
            amount = obj.get("amount")
            if amount == "full":
                amt = None
            elif isinstance(amount, int) and not isinstance(amount, bool) and amount >= 0:
                amt = amount
            else:
                raise ProgramError("PAY amount must be 'full' or a non-negative integer")
            program.append(Pay(_hex_field(obj, "to", ADDRESS_LEN), amt))
        elif op == "STORE":
            program.append(Store(_hex_field(obj, "key", DIGEST_LEN), _hex_field(obj, "value", DIGEST_LEN)))
        elif op == "REQUIRE_SENDER":
            program.append(RequireSender(_hex_field(obj, "addr", ADDRESS_LEN)))
        elif op == "HALT":
            program.append(Halt())
        elif op == "ABORT":
            program.append(Abort())
        else:
            raise ProgramError(f"unknown op {op!r}")
    return tuple(program)


# -- transaction validation ---------------------------------------------------


class Reason(enum.Enum):
    OK = "Ok"
    BAD_FORMAT = "BadFormat"
    BAD_AUTH = "BadAuth"
    BAD_NONCE = "BadNonce"
    INSUFFICIENT_BALANCE = "InsufficientBalance"
    CONTRACT_ABORT = "ContractAbort"
    SPECIAL_CALL = "SpecialCall"


@dataclass(frozen=True)
class TxOutcome:
    applied: bool
    reason: Reason


class CallKind(enum.Enum):
    REPAIR = "RepairCall"
    VOTE = "VoteCall"
    NORMAL = "Normal"


def is_special_call(tx: Transaction) -> CallKind:
    if tx.to == REQ_ADDR:
        return CallKind.REPAIR
    if tx.to == VOTE_ADDR:
        return CallKind.VOTE
    return CallKind.NORMAL


def well_formed(tx: Transaction) -> bool:
    """Field lengths plus the fixed data sizes of repair and vote calls."""
    if len(tx.frm) != ADDRESS_LEN or len(tx.to) != ADDRESS_LEN or len(tx.auth) != DIGEST_LEN:
        return False
    if not (0 <= tx.value < 1 << 64 and 0 <= tx.nonce < 1 << 64):
        return False
    kind = is_special_call(tx)
    if kind is CallKind.REPAIR:
        return len(tx.data) == REPAIR_DATA_LEN
    if kind is CallKind.VOTE:
        return len(tx.data) == VOTE_DATA_LEN
    return True


def auth_ok(tx: Transaction, registry: Registry) -> bool:
    key = registry.get(tx.frm)
    return key is not None and sign(key, tx.payload()) == tx.auth


def _check(tx: Transaction, sender: Account, registry: Registry) -> TxOutcome:
    if not well_formed(tx):
        return TxOutcome(False, Reason.BAD_FORMAT)
    if not auth_ok(tx, registry):
        return TxOutcome(False, Reason.BAD_AUTH)
    if tx.nonce != sender.nonce:
        return TxOutcome(False, Reason.BAD_NONCE)
    if sender.bal < tx.value + FEE:
        return TxOutcome(False, Reason.INSUFFICIENT_BALANCE)
    if is_special_call(tx) is not CallKind.NORMAL:
        return TxOutcome(True, Reason.SPECIAL_CALL)
    return TxOutcome(True, Reason.OK)


def validate_tx(st: AccountState, tx: Transaction, registry: Registry) -> TxOutcome:
    """Stateless format/auth checks plus nonce and balance against ``st``.

    Contract aborts only surface when the transaction is applied.
    """
    return _check(tx, st.get_account(tx.frm), registry)


# -- execution ----------------------------------------------------------------


class _Accounts:
    """Mutable working copy used while folding one block."""

    def __init__(self, st: AccountState):
        self.base = st
        self.changed: dict[Address, Account] = {}

    def get(self, address: Address) -> Account:
        acc = self.changed.get(address)
        if acc is None:
            acc = self.base.get_account(address)
        return acc

    def put(self, acc: Account) -> None:
        self.changed[acc.address] = acc

    def credit(self, address: Address, amount: int) -> None:
        acc = self.get(address)
        self.put(Account(acc.address, acc.bal + amount, acc.nonce, acc.code, acc.storage))

    def debit(self, address: Address, amount: int) -> None:
        acc = self.get(address)
        if acc.bal < amount:
            raise AssertionError("negative balance")
        self.put(Account(acc.address, acc.bal - amount, acc.nonce, acc.code, acc.storage))

    def checkpoint(self) -> dict[Address, Account]:
        return dict(self.changed)

    def restore(self, saved: dict[Address, Account]) -> None:
        self.changed = saved

    def result(self) -> AccountState:
        return self.base.updated(self.changed)


def _run(accs: _Accounts, contract: Address, caller: Address, value: int) -> bool:
    """Credit ``value`` and run the contract's code; False means it aborted."""
    accs.credit(contract, value)
    try:
        program = decode_program(accs.get(contract).code)
    except ProgramError:
        return False
    for ins in program:
        if isinstance(ins, Halt):
            return True
        if isinstance(ins, Abort):
            return False
        if isinstance(ins, RequireSender):
            if caller != ins.addr:
                return False
        elif isinstance(ins, Pay):
            bal = accs.get(contract).bal
            amount = bal if ins.amount is None else min(ins.amount, bal)
            accs.debit(contract, amount)
            accs.credit(ins.to, amount)
        elif isinstance(ins, Store):
            accs.put(accs.get(contract).with_storage(ins.key, ins.value))
    return True


def exec_contract(st: AccountState, contract: Address, caller: Address, value: int) -> AccountState:
    """Run a contract call on ``st``; an abort returns ``st`` unchanged."""
    accs = _Accounts(st)
    if not _run(accs, contract, caller, value):
        return st
    return accs.result()


def _apply_one(accs: _Accounts, tx: Transaction, producer: Address, registry: Registry) -> TxOutcome:
    sender = accs.get(tx.frm)
    outcome = _check(tx, sender, registry)
    if not outcome.applied:
        return outcome
    saved = accs.checkpoint()
    accs.put(Account(sender.address, sender.bal - tx.value - FEE, sender.nonce + 1, sender.code, sender.storage))
    if outcome.reason is Reason.SPECIAL_CALL:
        accs.credit(producer, tx.value + FEE)
        return outcome
    accs.credit(producer, FEE)
    recipient = accs.get(tx.to)
    if recipient.is_contract:
        if not _run(accs, tx.to, tx.frm, tx.value):
            accs.restore(saved)
            return TxOutcome(False, Reason.CONTRACT_ABORT)
    elif tx.data and tx.to == contract_address(tx.frm, tx.nonce):
        try:
            decode_program(tx.data)
        except ProgramError:
            accs.restore(saved)
            return TxOutcome(False, Reason.CONTRACT_ABORT)
        accs.put(Account(tx.to, recipient.bal + tx.value, recipient.nonce, tx.data, recipient.storage))
    else:
        accs.credit(tx.to, tx.value)
    return outcome


def apply_with_outcomes(
    st: AccountState, txs: Iterable[TxEntry], producer: Address, registry: Registry
) -> tuple[AccountState, list[TxOutcome | None]]:
    accs = _Accounts(st)
    outcomes: list[TxOutcome | None] = []
    for entry in txs:
        if isinstance(entry, RedactedStub):
            outcomes.append(None)
            continue
        outcomes.append(_apply_one(accs, entry, producer, registry))
    return accs.result(), outcomes


def apply_transactions(
    st: AccountState, txs: Iterable[TxEntry], producer: Address, registry: Registry
) -> AccountState:
    """The state transition: fold every full entry left to right, skipping invalid ones and stubs."""
    return apply_with_outcomes(st, txs, producer, registry)[0]
