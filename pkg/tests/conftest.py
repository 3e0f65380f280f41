"""Shared chain fixtures built with the scripted builder."""

from __future__ import annotations

from dataclasses import dataclass

import pytest

from chainmend.builder import ChainBuilder, demo_key
from chainmend.consensus import EpochParams
from chainmend.core import Account, RedactedStub, Transaction, key_address, make_tx
from chainmend.params import ChainParams, Policy
from chainmend.repair import RepairProposal
from chainmend.simnet import SINK
from chainmend.state import Abort, encode_program

KEYS = [demo_key(i) for i in range(1, 5)]
ADDRS = [key_address(k) for k in KEYS]
SINK_ACCOUNT = Account(SINK, 0, 0, encode_program([Abort()]))


def pow_params(ell: int = 4, rho: float = 0.5, k: int = 2, **policy) -> ChainParams:
    return ChainParams("pow", Policy(ell=ell, rho=rho, k=k, **policy), difficulty=1)


def pos_params(ell: int = 4, rho: float = 0.5, k: int = 2, f: float = 0.5, **policy) -> ChainParams:
    return ChainParams("pos", Policy(ell=ell, rho=rho, k=k, **policy), epoch=EpochParams(ell, f))


def builder(params: ChainParams, balance: int = 1000) -> ChainBuilder:
    return ChainBuilder(params, KEYS, {a: balance for a in ADDRS}, [SINK_ACCOUNT])


def sink_note(b: ChainBuilder, key: bytes, note: bytes) -> Transaction:
    """A zero-value data carrier to the aborting sink; state neutral, so redactable in both modes."""
    addr = key_address(key)
    tx = make_tx(key, SINK, 0, b.ledger.blocks[-1].state.get_account(addr).nonce, note)
    b.add(tx)
    return tx


def stub_out(txs, target: Transaction):
    return tuple(RedactedStub(e.digest) if e == target else e for e in txs)


@dataclass
class Repaired:
    b: ChainBuilder
    stateful: RepairProposal
    redaction: RepairProposal
    secret: Transaction


def build_repaired(params: ChainParams) -> Repaired:
    """A chain with one applied payment fix (5 -> 3) at height 1 and one applied redaction at height 2."""
    b = builder(params)
    b.send(KEYS[0], ADDRS[1], 5)
    b.block(KEYS[0])
    secret = sink_note(b, KEYS[1], b"secret personal data")
    b.send(KEYS[2], ADDRS[3], 7)
    b.block(KEYS[1])
    b.run(params.policy.k + 1)
    fix = b.propose(1, (make_tx(KEYS[0], ADDRS[1], 3, 0),))
    red = b.propose(2, stub_out(b.ledger.blocks[2].txs, secret))
    b.request(KEYS[3], fix)
    b.request(KEYS[3], red)
    b.block()
    for _ in range(400):
        if b.ledger.settled(fix.id) and b.ledger.settled(red.id):
            break
        b.block()
    b.run(2)
    return Repaired(b, fix, red, secret)


# the payment fix edits a value field, so these chains allow it
LENIENT = {"forbidden_fields": frozenset({"from", "to"})}


@pytest.fixture(scope="session")
def repaired_pow() -> Repaired:
    return build_repaired(pow_params(**LENIENT))


@pytest.fixture(scope="session")
def repaired_pos() -> Repaired:
    return build_repaired(pos_params(**LENIENT))


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
    _ACCEPTANCE.append((name.removeprefix("test_"), "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split("_")[1])):
        terminalreporter.write_line(f"{verdict} {name} {detail}".rstrip())
