"""JSON-lines chain export.

One line per block, keys in a fixed order, compact separators, lowercase hex and
a trailing newline::

    {"height":0,"header":{...},"txs":[...],"state":[...],"rdb":null,"adb":[]}

Decoding is strict: a line is accepted only if re-encoding the decoded block
reproduces it byte for byte, so every byte of the file is either covered by a
commitment or by this canonical-form check.
"""

from __future__ import annotations

import json
from typing import Any, Iterable, Sequence

from .core import (
    ADDRESS_LEN,
    DIGEST_LEN,
    Account,
    AccountState,
    Block,
    Header,
    PosData,
    PowData,
    RedactedStub,
    Transaction,
    TxEntry,
)
from .repair import AdbEntry, RdbEntry, RepairKind, RepairLayer, RepairProposal


class FormatError(ValueError):
    pass


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True)


# -- to JSON ----------------------------------------------------------------------


def tx_to_json(e: TxEntry) -> dict:
    if isinstance(e, RedactedStub):
        return {"stub": e.digest.hex()}
    return {
        "full": {
            "from": e.frm.hex(),
            "to": e.to.hex(),
            "value": e.value,
            "nonce": e.nonce,
            "data": e.data.hex(),
            "auth": e.auth.hex(),
        }
    }


def state_to_json(st: AccountState) -> list:
    return [
        {
            "address": a.address.hex(),
            "bal": a.bal,
            "nonce": a.nonce,
            "code": a.code.hex(),
            "storage": [[k.hex(), v.hex()] for k, v in a.storage],
        }
        for a in st.accounts()
    ]


def header_to_json(h: Header) -> dict:
    cd = h.consensus
    if isinstance(cd, PowData):
        cons = {"type": "pow", "difficulty": cd.difficulty, "ctr": cd.ctr, "miner": cd.miner.hex()}
    else:
        cons = {"type": "pos", "proof": cd.proof.hex(), "leader": cd.leader.hex()}
    return {
        "parent": h.parent.hex(),
        "tx_root": h.tx_root.hex(),
        "state_root": h.state_root.hex(),
        "slot": h.slot,
        "consensus": cons,
    }


def adb_to_json(e: AdbEntry) -> dict:
    rp = e.proposal
    return {
        "approval_height": e.approval_height,
        "target_height": rp.target_height,
        "old_root": rp.old_root.hex(),
        "kind": rp.kind.value,
        "new_txs": [tx_to_json(t) for t in rp.new_txs],
        "new_state": state_to_json(rp.new_state),
        "applied": e.applied,
    }


def block_line(height: int, block: Block, rdb: RdbEntry | None, adb: Sequence[AdbEntry]) -> str:
    rec = {
        "height": height,
        "header": header_to_json(block.header),
        "txs": [tx_to_json(t) for t in block.txs],
        "state": state_to_json(block.state),
        "rdb": None if rdb is None else {"txs": [tx_to_json(t) for t in rdb.txs], "state": state_to_json(rdb.state)},
        "adb": [adb_to_json(e) for e in adb],
    }
    return _dumps(rec) + "\n"


def encode_chain(chain: Sequence[Block], layer: RepairLayer | None = None) -> bytes:
    if layer is None:
        layer = RepairLayer.empty(len(chain))
    if len(layer.rdb) != len(chain) or len(layer.adb) != len(chain):
        raise ValueError("repair layer length differs from the chain")
    return "".join(block_line(i, b, layer.rdb[i], layer.adb[i]) for i, b in enumerate(chain)).encode("ascii")


# -- from JSON --------------------------------------------------------------------


def _obj(raw: Any, keys: Iterable[str], what: str) -> dict:
    keys = list(keys)
    if not isinstance(raw, dict) or list(raw) != keys:
        raise FormatError(f"{what}: expected keys {keys}")
    return raw


def _int(raw: Any, what: str) -> int:
    if not isinstance(raw, int) or isinstance(raw, bool) or not 0 <= raw < 1 << 64:
        raise FormatError(f"{what}: expected an unsigned 64-bit integer")
    return raw


def _hex(raw: Any, what: str, length: int | None = None) -> bytes:
    if not isinstance(raw, str) or raw != raw.lower():
        raise FormatError(f"{what}: expected lowercase hex")
    try:
        out = bytes.fromhex(raw)
    except ValueError:
        raise FormatError(f"{what}: expected lowercase hex") from None
    if out.hex() != raw or (length is not None and len(out) != length):
        raise FormatError(f"{what}: expected {length}-byte hex")
    return out


def _list(raw: Any, what: str) -> list:
    if not isinstance(raw, list):
        raise FormatError(f"{what}: expected a list")
    return raw


def tx_from_json(raw: Any) -> TxEntry:
    if isinstance(raw, dict) and list(raw) == ["stub"]:
        return RedactedStub(_hex(raw["stub"], "stub", DIGEST_LEN))
    body = _obj(_obj(raw, ["full"], "tx")["full"], ["from", "to", "value", "nonce", "data", "auth"], "tx")
    return Transaction(
        _hex(body["from"], "from", ADDRESS_LEN),
        _hex(body["to"], "to", ADDRESS_LEN),
        _int(body["value"], "value"),
        _int(body["nonce"], "nonce"),
        _hex(body["data"], "data"),
        _hex(body["auth"], "auth", DIGEST_LEN),
    )


def state_from_json(raw: Any) -> AccountState:
    accounts = []
    for a in _list(raw, "state"):
        a = _obj(a, ["address", "bal", "nonce", "code", "storage"], "account")
        storage = []
        for pair in _list(a["storage"], "storage"):
            if not isinstance(pair, list) or len(pair) != 2:
                raise FormatError("storage: expected [key, value] pairs")
            storage.append((_hex(pair[0], "storage key", DIGEST_LEN), _hex(pair[1], "storage value", DIGEST_LEN)))
        accounts.append(
            Account(
                _hex(a["address"], "address", ADDRESS_LEN),
                _int(a["bal"], "bal"),
                _int(a["nonce"], "nonce"),
                _hex(a["code"], "code"),
                tuple(storage),
            )
        )
    st = AccountState(accounts)
    if len(st) != len(accounts):
        raise FormatError("state: duplicate address")
    return st


def header_from_json(raw: Any) -> Header:
    h = _obj(raw, ["parent", "tx_root", "state_root", "slot", "consensus"], "header")
    c = h["consensus"]
    if isinstance(c, dict) and c.get("type") == "pow":
        c = _obj(c, ["type", "difficulty", "ctr", "miner"], "consensus")
        cd = PowData(_int(c["difficulty"], "difficulty"), _int(c["ctr"], "ctr"), _hex(c["miner"], "miner", ADDRESS_LEN))
    else:
        c = _obj(c, ["type", "proof", "leader"], "consensus")
        if c["type"] != "pos":
            raise FormatError("consensus: unknown type")
        cd = PosData(_hex(c["proof"], "proof", DIGEST_LEN), _hex(c["leader"], "leader", ADDRESS_LEN))
    return Header(
        _hex(h["parent"], "parent", DIGEST_LEN),
        _hex(h["tx_root"], "tx_root", DIGEST_LEN),
        _hex(h["state_root"], "state_root", DIGEST_LEN),
        _int(h["slot"], "slot"),
        cd,
    )


def adb_from_json(raw: Any) -> AdbEntry:
    e = _obj(
        raw,
        ["approval_height", "target_height", "old_root", "kind", "new_txs", "new_state", "applied"],
        "adb entry",
    )
    try:
        kind = RepairKind(e["kind"])
    except ValueError:
        raise FormatError("adb entry: unknown kind") from None
    if not isinstance(e["applied"], bool):
        raise FormatError("adb entry: applied must be a boolean")
    rp = RepairProposal(
        _int(e["target_height"], "target_height"),
        _hex(e["old_root"], "old_root", DIGEST_LEN),
        tuple(tx_from_json(t) for t in _list(e["new_txs"], "new_txs")),
        state_from_json(e["new_state"]),
        kind,
    )
    return AdbEntry(_int(e["approval_height"], "approval_height"), rp, e["applied"])


def _decode_line(line: str, expected_height: int) -> tuple[Block, RdbEntry | None, tuple[AdbEntry, ...]]:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"line {expected_height}: {exc}") from None
    rec = _obj(raw, ["height", "header", "txs", "state", "rdb", "adb"], "block")
    if _int(rec["height"], "height") != expected_height:
        raise FormatError(f"line {expected_height}: heights must ascend from 0 without gaps")
    block = Block(
        header_from_json(rec["header"]),
        tuple(tx_from_json(t) for t in _list(rec["txs"], "txs")),
        state_from_json(rec["state"]),
    )
    rdb = None
    if rec["rdb"] is not None:
        r = _obj(rec["rdb"], ["txs", "state"], "rdb")
        rdb = RdbEntry(tuple(tx_from_json(t) for t in _list(r["txs"], "rdb txs")), state_from_json(r["state"]))
    adb = tuple(adb_from_json(e) for e in _list(rec["adb"], "adb"))
    return block, rdb, adb


def decode_chain(data: bytes) -> tuple[tuple[Block, ...], RepairLayer]:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        raise FormatError("export must be ASCII") from None
    if not text or not text.endswith("\n"):
        raise FormatError("export must be non-empty and end with a newline")
    blocks, rdb, adb = [], [], []
    for i, line in enumerate(text[:-1].split("\n")):
        b, r, a = _decode_line(line, i)
        if block_line(i, b, r, a) != line + "\n":
            raise FormatError(f"line {i}: not in canonical form")
        blocks.append(b)
        rdb.append(r)
        adb.append(a)
    return tuple(blocks), RepairLayer(tuple(rdb), tuple(adb))


# -- proposal files ---------------------------------------------------------------


def proposal_request_from_json(raw: Any) -> tuple[int, tuple[TxEntry, ...], RepairKind | None]:
    """Parse ``{"target_height", "new_txs", "kind"}``; kind may be omitted or null."""
    if not isinstance(raw, dict) or not {"target_height", "new_txs"} <= set(raw):
        raise FormatError("proposal: expected target_height and new_txs")
    kind = raw.get("kind")
    try:
        k = None if kind is None else RepairKind(kind)
    except ValueError:
        raise FormatError("proposal: kind must be 'redaction' or 'stateful'") from None
    txs = tuple(tx_from_json(t) for t in _list(raw["new_txs"], "new_txs"))
    return _int(raw["target_height"], "target_height"), txs, k
