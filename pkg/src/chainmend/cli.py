"""Command-line driver.

Exit status: 0 valid or success, 1 invalid chain or rejected input, 2 usage or config error.
Machine-readable results go to stdout as JSON, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .codec import FormatError, decode_chain, encode_chain, proposal_request_from_json
from .ledger import BlockInvalid, Ledger, check_chain
from .repair import RepairError
from .simnet import ConfigError, ScenarioConfig, Simulation, monte_carlo_malicious_approval

OK, INVALID, USAGE = 0, 1, 2


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def load_config(path: str, seed: int | None = None) -> ScenarioConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    if seed is not None and isinstance(raw, dict):
        raw["seed"] = seed
    return ScenarioConfig.from_json(raw)


def cmd_run(config: str, out: str, chain_out: str | None = None, seed: int | None = None, fmt: str = "json") -> int:
    try:
        cfg = load_config(config, seed)
        sim = Simulation(cfg)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return USAGE
    report = sim.run()
    out_path = Path(out)
    out_path.write_text(report.timeline_csv() if fmt == "csv" else report.dumps())
    chain_path = Path(chain_out) if chain_out else out_path.with_suffix(".chain.jsonl")
    led = sim.nodes[0].ledger
    chain_path.write_bytes(encode_chain(led.chain(), led.layer()))
    _emit({"report": str(out_path), "chain": str(chain_path), "ecp_violations": report.ecp_violations,
           "length": report.lengths[0]})
    return OK


def _read_chain(path: str):
    data = Path(path).read_bytes()
    return decode_chain(data)


def cmd_validate(chain: str) -> int:
    try:
        c, layer = _read_chain(chain)
    except OSError as exc:
        _err(f"cannot read chain: {exc}")
        return USAGE
    except FormatError as exc:
        _emit({"valid": False, "height": None, "clause": f"format: {exc}"})
        return INVALID
    v = check_chain(c, layer)
    _emit({"valid": v.ok, "height": v.height, "clause": v.clause, "length": len(c)})
    if not v.ok:
        _err(f"invalid at height {v.height}: {v.clause}")
    return OK if v.ok else INVALID


def cmd_propose(chain: str, proposal: str) -> int:
    try:
        c, layer = _read_chain(chain)
        raw = json.loads(Path(proposal).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _err(f"cannot read input: {exc}")
        return USAGE
    except FormatError as exc:
        _emit({"accepted": False, "reason": f"format: {exc}"})
        return INVALID
    try:
        j, txs, kind = proposal_request_from_json(raw)
        led = Ledger.replay(c, layer)
        rp = led.propose(j, txs)
    except (FormatError, BlockInvalid, RepairError) as exc:
        _emit({"accepted": False, "reason": f"{type(exc).__name__}: {exc}"})
        return INVALID
    if kind is not None and kind is not rp.kind:
        _emit({"accepted": False, "reason": f"declared kind {kind.value} but the change is {rp.kind.value}"})
        return INVALID
    bad = led.proposal_violation(rp)
    if bad:
        _emit({"accepted": False, "reason": bad})
        return INVALID
    _emit({
        "accepted": True,
        "id": rp.id.hex(),
        "kind": rp.kind.value,
        "target_height": rp.target_height,
        "repair_data": rp.repair_data.hex(),
        "new_state_root": rp.new_state.root.hex(),
    })
    return OK


def cmd_export(chain: str, out: str) -> int:
    """Validate a chain file and write it back in canonical form."""
    try:
        c, layer = _read_chain(chain)
    except OSError as exc:
        _err(f"cannot read chain: {exc}")
        return USAGE
    except FormatError as exc:
        _emit({"exported": False, "reason": f"format: {exc}"})
        return INVALID
    v = check_chain(c, layer)
    if not v.ok:
        _emit({"exported": False, "height": v.height, "reason": v.clause})
        return INVALID
    Path(out).write_bytes(encode_chain(c, layer))
    _emit({"exported": True, "out": out, "length": len(c)})
    return OK


def cmd_import(src: str, out: str) -> int:
    """Read a JSON array of block records (any formatting), validate, write canonical JSON lines."""
    try:
        records = json.loads(Path(src).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _err(f"cannot read input: {exc}")
        return USAGE
    if not isinstance(records, list):
        _emit({"imported": False, "reason": "expected a JSON array of block records"})
        return INVALID
    lines = "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records).encode("ascii")
    try:
        c, layer = decode_chain(lines)
    except FormatError as exc:
        _emit({"imported": False, "reason": f"format: {exc}"})
        return INVALID
    v = check_chain(c, layer)
    if not v.ok:
        _emit({"imported": False, "height": v.height, "reason": v.clause})
        return INVALID
    Path(out).write_bytes(encode_chain(c, layer))
    _emit({"imported": True, "out": out, "length": len(c)})
    return OK


def cmd_montecarlo(ell: int, rho_tilde: float, trials: int, seed: int = 0) -> int:
    try:
        rate, tail, expr = monte_carlo_malicious_approval(ell, rho_tilde, trials, seed)
    except ValueError as exc:
        _err(str(exc))
        return USAGE
    _emit({"ell": ell, "rho_tilde": rho_tilde, "trials": trials, "seed": seed,
           "empirical": rate, "binomial_tail": tail, "closed_form": expr})
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chainmend", description="Repairable blockchain toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run a simulation scenario")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True, help="report path")
    run.add_argument("--chain", help="where to write node 0's chain (default: next to the report)")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--format", choices=("json", "csv"), default="json")

    val = sub.add_parser("validate", help="replay a chain export from genesis")
    val.add_argument("--chain", required=True)

    prop = sub.add_parser("propose", help="check a repair proposal against a chain")
    prop.add_argument("--chain", required=True)
    prop.add_argument("--proposal", required=True)

    exp = sub.add_parser("export", help="validate and write a chain in canonical form")
    exp.add_argument("--chain", required=True)
    exp.add_argument("--out", required=True)

    imp = sub.add_parser("import", help="convert a JSON array of block records to a chain export")
    imp.add_argument("--chain", required=True, help="input JSON array")
    imp.add_argument("--out", required=True)

    mc = sub.add_parser("montecarlo", help="malicious-approval Monte Carlo")
    mc.add_argument("ell", type=int)
    mc.add_argument("rho_tilde", type=float)
    mc.add_argument("trials", type=int)
    mc.add_argument("--seed", type=int, default=0)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else OK
    if args.cmd == "run":
        return cmd_run(args.config, args.out, args.chain, args.seed, args.format)
    if args.cmd == "validate":
        return cmd_validate(args.chain)
    if args.cmd == "propose":
        return cmd_propose(args.chain, args.proposal)
    if args.cmd == "export":
        return cmd_export(args.chain, args.out)
    if args.cmd == "import":
        return cmd_import(args.chain, args.out)
    return cmd_montecarlo(args.ell, args.rho_tilde, args.trials, args.seed)


if __name__ == "__main__":
    sys.exit(main())
