import pytest

from chainmend.builder import ChainBuilder
from chainmend.core import H, REQ_ADDR, VOTE_ADDR, RedactedStub, contract_address, make_tx, tx_root
from chainmend.ledger import (
    Ledger,
    check_chain,
    propose_repair,
    update_proposal_pool,
    validate_block,
    validate_chain,
    validate_proposal,
)
from chainmend.params import Policy
from chainmend.repair import (
    AlreadyRedacted,
    GenesisImmutable,
    IndexOutOfRange,
    MalformedReplacement,
    NotApproved,
    RepairKind,
    RepairLayer,
    Status,
    UnknownProposal,
    UnstableTarget,
    apply_repair,
    build_repair_tx,
    build_vote_tx,
    chk_approval,
    repair_chain,
    retain_and_redact,
    vote,
)
from chainmend.state import Pay, RequireSender, apply_transactions, encode_program

from conftest import ADDRS, KEYS, LENIENT, build_repaired, builder, pos_params, pow_params, sink_note, stub_out


def fresh(n: int = 6, **kw) -> ChainBuilder:
    b = builder(pow_params(**kw))
    b.send(KEYS[0], ADDRS[1], 5)
    b.block(KEYS[0])
    b.send(KEYS[1], ADDRS[2], 7)
    b.block(KEYS[1])
    b.run(n)
    return b


# -- proposals ---------------------------------------------------------------------


def test_genesis_and_unstable_targets_refused():
    b = fresh(1)
    with pytest.raises(GenesisImmutable):
        b.propose(0, ())
    with pytest.raises(UnstableTarget):
        b.propose(b.tip, b.ledger.blocks[b.tip].txs)


def test_malformed_replacement_refused():
    b = fresh()
    bad = make_tx(KEYS[0], REQ_ADDR, 0, 0, bytes(63))
    with pytest.raises(MalformedReplacement):
        b.propose(1, (bad,))
    forged = make_tx(KEYS[1], ADDRS[1], 5, 0)
    forged = type(forged)(ADDRS[0], forged.to, forged.value, forged.nonce, forged.data, forged.auth)
    with pytest.raises(MalformedReplacement):
        b.propose(1, (forged,))


def test_identity_repair():
    b = fresh()
    rp = b.propose(1, b.ledger.blocks[1].txs)
    assert rp.new_state == b.ledger.blocks[1].state
    r = tx_root(b.ledger.blocks[1].txs)
    assert vote(b.ledger.chain(), rp) == H(r + r) == rp.id
    assert validate_proposal(b.ledger.chain(), b.ledger.layer(), rp)


def test_policy_refuses_value_change_and_vote_tampering():
    b = fresh()
    chain, layer = b.ledger.chain(), b.ledger.layer()
    changed = b.propose(1, (make_tx(KEYS[0], ADDRS[1], 3, 0),))
    assert not validate_proposal(chain, layer, changed)
    # with a policy that leaves value editable the same change passes
    assert validate_proposal(chain, layer, changed, Policy(ell=4, rho=0.5, k=2, forbidden_fields=frozenset({"from", "to"})))

    rp = b.propose(1, b.ledger.blocks[1].txs)
    b.request(KEYS[3], rp)
    b.block(KEYS[2])
    b.block(KEYS[2])
    h = b.tip
    b.run(4, vote=False)
    chain, layer = b.ledger.chain(), b.ledger.layer()
    voted = b.ledger.blocks[h].txs
    assert any(getattr(t, "to", None) == VOTE_ADDR for t in voted)
    for i, t in enumerate(voted):
        if getattr(t, "to", None) in (VOTE_ADDR, REQ_ADDR):
            assert not validate_proposal(chain, layer, propose_repair(chain, layer, h, voted[:i] + voted[i + 1:]))
            assert not validate_proposal(chain, layer, propose_repair(chain, layer, h, retain_and_redact(voted, [i])))


def test_escrow_fix_changes_code_only():
    owner, thief = KEYS[0], ADDRS[3]
    b = builder(pow_params(forbidden_fields=frozenset({"from", "to", "value"})))
    esc = contract_address(ADDRS[0], 0)
    buggy = encode_program([RequireSender(thief), Pay(ADDRS[0], None)])
    b.send(owner, esc, 40, buggy)
    b.block(KEYS[1])
    b.send(owner, esc, 0)
    b.block(KEYS[1])
    b.run(3)
    assert b.ledger.blocks[-1].state.balance(esc) == 40
    fixed = encode_program([RequireSender(ADDRS[0]), Pay(ADDRS[0], None)])
    rp = b.propose(1, (make_tx(owner, esc, 40, 0, fixed),))
    old = b.ledger.blocks[1].state
    assert rp.new_state[esc].code == fixed != old[esc].code
    assert all(rp.new_state.balance(a) == old.balance(a) for a in [*ADDRS, esc])
    # replay oracle: after the fix the later withdrawal drains the escrow to the owner
    chain, layer = apply_repair(b.ledger.chain(), b.ledger.layer(), rp, b.ledger.registry)
    assert chain[-1].state.balance(esc) == 0
    assert chain[-1].state.balance(ADDRS[0]) == old.balance(ADDRS[0]) + 40 - 1


# -- request and vote formats --------------------------------------------------


def test_request_and_vote_byte_formats():
    b = fresh()
    rp = b.propose(1, b.ledger.blocks[1].txs)
    req = build_repair_tx(KEYS[0], rp, 0)
    vt = build_vote_tx(KEYS[0], rp.id, 0)
    assert len(req.data) == 64 and req.to == REQ_ADDR and req.to[-1] == 0x13
    assert len(vt.data) == 32 and vt.to == VOTE_ADDR and vt.to[-1] == 0x14
    assert H(req.data) == rp.id == vt.data


def test_distinct_proposals_distinct_ids():
    b = fresh()
    chain = b.ledger.chain()
    a = b.propose(2, b.ledger.blocks[2].txs)
    c = b.propose(2, ())
    assert vote(chain, a) == vote(chain, a) != vote(chain, c)


# -- approval ------------------------------------------------------------------------


def window_chain(votes_in_window: int, ell: int = 10, k: int = 2):
    b = fresh(3, ell=ell, k=k)
    rp = b.propose(1, b.ledger.blocks[1].txs)
    b.request(KEYS[3], rp)
    b.block(KEYS[2], vote=False)
    h_req = b.tip
    b.run(k, vote=False)
    for i in range(ell):
        b.block(KEYS[i % 4], vote=[rp.id] if i < votes_in_window else False)
    return b, rp, h_req


def test_six_of_ten_approves_and_five_rejects():
    pol = Policy(ell=10, rho=0.5, k=2)
    b, rp, h = window_chain(6)
    end = h + 2 + 10
    st = chk_approval(pol, b.ledger.chain()[: end + 1], rp.id)
    assert st.status is Status.APPROVE and (st.votes_for, st.window_size) == (6, 10)
    b, rp, h = window_chain(5)
    st = chk_approval(pol, b.ledger.chain()[: end + 1], rp.id)
    assert st.status is Status.REJECT and st.votes_for == 5
    assert chk_approval(pol, b.ledger.chain()[:end], rp.id).status is Status.VOTING
    with pytest.raises(UnknownProposal):
        chk_approval(pol, b.ledger.chain()[: h + 1], rp.id)


def test_veto_rejects():
    b, rp, h = window_chain(8)
    pol = Policy(ell=10, rho=0.5, k=2, external_veto=lambda pid: True)
    assert chk_approval(pol, b.ledger.chain()[: h + 13], rp.id).status is Status.REJECT


def test_only_producer_votes_count():
    b = fresh(3, ell=10)
    rp = b.propose(1, b.ledger.blocks[1].txs)
    b.request(KEYS[3], rp)
    b.block(KEYS[2], vote=False)
    h = b.tip
    b.run(2, vote=False)
    for i in range(10):
        # a vote from someone other than the producer, twice per block
        b.add(build_vote_tx(KEYS[3], rp.id, b.next_nonce(ADDRS[3])))
        b.add(build_vote_tx(KEYS[3], rp.id, b.next_nonce(ADDRS[3])))
        b.block(KEYS[0], vote=False)
    st = chk_approval(b.params.policy, b.ledger.chain()[: h + 13], rp.id)
    assert st.votes_for == 0 and st.status is Status.REJECT


# -- retainAndRedact -------------------------------------------------------------


def test_retain_and_redact():
    t = [make_tx(KEYS[0], ADDRS[1], i, i) for i in range(3)]
    out = retain_and_redact(t, {1})
    assert out == (t[0], RedactedStub(t[1].digest), t[2])
    assert tx_root(out) == tx_root(t)
    assert retain_and_redact(t[:1], {0}) == (RedactedStub(t[0].digest),)
    with pytest.raises(IndexOutOfRange):
        retain_and_redact(t, {5})
    with pytest.raises(AlreadyRedacted):
        retain_and_redact(out, {1})


# -- repairChain ------------------------------------------------------------------


def test_repair_chain_requires_approval():
    b = fresh()
    rp = b.propose(1, b.ledger.blocks[1].txs)
    with pytest.raises(NotApproved):
        repair_chain(b.ledger.chain(), b.ledger.layer(), rp)


def test_repair_head_block_only_touches_head():
    b = fresh()
    c, layer = b.ledger.chain(), b.ledger.layer()
    n = len(c) - 1
    rp = b.ledger.propose(b.ledger.stable_top, c[b.ledger.stable_top].txs)
    rp = type(rp)(n, tx_root(c[n].txs), (), apply_transactions(c[n - 1].state, (), c[n].header.producer, b.ledger.registry), RepairKind.STATEFUL)
    out, lay = apply_repair(c, layer, rp, b.ledger.registry)
    assert out[:n] == c[:n] and out[n].txs == () and out[n].header == c[n].header
    assert lay.rdb[n].txs == c[n].txs and all(r is None for r in lay.rdb[:n])


def test_payment_fix_matches_fresh_replay():
    b = fresh()
    c, layer = b.ledger.chain(), b.ledger.layer()
    rp = b.propose(1, (make_tx(KEYS[0], ADDRS[1], 3, 0),))
    out, lay = apply_repair(c, layer, rp, b.ledger.registry)
    st = c[0].state
    for blk in out[1:]:
        st = apply_transactions(st, blk.txs, blk.header.producer, b.ledger.registry)
    assert st == out[-1].state
    assert out[-1].state.balance(ADDRS[0]) == c[-1].state.balance(ADDRS[0]) + 2
    assert all(x.header == y.header for x, y in zip(out, c))
    # a second repair on the same block keeps the first originals
    rp2 = Ledger.replay(c, layer).propose(1, ())
    rp2 = type(rp2)(1, tx_root(out[1].txs), (), rp2.new_state, RepairKind.STATEFUL)
    out2, lay2 = apply_repair(out, lay, rp2, b.ledger.registry)
    assert lay2.rdb[1] == lay.rdb[1] and lay2.rdb[1].txs == c[1].txs


# -- block and chain validation ----------------------------------------------------


def test_clean_chain_valid():
    b = fresh()
    assert validate_chain(b.ledger.chain(), b.ledger.layer())


def test_end_to_end_fixture_valid(repaired_pow, repaired_pos):
    for r in (repaired_pow, repaired_pos):
        led = r.b.ledger
        assert validate_chain(led.chain(), led.layer())
        assert led.blocks[1].txs == r.stateful.new_txs
        assert RedactedStub(r.secret.digest) in led.blocks[2].txs
        assert RedactedStub(r.secret.digest) in led.rdb[2].txs


def test_validate_block_accepts_ordinary_and_rejects_unapproved():
    b, rp, h = window_chain(5, ell=4)
    b.pool[rp.id] = rp
    led = b.ledger
    c, layer = led.chain(), led.layer()
    nxt = led.clone()
    blk = nxt.produce(led.slots[-1] + 1, KEYS[0], ())
    assert validate_block(c, layer, blk) is not None
    # force the rejected repair into a block
    forced = led.clone()
    entry = forced._apply(rp, forced.tip + 1)
    blk = forced.produce(led.slots[-1] + 1, KEYS[0], ())
    assert validate_block(c, layer, blk, (entry,)) is None


def test_unapproved_adb_entry_breaks_chain(repaired_pow):
    led = repaired_pow.b.ledger
    c, layer = led.chain(), led.layer()
    h = next(i for i, es in enumerate(layer.adb) if es)
    adb = list(layer.adb)
    adb[h] = adb[h][1:]
    assert not check_chain(c, RepairLayer(layer.rdb, tuple(adb))).ok
    adb = list(layer.adb)
    adb[h] = tuple(reversed(adb[h]))
    assert not check_chain(c, RepairLayer(layer.rdb, tuple(adb))).ok


# -- proposal pool -----------------------------------------------------------------


def test_update_proposal_pool():
    b = fresh()
    led = b.ledger
    good = b.propose(1, led.blocks[1].txs)
    bad = b.propose(1, (make_tx(KEYS[0], ADDRS[1], 3, 0),))
    spam = type(good)(1, H(b"no such block"), good.new_txs, good.new_state, good.kind)
    pool = update_proposal_pool({}, led, [good, bad, spam])
    assert list(pool) == [good.id]
    assert update_proposal_pool(pool, led, [good]) == pool
    b.request(KEYS[3], good)
    for _ in range(60):
        if led.settled(good.id):
            break
        b.block()
    assert led.settled(good.id)
    assert update_proposal_pool(pool, led, []) == {}


def test_pos_fixture_applies_both_kinds():
    r = build_repaired(pos_params(**LENIENT))
    kinds = {e.proposal.kind for es in r.b.ledger.adb for e in es if e.applied}
    assert kinds == {RepairKind.STATEFUL, RepairKind.REDACTION}


def test_pos_redaction_must_be_neutral():
    b = builder(pos_params())
    b.send(KEYS[0], ADDRS[1], 0)
    b.block(None)
    b.run(4)
    j = next(i for i, blk in enumerate(b.ledger.blocks) if i and blk.txs)
    led = b.ledger
    t = led.blocks[j].txs[0]
    rp = led.propose(j, stub_out(led.blocks[j].txs, t))
    assert rp.kind is RepairKind.REDACTION
    assert led.proposal_violation(rp) is not None


def test_pow_zero_value_redaction_allowed():
    b = builder(pow_params())
    b.send(KEYS[0], ADDRS[1], 0, b"memo")
    b.block(KEYS[1])
    b.run(4)
    led = b.ledger
    t = led.blocks[1].txs[0]
    rp = led.propose(1, stub_out(led.blocks[1].txs, t))
    assert led.proposal_violation(rp) is None


def test_sink_note_is_neutral():
    b = builder(pow_params())
    before = b.ledger.blocks[-1].state
    sink_note(b, KEYS[0], b"x")
    blk = b.block(KEYS[1])
    assert blk.state == before
