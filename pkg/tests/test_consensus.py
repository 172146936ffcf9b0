"""Consensus engine tests over the simulated network."""

import random

from gridledger import consensus, crypto, simnet
from gridledger.consensus import (
    Behavior,
    ChainParams,
    ConsensusNode,
    ContractCall,
    PRIORITY_HIGH,
    PRIORITY_NORMAL,
    make_transaction,
)


class RegistryContract:
    """Minimal contract: registered senders, every call applies cleanly."""

    def __init__(self, keys):
        self.keys = dict(keys)
        self.applied = []

    def key_of(self, sender):
        return self.keys.get(sender)

    def apply(self, tx, height, timestamp):
        self.applied.append((height, tx.id))
        return type("R", (), {"ok": True, "reason": None, "detections": ()})()

    def state_digest(self):
        return crypto.hash(b"".join(tx_id for _, tx_id in self.applied))


class NodeActor:
    def __init__(self, sim, node, peer_ids):
        self.sim = sim
        self.node = node
        self.peer_ids = peer_ids
        self.commits = []
        self.alarms = []
        sim.register(node.node_id, self.on_event)

    # NodeEnv interface
    def now(self):
        return self.sim.now

    def send(self, dest, message):
        self.sim.send(self.node.node_id, dest, message)

    def broadcast(self, message):
        self.sim.broadcast(self.node.node_id, self.peer_ids, message)

    def schedule(self, delay, message):
        self.sim.schedule_self(self.node.node_id, delay, message)

    def on_commit(self, block):
        self.commits.append(block)

    def on_apply(self, tx, result, block):
        pass

    def on_alarm(self, kind, detail):
        self.alarms.append((kind, detail))

    def on_event(self, sim, event):
        self.node.handle(event.payload, event.source)


def build_network(
    n=4,
    seed=5,
    behaviors=(),
    block_interval=1.0,
    view_timeout=4.0,
    latency=0.005,
    capacity=512,
):
    rng = random.Random(seed)
    sim = simnet.Simulation(seed=seed, default_policy=simnet.LinkPolicy(base_latency=latency))
    node_ids = tuple(f"n{i}" for i in range(n))
    keys = {nid: crypto.keygen(rng=rng) for nid in node_ids}
    senders = {nid: crypto.keygen(rng=rng) for nid in node_ids}
    params = ChainParams(
        chain_id="test",
        node_ids=node_ids,
        node_keys={nid: kp.public_key for nid, kp in keys.items()},
        fault_bound=(n - 1) // 3,
        block_interval=block_interval,
        view_timeout=view_timeout,
        block_capacity=capacity,
    )
    actors = {}
    for nid in node_ids:
        contract = RegistryContract({s: kp.public_key for s, kp in senders.items()})
        node = ConsensusNode(params, nid, keys[nid], contract, env=None)
        actor = NodeActor(sim, node, node_ids)
        node.env = actor
        actors[nid] = actor
    for kind, nid in behaviors:
        actors[nid].node.behavior.kind = kind
    for actor in actors.values():
        actor.node.start()
    return sim, actors, senders, params


def tx_for(senders, sender, nonce, priority=PRIORITY_NORMAL, function="noop"):
    return make_transaction(
        sender,
        senders[sender].secret_key,
        ContractCall(function, (b"payload", nonce)),
        nonce=nonce,
        priority=priority,
    )


def honest_heights(actors):
    return {
        nid: a.node.height
        for nid, a in actors.items()
        if a.node.behavior.kind is Behavior.HONEST
    }


def assert_no_divergence(actors):
    by_height = {}
    for actor in actors.values():
        if actor.node.behavior.kind is not Behavior.HONEST:
            continue
        for block in actor.node.ledger:
            key = block.height
            if key in by_height:
                assert by_height[key] == block.digest, f"divergence at height {key}"
            else:
                by_height[key] = block.digest


def test_submit_and_commit_basic():
    sim, actors, senders, params = build_network()
    node = actors["n0"].node
    tx = tx_for(senders, "n1", 1)
    ok, reason = node.submit_transaction(tx)
    assert ok and reason is None
    assert tx.id in {t.id for t in node.mempool_order()}
    sim.run_until(10.0)
    committed = [b for a in actors.values() for b in a.commits for t in b.transactions if t.id == tx.id]
    assert committed
    assert_no_divergence(actors)


def test_submit_rejects_bad_signature():
    _, actors, senders, _ = build_network()
    node = actors["n0"].node
    tx = tx_for(senders, "n1", 1)
    forged = consensus.Transaction(
        tx.id, tx.sender, tx.nonce, tx.priority, tx.call, tx.payload,
        bytes([crypto.SCHEME_STANDARD]) + bytes(64),
    )
    ok, reason = node.submit_transaction(forged)
    assert not ok and reason == "bad-signature"


def test_submit_rejects_unknown_sender_and_duplicates():
    _, actors, senders, _ = build_network()
    node = actors["n0"].node
    stranger = crypto.keygen(rng=random.Random(1))
    tx = make_transaction("ghost", stranger.secret_key, ContractCall("noop", ()), nonce=1)
    assert node.submit_transaction(tx) == (False, "unknown-sender")
    good = tx_for(senders, "n1", 2)
    assert node.submit_transaction(good)[0]
    assert node.submit_transaction(good) == (False, "duplicate")


def test_high_priority_requires_allowed_function():
    _, actors, senders, _ = build_network()
    node = actors["n0"].node
    bad = tx_for(senders, "n1", 1, priority=PRIORITY_HIGH, function="putMeasurement")
    assert node.submit_transaction(bad) == (False, "bad-priority")
    good = tx_for(senders, "n1", 2, priority=PRIORITY_HIGH, function="vetoFirmware")
    assert node.submit_transaction(good)[0]


def test_high_priority_rate_limit():
    _, actors, senders, _ = build_network()
    node = actors["n0"].node
    accepted = 0
    for nonce in range(10):
        ok, reason = node.submit_transaction(
            tx_for(senders, "n1", nonce, priority=PRIORITY_HIGH, function="vetoFirmware")
        )
        accepted += ok
    assert accepted == node.params.high_priority_limit
    assert reason == "rate-limit"


def test_priority_ordering_under_flood():
    # a veto submitted after a large normal-priority flood is still first
    sim, actors, senders, params = build_network(capacity=64)
    node = actors["n0"].node
    for nonce in range(500):
        node.submit_transaction(tx_for(senders, "n1", nonce), gossip=False)
    veto = tx_for(senders, "n2", 9999, priority=PRIORITY_HIGH, function="vetoFirmware")
    node.submit_transaction(veto, gossip=False)
    order = node.mempool_order()
    assert order[0].id == veto.id
    picked = node._pull_transactions()
    assert picked[0].id == veto.id
    assert len(picked) == 64


def test_empty_spam_leader_proposes_empty():
    sim, actors, senders, _ = build_network(behaviors=[(Behavior.EMPTY_SPAM, "n1")])
    node = actors["n0"].node
    for nonce in range(5):
        node.submit_transaction(tx_for(senders, "n0", nonce))
    sim.run_until(8.0)
    spam_blocks = [
        b for a in actors.values() for b in a.commits if b.proposer == "n1"
    ]
    assert spam_blocks
    assert all(len(b.transactions) == 0 for b in spam_blocks)
    assert_no_divergence(actors)


def test_censor_leader_delays_not_blocks():
    # censored tx still commits within n heights via an honest leader
    sim, actors, senders, params = build_network(n=4)
    actors["n1"].node.behavior.kind = Behavior.CENSOR
    actors["n1"].node.behavior.censor_high_priority = True
    veto = tx_for(senders, "n0", 1, priority=PRIORITY_HIGH, function="vetoFirmware")
    submit_height = actors["n0"].node.height
    actors["n0"].node.submit_transaction(veto)
    sim.run_until(20.0)
    include_height = None
    for block in actors["n0"].node.ledger:
        if any(t.id == veto.id for t in block.transactions):
            include_height = block.height
    assert include_height is not None
    assert include_height - submit_height <= len(params.node_ids)
    assert_no_divergence(actors)


def test_vote_withhold_at_f_still_commits():
    sim, actors, senders, _ = build_network(
        n=16, behaviors=[(Behavior.VOTE_WITHHOLD, f"n{i}") for i in range(5)]
    )
    sim.run_until(12.0)
    heights = honest_heights(actors)
    assert min(heights.values()) >= 2
    assert_no_divergence(actors)


def test_vote_withhold_beyond_f_stalls_without_divergence():
    sim, actors, senders, _ = build_network(
        n=16, behaviors=[(Behavior.VOTE_WITHHOLD, f"n{i}") for i in range(6)]
    )
    sim.run_until(12.0)
    heights = honest_heights(actors)
    assert max(heights.values()) == 0  # liveness lost, quorum unreachable
    assert_no_divergence(actors)


def test_equivocating_leader_never_splits_honest_nodes():
    sim, actors, senders, _ = build_network(
        n=4, behaviors=[(Behavior.EQUIVOCATE, "n1")], view_timeout=2.0
    )
    sim.run_until(30.0)
    assert_no_divergence(actors)
    assert not any(a.alarms for a in actors.values())


def test_partition_blocks_commits_then_heals():
    sim, actors, senders, params = build_network(n=4, view_timeout=2.0)
    sim.partitions.append(
        simnet.Partition(groups=(frozenset({"n0", "n1"}), frozenset({"n2", "n3"})), until=20.0)
    )
    sim.run_until(19.0)
    assert max(honest_heights(actors).values()) == 0  # no quorum during split
    sim.run_until(60.0)
    assert min(honest_heights(actors).values()) >= 1  # liveness resumed
    assert_no_divergence(actors)


def test_lagging_node_syncs_after_jam():
    sim, actors, senders, params = build_network(n=4)
    # jam all traffic into n3 for a while; others keep committing
    for peer in ("n0", "n1", "n2"):
        sim.set_link_policy(peer, "n3", simnet.LinkPolicy(base_latency=0.005, jam_until=6.0))
    sim.run_until(30.0)
    heights = honest_heights(actors)
    assert heights["n3"] >= heights["n0"] - 1
    assert_no_divergence(actors)


def test_hash_chain_integrity_detects_mutation():
    sim, actors, senders, _ = build_network()
    node = actors["n0"].node
    for nonce in range(3):
        node.submit_transaction(tx_for(senders, "n1", nonce))
    sim.run_until(6.0)
    assert node.height >= 1
    assert node.validate_ledger() == []
    victim = node.ledger[1]
    tampered = consensus.Block(
        victim.height,
        victim.previous_hash,
        victim.proposer,
        victim.timestamp,
        victim.transactions,
        digest=victim.digest,
        commit_certificate=victim.commit_certificate,
    )
    tampered.timestamp += 1.0
    node.ledger[1] = tampered
    findings = node.validate_ledger()
    assert any(reason == "digest-mismatch" for _, reason in findings)


def test_round_robin_liveness_bound():
    # a gossiped tx lands within n heights of submission
    sim, actors, senders, params = build_network(n=4)
    sim.run_until(5.0)
    tx = tx_for(senders, "n2", 77)
    submit_height = actors["n2"].node.height
    actors["n2"].node.submit_transaction(tx)
    sim.run_until(15.0)
    include = None
    for block in actors["n0"].node.ledger:
        if any(t.id == tx.id for t in block.transactions):
            include = block.height
    assert include is not None and include - submit_height <= len(params.node_ids)


def test_cooldown_elapsed_boundaries():
    ledger14 = [consensus.make_genesis("c")]
    for h in range(1, 15):
        ledger14.append(
            consensus.make_block("c", h, ledger14[-1].digest, "n", float(h), ())
        )
    assert not consensus.cooldown_elapsed(ledger14, 10, 5)  # tip 14 < 15
    ledger15 = ledger14 + [
        consensus.make_block("c", 15, ledger14[-1].digest, "n", 15.0, ())
    ]
    assert consensus.cooldown_elapsed(ledger15, 10, 5)


def test_calibrate_cooldown():
    assert consensus.calibrate_cooldown(10, 6.0) == 100
    assert consensus.calibrate_cooldown(0.5, 1.0) == 30


def test_deterministic_transcripts():
    def run():
        sim, actors, senders, _ = build_network(seed=99)
        node = actors["n0"].node
        for nonce in range(20):
            node.submit_transaction(tx_for(senders, "n1", nonce))
        sim.run_until(10.0)
        return (
            sim.trace_digest(),
            consensus.transcript_lines("test", actors["n2"].node.ledger),
        )

    first = run()
    second = run()
    assert first == second
