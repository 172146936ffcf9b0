"""BFT replicated ledger: round-robin proposers, 2f+1 quorum commits,
prioritized mempool.

One ConsensusNode instance per replica, driven entirely by messages and
timers delivered through the simulated network, so runs are
deterministic. The commit rule is a single-shot two-phase scheme: the
leader for (height, view) proposes, nodes broadcast votes, and a block
commits once 2f+1 matching votes exist. A node locks on the first block
it votes for at a height and will only re-vote that block in later
views, which keeps commits safe across view changes; view change itself
is a deterministic leader skip on timeout.

High-priority transactions (vetoes, key revocations) order ahead of all
normal traffic in the mempool, and their creation is rate limited per
sender to blunt spam.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol, Sequence

from . import crypto

PRIORITY_HIGH = 0
PRIORITY_NORMAL = 1

# Calls allowed to carry high priority: vetoes and key revocations.
HIGH_PRIORITY_FUNCTIONS = frozenset(
    {"vetoFirmware", "updateAdminKey", "proposePubKey", "votePubKeyProposal"}
)

GENESIS_HASH = b"\x00" * 32


class Behavior(Enum):
    HONEST = "honest"
    EMPTY_SPAM = "byz-empty-spam"
    CENSOR = "byz-censor"
    VOTE_WITHHOLD = "byz-vote-withhold"
    EQUIVOCATE = "byz-equivocate"


# Canonical value encoding for contract-call arguments (bytes, str, int).


def _encode_value(value) -> bytes:
    if isinstance(value, bool):
        raise TypeError("bool is not a canonical argument type")
    if isinstance(value, bytes):
        return b"B" + struct.pack(">I", len(value)) + value
    if isinstance(value, str):
        raw = value.encode()
        return b"S" + struct.pack(">I", len(raw)) + raw
    if isinstance(value, int):
        return b"I" + struct.pack(">q", value)
    raise TypeError(f"unsupported argument type {type(value).__name__}")


@dataclass(frozen=True, slots=True)
class ContractCall:
    function: str
    args: tuple


def encode_call(call: ContractCall) -> bytes:
    name = call.function.encode()
    parts = [struct.pack(">H", len(name)), name, struct.pack(">H", len(call.args))]
    parts.extend(_encode_value(a) for a in call.args)
    return b"".join(parts)


def tx_payload(sender: str, nonce: int, priority: int, call: ContractCall) -> bytes:
    raw_sender = sender.encode()
    return b"".join(
        [
            struct.pack(">H", len(raw_sender)),
            raw_sender,
            struct.pack(">QB", nonce, priority),
            encode_call(call),
        ]
    )


@dataclass(frozen=True, slots=True)
class Transaction:
    id: bytes
    sender: str
    nonce: int
    priority: int
    call: ContractCall
    payload: bytes
    signature: bytes


def make_transaction(
    sender: str,
    secret_key: bytes,
    call: ContractCall,
    nonce: int,
    priority: int = PRIORITY_NORMAL,
) -> Transaction:
    payload = tx_payload(sender, nonce, priority, call)
    return Transaction(
        id=crypto.hash(payload)[1:],
        sender=sender,
        nonce=nonce,
        priority=priority,
        call=call,
        payload=payload,
        signature=crypto.sign(secret_key, payload),
    )


@dataclass(frozen=True, slots=True)
class Vote:
    chain_id: str
    height: int
    view: int
    block_digest: bytes
    voter: str
    signature: bytes


def vote_payload(chain_id: str, height: int, view: int, block_digest: bytes) -> bytes:
    return chain_id.encode() + struct.pack(">QI", height, view) + block_digest


@dataclass(slots=True)
class Block:
    height: int
    previous_hash: bytes
    proposer: str
    timestamp: float
    transactions: tuple[Transaction, ...]
    digest: bytes = b""
    commit_certificate: tuple[Vote, ...] = ()


def compute_block_digest(chain_id: str, block: Block) -> bytes:
    h = [
        chain_id.encode(),
        struct.pack(">Q", block.height),
        block.previous_hash,
        block.proposer.encode(),
        struct.pack(">d", block.timestamp),
        struct.pack(">I", len(block.transactions)),
    ]
    h.extend(tx.id for tx in block.transactions)
    return crypto.hash(b"".join(h))[1:]


def make_block(chain_id, height, previous_hash, proposer, timestamp, transactions) -> Block:
    block = Block(height, previous_hash, proposer, timestamp, tuple(transactions))
    block.digest = compute_block_digest(chain_id, block)
    return block


def make_genesis(chain_id: str) -> Block:
    return make_block(chain_id, 0, GENESIS_HASH, "", 0.0, ())


# Network messages and node-local timers.


@dataclass(slots=True)
class TxGossip:
    tx: Transaction


@dataclass(slots=True)
class ProposalMsg:
    chain_id: str
    view: int
    block: Block


@dataclass(slots=True)
class VoteMsg:
    vote: Vote


@dataclass(slots=True)
class CommitMsg:
    chain_id: str
    block: Block


@dataclass(slots=True)
class SyncRequest:
    chain_id: str
    from_height: int


@dataclass(slots=True)
class SyncResponse:
    chain_id: str
    blocks: tuple[Block, ...]


@dataclass(slots=True)
class ProposeTimer:
    height: int
    view: int


@dataclass(slots=True)
class ViewTimeout:
    height: int
    view: int


class NodeEnv(Protocol):
    """Wiring a node needs from its host actor."""

    def now(self) -> float: ...

    def send(self, dest: str, message: object) -> None: ...

    def broadcast(self, message: object) -> None: ...

    def schedule(self, delay: float, message: object) -> None: ...

    def on_commit(self, block: Block) -> None: ...

    def on_apply(self, tx: Transaction, result, block: Block) -> None: ...

    def on_alarm(self, kind: str, detail: str) -> None: ...


@dataclass(slots=True)
class ChainParams:
    chain_id: str
    node_ids: tuple[str, ...]
    node_keys: dict[str, bytes]
    fault_bound: int
    block_interval: float = 1.0
    view_timeout: float = 4.0
    block_capacity: int = 512
    high_priority_limit: int = 4  # per sender per rate window
    rate_window: int = 0  # 0 means len(node_ids)
    spam_propose_delay: float = 1e-3

    @property
    def quorum(self) -> int:
        return 2 * self.fault_bound + 1

    def leader(self, height: int, view: int) -> str:
        return self.node_ids[(height + view) % len(self.node_ids)]


@dataclass(slots=True)
class BehaviorConfig:
    kind: Behavior = Behavior.HONEST
    censor_ids: set[bytes] = field(default_factory=set)
    censor_high_priority: bool = False


class ConsensusNode:
    """One replica: mempool, ledger, vote bookkeeping, contract state."""

    def __init__(self, params: ChainParams, node_id: str, keypair, contract, env):
        self.params = params
        self.node_id = node_id
        self.keypair = keypair
        self.contract = contract
        self.env = env
        self.behavior = BehaviorConfig()
        genesis = make_genesis(params.chain_id)
        self.ledger: list[Block] = [genesis]
        self.committed_ids: set[bytes] = set()
        # mempool: tx id -> (priority, arrival seq, tx); proposals drain it
        # priority-first, FIFO within a class, tx id as final tiebreak
        self._mempool: dict[bytes, tuple[int, int, Transaction]] = {}
        self._arrival = 0
        self._validated: set[bytes] = set()
        self._view: dict[int, int] = {}
        self._voted: set[tuple[int, int]] = set()
        self._locked: dict[int, tuple[bytes, Block]] = {}
        self._votes: dict[tuple[int, int, bytes], dict[str, Vote]] = {}
        self._proposals: dict[tuple[int, bytes], Block] = {}
        self._pending_commits: dict[int, Block] = {}
        self._high_admissions: dict[str, list[int]] = {}
        self._sync_inflight = False

    # -- basic state ------------------------------------------------------

    @property
    def tip(self) -> Block:
        return self.ledger[-1]

    @property
    def height(self) -> int:
        return self.tip.height

    def start(self) -> None:
        """Arm proposal/timeout timers for the first height."""
        self._arm_timers_for(self.height + 1)

    def mempool_order(self) -> list[Transaction]:
        entries = sorted(self._mempool.items(), key=lambda kv: (kv[1][0], kv[1][1], kv[0]))
        return [tx for (_, (_, _, tx)) in entries]

    # -- transaction admission --------------------------------------------

    def _validate_structure(self, tx: Transaction) -> str | None:
        if tx.id in self._validated:
            return None
        payload = tx_payload(tx.sender, tx.nonce, tx.priority, tx.call)
        if payload != tx.payload or crypto.hash(payload)[1:] != tx.id:
            return "bad-id"
        sender_key = self.contract.key_of(tx.sender)
        if sender_key is None:
            return "unknown-sender"
        if not crypto.verify(sender_key, payload, tx.signature):
            return "bad-signature"
        if tx.priority == PRIORITY_HIGH and tx.call.function not in HIGH_PRIORITY_FUNCTIONS:
            return "bad-priority"
        if tx.priority not in (PRIORITY_HIGH, PRIORITY_NORMAL):
            return "bad-priority"
        self._validated.add(tx.id)
        return None

    def submit_transaction(self, tx: Transaction, gossip: bool = True) -> tuple[bool, str | None]:
        """Admit a transaction to the mempool and gossip it to peers."""
        if tx.id in self.committed_ids or tx.id in self._mempool:
            return False, "duplicate"
        reason = self._validate_structure(tx)
        if reason is not None:
            return False, reason
        if tx.priority == PRIORITY_HIGH and not self._admit_high_priority(tx.sender):
            return False, "rate-limit"
        self._arrival += 1
        self._mempool[tx.id] = (tx.priority, self._arrival, tx)
        if gossip:
            self.env.broadcast(TxGossip(tx))
        return True, None

    def _admit_high_priority(self, sender: str) -> bool:
        window = self.params.rate_window or len(self.params.node_ids)
        history = self._high_admissions.setdefault(sender, [])
        floor = self.height - window
        history[:] = [h for h in history if h > floor]
        if len(history) >= self.params.high_priority_limit:
            return False
        history.append(self.height)
        return True

    # -- proposing ---------------------------------------------------------

    def _pull_transactions(self) -> list[Transaction]:
        picked: list[Transaction] = []
        for tx in self.mempool_order():
            if len(picked) >= self.params.block_capacity:
                break
            if tx.id in self.committed_ids or self._censored(tx):
                continue
            picked.append(tx)
        return picked

    def _censored(self, tx: Transaction) -> bool:
        if self.behavior.kind is not Behavior.CENSOR:
            return False
        if self.behavior.censor_high_priority and tx.priority == PRIORITY_HIGH:
            return True
        return tx.id in self.behavior.censor_ids

    def propose(self, height: int, view: int) -> None:
        """Build and broadcast a proposal for (height, view)."""
        if height != self.height + 1:
            return
        locked = self._locked.get(height)
        if locked is not None:
            block = locked[1]  # re-propose the locked block after view change
        else:
            if self.behavior.kind is Behavior.EMPTY_SPAM:
                txs: Sequence[Transaction] = ()
            else:
                txs = self._pull_transactions()
            block = make_block(
                self.params.chain_id,
                height,
                self.tip.digest,
                self.node_id,
                self.env.now(),
                txs,
            )
        if self.behavior.kind is Behavior.EQUIVOCATE and locked is None:
            twin = make_block(
                self.params.chain_id,
                height,
                self.tip.digest,
                self.node_id,
                self.env.now() + 1e-9,
                (),
            )
            # keep both variants so this node can still commit whichever wins
            self._proposals[(height, block.digest)] = block
            self._proposals[(height, twin.digest)] = twin
            others = [n for n in self.params.node_ids if n != self.node_id]
            half = len(others) // 2
            for dest in others[:half]:
                self.env.send(dest, ProposalMsg(self.params.chain_id, view, block))
            for dest in others[half:]:
                self.env.send(dest, ProposalMsg(self.params.chain_id, view, twin))
            return
        self.env.broadcast(ProposalMsg(self.params.chain_id, view, block))
        self.handle_proposal(ProposalMsg(self.params.chain_id, view, block), self.node_id)

    # -- message handlers ---------------------------------------------------

    def handle(self, message: object, source: str) -> None:
        if isinstance(message, TxGossip):
            self.submit_transaction(message.tx, gossip=False)
        elif isinstance(message, ProposalMsg):
            self.handle_proposal(message, source)
        elif isinstance(message, VoteMsg):
            self.handle_vote(message.vote)
        elif isinstance(message, CommitMsg):
            self.handle_commit(message, source)
        elif isinstance(message, SyncRequest):
            self.handle_sync_request(message, source)
        elif isinstance(message, SyncResponse):
            for block in message.blocks:
                self._accept_certified(block, source)
        elif isinstance(message, ProposeTimer):
            if message.height == self.height + 1 and self._view.get(message.height, 0) == message.view:
                self.propose(message.height, message.view)
        elif isinstance(message, ViewTimeout):
            self.handle_timeout(message.height, message.view)

    def _valid_proposal(self, block: Block, view: int, source: str) -> bool:
        height = block.height
        if block.proposer != self.params.leader(height, view):
            return False
        if source != block.proposer and source != self.node_id:
            return False
        if block.previous_hash != self.tip.digest:
            return False
        if compute_block_digest(self.params.chain_id, block) != block.digest:
            return False
        if len(block.transactions) > self.params.block_capacity:
            return False
        seen: set[bytes] = set()
        for tx in block.transactions:
            if tx.id in seen or tx.id in self.committed_ids:
                return False
            seen.add(tx.id)
            if self._validate_structure(tx) is not None:
                return False
        return True

    def handle_proposal(self, msg: ProposalMsg, source: str) -> None:
        block = msg.block
        height = block.height
        if height <= self.height:
            return
        if height > self.height + 1:
            self._request_sync(source)
            return
        current_view = self._view.get(height, 0)
        if msg.view < current_view:
            return
        if msg.view > current_view:
            self._view[height] = msg.view
            self.env.schedule(
                self.params.view_timeout, ViewTimeout(height, msg.view)
            )
        if not self._valid_proposal(block, msg.view, source):
            return
        self._proposals[(height, block.digest)] = block
        locked = self._locked.get(height)
        if locked is not None and locked[0] != block.digest:
            return  # locked on a different block for this height
        if (height, msg.view) in self._voted:
            self._try_commit(height)
            return
        if self.behavior.kind is Behavior.VOTE_WITHHOLD:
            return
        self._voted.add((height, msg.view))
        self._locked[height] = (block.digest, block)
        vote = Vote(
            chain_id=self.params.chain_id,
            height=height,
            view=msg.view,
            block_digest=block.digest,
            voter=self.node_id,
            signature=crypto.sign(
                self.keypair.secret_key,
                vote_payload(self.params.chain_id, height, msg.view, block.digest),
            ),
        )
        self._record_vote(vote)
        self.env.broadcast(VoteMsg(vote))
        self._try_commit(height)

    def handle_vote(self, vote: Vote) -> None:
        if vote.height <= self.height:
            return
        if vote.voter not in self.params.node_keys:
            return
        if not crypto.verify(
            self.params.node_keys[vote.voter],
            vote_payload(vote.chain_id, vote.height, vote.view, vote.block_digest),
            vote.signature,
        ):
            return
        self._record_vote(vote)
        self._try_commit(vote.height)

    def _record_vote(self, vote: Vote) -> None:
        key = (vote.height, vote.view, vote.block_digest)
        self._votes.setdefault(key, {})[vote.voter] = vote

    def _try_commit(self, height: int) -> None:
        if height != self.height + 1:
            return
        for (h, _view, digest), votes in list(self._votes.items()):
            if h != height or len(votes) < self.params.quorum:
                continue
            block = self._proposals.get((height, digest))
            if block is None:
                continue
            cert = tuple(sorted(votes.values(), key=lambda v: v.voter))
            self._commit(block, cert)
            return

    def _commit(self, block: Block, cert: tuple[Vote, ...]) -> None:
        if not block.commit_certificate:
            block.commit_certificate = cert
        self.ledger.append(block)
        for tx in block.transactions:
            self.committed_ids.add(tx.id)
            self._mempool.pop(tx.id, None)
            result = self.contract.apply(tx, block.height, block.timestamp)
            self.env.on_apply(tx, result, block)
        self.env.on_commit(block)
        self._prune(block.height)
        self.env.broadcast(CommitMsg(self.params.chain_id, block))
        self._arm_timers_for(block.height + 1)
        pending = self._pending_commits.pop(block.height + 1, None)
        if pending is not None:
            self._accept_certified(pending, self.node_id)
        else:
            self._try_commit(block.height + 1)

    def _arm_timers_for(self, height: int) -> None:
        self._view.setdefault(height, 0)
        if self.params.leader(height, 0) == self.node_id:
            delay = (
                self.params.spam_propose_delay
                if self.behavior.kind is Behavior.EMPTY_SPAM
                else self.params.block_interval
            )
            self.env.schedule(delay, ProposeTimer(height, 0))
        self.env.schedule(self.params.view_timeout, ViewTimeout(height, 0))

    def _prune(self, committed_height: int) -> None:
        for key in [k for k in self._votes if k[0] <= committed_height]:
            del self._votes[key]
        for key in [k for k in self._proposals if k[0] <= committed_height]:
            del self._proposals[key]
        self._voted = {(h, v) for (h, v) in self._voted if h > committed_height}
        for h in [h for h in self._locked if h <= committed_height]:
            del self._locked[h]
        for h in [h for h in self._view if h <= committed_height]:
            del self._view[h]
        self._sync_inflight = False

    def handle_timeout(self, height: int, view: int) -> None:
        if height <= self.height:
            return
        if self._view.get(height, 0) != view:
            return
        next_view = view + 1
        self._view[height] = next_view
        if self.params.leader(height, next_view) == self.node_id:
            self.env.schedule(1e-3, ProposeTimer(height, next_view))
        self.env.schedule(self.params.view_timeout, ViewTimeout(height, next_view))

    # -- certified catch-up --------------------------------------------------

    def valid_certificate(self, block: Block) -> bool:
        cert = block.commit_certificate
        if len(cert) < self.params.quorum:
            return False
        voters = {v.voter for v in cert}
        if len(voters) != len(cert):
            return False
        views = {v.view for v in cert}
        if len(views) != 1:
            return False
        for vote in cert:
            if vote.voter not in self.params.node_keys:
                return False
            if vote.height != block.height or vote.block_digest != block.digest:
                return False
            if not crypto.verify(
                self.params.node_keys[vote.voter],
                vote_payload(vote.chain_id, vote.height, vote.view, vote.block_digest),
                vote.signature,
            ):
                return False
        return True

    def handle_commit(self, msg: CommitMsg, source: str) -> None:
        block = msg.block
        if block.height <= self.height:
            local = self.ledger[block.height]
            if local.digest != block.digest and self.valid_certificate(block):
                self.env.on_alarm(
                    "conflicting-commit",
                    f"height {block.height}: {local.digest.hex()[:12]} vs {block.digest.hex()[:12]}",
                )
            return
        if block.height > self.height + 1:
            self._pending_commits[block.height] = block
            self._request_sync(source)
            return
        self._accept_certified(block, source)

    def _accept_certified(self, block: Block, source: str) -> None:
        if block.height != self.height + 1:
            if block.height > self.height + 1:
                self._pending_commits[block.height] = block
            return
        if block.previous_hash != self.tip.digest:
            return
        if compute_block_digest(self.params.chain_id, block) != block.digest:
            return
        if not self.valid_certificate(block):
            return
        self._commit(block, block.commit_certificate)

    def _request_sync(self, source: str) -> None:
        if self._sync_inflight or source == self.node_id:
            return
        self._sync_inflight = True
        self.env.send(source, SyncRequest(self.params.chain_id, self.height + 1))

    def handle_sync_request(self, msg: SyncRequest, source: str) -> None:
        if msg.from_height > self.height:
            return
        blocks = tuple(self.ledger[msg.from_height : msg.from_height + 100])
        self.env.send(source, SyncResponse(self.params.chain_id, blocks))

    # -- ledger utilities ------------------------------------------------------

    def validate_ledger(self) -> list[tuple[int, str]]:
        """Hash-link, certificate, and transaction re-verification over the
        whole local ledger. Returns (height, problem) findings."""
        findings: list[tuple[int, str]] = []
        prev = self.ledger[0]
        if compute_block_digest(self.params.chain_id, prev) != prev.digest:
            findings.append((0, "bad-genesis-digest"))
        for block in self.ledger[1:]:
            if compute_block_digest(self.params.chain_id, block) != block.digest:
                findings.append((block.height, "digest-mismatch"))
            if block.previous_hash != prev.digest:
                findings.append((block.height, "broken-hash-link"))
            if not self.valid_certificate(block):
                findings.append((block.height, "bad-certificate"))
            for tx in block.transactions:
                payload = tx_payload(tx.sender, tx.nonce, tx.priority, tx.call)
                if crypto.hash(payload)[1:] != tx.id:
                    findings.append((block.height, "tx-id-mismatch"))
                key = self.contract.key_of(tx.sender)
                if key is None or not crypto.verify(key, payload, tx.signature):
                    findings.append((block.height, "tx-signature-invalid"))
            prev = block
        return findings


def cooldown_elapsed(ledger: Sequence[Block], proposal_height: int, cooldown_blocks: int) -> bool:
    """True once the committed tip has advanced ``cooldown_blocks`` past the
    block that recorded the proposal."""
    return ledger[-1].height >= proposal_height + cooldown_blocks


def calibrate_cooldown(tau_minutes: float, block_interval_seconds: float) -> int:
    """Blocks for a target cooldown: tau times the average block rate."""
    blocks_per_minute = 60.0 / block_interval_seconds
    return math.ceil(tau_minutes * blocks_per_minute)


def transcript_lines(chain_id: str, ledger: Sequence[Block]) -> list[str]:
    """Line-delimited ledger transcript for golden-file comparison."""
    lines = []
    for block in ledger:
        ids = ",".join(tx.id.hex()[:16] for tx in block.transactions)
        lines.append(
            f"{chain_id} {block.height} {block.digest.hex()} {block.proposer or '-'} "
            f"{len(block.transactions)} {ids or '-'}"
        )
    return lines
