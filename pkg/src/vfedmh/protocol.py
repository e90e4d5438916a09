"""Party state machines and the multi-party training loop.

One active party (id 0, holds labels) and K passive parties (ids 1..K) train
one heterogeneous model each.  Every batch runs the same four-message exchange
per passive party:

    1. passive -> active   masked local embedding for the batch
    2. active  -> passive  global embedding (average of all local embeddings)
    3. passive -> active   class logits predicted from the global embedding
    4. active  -> passive  loss and its gradient with respect to those logits

The active party computes every party's loss because only it holds labels; the
reply carries the logits gradient because a scalar loss alone is not enough
for the passive party to backpropagate.  Each party then updates its decision
stack with that gradient and its embedding stack through its own 1/C share of
the global average, and applies its own optimizer.  Parties are independent
sequential processes; all coordination happens through transport messages,
bulk-synchronously per batch.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nn, optim, secagg
from .data import batch_iter
from .messages import (
    ENC_PLAIN,
    ENC_RING,
    EVAL_BATCH,
    GlobalEmbeddingMsg,
    LossAndGradMsg,
    MaskedEmbeddingMsg,
    PredictionMsg,
    PublicKeyMsg,
    RoundNonce,
    encode_frame,
)
from .metrics import EpochRecord, RoundLedger
from .transport import ACTIVE_ID, Endpoint, InMemoryNetwork


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class PartyConfig:
    model: str = "mlp3"
    optimizer: str = "sgd"
    lr: float = 0.05


@dataclass
class SessionConfig:
    n_passive: int
    epochs: int = 20
    batch_size: int = 128
    d_emb: int = 64
    seed: int = 0
    parties: list[PartyConfig] = field(default_factory=list)  # length K+1
    secure_mode: str = "masked"  # masked | plain
    group: str = "safe256"
    scale_bits: int = 16
    allow_test_groups: bool = False
    freeze_embedding: bool = False
    decision_l2: float = 0.0
    recv_timeout: float = 120.0

    def __post_init__(self):
        if self.n_passive < 1:
            raise ValueError("need at least one passive party")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.secure_mode not in ("masked", "plain"):
            raise ValueError(f"unknown secure_mode {self.secure_mode!r}")
        if not self.parties:
            self.parties = [PartyConfig() for _ in range(self.n_passive + 1)]
        if len(self.parties) != self.n_passive + 1:
            raise ValueError(
                f"{len(self.parties)} party configs for {self.n_passive + 1} parties"
            )

    @property
    def n_parties(self) -> int:
        return self.n_passive + 1


@dataclass
class PartyModel:
    """Everything one party owns: split network, optimizer, update policy."""

    spec: nn.NetworkSpec
    state: nn.NetworkState
    opt_cfg: optim.OptimizerConfig
    opt_state: optim.OptimizerState
    n_parties: int
    freeze_embedding: bool = False
    decision_l2: float = 0.0

    def decision_params(self) -> list[np.ndarray]:
        return [p for layer in self.state.params[self.spec.split_index :] for p in layer]

    def embedding_params(self) -> list[np.ndarray]:
        return [p for layer in self.state.params[: self.spec.split_index] for p in layer]


def build_party_model(session: SessionConfig, party: int, in_features: int, n_classes: int) -> PartyModel:
    cfg = session.parties[party]
    spec = nn.spec_from_name(cfg.model, in_features, session.d_emb, n_classes)
    init_seed = int(np.random.default_rng([session.seed & 0xFFFFFFFF, 77, party]).integers(2**32))
    state = nn.init_state(spec, seed=init_seed)
    opt_cfg = optim.OptimizerConfig(kind=cfg.optimizer, learning_rate=cfg.lr)
    opt_state = optim.init_optimizer(opt_cfg, state.flat())
    return PartyModel(
        spec=spec,
        state=state,
        opt_cfg=opt_cfg,
        opt_state=opt_state,
        n_parties=session.n_parties,
        freeze_embedding=session.freeze_embedding,
        decision_l2=session.decision_l2,
    )


# ---------------------------------------------------------------------------
# Local operations, usable outside the message loop
# ---------------------------------------------------------------------------


def active_assist_loss(predictions: dict[int, np.ndarray], labels: np.ndarray):
    """Per-party (loss, grad_logits) computed by the label holder."""
    out = {}
    for party in sorted(predictions):
        loss, grad = nn.softmax_cross_entropy(predictions[party], labels)
        out[party] = (loss, grad)
    return out


def local_update(model: PartyModel, trace_emb, trace_dec, grad_logits) -> float:
    """Backpropagate both stacks and apply one optimizer step.

    The embedding stack receives the party's own 1/C share of the global
    average's gradient.  Returns the squared norm of the applied decision
    gradient (including any L2 term), which the convergence tracker records.
    """
    dec_grads, grad_emb = nn.backward_decision(model.state, model.spec, trace_dec, grad_logits)
    emb_grads = nn.backward_embedding(
        model.state, model.spec, trace_emb, grad_emb / model.n_parties
    )
    if model.decision_l2 > 0.0:
        dec_grads = [
            g + model.decision_l2 * p for g, p in zip(dec_grads, model.decision_params())
        ]
    if model.freeze_embedding:
        emb_grads = [np.zeros_like(g) for g in emb_grads]
    grad_norm_sq = float(sum(np.sum(g * g) for g in dec_grads))
    optim.step(
        model.opt_cfg,
        model.opt_state,
        model.embedding_params() + model.decision_params(),
        emb_grads + dec_grads,
    )
    return grad_norm_sq


# ---------------------------------------------------------------------------
# Party runtimes
# ---------------------------------------------------------------------------


def _expect(endpoint: Endpoint, msg_cls, timeout: float):
    msg = endpoint.recv_blocking(timeout=timeout)
    if not isinstance(msg, msg_cls):
        raise ProtocolError(
            f"party {endpoint.party_id}: expected {msg_cls.__name__}, "
            f"got {type(msg).__name__} from party {msg.sender}"
        )
    return msg


def collect_from_passives(endpoint, pending, msg_cls, nonce, n_passive, timeout, on_msg):
    """Gather one ``msg_cls`` with ``nonce`` from every passive party.

    Parties run at different speeds, so a fast party's message for a *later*
    round can arrive while a slower party's current message is still pending;
    those are buffered in ``pending`` and consumed by a later collection.
    Anything else out of step (stale nonce, wrong type for this round, or a
    duplicate sender) aborts the session.
    """
    got = {}

    def consider(msg) -> bool:
        if isinstance(msg, msg_cls) and msg.nonce == nonce:
            if msg.sender in got:
                raise ProtocolError(f"duplicate {msg_cls.__name__} from party {msg.sender}")
            on_msg(msg)
            got[msg.sender] = msg
            return True
        got_nonce = getattr(msg, "nonce", None)
        if got_nonce is not None and got_nonce > nonce:
            return False  # future round, keep for later
        if got_nonce is not None and got_nonce < nonce:
            raise ProtocolError(
                f"active party: replayed or stale nonce {got_nonce} from party "
                f"{msg.sender}, current round is {nonce}"
            )
        raise ProtocolError(
            f"active party: expected {msg_cls.__name__} for {nonce}, got "
            f"{type(msg).__name__} from party {msg.sender}"
        )

    leftover = []
    while pending:
        msg = pending.popleft()
        if not consider(msg):
            leftover.append(msg)
    pending.extend(leftover)
    while len(got) < n_passive:
        msg = endpoint.recv_blocking(timeout=timeout)
        if not consider(msg):
            pending.append(msg)
    return got


def _check_nonce(got: RoundNonce, want: RoundNonce, who: str):
    if got != want:
        if got < want:
            raise ProtocolError(f"{who}: replayed or stale nonce {got}, expected {want}")
        raise ProtocolError(f"{who}: desynchronized batch ids, nonce {got} vs {want}")


class _PartyBase:
    def __init__(self, party_id: int, session: SessionConfig, model: PartyModel,
                 endpoint: Endpoint, train_shard: np.ndarray, test_shard):
        self.id = party_id
        self.session = session
        self.model = model
        self.endpoint = endpoint
        self.train_shard = np.asarray(train_shard, dtype=np.float64)
        self.test_shard = None if test_shard is None else np.asarray(test_shard, dtype=np.float64)
        self.codec = secagg.FixedPointCodec(session.scale_bits)
        self.round_counter = 0

    def _batches(self, epoch: int):
        return batch_iter(
            self.train_shard.shape[0], self.session.batch_size, epoch, self.session.seed
        )


class PassiveParty(_PartyBase):
    """Runs the passive side of the session on its own thread or process."""

    def __init__(self, *args, group: secagg.GroupParams, **kwargs):
        super().__init__(*args, **kwargs)
        self.group = group
        self.keys = secagg.keygen(group, seed=f"party:{self.session.seed}:{self.id}".encode())
        self.secrets: dict[int, bytes] = {}
        self.loss_history: list[float] = []
        self.grad_norm_history: list[float] = []
        self.objective_history: list[float] = []

    # -- key setup ----------------------------------------------------------

    def setup_keys(self):
        self.endpoint.send(ACTIVE_ID, PublicKeyMsg(sender=self.id, owner=self.id, pk=self.keys.pk))
        for _ in range(self.session.n_passive - 1):
            msg = _expect(self.endpoint, PublicKeyMsg, self.session.recv_timeout)
            if msg.owner == self.id or msg.owner in self.secrets:
                raise ProtocolError(f"party {self.id}: duplicate public key for {msg.owner}")
            self.secrets[msg.owner] = secagg.derive_shared(self.keys.sk, msg.pk, self.group)

    # -- one protocol round -------------------------------------------------

    def _send_embedding(self, nonce: RoundNonce, shard_rows: np.ndarray):
        emb, trace = nn.forward_embedding(self.model.state, self.model.spec, shard_rows)
        if self.session.secure_mode == "masked":
            mask = secagg.blinding_mask(self.id, self.secrets, emb.size, nonce.value)
            vector = secagg.mask_embedding(emb, mask, self.codec, self.session.n_passive)
            encoding = ENC_RING
        else:
            vector = emb.reshape(-1).copy()
            encoding = ENC_PLAIN
        self.endpoint.send(
            ACTIVE_ID,
            MaskedEmbeddingMsg(
                sender=self.id,
                nonce=nonce,
                batch_id=self.round_counter,
                encoding=encoding,
                shape=emb.shape,
                vector=vector,
            ),
        )
        return trace

    def _recv_global(self, nonce: RoundNonce) -> np.ndarray:
        msg = _expect(self.endpoint, GlobalEmbeddingMsg, self.session.recv_timeout)
        _check_nonce(msg.nonce, nonce, f"party {self.id}")
        return msg.values

    def run(self):
        self.setup_keys()
        for epoch in range(self.session.epochs):
            batch_losses = []
            for b, idx in enumerate(self._batches(epoch)):
                nonce = RoundNonce(epoch, b)
                trace_emb = self._send_embedding(nonce, self.train_shard[idx])
                global_emb = self._recv_global(nonce)
                logits, trace_dec = nn.forward_decision(self.model.state, self.model.spec, global_emb)
                self.endpoint.send(
                    ACTIVE_ID, PredictionMsg(sender=self.id, nonce=nonce, logits=logits)
                )
                reply = _expect(self.endpoint, LossAndGradMsg, self.session.recv_timeout)
                _check_nonce(reply.nonce, nonce, f"party {self.id}")
                if self.model.decision_l2 > 0.0:
                    reg = 0.5 * self.model.decision_l2 * sum(
                        float(np.sum(p * p)) for p in self.model.decision_params()
                    )
                    self.objective_history.append(reply.loss + reg)
                gnorm = local_update(self.model, trace_emb, trace_dec, reply.grad)
                self.grad_norm_history.append(gnorm)
                batch_losses.append(reply.loss)
                self.round_counter += 1
            self.loss_history.append(float(np.mean(batch_losses)) if batch_losses else math.nan)
            if self.test_shard is not None:
                self._eval_round(epoch)

    def _eval_round(self, epoch: int):
        nonce = RoundNonce(epoch, EVAL_BATCH)
        self._send_embedding(nonce, self.test_shard)
        global_emb = self._recv_global(nonce)
        logits, _ = nn.forward_decision(self.model.state, self.model.spec, global_emb)
        self.endpoint.send(ACTIVE_ID, PredictionMsg(sender=self.id, nonce=nonce, logits=logits))


class ActiveParty(_PartyBase):
    """Label holder: relays keys, aggregates embeddings, serves losses."""

    def __init__(self, *args, train_labels: np.ndarray, test_labels, **kwargs):
        super().__init__(*args, **kwargs)
        self.train_labels = np.asarray(train_labels, dtype=np.int64)
        self.test_labels = None if test_labels is None else np.asarray(test_labels, dtype=np.int64)
        self.ledger = RoundLedger(self.session.n_passive)
        self.records: list[EpochRecord] = []
        self.loss_history: list[float] = []
        self.grad_norm_history: list[float] = []
        self.objective_history: list[float] = []
        self._epoch_losses: dict[int, list[float]] = {}
        self._pending: deque = deque()

    # -- key setup ----------------------------------------------------------

    def setup_keys(self):
        """Collect every passive public key and relay it to the other passives.

        The active party sees only public material and ends up holding no
        pairwise secret.
        """
        keys: dict[int, PublicKeyMsg] = {}
        while len(keys) < self.session.n_passive:
            msg = _expect(self.endpoint, PublicKeyMsg, self.session.recv_timeout)
            if msg.owner in keys:
                raise ProtocolError(f"duplicate party id {msg.owner} during key setup")
            if not 1 <= msg.owner <= self.session.n_passive:
                raise ProtocolError(f"unexpected party id {msg.owner} during key setup")
            keys[msg.owner] = msg
            self.ledger.record_setup(len(encode_frame(msg)))
        for dest in range(1, self.session.n_passive + 1):
            for owner, msg in sorted(keys.items()):
                if owner == dest:
                    continue
                relay = PublicKeyMsg(sender=ACTIVE_ID, owner=owner, pk=msg.pk)
                self.ledger.record_setup(self.endpoint.send(dest, relay))

    # -- aggregation --------------------------------------------------------

    def _collect_embeddings(self, nonce: RoundNonce, shape: tuple) -> dict[int, MaskedEmbeddingMsg]:
        """Gather one embedding message per passive party.

        Rejects batch-id mismatches and any mixing of ring and plain
        encodings within a session.
        """

        def check(msg: MaskedEmbeddingMsg):
            if not nonce.is_eval and msg.batch_id != self.round_counter:
                raise ProtocolError(
                    f"desynchronized batch ids: party {msg.sender} sent {msg.batch_id}, "
                    f"expected {self.round_counter}"
                )
            if tuple(msg.shape) != shape:
                raise ProtocolError(
                    f"party {msg.sender} embedding shape {msg.shape} != {shape}"
                )
            expected_enc = ENC_RING if self.session.secure_mode == "masked" else ENC_PLAIN
            if msg.encoding != expected_enc:
                raise ProtocolError(
                    f"party {msg.sender} used encoding {msg.encoding}, session expects {expected_enc}"
                )
            self._account(msg.sender, msg, up=True, eval_round=nonce.is_eval)

        return collect_from_passives(
            self.endpoint,
            self._pending,
            MaskedEmbeddingMsg,
            nonce,
            self.session.n_passive,
            self.session.recv_timeout,
            check,
        )

    def _collect_predictions(self, nonce: RoundNonce) -> dict[int, PredictionMsg]:
        def check(msg: PredictionMsg):
            self._account(msg.sender, msg, up=True, eval_round=nonce.is_eval)

        return collect_from_passives(
            self.endpoint,
            self._pending,
            PredictionMsg,
            nonce,
            self.session.n_passive,
            self.session.recv_timeout,
            check,
        )

    def _aggregate(self, own: np.ndarray, received: dict[int, MaskedEmbeddingMsg]) -> np.ndarray:
        ordered = [received[k].vector for k in sorted(received)]
        if self.session.secure_mode == "masked":
            flat = secagg.aggregate(own.reshape(-1), ordered, self.codec, self.session.n_parties)
        else:
            total = own.reshape(-1).copy()
            for vec in ordered:
                total += vec
            flat = total / float(self.session.n_parties)
        return flat.reshape(own.shape)

    def _account(self, party: int, msg, up: bool, eval_round: bool):
        self.ledger.record(
            party, len(encode_frame(msg)), type(msg).__name__, up=up, eval_round=eval_round
        )

    def _send_all(self, build_msg, eval_round: bool):
        for dest in range(1, self.session.n_passive + 1):
            msg = build_msg(dest)
            self.endpoint.send(dest, msg)
            self._account(dest, msg, up=False, eval_round=eval_round)

    # -- main loop ----------------------------------------------------------

    def run(self):
        self.setup_keys()
        for epoch in range(self.session.epochs):
            self.ledger.start_epoch(epoch)
            self._epoch_losses = {k: [] for k in range(self.session.n_parties)}
            for b, idx in enumerate(self._batches(epoch)):
                self._train_round(RoundNonce(epoch, b), idx)
                self.round_counter += 1
            accuracies = self._eval_round(epoch) if self.test_shard is not None else {}
            self._finish_epoch(epoch, accuracies)

    def _train_round(self, nonce: RoundNonce, idx: np.ndarray):
        own_emb, trace_emb = nn.forward_embedding(self.model.state, self.model.spec, self.train_shard[idx])
        received = self._collect_embeddings(nonce, own_emb.shape)
        global_emb = self._aggregate(own_emb, received)
        self._send_all(
            lambda dest: GlobalEmbeddingMsg(sender=ACTIVE_ID, nonce=nonce, values=global_emb),
            eval_round=False,
        )
        own_logits, trace_dec = nn.forward_decision(self.model.state, self.model.spec, global_emb)
        predictions = {k: m.logits for k, m in self._collect_predictions(nonce).items()}
        predictions[ACTIVE_ID] = own_logits
        labels = self.train_labels[idx]
        losses = active_assist_loss(predictions, labels)
        for party, (loss, _) in losses.items():
            if not math.isfinite(loss):
                raise ProtocolError(
                    f"non-finite loss {loss} for party {party} at {nonce}; aborting"
                )
            self._epoch_losses[party].append(loss)
        self._send_all(
            lambda dest: LossAndGradMsg(
                sender=ACTIVE_ID, nonce=nonce, loss=losses[dest][0], grad=losses[dest][1]
            ),
            eval_round=False,
        )
        if self.model.decision_l2 > 0.0:
            reg = 0.5 * self.model.decision_l2 * sum(
                float(np.sum(p * p)) for p in self.model.decision_params()
            )
            self.objective_history.append(losses[ACTIVE_ID][0] + reg)
        gnorm = local_update(self.model, trace_emb, trace_dec, losses[ACTIVE_ID][1])
        self.grad_norm_history.append(gnorm)

    def _eval_round(self, epoch: int) -> dict[int, float]:
        nonce = RoundNonce(epoch, EVAL_BATCH)
        own_emb, _ = nn.forward_embedding(self.model.state, self.model.spec, self.test_shard)
        received = self._collect_embeddings(nonce, own_emb.shape)
        global_emb = self._aggregate(own_emb, received)
        self._send_all(
            lambda dest: GlobalEmbeddingMsg(sender=ACTIVE_ID, nonce=nonce, values=global_emb),
            eval_round=True,
        )
        own_logits, _ = nn.forward_decision(self.model.state, self.model.spec, global_emb)
        logits = {k: m.logits for k, m in self._collect_predictions(nonce).items()}
        logits[ACTIVE_ID] = own_logits
        return {
            party: float((np.argmax(l, axis=1) == self.test_labels).mean())
            for party, l in logits.items()
        }

    def _finish_epoch(self, epoch: int, accuracies: dict[int, float]):
        traffic = self.ledger.epoch_traffic(epoch)
        for party in range(self.session.n_parties):
            losses = self._epoch_losses.get(party, [])
            up, down, nbytes = traffic.get(party, (0, 0, 0)) if party else (0, 0, 0)
            self.records.append(
                EpochRecord(
                    party=party,
                    epoch=epoch,
                    train_loss=float(np.mean(losses)) if losses else math.nan,
                    test_acc=accuracies.get(party, math.nan),
                    msgs_up=up,
                    msgs_down=down,
                    bytes=nbytes,
                )
            )
        self.loss_history.append(
            float(np.mean(self._epoch_losses.get(ACTIVE_ID, [math.nan])))
        )


# ---------------------------------------------------------------------------
# In-process session runner
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    session: SessionConfig
    models: dict[int, PartyModel]
    records: list[EpochRecord]
    ledger: RoundLedger
    loss_history: dict[int, list[float]]
    objective_history: dict[int, list[float]]
    grad_norm_history: dict[int, list[float]]


def run_training(
    session: SessionConfig,
    train_shards: list[np.ndarray],
    train_labels: np.ndarray,
    test_shards=None,
    test_labels=None,
    n_classes: int | None = None,
    models: dict[int, PartyModel] | None = None,
    network=None,
) -> TrainResult:
    """Run a full session in one process, one thread per party.

    ``train_shards``/``test_shards`` are ordered by party id.  Models may be
    passed in (pre-initialized) or are built from the session's party configs.
    ``network`` defaults to in-memory queues; anything offering
    ``endpoint(party_id)`` works (multi-process TCP runs go through the CLI
    instead, where each party owns one endpoint).
    """
    if len(train_shards) != session.n_parties:
        raise ValueError(f"{len(train_shards)} shards for {session.n_parties} parties")
    n_classes = n_classes or int(np.max(train_labels)) + 1
    group = secagg.resolve_group(session.group, session.allow_test_groups)
    if models is None:
        models = {
            k: build_party_model(session, k, train_shards[k].shape[1], n_classes)
            for k in range(session.n_parties)
        }
    network = network if network is not None else InMemoryNetwork(session.n_passive)
    parties: dict[int, _PartyBase] = {}
    parties[0] = ActiveParty(
        0,
        session,
        models[0],
        network.endpoint(0),
        train_shards[0],
        None if test_shards is None else test_shards[0],
        train_labels=train_labels,
        test_labels=test_labels,
    )
    for k in range(1, session.n_parties):
        parties[k] = PassiveParty(
            k,
            session,
            models[k],
            network.endpoint(k),
            train_shards[k],
            None if test_shards is None else test_shards[k],
            group=group,
        )
    _run_threads(parties, session)
    active: ActiveParty = parties[0]  # type: ignore[assignment]
    return TrainResult(
        session=session,
        models=models,
        records=active.records,
        ledger=active.ledger,
        loss_history={k: parties[k].loss_history for k in parties if hasattr(parties[k], "loss_history")},
        objective_history={k: parties[k].objective_history for k in parties},
        grad_norm_history={k: parties[k].grad_norm_history for k in parties},
    )


def _run_threads(parties: dict[int, _PartyBase], session: SessionConfig):
    errors: dict[int, BaseException] = {}

    def runner(party: _PartyBase):
        try:
            party.run()
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors[party.id] = exc

    threads = [threading.Thread(target=runner, args=(p,), daemon=True) for p in parties.values()]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=session.recv_timeout * max(4, session.epochs + 2))
    if any(t.is_alive() for t in threads):
        raise ProtocolError(f"session deadlocked; party errors so far: {errors}")
    if errors:
        party_id = sorted(errors)[0]
        raise errors[party_id]
