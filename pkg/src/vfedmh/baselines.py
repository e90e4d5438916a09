"""Comparison methods: local-only training and prediction-aggregation VFL.

Local trains the active party's network on its own shard and labels, with no
communication at all.  The aggregation baseline (aggVFL) runs each party's
full network on its own shard, averages the logits at the active party, and
sends back each party's (1/C)-scaled share of the loss gradient: two messages
per batch per passive party instead of four.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nn, optim
from .data import batch_iter
from .messages import EVAL_BATCH, LossAndGradMsg, PredictionMsg, RoundNonce, encode_frame
from .metrics import EpochRecord, RoundLedger
from .protocol import (
    ProtocolError,
    SessionConfig,
    _check_nonce,
    _expect,
    build_party_model,
    collect_from_passives,
)
from .transport import ACTIVE_ID, InMemoryNetwork


# ---------------------------------------------------------------------------
# Local
# ---------------------------------------------------------------------------


@dataclass
class LocalResult:
    spec: nn.NetworkSpec
    state: nn.NetworkState
    records: list[EpochRecord]


def run_local(
    shard: np.ndarray,
    labels: np.ndarray,
    spec: nn.NetworkSpec,
    opt_cfg: optim.OptimizerConfig,
    epochs: int,
    batch_size: int,
    seed: int,
    test_shard=None,
    test_labels=None,
    state: nn.NetworkState | None = None,
) -> LocalResult:
    """Supervised training of one unsplit network; zero protocol messages."""
    shard = np.asarray(shard, dtype=np.float64)
    state = state if state is not None else nn.init_state(spec, seed)
    opt_state = optim.init_optimizer(opt_cfg, state.flat())
    records = []
    for epoch in range(epochs):
        losses = []
        for idx in batch_iter(shard.shape[0], batch_size, epoch, seed):
            logits, trace = nn.forward_full(state, spec, shard[idx])
            loss, grad = nn.softmax_cross_entropy(logits, labels[idx])
            grads = nn.backward_full(state, spec, trace, grad)
            optim.step(opt_cfg, opt_state, state.flat(), grads)
            losses.append(loss)
        acc = math.nan
        if test_shard is not None:
            logits, _ = nn.forward_full(state, spec, test_shard)
            acc = float((np.argmax(logits, axis=1) == np.asarray(test_labels)).mean())
        records.append(
            EpochRecord(
                party=0,
                epoch=epoch,
                train_loss=float(np.mean(losses)) if losses else math.nan,
                test_acc=acc,
                msgs_up=0,
                msgs_down=0,
                bytes=0,
            )
        )
    return LocalResult(spec=spec, state=state, records=records)


# ---------------------------------------------------------------------------
# aggVFL
# ---------------------------------------------------------------------------


@dataclass
class AggVFLResult:
    session: SessionConfig
    models: dict[int, object]
    records: list[EpochRecord]
    ledger: RoundLedger
    aggregate_acc: list[float]  # accuracy of the averaged logits per epoch


class _AggPassive:
    def __init__(self, party_id, session, model, endpoint, shard, test_shard):
        self.id = party_id
        self.session = session
        self.model = model
        self.endpoint = endpoint
        self.shard = np.asarray(shard, dtype=np.float64)
        self.test_shard = None if test_shard is None else np.asarray(test_shard, dtype=np.float64)

    def run(self):
        for epoch in range(self.session.epochs):
            for b, idx in enumerate(batch_iter(self.shard.shape[0], self.session.batch_size, epoch, self.session.seed)):
                nonce = RoundNonce(epoch, b)
                logits, trace = nn.forward_full(self.model.state, self.model.spec, self.shard[idx])
                self.endpoint.send(ACTIVE_ID, PredictionMsg(sender=self.id, nonce=nonce, logits=logits))
                reply = _expect(self.endpoint, LossAndGradMsg, self.session.recv_timeout)
                _check_nonce(reply.nonce, nonce, f"party {self.id}")
                grads = nn.backward_full(self.model.state, self.model.spec, trace, reply.grad)
                optim.step(self.model.opt_cfg, self.model.opt_state,
                           self.model.state.flat(), grads)
            if self.test_shard is not None:
                nonce = RoundNonce(epoch, EVAL_BATCH)
                logits, _ = nn.forward_full(self.model.state, self.model.spec, self.test_shard)
                self.endpoint.send(ACTIVE_ID, PredictionMsg(sender=self.id, nonce=nonce, logits=logits))


class _AggActive:
    def __init__(self, session, model, endpoint, shard, labels, test_shard, test_labels):
        self.session = session
        self.model = model
        self.endpoint = endpoint
        self.shard = np.asarray(shard, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.test_shard = None if test_shard is None else np.asarray(test_shard, dtype=np.float64)
        self.test_labels = None if test_labels is None else np.asarray(test_labels, dtype=np.int64)
        self.ledger = RoundLedger(session.n_passive)
        self.records: list[EpochRecord] = []
        self.aggregate_acc: list[float] = []
        self._pending = deque()

    def _collect_logits(self, nonce):
        def check(msg):
            self.ledger.record(msg.sender, len(encode_frame(msg)), type(msg).__name__,
                               up=True, eval_round=nonce.is_eval)

        got = collect_from_passives(
            self.endpoint, self._pending, PredictionMsg, nonce,
            self.session.n_passive, self.session.recv_timeout, check,
        )
        return {k: m.logits for k, m in got.items()}

    def run(self):
        c = self.session.n_parties
        for epoch in range(self.session.epochs):
            self.ledger.start_epoch(epoch)
            losses = []
            for b, idx in enumerate(batch_iter(self.shard.shape[0], self.session.batch_size, epoch, self.session.seed)):
                nonce = RoundNonce(epoch, b)
                own_logits, trace = nn.forward_full(self.model.state, self.model.spec, self.shard[idx])
                logits = self._collect_logits(nonce)
                logits[ACTIVE_ID] = own_logits
                mean_logits = sum(logits[k] for k in sorted(logits)) / float(c)
                loss, grad_mean = nn.softmax_cross_entropy(mean_logits, self.labels[idx])
                if not math.isfinite(loss):
                    raise ProtocolError(f"non-finite loss at {nonce}; aborting")
                losses.append(loss)
                grad_share = grad_mean / float(c)
                for dest in range(1, c):
                    msg = LossAndGradMsg(sender=ACTIVE_ID, nonce=nonce, loss=loss, grad=grad_share)
                    self.endpoint.send(dest, msg)
                    self.ledger.record(dest, len(encode_frame(msg)), type(msg).__name__,
                                       up=False, eval_round=False)
                grads = nn.backward_full(self.model.state, self.model.spec, trace, grad_share)
                optim.step(self.model.opt_cfg, self.model.opt_state, self.model.state.flat(), grads)
            accs, agg_acc = {}, math.nan
            if self.test_shard is not None:
                nonce = RoundNonce(epoch, EVAL_BATCH)
                own_logits, _ = nn.forward_full(self.model.state, self.model.spec, self.test_shard)
                logits = self._collect_logits(nonce)
                logits[ACTIVE_ID] = own_logits
                accs = {
                    k: float((np.argmax(v, axis=1) == self.test_labels).mean())
                    for k, v in logits.items()
                }
                mean_logits = sum(logits[k] for k in sorted(logits)) / float(c)
                agg_acc = float((np.argmax(mean_logits, axis=1) == self.test_labels).mean())
            self.aggregate_acc.append(agg_acc)
            traffic = self.ledger.epoch_traffic(epoch)
            for party in range(c):
                up, down, nbytes = traffic.get(party, (0, 0, 0)) if party else (0, 0, 0)
                self.records.append(
                    EpochRecord(
                        party=party,
                        epoch=epoch,
                        train_loss=float(np.mean(losses)) if losses else math.nan,
                        test_acc=accs.get(party, math.nan),
                        msgs_up=up,
                        msgs_down=down,
                        bytes=nbytes,
                    )
                )


def run_aggvfl(
    session: SessionConfig,
    train_shards: list[np.ndarray],
    train_labels: np.ndarray,
    test_shards=None,
    test_labels=None,
    n_classes: int | None = None,
) -> AggVFLResult:
    """Train by averaging per-party logits at the active party.

    With a single party this degenerates to local training of the active
    party's network.
    """
    if len(train_shards) != session.n_parties:
        raise ValueError(f"{len(train_shards)} shards for {session.n_parties} parties")
    n_classes = n_classes or int(np.max(train_labels)) + 1
    models = {
        k: build_party_model(session, k, train_shards[k].shape[1], n_classes)
        for k in range(session.n_parties)
    }
    network = InMemoryNetwork(session.n_passive)
    active = _AggActive(
        session, models[0], network.endpoint(0), train_shards[0], train_labels,
        None if test_shards is None else test_shards[0], test_labels,
    )
    passives = [
        _AggPassive(k, session, models[k], network.endpoint(k), train_shards[k],
                    None if test_shards is None else test_shards[k])
        for k in range(1, session.n_parties)
    ]
    errors: dict[int, BaseException] = {}

    def runner(obj, pid):
        try:
            obj.run()
        except BaseException as exc:  # noqa: BLE001
            errors[pid] = exc

    threads = [threading.Thread(target=runner, args=(active, 0), daemon=True)]
    threads += [threading.Thread(target=runner, args=(p, p.id), daemon=True) for p in passives]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=session.recv_timeout * max(4, session.epochs + 2))
    if any(t.is_alive() for t in threads):
        raise ProtocolError(f"aggVFL session deadlocked; errors so far: {errors}")
    if errors:
        raise errors[sorted(errors)[0]]
    return AggVFLResult(
        session=session,
        models=models,
        records=active.records,
        ledger=active.ledger,
        aggregate_acc=active.aggregate_acc,
    )
