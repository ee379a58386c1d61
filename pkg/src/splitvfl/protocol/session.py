"""Handshake, alignment exchange, and the guest/host training state machines.

Both parties derive the full message schedule from the shared session
config.  Per epoch the host sends one ``BatchForward`` per training batch
and waits for the matching ``BatchGradient``; then it streams one
``EvalForward`` per validation batch (batch numbers continue after the
training batches) and waits for the guest's ``EpochMetrics``.  After the
last epoch an optional test pass uses ``EvalForward`` with
``epoch = epochs``.  The guest closes the session with ``Shutdown(0)``.

Embeddings and cut-layer gradients travel as plaintext float32 tensors.
No noise, masking, or encryption is applied; raw features and labels never
leave their party, but the exchanged representations are not protected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from splitvfl.alignment import AlignmentError, digest_ids, intersect_hashed, order_cohort, AlignedCohort
from splitvfl.config import SessionConfig
from splitvfl.data import ImageDataset, TabularDataset, batch_iter, sequential_batches
from splitvfl.eval import MetricsRecord
from splitvfl.models import GuestModel, HostModel
from splitvfl.protocol import wire
from splitvfl.protocol.transport import Transport, TransportError
from splitvfl.training import Evaluator, StepHook, TrainResult

log = logging.getLogger(__name__)

VERSION_MISMATCH = 1
ROLE_CLASH = 2
CONFIG_MISMATCH = 3
OUT_OF_ORDER = 4
BAD_SHAPE = 5
ALIGNMENT_MISMATCH = 6
UNEXPECTED_MESSAGE = 7

HANDSHAKE_CODES = {VERSION_MISMATCH, ROLE_CLASH, CONFIG_MISMATCH}


class ProtocolError(Exception):
    def __init__(self, code: int, message: str, remote: bool = False):
        who = "peer reported" if remote else "protocol error"
        super().__init__(f"{who} {code}: {message}")
        self.code = code
        self.message = message
        self.remote = remote


class HandshakeError(ProtocolError):
    pass


def _error(code: int, message: str, remote: bool = False) -> ProtocolError:
    cls = HandshakeError if code in HANDSHAKE_CODES else ProtocolError
    return cls(code, message, remote)


@dataclass
class Session:
    transport: Transport
    config: SessionConfig
    role: str
    peer: wire.Hello | None = None

    def send(self, msg: wire.Message) -> None:
        self.transport.send_message(msg)

    def fail(self, code: int, message: str) -> ProtocolError:
        """Tell the peer, close the transport, and return the exception to raise."""
        try:
            self.transport.send_message(wire.ProtocolErrorMsg(code, message))
        except TransportError:
            pass
        self.transport.close()
        return _error(code, message)

    def expect(self, *types: type[wire.Message]) -> wire.Message:
        try:
            msg = self.transport.recv_message()
        except wire.DecodeError as exc:
            raise self.fail(UNEXPECTED_MESSAGE, f"undecodable frame: {exc}") from None
        if isinstance(msg, wire.ProtocolErrorMsg):
            self.transport.close()
            raise _error(msg.code, msg.message, remote=True)
        if not isinstance(msg, types):
            names = "/".join(t.__name__ for t in types)
            raise self.fail(UNEXPECTED_MESSAGE, f"expected {names}, got {type(msg).__name__}")
        return msg


def handshake(transport: Transport, cfg: SessionConfig, role: str) -> Session:
    """Exchange ``Hello`` messages and check version, roles, and config digest."""
    session = Session(transport, cfg, role)
    session.send(wire.Hello(wire.PROTOCOL_VERSION, role, cfg.digest()))
    peer = session.expect(wire.Hello)
    if peer.protocol_version != wire.PROTOCOL_VERSION:
        raise session.fail(VERSION_MISMATCH,
                           f"protocol version {peer.protocol_version}, expected {wire.PROTOCOL_VERSION}")
    if peer.role == role:
        raise session.fail(ROLE_CLASH, f"both parties claim role {role!r}")
    if peer.config_digest != cfg.digest():
        raise session.fail(CONFIG_MISMATCH, "session config digests differ")
    session.peer = peer
    log.info("%s: handshake complete", role)
    return session


def align_host(session: Session, ids) -> AlignedCohort:
    """Send salted digests; receive and verify the cohort chosen by the guest."""
    cfg = session.config
    session.send(wire.AlignRequest(tuple(digest_ids(ids, cfg.salt))))
    resp = session.expect(wire.AlignResponse)
    if resp.order_seed != cfg.order_seed:
        raise session.fail(ALIGNMENT_MISMATCH, f"order_seed {resp.order_seed}, expected {cfg.order_seed}")
    unknown = set(resp.ids) - set(ids)
    if unknown or len(set(resp.ids)) != len(resp.ids):
        raise session.fail(ALIGNMENT_MISMATCH, f"cohort has {len(unknown)} id(s) unknown to the host")
    cohort = order_cohort(resp.ids, cfg.order_seed)
    if cohort.ids != resp.ids:
        raise session.fail(ALIGNMENT_MISMATCH, "cohort order does not match the shared order seed")
    return cohort


def align_guest(session: Session, ids) -> AlignedCohort:
    cfg = session.config
    req = session.expect(wire.AlignRequest)
    try:
        cohort = intersect_hashed(ids, req.digests, cfg.salt, cfg.order_seed)
    except AlignmentError as exc:
        raise session.fail(ALIGNMENT_MISMATCH, str(exc)) from None
    session.send(wire.AlignResponse(cohort.ids, cohort.order_seed))
    return cohort


def _check_embedding(session: Session, msg, epoch: int, batch: int, rows: int) -> np.ndarray:
    if (msg.epoch, msg.batch) != (epoch, batch):
        raise session.fail(OUT_OF_ORDER, f"got (epoch, batch) = ({msg.epoch}, {msg.batch}), "
                                         f"expected ({epoch}, {batch})")
    expected = (rows, session.config.model.embed_dim)
    if msg.tensor.shape != expected:
        raise session.fail(BAD_SHAPE, f"tensor shape {msg.tensor.shape}, expected {expected}")
    if not np.all(np.isfinite(msg.tensor)):
        raise session.fail(BAD_SHAPE, "tensor contains non-finite values")
    return msg.tensor


def run_guest(session: Session, data: tuple[TabularDataset, TabularDataset, TabularDataset],
              model: GuestModel, on_step: StepHook | None = None,
              on_epoch: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    """Label-holder side: compute the loss, return embedding gradients, emit metrics."""
    cfg = session.config
    train, val, test = data
    result = TrainResult()
    n = len(train)
    if n == 0 or cfg.epochs == 0:
        session.send(wire.Shutdown(0))
        return result

    def evaluate(epoch: int, first_batch: int, part: TabularDataset) -> Evaluator:
        ev = Evaluator(cfg.model.num_classes)
        for j, idx in enumerate(sequential_batches(len(part), cfg.batch_size)):
            msg = session.expect(wire.EvalForward)
            e_host = _check_embedding(session, msg, epoch, first_batch + j, len(idx))
            loss, logits = model.evaluate(part.features[idx], e_host, part.labels[idx])
            ev.add(loss, logits, part.labels[idx])
        return ev

    for epoch in range(cfg.epochs):
        batches = batch_iter(n, cfg.batch_size, epoch, cfg.shuffle_seed)
        total = 0.0
        for b, idx in enumerate(batches):
            msg = session.expect(wire.BatchForward)
            e_host = _check_embedding(session, msg, epoch, b, len(idx))
            loss, grad = model.forward_backward(train.features[idx], e_host, train.labels[idx])
            session.send(wire.BatchGradient(epoch, b, grad))
            model.step(cfg.optimizer)
            total += loss * len(idx)
            if on_step is not None:
                on_step(epoch, b)
        ev = evaluate(epoch, len(batches), val)
        record = MetricsRecord(epoch, total / n, ev.loss, ev.confusion().accuracy)
        result.metrics.append(record)
        result.val_confusion = ev.confusion()
        session.send(wire.EpochMetrics(epoch, record.train_loss, record.val_loss, record.val_accuracy))
        log.info("guest: epoch %d train_loss %.6f val_loss %.6f val_acc %.4f",
                 epoch, record.train_loss, record.val_loss, record.val_accuracy)
        if on_epoch is not None:
            on_epoch(record)

    if cfg.evaluate_test and len(test):
        result.test_confusion = evaluate(cfg.epochs, 0, test).confusion()
    session.send(wire.Shutdown(0))
    return result


def run_host(session: Session, data: tuple[ImageDataset, ImageDataset, ImageDataset],
             model: HostModel, on_step: StepHook | None = None) -> str:
    """Feature-only side: embed images, apply returned gradients.  Returns ``"completed"``."""
    cfg = session.config
    train, val, test = data
    n = len(train)

    def stream_eval(epoch: int, first_batch: int, part: ImageDataset) -> None:
        for j, idx in enumerate(sequential_batches(len(part), cfg.batch_size)):
            session.send(wire.EvalForward(epoch, first_batch + j, model.embed(part.images[idx])))

    if n and cfg.epochs:
        for epoch in range(cfg.epochs):
            batches = batch_iter(n, cfg.batch_size, epoch, cfg.shuffle_seed)
            for b, idx in enumerate(batches):
                session.send(wire.BatchForward(epoch, b, model.embed(train.images[idx], training=True)))
                msg = session.expect(wire.BatchGradient)
                if (msg.epoch, msg.batch) != (epoch, b):
                    raise session.fail(OUT_OF_ORDER, f"gradient for unknown (epoch, batch) = "
                                                     f"({msg.epoch}, {msg.batch}), expected ({epoch}, {b})")
                if msg.tensor.shape != (len(idx), cfg.model.embed_dim):
                    raise session.fail(BAD_SHAPE, f"gradient shape {msg.tensor.shape}, "
                                                  f"expected {(len(idx), cfg.model.embed_dim)}")
                model.backward(msg.tensor)
                model.step(cfg.optimizer)
                if on_step is not None:
                    on_step(epoch, b)
            stream_eval(epoch, len(batches), val)
            metrics = session.expect(wire.EpochMetrics)
            if metrics.epoch != epoch:
                raise session.fail(OUT_OF_ORDER, f"metrics for epoch {metrics.epoch}, expected {epoch}")
            log.info("host: epoch %d done (guest val_acc %.4f)", epoch, metrics.val_accuracy)
        if cfg.evaluate_test and len(test):
            stream_eval(cfg.epochs, 0, test)
    bye = session.expect(wire.Shutdown)
    if bye.reason != 0:
        log.warning("host: guest shut down with reason %d", bye.reason)
    return "completed"
