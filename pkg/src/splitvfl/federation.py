"""Party-level drivers: load data, align, train, and write outputs.

These sit between the CLI and the protocol state machines.  The same
functions back the two-process TCP jobs, the in-process loopback run used
by the equivalence tests, and the standalone reference job.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from splitvfl.config import JobConfig, SessionConfig
from splitvfl.data import ImageDataset, TabularDataset, load_images, load_tabular_csv
from splitvfl.errors import ConfigError
from splitvfl.eval import ConfusionMatrix, metrics_csv
from splitvfl.models import (
    GuestModel,
    HostModel,
    LocalReferenceModel,
    build_split_model,
    init_guest,
    init_image,
    to_local,
    to_split,
)
from splitvfl.nn.params import ParameterStore
from splitvfl.protocol.session import align_guest, align_host, handshake, run_guest, run_host
from splitvfl.protocol.transport import CapturingTransport, Transport, TransportError, loopback_pair, tcp_transport
from splitvfl.training import (
    StepHook,
    TrainResult,
    local_cohort,
    make_splits,
    prepare_images,
    prepare_tabular,
    train_local,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- parties ---

def guest_party(transport: Transport, cfg: SessionConfig, tabular: TabularDataset,
                on_step: StepHook | None = None) -> tuple[TrainResult, GuestModel]:
    """Run the whole guest side on a connected transport."""
    session = handshake(transport, cfg, "guest")
    cohort = align_guest(session, tabular.ids)
    log.info("guest: aligned cohort of %d samples", len(cohort.ids))
    parts = prepare_tabular(tabular, make_splits(cohort, cfg))
    model = GuestModel(cfg.model, *init_guest(cfg.model, cfg.init_seed))
    result = run_guest(session, parts, model, on_step)
    return result, model


def host_party(transport: Transport, cfg: SessionConfig, images: ImageDataset,
               on_step: StepHook | None = None) -> HostModel:
    """Run the whole host side on a connected transport."""
    session = handshake(transport, cfg, "host")
    cohort = align_host(session, images.ids)
    log.info("host: aligned cohort of %d samples", len(cohort.ids))
    parts = prepare_images(images, make_splits(cohort, cfg))
    model = HostModel(cfg.model, init_image(cfg.model, cfg.init_seed))
    run_host(session, parts, model, on_step)
    return model


@dataclass
class LoopbackRun:
    result: TrainResult
    guest: GuestModel
    host: HostModel
    guest_frames: CapturingTransport | None = None
    host_frames: CapturingTransport | None = None

    def stores(self) -> list[ParameterStore]:
        return [self.host.params, *self.guest.stores()]


def run_loopback(cfg: SessionConfig, tabular: TabularDataset, images: ImageDataset, capture: bool = False,
                 timeout: float = 60.0, host_step: StepHook | None = None,
                 guest_step: StepHook | None = None) -> LoopbackRun:
    """Both parties in one process, each on its own thread, over an in-memory pipe."""
    g_end, h_end = loopback_pair(timeout)
    g_tr: Transport = CapturingTransport(g_end) if capture else g_end
    h_tr: Transport = CapturingTransport(h_end) if capture else h_end
    out: dict[str, object] = {}
    errors: dict[str, BaseException] = {}

    def host_main():
        try:
            out["host"] = host_party(h_tr, cfg, images, host_step)
        except BaseException as exc:  # reported after join
            errors["host"] = exc
            h_tr.close()

    thread = threading.Thread(target=host_main, name="splitvfl-host", daemon=True)
    thread.start()
    try:
        result, guest = guest_party(g_tr, cfg, tabular, guest_step)
    except BaseException as exc:
        g_tr.close()
        thread.join(timeout)
        # the host's error is usually just the echo of ours
        raise exc
    thread.join(timeout)
    if "host" in errors:
        raise errors["host"]
    if thread.is_alive():
        raise TransportError("host thread did not finish")
    return LoopbackRun(result, guest, out["host"],
                       g_tr if capture else None, h_tr if capture else None)


def standalone(cfg: SessionConfig, tabular: TabularDataset, images: ImageDataset,
               on_step: Callable[[int, int, LocalReferenceModel], None] | None = None
               ) -> tuple[TrainResult, LocalReferenceModel]:
    """Train the local reference model on the same cohort, splits, and init as a federated run."""
    cohort = local_cohort(tabular, images, cfg)
    splits = make_splits(cohort, cfg)
    model = to_local(build_split_model(cfg.model, cfg.init_seed))
    hook = None if on_step is None else (lambda e, b: on_step(e, b, model))
    result = train_local(model, cfg, prepare_tabular(tabular, splits), prepare_images(images, splits), hook)
    return result, model


# ------------------------------------------------------------------- jobs ---

def load_guest_data(job: JobConfig) -> TabularDataset:
    if job.guest is None:
        raise ConfigError("config has no 'guest' section")
    g = job.guest
    tab = load_tabular_csv(g.tabular_csv, g.id_column, g.label_column, g.exclude_columns)
    if tab.features.shape[1] != job.session.model.tabular_in:
        raise ConfigError(f"{g.tabular_csv}: {tab.features.shape[1]} feature columns, "
                          f"model expects tabular_in={job.session.model.tabular_in}")
    if tab.dropped:
        log.info("dropped %d incomplete rows from %s", tab.dropped, g.tabular_csv)
    return tab


def load_host_data(job: JobConfig) -> ImageDataset:
    if job.host is None:
        raise ConfigError("config has no 'host' section")
    return load_images(job.host.image_dir, job.host.manifest, job.session.model.image_shape)


def save_params(path: Path, stores: list[ParameterStore]) -> None:
    arrays = {p.name: p.value for store in stores for p in store}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def params_digest(stores: list[ParameterStore]) -> str:
    h = hashlib.sha256()
    for store in stores:
        for p in store:
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def write_results(out: Path, result: TrainResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_bytes(metrics_csv(result.metrics))
    for name, cm in (("confusion_val.csv", result.val_confusion), ("confusion_test.csv", result.test_confusion)):
        if isinstance(cm, ConfusionMatrix):
            (out / name).write_bytes(cm.to_csv())


def _transport(job: JobConfig, role: str) -> Transport:
    t = job.transport
    return tcp_transport(t.address, listen=(t.listen == role), timeout=t.timeout)


def guest_job(job: JobConfig) -> TrainResult:
    tab = load_guest_data(job)
    with _transport(job, "guest") as transport:
        result, model = guest_party(transport, job.session, tab)
    write_results(job.output_dir, result)
    save_params(job.output_dir / "guest_params.npz", model.stores())
    return result


def host_job(job: JobConfig) -> None:
    images = load_host_data(job)
    with _transport(job, "host") as transport:
        model = host_party(transport, job.session, images)
    job.output_dir.mkdir(parents=True, exist_ok=True)
    save_params(job.output_dir / "host_params.npz", [model.params])


def loopback_job(job: JobConfig) -> TrainResult:
    """Both roles of a job in one process (no sockets)."""
    run = run_loopback(job.session, load_guest_data(job), load_host_data(job), timeout=job.transport.timeout)
    write_results(job.output_dir, run.result)
    save_params(job.output_dir / "guest_params.npz", run.guest.stores())
    save_params(job.output_dir / "host_params.npz", [run.host.params])
    return run.result


def standalone_job(job: JobConfig, digests: Path | None = None) -> TrainResult:
    """Local reference training; optionally log a parameter digest after every step."""
    rows: list[tuple[int, int, str]] = []
    hook = None
    if digests is not None:
        def hook(epoch, batch, model):
            rows.append((epoch, batch, params_digest(to_split(model).stores())))
    result, model = standalone(job.session, load_guest_data(job), load_host_data(job), hook)
    write_results(job.output_dir, result)
    save_params(job.output_dir / "params.npz", to_split(model).stores())
    if digests is not None:
        with open(digests, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "batch", "sha256"])
            w.writerows(rows)
    return result
