"""Command-line entry point.

Exit codes:
    0  success
    1  usage or configuration error
    2  handshake failure (version, role, or config digest mismatch)
    3  transport failure (refused, closed, timed out)
    4  data error (unreadable, malformed, or inconsistent input; unwritable output)
    5  protocol violation after the handshake
    6  numerical failure (non-finite values during training)

Log verbosity comes from ``SPLITVFL_LOG_LEVEL`` (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from splitvfl import federation
from splitvfl.alignment import AlignmentError
from splitvfl.config import JobConfig, TransportConfig, load_job_config
from splitvfl.data import apply_minmax, fit_minmax, synth_generate, write_gray, write_tabular_csv
from splitvfl.errors import ConfigError, DataError, NonFiniteError, ShapeError
from splitvfl.eval import pca2, pca_loadings_csv, pca_projection_csv
from splitvfl.protocol.session import HandshakeError, ProtocolError
from splitvfl.protocol.transport import TransportError

log = logging.getLogger("splitvfl")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_HANDSHAKE = 2
EXIT_TRANSPORT = 3
EXIT_DATA = 4
EXIT_PROTOCOL = 5
EXIT_NUMERIC = 6


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1, not argparse's default 2 (reserved for handshakes)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _job(args) -> JobConfig:
    job = load_job_config(args.config)
    if getattr(args, "output_dir", None):
        job = replace(job, output_dir=Path(args.output_dir))
    if getattr(args, "address", None):
        t = job.transport
        job = replace(job, transport=TransportConfig(args.address, t.listen, t.timeout))
    if getattr(args, "timeout", None):
        t = job.transport
        job = replace(job, transport=TransportConfig(t.address, t.listen, args.timeout))
    return job


def _summary(result) -> None:
    for r in result.metrics:
        print(f"epoch {r.epoch}: train_loss {r.train_loss:.6g} val_loss {r.val_loss:.6g} "
              f"val_accuracy {r.val_accuracy:.4f}")
    if result.test_confusion is not None:
        print(f"test accuracy {result.test_confusion.accuracy:.4f} over {result.test_confusion.total} samples")


def cmd_gen_data(args) -> int:
    tab, images = synth_generate(args.seed, args.n_per_class, args.image_size)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    write_tabular_csv(out / "tabular.csv", tab)
    lines = ["id,path"]
    for sid, img in zip(images.ids, images.images):
        rel = f"images/{sid}.{args.format}"
        write_gray(out / rel, np.rint(img[0] * 255.0).astype(np.uint8))
        lines.append(f"{sid},{rel}")
    (out / "manifest.csv").write_text("\n".join(lines) + "\n")
    counts = np.bincount(tab.labels, minlength=3)
    print(f"wrote {len(tab)} rows, {len(images)} images ({args.image_size}x{args.image_size}) to {out}; "
          f"class counts {counts.tolist()}")
    return EXIT_OK


def cmd_guest(args) -> int:
    result = federation.guest_job(_job(args))
    _summary(result)
    return EXIT_OK


def cmd_host(args) -> int:
    federation.host_job(_job(args))
    print("host: session completed")
    return EXIT_OK


def cmd_simulate(args) -> int:
    result = federation.loopback_job(_job(args))
    _summary(result)
    return EXIT_OK


def cmd_standalone(args) -> int:
    result = federation.standalone_job(_job(args), Path(args.digests) if args.digests else None)
    _summary(result)
    return EXIT_OK


def cmd_analyze(args) -> int:
    job = _job(args)
    tab = federation.load_guest_data(job)
    if len(tab) == 0:
        raise DataError("no complete rows to analyse")
    norm = apply_minmax(fit_minmax(tab), tab)
    result = pca2(norm.features)
    out = Path(args.pca_out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pca_projections.csv").write_bytes(pca_projection_csv(norm.ids, result))
    (out / "pca_loadings.csv").write_bytes(pca_loadings_csv(norm.feature_names, result))
    ev = result.explained_variance
    print(f"explained variance: pc1 {ev[0]:.6g}, pc2 {ev[1]:.6g}; wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splitvfl", description="Two-party vertical federated split neural network.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic multimodal dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-per-class", type=int, default=30)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--format", choices=("pgm", "png"), default="pgm")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def job_parser(name, func, help, network=False):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", required=True, help="JSON job file")
        s.add_argument("--output-dir", help="override the config's output_dir")
        if network:
            s.add_argument("--address", help="override transport.address (host:port)")
            s.add_argument("--timeout", type=float, help="override transport.timeout in seconds")
        s.set_defaults(func=func)
        return s

    job_parser("guest", cmd_guest, "run the label-holding party", network=True)
    job_parser("host", cmd_host, "run the image party", network=True)
    job_parser("simulate", cmd_simulate, "run both parties in one process over loopback")
    sa = job_parser("standalone", cmd_standalone, "train the local reference model")
    sa.add_argument("--digests", help="write a per-step parameter digest CSV here")
    an = job_parser("analyze", cmd_analyze, "export a two-component PCA of the tabular features")
    an.add_argument("--pca-out", required=True, help="directory for the projection and loadings CSVs")
    return p


def _configure_logging() -> None:
    level = os.environ.get("SPLITVFL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HandshakeError as exc:
        code, msg = EXIT_HANDSHAKE, f"handshake failed: {exc}"
    except ProtocolError as exc:
        code, msg = EXIT_PROTOCOL, str(exc)
    except TransportError as exc:
        code, msg = EXIT_TRANSPORT, f"transport error: {exc}"
    except ConfigError as exc:
        code, msg = EXIT_USAGE, f"config error: {exc}"
    except NonFiniteError as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    except (DataError, AlignmentError, ShapeError, OSError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except ValueError as exc:
        # e.g. a malformed transport address
        code, msg = EXIT_USAGE, f"error: {exc}"
    print(f"splitvfl: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
