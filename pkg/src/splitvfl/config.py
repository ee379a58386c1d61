"""Session and job configuration with a canonical, digestible form.

A job file is JSON.  Both parties normally read the same file; only the
``session`` section is covered by the handshake digest, so each side may
point at its own local data paths and transport settings.

Example::

    {
      "session": {
        "model": {"image_shape": [1, 32, 32], "image_blocks": 2},
        "optimizer": {"learning_rate": 0.01, "momentum": 0.9},
        "epochs": 5, "batch_size": 32,
        "split": {"train": 60, "val": 15, "test": 15},
        "salt": "000102030405060708090a0b0c0d0e0f"
      },
      "guest": {"tabular_csv": "data/tabular.csv", "id_column": "id", "label_column": "Group"},
      "host": {"image_dir": "data", "manifest": "data/manifest.csv"},
      "transport": {"address": "127.0.0.1:7431", "listen": "guest", "timeout": 30},
      "output_dir": "out"
    }
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from splitvfl.errors import ConfigError
from splitvfl.models import SplitModelConfig
from splitvfl.nn.optim import OptimizerConfig

DEFAULT_SALT = bytes(range(16))


@dataclass(frozen=True)
class SplitCounts:
    train: int
    val: int = 0
    test: int = 0


@dataclass(frozen=True)
class SessionConfig:
    """Everything both parties must agree on before exchanging any tensor."""

    model: SplitModelConfig = field(default_factory=SplitModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    split: SplitCounts = SplitCounts(60, 15, 15)
    epochs: int = 5
    batch_size: int = 32
    shuffle_seed: int = 7
    init_seed: int = 0
    order_seed: int = 11
    salt: bytes = DEFAULT_SALT
    patient_separator: str = "_"
    evaluate_test: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if len(self.salt) != 16:
            raise ConfigError(f"salt must be 16 bytes, got {len(self.salt)}")
        if not 0 <= self.order_seed < 2 ** 64:
            raise ConfigError("order_seed must fit in 64 bits")
        if min(self.split.train, self.split.val, self.split.test) < 0:
            raise ConfigError(f"split counts must be non-negative: {self.split}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["image_shape"] = list(self.model.image_shape)
        d["salt"] = self.salt.hex()
        return d

    def canonical(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical()).digest()

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown session keys: {sorted(unknown)}")
        try:
            if "model" in d:
                d["model"] = SplitModelConfig(**d["model"])
            if "optimizer" in d:
                d["optimizer"] = OptimizerConfig(**d["optimizer"])
            if "split" in d:
                d["split"] = SplitCounts(**d["split"])
            if "salt" in d:
                d["salt"] = bytes.fromhex(d["salt"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid session config: {exc}") from None

    def replace(self, **changes) -> "SessionConfig":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class GuestData:
    tabular_csv: Path
    id_column: str = "id"
    label_column: str = "Group"
    exclude_columns: tuple[str, ...] = ()


@dataclass(frozen=True)
class HostData:
    image_dir: Path
    manifest: Path


@dataclass(frozen=True)
class TransportConfig:
    address: str = "127.0.0.1:7431"
    listen: str = "guest"
    timeout: float = 30.0

    def __post_init__(self):
        if self.listen not in ("guest", "host"):
            raise ConfigError(f"transport.listen must be 'guest' or 'host', got {self.listen!r}")
        if not self.timeout > 0:
            raise ConfigError("transport.timeout must be positive")


@dataclass(frozen=True)
class JobConfig:
    session: SessionConfig
    guest: GuestData | None
    host: HostData | None
    transport: TransportConfig
    output_dir: Path


def load_job_config(path) -> JobConfig:
    """Parse a JSON job file; relative paths resolve against the file's directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return job_from_dict(raw, path.parent)


def job_from_dict(raw: dict, base: Path) -> JobConfig:
    unknown = set(raw) - {"session", "guest", "host", "transport", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown job keys: {sorted(unknown)}")
    session = SessionConfig.from_dict(raw.get("session", {}))
    try:
        guest = host = None
        if "guest" in raw:
            g = dict(raw["guest"])
            g["tabular_csv"] = base / g["tabular_csv"]
            g["exclude_columns"] = tuple(g.get("exclude_columns", ()))
            guest = GuestData(**g)
        if "host" in raw:
            h = dict(raw["host"])
            host = HostData(image_dir=base / h["image_dir"], manifest=base / h["manifest"])
        transport = TransportConfig(**raw.get("transport", {}))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid job config: {exc!r}") from None
    return JobConfig(session, guest, host, transport, base / raw.get("output_dir", "out"))
