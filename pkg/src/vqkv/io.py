"""Experiment configs, report rows and the key-dump file format.

Config grammar
--------------
A flat list of ``key = value`` lines (``key: value`` also accepted). Blank
lines and lines starting with ``#`` or ``;`` are ignored. Keys are the field
names of :class:`ExperimentConfig`; values are parsed according to the
field's type (booleans accept ``true/false/yes/no/1/0``, lists are
comma-separated). Unknown keys are an error.

Key-dump format
---------------
``b"KVQD"``, ``d`` (u32), ``n`` (u32), then ``n * d`` little-endian f32
values row-major.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import RetrievalPolicy
from .rope import RopeConfig

REPORT_SCHEMA_VERSION = 1
EXPERIMENTS = (
    "codebook_similarity",
    "h_dump",
    "attention_mse",
    "recall_sweep",
    "ablation_grid",
    "serve_sim",
    "train_codebook",
    "quantize",
)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "ablation_grid"
    seed: int = 0
    n_seeds: int = 1
    # position embedding: standard | windowed | none
    rope_mode: str = "windowed"
    # conventional | query_aware
    vq_kind: str = "query_aware"
    head_dim: int = 32
    heads: int = 1
    context_length: int = 4096
    calib_tokens: int = 4096
    position_span: int = 32768
    codebook_size: int = 256
    max_iters: int = 30
    h_eps: float = 1e-6
    # empirical | identity
    h_mode: str = "empirical"
    theta_base: float = 10000.0
    window: int = 64
    bridge_offset: int = 2048
    topk_fraction: float = 0.03
    sentinel_tokens: int = 4
    recent_tokens: int = 64
    decode_steps: int = 8
    clusters: int = 32
    center_scale: float = 1.5
    key_noise: float = 0.7
    query_condition: float = 100.0
    query_correlation: float = 0.0
    query_rotate: bool = True
    duplicate_fraction: float = 0.0
    independent_samples: bool = True
    # synthetic | keydump
    source: str = "synthetic"
    keydump_path: str = ""
    keydump_path_b: str = ""
    codebook_dir: str = ""
    element_width: int = 2
    index_width: int = 2
    workers: int = 1
    sweep_sizes: tuple = (16, 64, 256)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.rope_mode not in ("standard", "windowed", "none"):
            raise ValueError(f"unknown rope_mode {self.rope_mode!r}")
        if self.vq_kind not in ("conventional", "query_aware"):
            raise ValueError(f"unknown vq_kind {self.vq_kind!r}")
        if self.h_mode not in ("empirical", "identity"):
            raise ValueError(f"unknown h_mode {self.h_mode!r}")
        if self.source not in ("synthetic", "keydump"):
            raise ValueError(f"unknown source {self.source!r}")
        for name in ("n_seeds", "head_dim", "heads", "context_length", "calib_tokens",
                     "codebook_size", "max_iters", "decode_steps", "clusters", "position_span"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "sweep_sizes", tuple(int(s) for s in self.sweep_sizes))

    def rope(self, mode: str | None = None) -> RopeConfig | None:
        mode = self.rope_mode if mode is None else mode
        if mode == "none":
            return None
        return RopeConfig(self.head_dim, self.theta_base, self.window, self.bridge_offset, mode)

    def policy(self) -> RetrievalPolicy:
        return RetrievalPolicy(self.topk_fraction, self.sentinel_tokens, self.recent_tokens)

    def config_hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _convert(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.split(",") if p.strip())
    return raw


def parse_config(text: str, **overrides) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string("[experiment]\n" + text)
    defaults = {f.name: f.default for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for key, raw in parser["experiment"].items():
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _convert(raw, defaults[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), **overrides)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    config_hash: str
    metric: str
    value: float
    units: str = ""
    label: str = ""

    def as_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA_VERSION,
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "label": self.label,
            "metric": self.metric,
            "value": float(self.value),
            "units": self.units,
        }


REPORT_COLUMNS = ("schema", "experiment", "config_hash", "label", "metric", "value", "units")


def write_reports(rows, out_dir, stem: str) -> tuple[Path, Path]:
    """Append rows to ``<stem>.csv`` (header written once) and ``<stem>.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, jsonl_path = out / f"{stem}.csv", out / f"{stem}.jsonl"
    new = not csv_path.exists()
    with csv_path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        for row in rows:
            d = row.as_dict()
            d["value"] = repr(d["value"])
            writer.writerow(d)
    with jsonl_path.open("a") as fh:
        for row in rows:
            fh.write(json.dumps(row.as_dict(), sort_keys=True) + "\n")
    return csv_path, jsonl_path


def read_report_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


KEYDUMP_MAGIC = b"KVQD"
_KEYDUMP_HEADER = struct.Struct("<4sII")


def write_keydump(keys, path) -> None:
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2:
        raise ValueError("key dump must be 2-D")
    n, d = keys.shape
    Path(path).write_bytes(_KEYDUMP_HEADER.pack(KEYDUMP_MAGIC, d, n) + keys.astype("<f4").tobytes())


def read_keydump(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _KEYDUMP_HEADER.size:
        raise ValueError(f"{path}: truncated key dump")
    magic, d, n = _KEYDUMP_HEADER.unpack_from(data)
    if magic != KEYDUMP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if len(data) != _KEYDUMP_HEADER.size + 4 * n * d:
        raise ValueError(f"{path}: size does not match header ({n} x {d})")
    arr = np.frombuffer(data, dtype="<f4", offset=_KEYDUMP_HEADER.size, count=n * d)
    return arr.astype(np.float64).reshape(n, d)


def write_matrix_csv(matrix, path) -> None:
    """Matrix as CSV at float32 precision (``%.9g`` round-trips f32 exactly)."""
    np.savetxt(path, np.asarray(matrix, dtype=np.float32), delimiter=",", fmt="%.9g")


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
