"""Analytic complexity profiling, shape tracing and weight serialization.

MAC accounting convention (one multiply-accumulate per weight application):

* convolution          c_out * c_in * k^2 * H_out * W_out   (bias excluded)
* depthwise conv       c * k^2 * H_out * W_out
* norms / activations / element-wise arithmetic: one MAC per output element
* averaging pools: one MAC per input element read
* max pools, concat/split, upsampling and space-to-depth: zero (comparisons
  and data movement)

The instrumented forward (``tensor.mac_counter``) applies the same convention
from its runtime buffer shapes, giving an independent cross-check of the
shape arithmetic here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .network import Model, ModelConfig
from .tensor import DomainError

ARCHIVE_MAGIC = b"DRSI"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    """Weight archive is malformed or does not match the model."""


@dataclass
class ProfileRow:
    name: str
    shape: tuple
    params: int
    macs: int


class ProfileRows:
    """Accumulator the layer tree appends per-layer rows into."""

    def __init__(self):
        self._rows = []

    def add(self, name, shape, params, macs):
        self._rows.append(ProfileRow(name, tuple(int(d) for d in shape),
                                     int(params), int(macs)))

    def __iter__(self):
        return iter(self._rows)

    def __len__(self):
        return len(self._rows)


@dataclass
class ProfileReport:
    rows: list
    total_params: int
    total_macs: int
    input_size: int

    @property
    def gmacs(self):
        return self.total_macs / 1e9


def profile(cfg: ModelConfig, input_size: int) -> ProfileReport:
    """Analytic per-layer parameter and MAC counts for a square input."""
    if input_size % 64:
        raise DomainError(f"input size must be divisible by 64, got {input_size}")
    model = Model(cfg)
    rows = ProfileRows()
    model.profile((1, 3, input_size, input_size), "", rows)
    row_list = list(rows)
    return ProfileReport(rows=row_list,
                         total_params=sum(r.params for r in row_list),
                         total_macs=sum(r.macs for r in row_list),
                         input_size=input_size)


def trace(cfg: ModelConfig, input_size: int):
    """Ordered (name, output shape) listing for every layer."""
    return [(r.name, r.shape) for r in profile(cfg, input_size).rows]


def report_csv(report: ProfileReport) -> str:
    lines = ["name,n,c,h,w,params,macs"]
    for r in report.rows:
        n, c, h, w = r.shape
        lines.append(f"{r.name},{n},{c},{h},{w},{r.params},{r.macs}")
    lines.append(f"total,,,,,{report.total_params},{report.total_macs}")
    return "\n".join(lines) + "\n"


def report_json(report: ProfileReport) -> dict:
    return {
        "input_size": report.input_size,
        "rows": [{"name": r.name, "shape": list(r.shape),
                  "params": r.params, "macs": r.macs} for r in report.rows],
        "totals": {"params": report.total_params, "macs": report.total_macs,
                   "gmacs": report.gmacs},
    }


def report_jsonl(report: ProfileReport) -> str:
    """Line-delimited structured report: one object per row, totals last."""
    import json as _json
    lines = [_json.dumps({"name": r.name, "shape": list(r.shape),
                          "params": r.params, "macs": r.macs})
             for r in report.rows]
    lines.append(_json.dumps({"totals": {"params": report.total_params,
                                         "macs": report.total_macs,
                                         "gmacs": report.gmacs},
                              "input_size": report.input_size}))
    return "\n".join(lines) + "\n"


def largest_param_layers(report: ProfileReport, top=10):
    """Rows with the highest parameter counts, for band-miss diagnostics."""
    rows = [r for r in report.rows if r.params > 0]
    rows.sort(key=lambda r: r.params, reverse=True)
    return rows[:top]


# ---------------------------------------------------------------------------
# weight archive
# ---------------------------------------------------------------------------

def save_weights(model, path):
    """Write all parameters (including norm buffers) as little-endian f32."""
    entries = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<II", ARCHIVE_VERSION, len(entries)))
        for name, p in entries:
            raw = name.encode("utf-8")
            dims = p.logical_shape
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", 0, len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            payload = np.ascontiguousarray(
                p.value.numpy().reshape(dims), dtype="<f4")
            fh.write(payload.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise ArchiveError(f"truncated archive while reading {what}")
    return buf


def read_archive(path):
    """Parse an archive into an ordered {name: array} mapping."""
    out = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != ARCHIVE_MAGIC:
            raise ArchiveError(f"bad magic {magic!r}, expected {ARCHIVE_MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != ARCHIVE_VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            dtype_tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "entry header"))
            if dtype_tag != 0:
                raise ArchiveError(f"unknown dtype tag {dtype_tag} for {name!r}")
            if not 1 <= rank <= 4:
                raise ArchiveError(f"bad rank {rank} for {name!r}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            count_elems = int(np.prod(dims))
            payload = _read_exact(fh, 4 * count_elems, f"payload of {name!r}")
            if name in out:
                raise ArchiveError(f"duplicate entry {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return out


def load_weights(model, path):
    """Load an archive; entry names must match the model set exactly."""
    entries = read_archive(path)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(entries))
    extra = sorted(set(entries) - set(params))
    if missing or extra:
        raise ArchiveError(
            f"archive does not match model: missing={missing}, extra={extra}")
    for name, arr in entries.items():
        p = params[name]
        if tuple(arr.shape) != p.logical_shape:
            raise ArchiveError(
                f"shape mismatch for {name!r}: archive {arr.shape}, "
                f"model {p.logical_shape}")
        p.set(np.asarray(arr, dtype=np.float32))
    return model
