"""On-disk formats.

Records are JSON lines, one record per line. Attention stacks live in a
binary sidecar::

    b"ATNS" | version u16 | record count u32
    per record: L u16 | H u16 | d u16 | image_token_count u16 | L*H*d*d float32
                (layer, head, source, target) row-major, little-endian

Records point into the sidecar with ``attention_stack_ref = "path#index"``;
``path`` is relative to the record file (an empty path means the sidecar
passed explicitly to the reader).
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .core import AttentionStack, Dataset, FormatError, Record

STACK_MAGIC = b"ATNS"
STACK_VERSION = 1
_FILE_HEADER = struct.Struct("<4sHI")
_RECORD_HEADER = struct.Struct("<HHHH")

RECORD_FIELDS = ("id", "correct", "split", "human_attention", "attention_map", "error_map",
                 "per_head_maps", "attention_stack_ref", "feature_grid", "aux")
REQUIRED_FIELDS = ("id", "correct", "split", "human_attention")


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# -- attention stacks ---------------------------------------------------------

def encode_stacks(stacks: Sequence[AttentionStack]) -> bytes:
    parts = [_FILE_HEADER.pack(STACK_MAGIC, STACK_VERSION, len(stacks))]
    for s in stacks:
        n_l, n_h, d, d2 = s.weights.shape
        if d != d2:
            raise ValueError(f"attention stack is not L x H x d x d: {s.weights.shape}")
        parts.append(_RECORD_HEADER.pack(n_l, n_h, d, s.image_token_count))
        parts.append(np.ascontiguousarray(s.weights, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_stacks(data: bytes) -> list[AttentionStack]:
    if len(data) < _FILE_HEADER.size:
        raise FormatError("stack file shorter than its header")
    magic, version, count = _FILE_HEADER.unpack_from(data, 0)
    if magic != STACK_MAGIC:
        raise FormatError(f"bad stack file magic {magic!r}, expected {STACK_MAGIC!r}")
    if version != STACK_VERSION:
        raise FormatError(f"unsupported stack file version {version}")
    offset = _FILE_HEADER.size
    out = []
    for i in range(count):
        if offset + _RECORD_HEADER.size > len(data):
            raise FormatError(f"stack {i}: header truncated")
        n_l, n_h, d, k = _RECORD_HEADER.unpack_from(data, offset)
        offset += _RECORD_HEADER.size
        n = n_l * n_h * d * d
        end = offset + 4 * n
        if end > len(data):
            raise FormatError(f"stack {i}: payload truncated ({len(data) - offset} of {4 * n} bytes)")
        w = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(n_l, n_h, d, d)
        out.append(AttentionStack(w.astype(np.float32), k))
        offset = end
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after {count} stacks")
    return out


def read_stacks(path: str | Path) -> list[AttentionStack]:
    return decode_stacks(Path(path).read_bytes())


def write_stacks(path: str | Path, stacks: Sequence[AttentionStack]) -> None:
    atomic_write(path, encode_stacks(stacks))


# -- records ------------------------------------------------------------------

def _floats(values: np.ndarray) -> list:
    return np.asarray(values, dtype=np.float64).tolist()


def record_to_json(r: Record, stack_ref: str | None = None) -> dict[str, Any]:
    d: dict[str, Any] = {"id": r.id, "correct": r.correct, "split": r.split,
                         "human_attention": _floats(r.human_attention)}
    if r.attention_map is not None:
        d["attention_map"] = _floats(r.attention_map)
    if r.error_map is not None:
        d["error_map"] = _floats(r.error_map)
    if r.per_head_maps is not None:
        d["per_head_maps"] = {f"{l}.{h}": _floats(m) for (l, h), m in r.per_head_maps.items()}
    if stack_ref is not None:
        d["attention_stack_ref"] = stack_ref
    if r.feature_grid is not None:
        d["feature_grid"] = _floats(r.feature_grid)
    if r.aux_features is not None:
        d["aux"] = {k: _floats(v) for k, v in r.aux_features.items()}
    return d


def _numeric_array(value, name: str, ndim: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"{name}: expected an array of numbers") from None
    if arr.dtype == object or (ndim is not None and arr.ndim != ndim):
        raise FormatError(f"{name}: expected a {ndim}-D numeric array")
    return arr


def record_from_json(d: dict[str, Any], stack: AttentionStack | None = None) -> Record:
    if not isinstance(d, dict):
        raise FormatError("record must be a JSON object")
    unknown = sorted(set(d) - set(RECORD_FIELDS))
    if unknown:
        raise FormatError(f"unknown field(s): {', '.join(unknown)}")
    missing = [f for f in REQUIRED_FIELDS if f not in d]
    if missing:
        raise FormatError(f"missing field(s): {', '.join(missing)}")
    if not isinstance(d["id"], str):
        raise FormatError("id: expected a string")
    if not isinstance(d["correct"], bool):
        raise FormatError("correct: expected a boolean")
    if not isinstance(d["split"], str):
        raise FormatError("split: expected a string")
    per_head = None
    if "per_head_maps" in d:
        per_head = {}
        for key, m in d["per_head_maps"].items():
            try:
                l, h = (int(p) for p in key.split("."))
            except ValueError:
                raise FormatError(f"per_head_maps: bad key {key!r}, expected 'layer.head'") from None
            per_head[(l, h)] = _numeric_array(m, f"per_head_maps[{key}]", 1)
    aux = None
    if "aux" in d:
        if not isinstance(d["aux"], dict):
            raise FormatError("aux: expected an object of numeric arrays")
        aux = {k: _numeric_array(v, f"aux[{k}]", 1) for k, v in d["aux"].items()}
    return Record(
        id=d["id"],
        correct=d["correct"],
        split=d["split"],
        human_attention=_numeric_array(d["human_attention"], "human_attention", 1),
        attention_map=_numeric_array(d["attention_map"], "attention_map", 1) if "attention_map" in d else None,
        error_map=_numeric_array(d["error_map"], "error_map", 1) if "error_map" in d else None,
        per_head_maps=per_head,
        attention_stack=stack,
        feature_grid=_numeric_array(d["feature_grid"], "feature_grid", 3) if "feature_grid" in d else None,
        aux_features=aux,
    )


def _split_ref(ref: str) -> tuple[str, int]:
    path, sep, idx = ref.rpartition("#")
    if not sep:
        raise FormatError(f"attention_stack_ref {ref!r} lacks '#index'")
    try:
        return path, int(idx)
    except ValueError:
        raise FormatError(f"attention_stack_ref {ref!r}: index is not an integer") from None


def read_records(path: str | Path, stacks: str | Path | None = None) -> Dataset:
    """Parse a record file, resolving stack references.

    Errors name the 1-based line number.
    """
    path = Path(path)
    cache: dict[Path, list[AttentionStack]] = {}

    def stack_for(ref: str) -> AttentionStack:
        ref_path, idx = _split_ref(ref)
        if ref_path:
            p = (path.parent / ref_path).resolve()
        elif stacks is not None:
            p = Path(stacks).resolve()
        else:
            raise FormatError(f"attention_stack_ref {ref!r} has no path and no stack file was given")
        if p not in cache:
            try:
                cache[p] = read_stacks(p)
            except OSError as e:
                raise FormatError(f"cannot read stack file {p}: {e.strerror}") from None
        if not 0 <= idx < len(cache[p]):
            raise FormatError(f"dangling reference {ref!r}: {p.name} holds {len(cache[p])} stacks")
        return cache[p][idx]

    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                stack = None
                if isinstance(d, dict) and "attention_stack_ref" in d:
                    if not isinstance(d["attention_stack_ref"], str):
                        raise FormatError("attention_stack_ref: expected a string")
                    stack = stack_for(d["attention_stack_ref"])
                records.append(record_from_json(d, stack))
            except json.JSONDecodeError as e:
                raise FormatError(f"line {lineno}: unparseable JSON ({e.msg})") from None
            except FormatError as e:
                raise FormatError(f"line {lineno}: {e}") from None
    return Dataset(tuple(records))


def write_records(ds: Dataset | Iterable[Record], path: str | Path,
                  stacks_path: str | Path | None = None) -> None:
    """Write records as JSON lines; stacks go to a sidecar next to ``path``."""
    path = Path(path)
    records = list(ds)
    stacks = [r.attention_stack for r in records if r.attention_stack is not None]
    sidecar = Path(stacks_path) if stacks_path is not None else path.with_name(path.name + ".atns")
    ref_base = os.path.relpath(sidecar.resolve(), path.parent.resolve()) if stacks else ""
    lines, i = [], 0
    for r in records:
        ref = None
        if r.attention_stack is not None:
            ref, i = f"{ref_base}#{i}", i + 1
        lines.append(json.dumps(record_to_json(r, ref), separators=(",", ":")))
    if stacks:
        write_stacks(sidecar, stacks)
    atomic_write(path, "".join(line + "\n" for line in lines))


# -- reports ------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _jsonable(obj.item())
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def dumps_report(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"


def write_report(path: str | Path, obj) -> None:
    atomic_write(path, dumps_report(obj))


def rows_to_csv(rows: Sequence[dict[str, Any]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                    for k, v in _jsonable(row).items()})
    return buf.getvalue()
