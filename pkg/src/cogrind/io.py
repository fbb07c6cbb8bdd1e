"""On-disk formats: checkpoints, prediction JSON lines, key=value configs,
attention-map dumps and run manifests.

Checkpoint archive: a zip with a fixed timestamp holding ``manifest.json``
(version tag, parameter shapes, metadata) plus one entry per parameter path
whose bytes are the raw little-endian float64 values in row-major order.
Identical parameters therefore give byte-identical files.
"""

from __future__ import annotations

import ast
import dataclasses
import json
import zipfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor

CKPT_VERSION = "cogrind-ckpt-v1"
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- checkpoints


def _entry(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, params, meta=None):
    names = sorted(params)
    manifest = {
        "version": CKPT_VERSION,
        "params": {n: list(params[n].shape) for n in names},
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _entry(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for n in names:
            _entry(zf, n, np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return ``(params, meta)``; params are fresh leaf tensors requiring grad."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
        params = {}
        for n, shape in manifest["params"].items():
            arr = np.frombuffer(zf.read(n), dtype="<f8").reshape(shape).astype(np.float64)
            params[n] = Tensor(arr, requires_grad=True)
    return params, manifest["meta"]


# ---------------------------------------------------------------- predictions


def _f(x) -> str:
    return f"{float(x):.6f}"


def format_record(rec: dict) -> str:
    """One JSON line with every real written with exactly six decimals."""
    boxes = ",".join(
        '{"cx":%s,"cy":%s,"w":%s,"h":%s,"score":%s}' % tuple(_f(b[k]) for k in ("cx", "cy", "w", "h", "score"))
        for b in rec["boxes"])
    feats = ",".join("[" + ",".join(_f(v) for v in f) + "]" for f in rec.get("features", []))
    return ('{"video_id":%s,"frame_idx":%d,"boxes":[%s],"selected_idx":%d,"features":[%s]}'
            % (json.dumps(rec["video_id"]), rec["frame_idx"], boxes, rec["selected_idx"], feats))


def round_record(rec: dict) -> dict:
    """The values a record has after a write/read round trip."""
    return json.loads(format_record(rec))


def write_predictions(path, records):
    records = sorted(records, key=lambda r: (r["video_id"], r["frame_idx"]))
    with open(path, "w") as fh:
        for r in records:
            fh.write(format_record(r) + "\n")
    return path


def read_predictions(path) -> list:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{n}: malformed JSON line ({exc.msg})") from None
            missing = {"video_id", "frame_idx", "boxes", "selected_idx"} - set(rec)
            if missing:
                raise FormatError(f"{path}:{n}: missing fields {sorted(missing)}")
            out.append(rec)
    return out


# ---------------------------------------------------------------- configs


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path, valid_keys) -> dict:
    """Parse ``key = value`` lines (``#`` comments) and reject unknown keys.

    Dashes in keys are read as underscores.
    """
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in valid_keys:
            raise FormatError(f"{path}:{n}: unknown config key {k!r}; valid keys: {', '.join(sorted(valid_keys))}")
        out[k] = parse_value(v)
    return out


def write_config(path, *configs):
    lines = []
    for c in configs:
        for f in dataclasses.fields(c):
            v = getattr(c, f.name)
            lines.append(f"{f.name} = {v!r}" if not isinstance(v, str) else f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- misc


def dump_attention(path, video_id, maps, grid):
    """Write per-frame S/L maps as row-major JSON grids with six decimals."""
    H, W = grid
    frames = []
    for t, m in enumerate(maps):
        entry = {"frame_idx": t}
        for key, arr in m.items():
            entry[key] = [[round(float(v), 6) for v in row] for row in np.asarray(arr).reshape(H, W)]
        frames.append(entry)
    Path(path).write_text(json.dumps({"video_id": video_id, "frames": frames}) + "\n")


def write_manifest(path, **fields):
    Path(path).write_text(json.dumps(fields, indent=1, sort_keys=True, default=str) + "\n")
