"""Plain-text model files.

Layout::

    cause-embeddings v1 <dim> <num_users> <num_items> <mode> <variant>
    <gamma_t rows>
    <gamma_c rows>
    <theta_t rows>
    <theta_c rows>
    <calib_scale> <calib_bias>

Values are written with 17 significant digits, which round-trips float64 exactly.
"""
from __future__ import annotations

import numpy as np

from .datamodel import EmbeddingSet, Mode
from .errors import ModelFormatError

MAGIC = "cause-embeddings"
VERSION = "v1"
_MATRICES = ("gamma_t", "gamma_c", "theta_t", "theta_c")


def _fmt_row(values) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def dumps_model(model: EmbeddingSet) -> str:
    lines = [f"{MAGIC} {VERSION} {model.dim} {model.num_users} {model.num_items} {model.mode.value} {model.variant}"]
    for name in _MATRICES:
        lines.extend(_fmt_row(row) for row in getattr(model, name))
    lines.append(_fmt_row((model.calib_scale, model.calib_bias)))
    return "\n".join(lines) + "\n"


def save_model(path, model: EmbeddingSet) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps_model(model))


def loads_model(text: str) -> EmbeddingSet:
    lines = text.split("\n")
    offsets = []
    pos = 0
    for line in lines:
        offsets.append(pos)
        pos += len(line.encode("ascii", "replace")) + 1
    header = lines[0].split()
    if len(header) != 7 or header[0] != MAGIC:
        raise ModelFormatError("not a cause-embeddings model file")
    if header[1] != VERSION:
        raise ModelFormatError(f"unsupported model version {header[1]!r} (expected {VERSION})")
    try:
        dim, num_users, num_items = (int(v) for v in header[2:5])
        mode = Mode(header[5])
    except ValueError as exc:
        raise ModelFormatError(f"bad header: {exc}") from None
    variant = header[6]

    cursor = 1

    def take_rows(count: int, width: int, what: str) -> np.ndarray:
        nonlocal cursor
        out = np.empty((count, width))
        for r in range(count):
            if cursor >= len(lines) or not lines[cursor].strip():
                offset = offsets[cursor] if cursor < len(offsets) else pos
                raise ModelFormatError(f"truncated model file: {what} row {r} missing at byte offset {offset}")
            fields = lines[cursor].split()
            if len(fields) != width:
                raise ModelFormatError(
                    f"truncated model file: {what} row {r} has {len(fields)} of {width} values "
                    f"at byte offset {offsets[cursor]}")
            try:
                out[r] = [float(v) for v in fields]
            except ValueError:
                raise ModelFormatError(f"non-numeric value in {what} at byte offset {offsets[cursor]}") from None
            cursor += 1
        return out

    mats = {}
    for name in _MATRICES:
        mats[name] = take_rows(num_users if name.startswith("gamma") else num_items, dim, name)
    calib = take_rows(1, 2, "calibration")[0]
    if mode in (Mode.PROD_ONLY, Mode.SHARED):
        mats["gamma_t"] = mats["gamma_c"]
    if mode in (Mode.USER_ONLY, Mode.SHARED):
        mats["theta_t"] = mats["theta_c"]
    return EmbeddingSet(mats["gamma_t"], mats["gamma_c"], mats["theta_t"], mats["theta_c"],
                        float(calib[0]), float(calib[1]), mode, variant)


def load_model(path) -> EmbeddingSet:
    with open(path, encoding="ascii") as fh:
        return loads_model(fh.read())
