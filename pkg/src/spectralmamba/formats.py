"""Binary containers for cubes (SPMC1), label maps (SPML1) and weights (SPMW1).

Each file starts with a magic line (``SPMC1\\n`` etc.), then one UTF-8 JSON
header line, then a little-endian payload:

* SPMC1 header ``{"h", "w", "l", "dtype": "f32", "order": "band-last"}``,
  payload ``h*w*l`` float32 values in (row, col, band) order. An optional
  ``"wavelengths"`` list is carried through.
* SPML1 header ``{"h", "w", "dtype": "u16", "order": "row-major"}``,
  payload ``h*w`` uint16 labels.
* SPMW1 header ``{"dtype": "f64", "endian": "little", "config": {...},
  "tensors": [{"name", "shape", "offset"}, ...]}``; offsets are byte offsets
  into the payload, which holds every tensor as float64 back to back.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .data import HsiCube, LabelMap
from .errors import FormatError
from .model import ModelConfig, ModelWeights, init_weights

CUBE_MAGIC = b"SPMC1\n"
LABEL_MAGIC = b"SPML1\n"
WEIGHT_MAGIC = b"SPMW1\n"


def _write(path, magic: bytes, header: dict, payload: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def _read_header(fh, magic: bytes, path) -> tuple[dict, int]:
    head = fh.read(len(magic))
    if head != magic:
        raise FormatError(f"{path}: bad magic at byte offset 0: expected {magic!r}, found {head!r}")
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise FormatError(f"{path}: header line starting at byte offset {len(magic)} is not terminated")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header at byte offset {len(magic)}: {exc}") from exc
    return header, len(magic) + len(line)


def _read_payload(fh, path, offset: int, dtype: str, count: int) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    remaining = os.fstat(fh.fileno()).st_size - offset
    if remaining != count * itemsize:
        found = remaining / itemsize
        found_txt = str(int(found)) if found == int(found) else f"{found:.2f}"
        raise FormatError(f"{path}: payload at byte offset {offset} should hold {count} values, "
                          f"found {found_txt}")
    return np.fromfile(fh, dtype=dtype, count=count)


def save_cube(path, cube: HsiCube) -> None:
    h, w, l = cube.shape
    header = {"h": h, "w": w, "l": l, "dtype": "f32", "order": "band-last"}
    if cube.band_wavelengths is not None:
        header["wavelengths"] = [float(v) for v in cube.band_wavelengths]
    _write(path, CUBE_MAGIC, header, cube.reflectance.astype("<f4").tobytes())


def load_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        header, offset = _read_header(fh, CUBE_MAGIC, path)
        try:
            h, w, l = int(header["h"]), int(header["w"]), int(header["l"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: header lacks integer h/w/l fields") from exc
        if header.get("dtype", "f32") != "f32" or header.get("order", "band-last") != "band-last":
            raise FormatError(f"{path}: unsupported dtype/order {header.get('dtype')}/{header.get('order')}")
        data = _read_payload(fh, path, offset, "<f4", h * w * l)
    return HsiCube(data.reshape(h, w, l), header.get("wavelengths"))


def save_labels(path, labels: LabelMap) -> None:
    h, w = labels.shape
    header = {"h": h, "w": w, "dtype": "u16", "order": "row-major"}
    _write(path, LABEL_MAGIC, header, labels.labels.astype("<u2").tobytes())


def load_labels(path) -> LabelMap:
    with open(path, "rb") as fh:
        header, offset = _read_header(fh, LABEL_MAGIC, path)
        try:
            h, w = int(header["h"]), int(header["w"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: header lacks integer h/w fields") from exc
        data = _read_payload(fh, path, offset, "<u2", h * w)
    return LabelMap(data.reshape(h, w))


def save_weights(path, weights: ModelWeights, cfg: ModelConfig) -> None:
    tensors, chunks, offset = [], [], 0
    for name, t in weights.named_parameters().items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"dtype": "f64", "endian": "little", "config": cfg.to_dict(), "tensors": tensors}
    _write(path, WEIGHT_MAGIC, header, b"".join(chunks))


def load_weights(path) -> tuple[ModelWeights, ModelConfig]:
    path = Path(path)
    with open(path, "rb") as fh:
        header, offset = _read_header(fh, WEIGHT_MAGIC, path)
        blob = fh.read()
    try:
        cfg = ModelConfig.from_dict(header["config"])
        entries = header["tensors"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: manifest lacks config or tensors") from exc
    arrays = {}
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = int(e["offset"]), int(e["offset"]) + 8 * count
        if stop > len(blob):
            raise FormatError(f"{path}: tensor {e['name']} runs past the end of the payload "
                              f"(byte offset {offset + stop}, file has {offset + len(blob)})")
        arrays[e["name"]] = np.frombuffer(blob[start:stop], dtype="<f8").reshape(e["shape"])
    weights = init_weights(cfg, 0)
    weights.load_named(arrays)
    return weights, cfg


# fixed 16-colour palette for class maps; index 0 is class 1
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
], dtype=np.uint8)


def save_class_map_ppm(path, class_map) -> None:
    """Binary PPM (P6) of a 1-based class map; 0 and classes > 16 render black."""
    cmap = np.asarray(class_map, dtype=np.int64)
    rgb = np.zeros(cmap.shape + (3,), dtype=np.uint8)
    valid = (cmap >= 1) & (cmap <= len(PALETTE))
    rgb[valid] = PALETTE[cmap[valid] - 1]
    h, w = cmap.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
