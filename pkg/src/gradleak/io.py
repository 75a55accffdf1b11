"""On-disk formats: JSON headers with little-endian float64 payloads.

* model: ``model.json`` + ``model.bin`` (W0, b0, W1, b1, ... row-major)
* batch: ``batch.json`` + ``batch.bin`` (samples row-major)
* gradient: ``grad.json`` + ``grad.bin`` in the model layout, optional
  ``uint8`` availability mask in the same layout (1 = available)
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch
from .model import Batch, FcnParams, GradientBundle

SCHEMA_VERSION = 1
_LE_F64 = np.dtype("<f8")


def write_json(path, payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _bin_path(json_path) -> Path:
    return Path(json_path).with_suffix(".bin")


def _check_header(meta: dict, what: str) -> None:
    if meta.get("byte_order", "LE") != "LE" or meta.get("dtype", "f64") != "f64":
        raise ValueError(f"{what}: only little-endian f64 payloads are supported")


def _layout_sizes(dims):
    return [(dims[i + 1] * dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def _split_layout(flat: np.ndarray, dims):
    ws, bs, pos = [], [], 0
    for i, (nw, nb) in enumerate(_layout_sizes(dims)):
        ws.append(flat[pos : pos + nw].reshape(dims[i + 1], dims[i]))
        pos += nw
        bs.append(flat[pos : pos + nb].copy())
        pos += nb
    if pos != flat.size:
        raise ShapeMismatch(f"payload has {flat.size} values, layout needs {pos}")
    return ws, bs


def _join_layout(ws, bs) -> np.ndarray:
    parts = []
    for w, b in zip(ws, bs):
        parts.append(np.asarray(w).ravel())
        parts.append(np.asarray(b).ravel())
    return np.concatenate(parts)


def save_model(params: FcnParams, json_path) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    write_json(
        json_path,
        {
            "dims": list(params.dims),
            "first_layer_relu": params.first_layer_relu,
            "seed": params.seed,
            "byte_order": "LE",
            "dtype": "f64",
        },
    )
    _join_layout(params.weights, params.biases).astype(_LE_F64).tofile(_bin_path(json_path))


def load_model(json_path) -> FcnParams:
    meta = read_json(json_path)
    _check_header(meta, "model")
    dims = [int(d) for d in meta["dims"]]
    flat = np.fromfile(_bin_path(json_path), dtype=_LE_F64).astype(np.float64)
    ws, bs = _split_layout(flat, dims)
    return FcnParams(dims, ws, bs, bool(meta.get("first_layer_relu", True)), meta.get("seed"))


def save_batch(batch: Batch, json_path, n_classes: int) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "M": batch.size,
        "d0": int(batch.inputs.shape[1]),
        "K": int(n_classes),
        "labels": [int(y) for y in batch.labels],
    }
    if batch.raster_shape is not None:
        payload["raster_shape"] = list(batch.raster_shape)
    write_json(json_path, payload)
    batch.inputs.astype(_LE_F64).tofile(_bin_path(json_path))


def load_batch(json_path) -> tuple:
    """Returns ``(batch, n_classes)``."""
    meta = read_json(json_path)
    M, d0 = int(meta["M"]), int(meta["d0"])
    flat = np.fromfile(_bin_path(json_path), dtype=_LE_F64).astype(np.float64)
    if flat.size != M * d0:
        raise ShapeMismatch(f"batch payload has {flat.size} values, expected {M * d0}")
    raster = meta.get("raster_shape")
    batch = Batch(flat.reshape(M, d0), np.asarray(meta["labels"], dtype=np.int64), raster)
    return batch, int(meta["K"])


def save_gradient(grad: GradientBundle, json_path, dims) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"dims": list(dims), "byte_order": "LE", "dtype": "f64"}
    if grad.batch_size_hint is not None:
        payload["batch_size"] = int(grad.batch_size_hint)
    if grad.mask is not None:
        mask_path = json_path.with_suffix(".mask")
        payload["mask"] = mask_path.name
        ws = [grad.available(i) for i in range(len(grad.weight_grads))]
        bs = [np.ones(b.shape, dtype=bool) for b in grad.bias_grads]
        _join_layout(ws, bs).astype(np.uint8).tofile(mask_path)
    write_json(json_path, payload)
    _join_layout(grad.weight_grads, grad.bias_grads).astype(_LE_F64).tofile(_bin_path(json_path))


def load_gradient(json_path) -> GradientBundle:
    json_path = Path(json_path)
    meta = read_json(json_path)
    _check_header(meta, "gradient")
    dims = [int(d) for d in meta["dims"]]
    flat = np.fromfile(_bin_path(json_path), dtype=_LE_F64).astype(np.float64)
    ws, bs = _split_layout(flat, dims)
    mask = None
    if meta.get("mask"):
        raw = np.fromfile(json_path.parent / meta["mask"], dtype=np.uint8).astype(bool)
        mws, _ = _split_layout(raw, dims)
        mask = [m.copy() for m in mws]
    return GradientBundle(ws, bs, mask=mask, batch_size_hint=meta.get("batch_size"))


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 with rounding and clamping."""
    v = np.rint((np.asarray(values, dtype=np.float64) + 1.0) / 2.0 * 255.0)
    return np.clip(v, 0, 255).astype(np.uint8)


def write_raster(path, vector, raster_shape) -> None:
    """Write a single sample as binary PGM (1 channel) or PPM (3 channels)."""
    c, h, w = (int(s) for s in raster_shape)
    img = to_bytes(vector).reshape(c, h, w)
    if c == 1:
        header, data = b"P5", img[0]
    elif c == 3:
        header, data = b"P6", np.transpose(img, (1, 2, 0))
    else:
        raise ShapeMismatch(f"raster dumps need 1 or 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(header + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def dump_rasters(directory, batch: Batch, stem: str = "sample") -> list:
    if batch.raster_shape is None:
        return []
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if batch.raster_shape[0] == 1 else ".ppm"
    paths = []
    for m in range(batch.size):
        path = directory / f"{stem}_{m:03d}{ext}"
        write_raster(path, batch.inputs[m], batch.raster_shape)
        paths.append(path)
    return paths
