"""DUQ1 artifact files.

Layout::

    DUQ1 <kind> <header bytes>\n
    <header: UTF-8 JSON, sorted keys>
    <payload: little-endian float64 arrays in header order>

The header lists every array's name, shape and byte offset, the payload
length and its SHA-256.  Nothing time-dependent is written, so equal
objects give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ShapeError
from .nn_core import LayerSpec, ModelParams
from .posterior import PosteriorCovariance

MAGIC = "DUQ1"
FORMAT_VERSION = 1
KINDS = ("model", "posterior", "prediction")
_DTYPE = np.dtype("<f8")


def save_artifact(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    """Write arrays and metadata atomically (temp file, then rename)."""
    if kind not in KINDS:
        raise ValueError(f"unknown artifact kind {kind!r}")
    entries, blobs, offset = [], [], 0
    digest = hashlib.sha256()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        blob = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        digest.update(blob)
        blobs.append(blob)
        offset += len(blob)
    header = {
        "arrays": entries,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "payload_bytes": offset,
        "sha256": digest.hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, indent=1, allow_nan=True).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(f"{MAGIC} {kind} {len(hbytes)}\n".encode("ascii"))
            fh.write(hbytes)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_artifact(path, kind: str | None = None) -> tuple[str, dict, dict]:
    """Read a DUQ1 file; returns ``(kind, arrays, meta)``.

    Raises :class:`ParseError` on a bad magic, kind or version mismatch,
    length mismatch or checksum failure.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n", 0, 256)
    first = raw[:nl].decode("ascii", "replace").split(" ") if nl > 0 else []
    if not first or first[0] != MAGIC:
        raise ParseError(f"{path}: not a {MAGIC} artifact (expected magic {MAGIC!r} at byte 0)")
    if len(first) != 3 or not first[2].isdigit():
        raise ParseError(f"{path}: malformed {MAGIC} first line")
    file_kind, hlen = first[1], int(first[2])
    if kind is not None and file_kind != kind:
        raise ParseError(f"{path}: expected a {kind} artifact, found {file_kind}")
    start = nl + 1
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: unreadable header at byte {start}: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported format version {header.get('format_version')}")
    if header.get("kind") != file_kind:
        raise ParseError(f"{path}: header kind {header.get('kind')} disagrees with first line {file_kind}")
    payload = raw[start + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise ParseError(
            f"{path}: payload has {len(payload)} bytes, header declares {header['payload_bytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ParseError(f"{path}: checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return file_kind, arrays, header["meta"]


def save_model(path, model: ModelParams, meta: dict | None = None) -> None:
    layers = [{"input_dim": s.input_dim, "output_dim": s.output_dim, "activation": s.activation} for s in model.layers]
    save_artifact(path, "model", {"theta": model.theta}, {**(meta or {}), "layers": layers})


def load_model(path) -> ModelParams:
    _, arrays, meta = load_artifact(path, "model")
    layers = tuple(LayerSpec(d["input_dim"], d["output_dim"], d["activation"]) for d in meta["layers"])
    return ModelParams(layers, arrays["theta"])


def save_posterior(path, post: PosteriorCovariance, meta: dict | None = None) -> None:
    info = {
        "r": post.r,
        "n_samples_processed": post.n_samples_processed,
        "prior_precision": post.prior_precision,
        "tc": post.tc,
    }
    save_artifact(path, "posterior", {"P": post.P}, {**(meta or {}), **info})


def load_posterior(path) -> PosteriorCovariance:
    _, arrays, meta = load_artifact(path, "posterior")
    return PosteriorCovariance(
        arrays["P"], int(meta["r"]), int(meta["n_samples_processed"]), float(meta["prior_precision"]), float(meta["tc"])
    )


@dataclass
class PredictionSet:
    """Per-input logit Gaussians and their MC-marginalized PMFs.

    Row ``n`` was sampled with random stream ``n`` of ``seed``.
    """

    logit_mean: np.ndarray
    logit_cov: np.ndarray
    pmf: np.ndarray
    pmf_cov: np.ndarray
    K: int
    seed: int
    tc: float = 1.0
    labels: np.ndarray | None = None  # 0-based
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, m = np.shape(self.logit_mean)
        for name in ("logit_cov", "pmf_cov"):
            if np.shape(getattr(self, name)) != (n, m, m):
                raise ShapeError(f"{name} must be ({n}, {m}, {m})")
        if np.shape(self.pmf) != (n, m):
            raise ShapeError(f"pmf must be ({n}, {m})")

    def __len__(self):
        return len(self.pmf)


def save_prediction(path, pred: PredictionSet) -> None:
    arrays = {
        "logit_mean": pred.logit_mean,
        "logit_cov": pred.logit_cov,
        "pmf": pred.pmf,
        "pmf_cov": pred.pmf_cov,
    }
    if pred.labels is not None:
        arrays["labels"] = np.asarray(pred.labels, dtype=np.float64)
    save_artifact(path, "prediction", arrays, {**pred.meta, "K": pred.K, "seed": pred.seed, "tc": pred.tc})


def load_prediction(path) -> PredictionSet:
    _, arrays, meta = load_artifact(path, "prediction")
    meta = dict(meta)
    K, seed, tc = int(meta.pop("K")), int(meta.pop("seed")), float(meta.pop("tc"))
    labels = arrays.get("labels")
    return PredictionSet(
        arrays["logit_mean"], arrays["logit_cov"], arrays["pmf"], arrays["pmf_cov"], K, seed, tc,
        None if labels is None else labels.astype(np.int64), meta,
    )
