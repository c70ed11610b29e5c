"""Binary model artifacts: a JSON header followed by raw little-endian arrays.

Layout::

    8 bytes   magic  b"SBRRR\\x00\\x01\\n"
    8 bytes   header length, unsigned little-endian
    n bytes   UTF-8 JSON header (sorted keys)
    rest      array payload; offsets, dtypes and shapes are listed in the header

Draws have varying ranks, so each of Psi, Gamma and Lambda is stored as one
flat concatenation and split again using the per-draw ranks.
Nothing time-dependent goes into the header, so two fits with the same
configuration produce identical headers.  Wall-clock sweep times live in
the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import __version__
from .data import Standardization
from .gibbs import ChainSchedule, SampleStore
from .model import GroupPartition, Hyperparameters, ModelVariant, TruncationAdaptation

MAGIC = b"SBRRR\x00\x01\n"
FORMAT_VERSION = 1


class ArtifactError(ValueError):
    pass


class ModelArtifact(NamedTuple):
    store: SampleStore
    header: dict
    standardization: Optional[Standardization]

    @property
    def P(self) -> int:
        return self.header["dims"]["P"]

    @property
    def K(self) -> int:
        return self.header["dims"]["K"]

    @property
    def target_names(self) -> list:
        return self.header["target_names"]

    @property
    def feature_names(self) -> list:
        return self.header["feature_names"]


def hyper_to_dict(h: Hyperparameters) -> dict:
    return asdict(h)


def hyper_from_dict(d: dict) -> Hyperparameters:
    d = dict(d)
    adapt = d.pop("adapt", None)
    if isinstance(adapt, dict):
        adapt = TruncationAdaptation(**adapt)
    return Hyperparameters(adapt=adapt, **d)


def _flat(arrays) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_model(path, store: SampleStore, *, dims: dict, groups: GroupPartition, hyper: Hyperparameters,
               feature_names, target_names, standardization: Optional[Standardization] = None,
               extra: Optional[dict] = None) -> dict:
    """Write ``store`` and its metadata to ``path``; returns the header."""
    arrays = {
        "ranks": np.asarray(store.ranks, dtype="<i8").reshape(-1, 2),
        "Psi": _flat(store.Psi),
        "Gamma": _flat(store.Gamma),
        "Lambda": _flat(store.Lambda),
        "sigma2": np.asarray(store.sigma2, dtype=float).reshape(len(store), -1),
        "log_joint": np.asarray(store.log_joint, dtype=float),
        "rank_trace": np.asarray(store.rank_trace, dtype="<i8").reshape(-1, 2),
        "sweep_times": np.asarray(store.sweep_times, dtype=float),
    }
    if standardization is not None:
        for k, v in standardization._asdict().items():
            arrays["std_" + k] = np.asarray(v, dtype=float)
    table, offset, chunks = [], 0, []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                      "nbytes": len(raw)})
        offset += len(raw)
        chunks.append(raw)
    sched = store.schedule or ChainSchedule()
    header = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "dims": {k: int(v) for k, v in dims.items()},
        "variant": {"name": store.variant.name, **store.variant._asdict()},
        "schedule": asdict(sched),
        "seed": sched.seed,
        "hyper": hyper_to_dict(hyper),
        "groups": [int(g) for g in groups.assignments],
        "feature_names": list(feature_names),
        "target_names": list(target_names),
        "n_draws": len(store),
        "standardized": standardization is not None,
        "arrays": table,
        "extra": extra or {},
    }
    hb = header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for raw in chunks:
            fh.write(raw)
    return header


def read_header(path) -> tuple[dict, bytes, int]:
    """Return (header, raw header bytes, payload start offset)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ArtifactError(f"{path}: not a model artifact (bad magic bytes)")
        n = fh.read(8)
        if len(n) != 8:
            raise ArtifactError(f"{path}: truncated header")
        (length,) = struct.unpack("<Q", n)
        hb = fh.read(length)
    if len(hb) != length:
        raise ArtifactError(f"{path}: truncated header")
    try:
        header = json.loads(hb.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, hb, len(MAGIC) + 8 + length


def load_model(path) -> ModelArtifact:
    header, _, start = read_header(path)
    payload = Path(path).read_bytes()[start:]
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ArtifactError(f"{path}: payload truncated in array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    P, K = header["dims"]["P"], header["dims"]["K"]
    ranks = [tuple(int(v) for v in r) for r in arrays["ranks"]]
    store = SampleStore(
        variant=ModelVariant(header["variant"]["share_information"], header["variant"]["group_sparsity"],
                             header["variant"]["use_noise_factors"]),
        schedule=ChainSchedule(**header["schedule"]))
    ip = ig = il = 0
    for i, (s1, s2) in enumerate(ranks):
        store.Psi.append(arrays["Psi"][ip:ip + P * s1].reshape(P, s1))
        store.Gamma.append(arrays["Gamma"][ig:ig + s1 * K].reshape(s1, K))
        store.Lambda.append(arrays["Lambda"][il:il + K * s2].reshape(K, s2))
        store.sigma2.append(arrays["sigma2"][i])
        ip, ig, il = ip + P * s1, ig + s1 * K, il + K * s2
    store.ranks = ranks
    store.log_joint = arrays["log_joint"]
    store.rank_trace = arrays["rank_trace"]
    store.sweep_times = arrays["sweep_times"]
    std = None
    if header.get("standardized"):
        std = Standardization(*(arrays["std_" + k] for k in Standardization._fields))
    return ModelArtifact(store, header, std)
