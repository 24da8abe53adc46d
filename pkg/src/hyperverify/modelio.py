"""The HNFV binary container for verifiers, backbones, hypernetworks and cluster indexes.

Byte layout (little-endian)::

    "HNFV" | u16 version | u8 role | u32 header length | JSON header | f32 payload | u32 CRC32

The CRC covers header and payload. The header lists tensors in payload order.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .backbone import EmbeddingBackbone
from .hypernet import HyperNetwork
from .kcs import ClusterIndex
from .verifier import ThetaLayout, VerifierArchitecture, WeightSet

MAGIC = b"HNFV"
VERSION = 1
ROLES = {"verifier": 0, "backbone": 1, "hypernet": 2, "cluster-index": 3}
ROLE_NAMES = {v: k for k, v in ROLES.items()}
_FIXED = struct.Struct("<4sHBI")  # 11 bytes
FIXED_SIZE = _FIXED.size


class ModelFormatError(ValueError):
    """The file is not a valid model container."""


class NotAModelFileError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class CorruptionError(ModelFormatError):
    pass


class RoleError(ModelFormatError):
    pass


@dataclass
class ModelFile:
    role: str
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def _header(tensors: Mapping[str, np.ndarray], metadata: dict) -> bytes:
    head = {"checksum": "crc32", "dtype": "float32-le",
            "layout": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()],
            "metadata": metadata}
    return json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_model(tensors: Mapping[str, np.ndarray], role: str, metadata: dict | None = None) -> bytes:
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}; expected one of {sorted(ROLES)}")
    header = _header(tensors, metadata or {})
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values())
    body = header + payload
    crc = zlib.crc32(body) & 0xFFFFFFFF
    return _FIXED.pack(MAGIC, VERSION, ROLES[role], len(header)) + body + struct.pack("<I", crc)


def serialize_model(weights, role: str, path: str | Path, metadata: dict | None = None):
    """Write ``weights`` (a WeightSet or name -> array mapping) in layout order."""
    tensors = dict(weights.items()) if isinstance(weights, WeightSet) else dict(weights)
    data = encode_model(tensors, role, metadata)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write model file {path}: {exc}") from exc


def decode_model(data: bytes, expect_role: str | None = None, source: str = "<bytes>") -> ModelFile:
    if len(data) < 4 or data[:4] != MAGIC:
        raise NotAModelFileError(f"{source}: not a model file")
    if len(data) < FIXED_SIZE:
        raise ModelFormatError(f"{source}: truncated at offset {len(data)} inside the fixed header")
    _, version, role_id, hlen = _FIXED.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"{source}: unsupported format version {version} (this reader handles {VERSION})")
    if role_id not in ROLE_NAMES:
        raise ModelFormatError(f"{source}: unknown role tag {role_id} at offset 6")
    role = ROLE_NAMES[role_id]
    if expect_role is not None and role != expect_role:
        raise RoleError(f"{source}: holds a {role} model, expected {expect_role}")
    end_header = FIXED_SIZE + hlen
    if len(data) < end_header + 4:
        raise ModelFormatError(f"{source}: truncated at offset {len(data)}; header needs {end_header} bytes")
    try:
        head = json.loads(data[FIXED_SIZE:end_header].decode("utf-8"))
        layout = [(e["name"], tuple(int(s) for s in e["shape"])) for e in head["layout"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"{source}: unreadable header at offset {FIXED_SIZE}: {exc}") from exc
    count = sum(int(np.prod(s)) for _, s in layout)
    expected = end_header + 4 * count + 4
    if len(data) != expected:
        raise ModelFormatError(f"{source}: file ends at offset {len(data)}, layout needs {expected} bytes")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[FIXED_SIZE: expected - 4]) & 0xFFFFFFFF != crc:
        raise CorruptionError(f"{source}: CRC32 mismatch, file is corrupted")
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=end_header).astype(np.float32)
    tensors, off = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        tensors[name] = flat[off: off + n].reshape(shape)
        off += n
    return ModelFile(role, tensors, head.get("metadata", {}))


def deserialize_model(path: str | Path, expect_role: str | None = None) -> ModelFile:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read model file {path}: {exc}") from exc
    return decode_model(data, expect_role, str(path))


# ------------------------------------------------------------ typed helpers


def save_verifier(path, weights: WeightSet, arch: VerifierArchitecture, threshold: float = 0.5,
                  metadata: dict | None = None):
    if weights.layout != arch.layout():
        raise ValueError("weight set layout does not match the architecture")
    meta = {"architecture": arch.to_json(), "input_size": arch.input_size,
            "threshold": float(threshold), **(metadata or {})}
    serialize_model(weights, "verifier", path, meta)


@dataclass
class VerifierModel:
    weights: WeightSet
    arch: VerifierArchitecture
    threshold: float
    metadata: dict


def load_verifier(path) -> VerifierModel:
    mf = deserialize_model(path, "verifier")
    arch = VerifierArchitecture.from_json(mf.metadata["architecture"])
    layout = arch.layout()
    if [(e.name, e.shape) for e in layout] != [(k, v.shape) for k, v in mf.tensors.items()]:
        raise ModelFormatError(f"{path}: tensor table does not match the stored architecture")
    flat = np.concatenate([v.ravel() for v in mf.tensors.values()])
    return VerifierModel(WeightSet(flat, layout), arch, float(mf.metadata.get("threshold", 0.5)),
                         mf.metadata)


def save_backbone(path, bb: EmbeddingBackbone):
    serialize_model(bb.named_parameters(), "backbone", path, bb.config())


def load_backbone(path) -> EmbeddingBackbone:
    mf = deserialize_model(path, "backbone")
    m = mf.metadata
    return EmbeddingBackbone({k: v.astype(np.float64) for k, v in mf.tensors.items()},
                             m["input_size"], m["channels"], m["embed_dim"], "loaded-from-file")


def save_hypernet(path, hn: HyperNetwork, metadata: dict | None = None):
    serialize_model(hn.named_parameters(), "hypernet", path, {**hn.config(), **(metadata or {})})


def load_hypernet(path, dtype=np.float64) -> HyperNetwork:
    mf = deserialize_model(path, "hypernet")
    m = mf.metadata
    hn = HyperNetwork(m["embed_dim"], VerifierArchitecture.from_json(m["arch"]), m["hidden"],
                      m["final_scale"], dtype=dtype)
    hn.load_parameters(mf.tensors)
    return hn


def save_cluster_index(path, index: ClusterIndex):
    tensors = {"centers": index.centers, "assignment": index.assignment.astype(np.float64)}
    serialize_model(tensors, "cluster-index", path, {"K": index.K, "inertia": index.inertia})


def load_cluster_index(path) -> ClusterIndex:
    mf = deserialize_model(path, "cluster-index")
    return ClusterIndex.from_arrays({"centers": mf.tensors["centers"],
                                     "assignment": mf.tensors["assignment"],
                                     "inertia": np.array([mf.metadata["inertia"]])})


def theta_layout_from_header(mf: ModelFile) -> ThetaLayout:
    return ThetaLayout.from_shapes([(k, v.shape) for k, v in mf.tensors.items()])


# -------------------------------------------------------------- system dirs

SYSTEM_FILES = {"hypernet": "hypernet.hnfv", "backbone": "backbone.hnfv",
                "config": "config.json", "log": "train_log.jsonl",
                "cluster_index": "cluster_index.hnfv"}


def save_system(out_dir, system, config=None, cluster_index: ClusterIndex | None = None):
    """Write the hypernetwork, backbone and (optionally) config and cluster index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_hypernet(out / SYSTEM_FILES["hypernet"], system.hypernet,
                  {"threshold": float(system.threshold)})
    save_backbone(out / SYSTEM_FILES["backbone"], system.backbone)
    if config is not None:
        config.save(out / SYSTEM_FILES["config"])
    if cluster_index is not None:
        save_cluster_index(out / SYSTEM_FILES["cluster_index"], cluster_index)


def load_system(system_dir):
    from .training import HyperVerifierSystem

    d = Path(system_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"system directory not found: {d}")
    hn_file = deserialize_model(d / SYSTEM_FILES["hypernet"], "hypernet")
    hn = load_hypernet(d / SYSTEM_FILES["hypernet"])
    bb = load_backbone(d / SYSTEM_FILES["backbone"])
    return HyperVerifierSystem(bb, hn, hn.arch, float(hn_file.metadata.get("threshold", 0.5)))
