"""Checkpoint container.

Layout::

    DRNETCKPT <version>\\n
    <header: one line of JSON>\\n
    <tensor blobs: little-endian float32, concatenated in index order>
    SHA256 <hex digest of every preceding byte>\\n

The header holds the backbone config, topology, training stage history,
final temperature, router mode, seeds, normalisation statistics and the
tensor index (name, group, shape, byte offset into the blob section).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .backbone import BackboneConfig, CellTopology, Network
from .errors import CheckpointError, CorruptionError, IncompatibilityError

MAGIC = b"DRNETCKPT"
VERSION = 1
_TRAILER = b"SHA256 "
_DIGEST_LINE = len(_TRAILER) + 64 + 1


@dataclass
class Checkpoint:
    header: dict
    tensors: dict = field(default_factory=dict)

    @property
    def config(self) -> BackboneConfig:
        return BackboneConfig.from_dict(self.header["config"])

    def group(self, name: str) -> dict:
        return {e["name"]: self.tensors[e["name"]] for e in self.header["tensors"] if e["group"] == name}


def _collect(network: Network, optimizer=None) -> list[tuple[str, str, np.ndarray]]:
    items = [("param", name, p.data) for name, p in network.named_parameters()]
    items += [("buffer", name, b) for name, b in network.named_buffers()]
    if optimizer is not None:
        items += [("optimizer", name, v) for name, v in optimizer.state_dict().items()]
    return items


def checkpoint_bytes(network: Network, optimizer=None, meta: Optional[dict] = None) -> bytes:
    items = _collect(network, optimizer)
    index, blobs, offset = [], [], 0
    for group, name, arr in items:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "group": group, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": VERSION,
        "config": network.config.to_dict(),
        "topology": network.topology.to_list(),
        "stages": list(getattr(network, "stages", [])),
        "final_tau": getattr(network, "final_tau", None),
        "router_mode": getattr(network, "router_mode", "gumbel"),
        "meta": meta or {},
        "tensors": index,
    }
    body = b"%s %d\n" % (MAGIC, VERSION) + json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(blobs)
    return body + _TRAILER + hashlib.sha256(body).hexdigest().encode() + b"\n"


def save_checkpoint(path, network: Network, optimizer=None, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(network, optimizer, meta))
    tmp.replace(path)
    return path


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < _DIGEST_LINE or raw[-_DIGEST_LINE:-65] != _TRAILER:
        raise CorruptionError("missing checksum trailer")
    body, digest = raw[:-_DIGEST_LINE], raw[-65:-1].decode("ascii", "replace")
    if hashlib.sha256(body).hexdigest() != digest:
        raise CorruptionError("checksum mismatch")
    first, _, rest = body.partition(b"\n")
    parts = first.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise CorruptionError("not a checkpoint file")
    if int(parts[1]) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {parts[1].decode()}")
    head, _, blobs = rest.partition(b"\n")
    header = json.loads(head)
    tensors = {}
    for e in header["tensors"]:
        chunk = blobs[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CorruptionError(f"tensor {e['name']} truncated")
        tensors[e["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(e["shape"])
    return Checkpoint(header, tensors)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(raw)


def config_differences(a: dict, b: dict) -> list[str]:
    keys = sorted(set(a) | set(b))
    return [k for k in keys if a.get(k) != b.get(k)]


def restore(network: Network, ckpt: Checkpoint, optimizer=None) -> Network:
    """Copy parameters, buffers and stage metadata into an already-built network."""
    diff = config_differences(ckpt.header["config"], network.config.to_dict())
    if ckpt.header["topology"] != network.topology.to_list():
        diff.append("topology")
    if diff:
        raise IncompatibilityError(diff)
    params = ckpt.group("param")
    missing = [name for name, _ in network.named_parameters() if name not in params]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    for name, p in network.named_parameters():
        src = params[name]
        if src.shape != p.shape:
            raise IncompatibilityError([name])
        p.data[...] = src
    buffers = ckpt.group("buffer")
    for name, b in network.named_buffers():
        if name in buffers:
            b[...] = buffers[name]
    if optimizer is not None:
        optimizer.load_state_dict(ckpt.group("optimizer"))
    network.stages = list(ckpt.header.get("stages", []))
    network.final_tau = ckpt.header.get("final_tau")
    network.router_mode = ckpt.header.get("router_mode", "gumbel")
    network.meta = dict(ckpt.header.get("meta", {}))
    return network


def network_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Network:
    config = ckpt.config
    topology = CellTopology(tuple(tuple(p) for p in ckpt.header["topology"]))
    return restore(Network(config, dtype=dtype, topology=topology), ckpt)
