"""Architecture descriptor: a versioned container that rebuilds the searched
network bit-exactly.

Layout: 4-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header (config snapshot and hash, per-block survival, array
manifest, search log, final metrics), concatenated little-endian float32
parameter blobs, and a trailing SHA-256 over everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import CONV_KINDS
from .supernet import Supernet, SupernetConfig, build_supernet
from .tensor import BatchNorm

MAGIC = b"HRND"
FORMAT_VERSION = 1


class DescriptorError(Exception):
    """Malformed, truncated or incompatible descriptor file."""


class DescriptorChecksumError(DescriptorError):
    pass


class DescriptorVersionError(DescriptorError):
    pass


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _block_records(net: Supernet) -> list[dict]:
    records = []
    for path, blk in net.named_blocks():
        rec = {
            "path": path,
            "kind": blk.degenerate or "normal",
            "group_size": blk.group_size,
            "tokens_init": blk.tokens_init,
            "alive_conv": {kind: list(blk.alive_conv[kind]) for kind in CONV_KINDS},
            "alive_tokens": list(blk.transformer.alive) if blk.transformer else [],
        }
        records.append(rec)
    return records


def export_descriptor(result, path: str | Path) -> Path:
    """Serialize a SearchResult (network, config, log) to a descriptor file."""
    net: Supernet = result.net
    config = {
        "supernet": result.supernet_config.to_dict(),
        "search": result.search_config.to_dict(),
        "task": result.task,
    }
    arrays = list(net.named_state())
    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "seed": result.search_config.seed,
        "config": config,
        "config_hash": config_hash(config),
        "classes": net.classes,
        "input_hw": list(net.input_hw),
        "blocks": _block_records(net),
        "arrays": manifest,
        "log": result.log_rows,
        "prune_events": result.prune_events,
        "final_metrics": result.final_metrics,
        "alive_units": net.unit_total(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header_bytes)) + header_bytes
    body += b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.write_bytes(body + digest)
    return path


@dataclass
class Descriptor:
    header: dict
    arrays: dict[str, np.ndarray]

    @property
    def config(self) -> dict:
        return self.header["config"]


def import_descriptor(path: str | Path) -> Descriptor:
    """Read and validate a descriptor file (magic, version, checksum)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32:
        raise DescriptorError(f"descriptor {path} is too short to be valid")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DescriptorChecksumError(f"checksum mismatch in {path}")
    if body[: len(MAGIC)] != MAGIC:
        raise DescriptorError(f"bad magic bytes in {path}")
    version, header_len = struct.unpack("<IQ", body[len(MAGIC) : len(MAGIC) + 12])
    if version != FORMAT_VERSION:
        raise DescriptorVersionError(
            f"descriptor format {version} unsupported (expected {FORMAT_VERSION})"
        )
    header_start = len(MAGIC) + 12
    header = json.loads(body[header_start : header_start + header_len].decode("utf-8"))
    if header.get("config_hash") != config_hash(header["config"]):
        raise DescriptorChecksumError(f"config hash mismatch in {path}")
    payload = body[header_start + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 4
        chunk = payload[entry["offset"] : entry["offset"] + size]
        if len(chunk) != size:
            raise DescriptorError(f"array {entry['name']} is truncated in {path}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    return Descriptor(header=header, arrays=arrays)


def rebuild_network(descriptor: Descriptor) -> Supernet:
    """Instantiate the surviving architecture and load its exact parameters."""
    header = descriptor.header
    sup_cfg = SupernetConfig.from_dict(header["config"]["supernet"])
    net = build_supernet(
        sup_cfg, header["classes"], tuple(header["input_hw"]), seed=header["seed"]
    )
    blocks = dict(net.named_blocks())
    for rec in header["blocks"]:
        blk = blocks[rec["path"]]
        removal = []
        for kind in CONV_KINDS:
            keep = set(rec["alive_conv"][kind])
            removal.extend((kind, idx) for idx in range(rec["group_size"]) if idx not in keep)
        keep_tokens = set(rec["alive_tokens"])
        removal.extend(
            ("token", idx) for idx in range(rec["tokens_init"]) if idx not in keep_tokens
        )
        if removal:
            blk.prune(removal)
        if rec["kind"] != "normal" and blk.degenerate is None:
            blk.degenerate_form()
        if (blk.degenerate or "normal") != rec["kind"]:
            raise DescriptorError(
                f"block {rec['path']} rebuilt as {blk.degenerate or 'normal'}, "
                f"descriptor says {rec['kind']}"
            )
    current = dict(net.named_state())
    stored = descriptor.arrays
    if set(current) != set(stored):
        missing = set(stored) ^ set(current)
        raise DescriptorError(f"descriptor arrays do not match rebuilt structure: {sorted(missing)[:5]}")
    net.load_state(stored)

    def mark(m):
        if isinstance(m, BatchNorm):
            m.initialized = True

    net.apply_modules(mark)
    net.eval()
    return net
