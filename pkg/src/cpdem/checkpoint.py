"""Versioned JSON checkpoints with a hex-encoded float64 payload."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ArchitectureMismatchError, CheckpointError
from .network import ModelArchitecture, ParameterVector, init_network

FORMAT = "cpdem-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    problem: str
    arch: ModelArchitecture
    params: ParameterVector
    param_names: tuple[str, ...]
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def param_box(self):
        return self.arch.param_box

    def in_box(self, eta) -> bool:
        eta = np.asarray(eta, dtype=float)
        lo = np.array([a for a, _ in self.param_box])
        hi = np.array([b for _, b in self.param_box])
        return bool(np.all(eta >= lo) and np.all(eta <= hi))


def encode_params(flat) -> str:
    return np.asarray(flat, dtype="<f8").tobytes().hex()


def decode_params(text: str, expected: int) -> np.ndarray:
    if len(text) != 16 * expected:
        raise CheckpointError(
            f"parameter payload has {len(text)} hex digits, expected {16 * expected} "
            f"for {expected} float64 values")
    try:
        raw = bytes.fromhex(text)
    except ValueError as exc:
        raise CheckpointError(f"parameter payload is not valid hex: {exc}") from None
    return np.frombuffer(raw, dtype="<f8").astype(float)


def save_checkpoint(path, ckpt: Checkpoint):
    doc = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "problem": ckpt.problem,
        "architecture": ckpt.arch.to_record(),
        "param_names": list(ckpt.param_names),
        "normalization": {
            "coords": [list(b) for b in ckpt.arch.coord_box],
            "params": [list(b) for b in ckpt.arch.param_box],
            "target": [-1.0, 1.0],
        },
        "n_values": len(ckpt.params.flat),
        "parameters": encode_params(ckpt.params.flat),
        "freeze_mask": "".join("1" if m else "0" for m in ckpt.params.freeze_mask),
        "config": ckpt.config,
        "provenance": ckpt.provenance,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _require(doc, key, kind):
    if key not in doc:
        raise CheckpointError(f"checkpoint field {key!r} is missing")
    if not isinstance(doc[key], kind):
        raise CheckpointError(f"checkpoint field {key!r} has type {type(doc[key]).__name__}")
    return doc[key]


def load_checkpoint(path, expected_arch: ModelArchitecture | None = None) -> Checkpoint:
    """Read and validate a checkpoint.

    With ``expected_arch`` the stored architecture must match it exactly,
    otherwise :class:`ArchitectureMismatchError` is raised before any
    parameters are decoded.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} not found") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt or truncated: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version mismatch: expected {FORMAT_VERSION}, found {version}; "
            f"re-run `cpdem pretrain` with this release or load it with the release that wrote "
            f"version {version}")
    rec = _require(doc, "architecture", dict)
    try:
        arch = ModelArchitecture.from_record(rec)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid architecture record: {exc}") from None
    if expected_arch is not None and arch != expected_arch:
        diffs = [k for k, v in expected_arch.to_record().items() if rec.get(k) != v]
        raise ArchitectureMismatchError(
            f"checkpoint architecture differs in {', '.join(diffs) or 'layout'}: "
            + "; ".join(f"{k}: expected {expected_arch.to_record()[k]}, found {rec.get(k)}"
                        for k in diffs))
    template = init_network(arch, 0)
    n = _require(doc, "n_values", int)
    if n != len(template.flat):
        raise CheckpointError(f"n_values {n} does not match the architecture ({len(template.flat)})")
    flat = decode_params(_require(doc, "parameters", str), n)
    mask_text = doc.get("freeze_mask", "0" * n)
    if len(mask_text) != n or set(mask_text) - {"0", "1"}:
        raise CheckpointError("freeze_mask is malformed")
    mask = np.array([c == "1" for c in mask_text], dtype=bool)
    params = ParameterVector(flat, template.shape_table, template.blocks, mask)
    return Checkpoint(
        problem=_require(doc, "problem", str),
        arch=arch,
        params=params,
        param_names=tuple(_require(doc, "param_names", list)),
        config=doc.get("config", {}),
        provenance=doc.get("provenance", {}),
    )
