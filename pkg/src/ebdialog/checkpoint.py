"""Binary checkpoint files.

Layout (all integers little-endian):

    b"BAYESCKP"              8-byte magic
    version                  u32
    metadata length          u32, byte length of the JSON block
    metadata                 UTF-8 JSON (sorted keys, compact separators)
    payload                  float32 LE tensors in slot-directory order

Each directory entry gives ``[start, stop)`` byte ranges relative to the
payload start: ``value`` for a deterministic slot, ``mu``/``rho``/
``prior_mean`` for a Bayesian one.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import (
    BayesianParameterSet,
    BayesianSlot,
    DeterministicSlot,
    LayerBayesFlags,
    MleCheckpoint,
    ModelConfig,
    slot_shapes,
)
from .schedules import PriorSpec, ScheduleConfig

MAGIC = b"BAYESCKP"
VERSION = 1
_HEADER = struct.Struct("<8sII")
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(params: BayesianParameterSet) -> bytes:
    payload = bytearray()
    directory = []

    def put(arr: np.ndarray) -> list[int]:
        start = len(payload)
        payload.extend(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
        return [start, len(payload)]

    for name, slot in params.slots.items():
        if isinstance(slot, DeterministicSlot):
            entry = {"name": name, "kind": "det", "shape": list(slot.value.shape), "depth": slot.depth,
                     "offsets": {"value": put(slot.value)}}
        else:
            entry = {
                "name": name,
                "kind": "bayes",
                "shape": list(slot.mu.shape),
                "depth": slot.depth,
                "offsets": {"mu": put(slot.mu), "rho": put(slot.rho), "prior_mean": put(slot.prior_mean)},
                "prior": slot.prior.to_dict(),
            }
        directory.append(entry)
    meta = {
        "model": params.config.to_dict(),
        "flags": params.flags.to_dict(),
        "schedule": params.schedule.to_dict() if params.schedule else None,
        "vocab": list(params.vocab),
        "slots": directory,
        "payload_bytes": len(payload),
    }
    blob = _dump_json(meta)
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + bytes(payload)


def from_bytes(data: bytes) -> BayesianParameterSet:
    if len(data) < _HEADER.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    try:
        meta = json.loads(data[start : start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from None
    payload = memoryview(data)[start + meta_len :]
    if len(payload) != meta.get("payload_bytes"):
        raise CheckpointError(f"payload is {len(payload)} bytes, directory expects {meta.get('payload_bytes')}")

    config = ModelConfig.from_dict(meta["model"])
    spans: list[tuple[int, int, str]] = []

    def get(name: str, part: str, span, shape) -> np.ndarray:
        lo, hi = int(span[0]), int(span[1])
        if not 0 <= lo <= hi <= len(payload):
            raise CheckpointError(f"slot {name}.{part}: offsets {lo}..{hi} out of bounds")
        if hi - lo != 4 * int(np.prod(shape)):
            raise CheckpointError(f"slot {name}.{part}: {hi - lo} bytes for shape {tuple(shape)}")
        spans.append((lo, hi, f"{name}.{part}"))
        return np.frombuffer(payload[lo:hi], dtype=_LE_F32).astype(np.float32).reshape(shape)

    slots = OrderedDict()
    for entry in meta["slots"]:
        name, shape, offs = entry["name"], tuple(entry["shape"]), entry["offsets"]
        if entry["kind"] == "det":
            slots[name] = DeterministicSlot(get(name, "value", offs["value"], shape), entry.get("depth"))
        elif entry["kind"] == "bayes":
            slots[name] = BayesianSlot(
                mu=get(name, "mu", offs["mu"], shape),
                rho=get(name, "rho", offs["rho"], shape),
                prior_mean=get(name, "prior_mean", offs["prior_mean"], shape),
                prior=PriorSpec.from_dict(entry["prior"]),
                depth=int(entry["depth"]),
            )
        else:
            raise CheckpointError(f"slot {name}: unknown kind {entry['kind']!r}")
    spans.sort()
    for (a_lo, a_hi, a), (b_lo, _, b) in zip(spans, spans[1:]):
        if b_lo < a_hi:
            raise CheckpointError(f"overlapping tensors {a} and {b}")

    schedule = ScheduleConfig.from_dict(meta["schedule"]) if meta.get("schedule") else None
    return BayesianParameterSet(
        config=config,
        slots=slots,
        flags=LayerBayesFlags.from_dict(meta["flags"]),
        schedule=schedule,
        vocab=list(meta.get("vocab", [])),
    )


def save(params: BayesianParameterSet | MleCheckpoint, path: str | Path) -> None:
    if isinstance(params, MleCheckpoint):
        params = params.to_parameter_set()
    Path(path).write_bytes(to_bytes(params))


def load(path: str | Path) -> BayesianParameterSet:
    return from_bytes(Path(path).read_bytes())


def load_mle(path: str | Path) -> MleCheckpoint:
    params = load(path)
    if params.bayesian_names:
        raise CheckpointError(f"{path} holds Bayesian slots; expected a deterministic (MLE) checkpoint")
    return params.to_mle()


def import_npz(path: str | Path, config: ModelConfig, vocab: Sequence[str]) -> MleCheckpoint:
    """Build an MLE checkpoint from externally trained weights.

    The archive must hold one array per slot name (see :mod:`ebdialog.model`)
    with linear weights laid out (in_features, out_features).
    """
    with np.load(path) as npz:
        arrays: Mapping[str, np.ndarray] = {k: npz[k] for k in npz.files}
    expected = slot_shapes(config)
    missing = [n for n in expected if n not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing slots {missing}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: slot {name} has shape {arrays[name].shape}, expected {shape}")
    return MleCheckpoint.from_weights(config, {n: arrays[n].astype(np.float32) for n in expected}, vocab)
