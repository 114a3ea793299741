"""
Checkpoint persistence.

Container layout (all tensors stored as little-endian float32):

    name ndim dim_1 ... dim_n offset\n     one header line per tensor
    \n                                      blank line ends the header
    <body>                                  tensor bytes in header order
    <u64 checksum>                          sum of every preceding byte, mod 2^64

Byte payloads (config JSON, RNG state, controller scalars) travel as
tensors of byte values, so one format carries the whole TrainState and
a resumed run continues bitwise.
"""

import dataclasses
import json
import logging
from pathlib import Path
from typing import Dict, Union

import numpy as np

from config import StyleConfig
from ml.errors import IntegrityError, StateError
from ml.numerics import AdamState
from ml.pipeline import LossRecord, TrainState, build_train_state

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
STORAGE_DTYPE = np.dtype("<f4")
CHECKSUM_DTYPE = np.dtype("<u8")
HISTORY_FIELDS = ("step", "l_rec", "kl", "beta", "l_q", "l_r", "l_b", "l_all")
ADAM_GROUPS = ("adam", "refiner_adam", "bridge_adam")


# ==================== Container ====================

def pack_bytes(blob: bytes) -> np.ndarray:
    return np.frombuffer(blob, dtype=np.uint8).astype(np.float64)


def unpack_bytes(tensor: np.ndarray) -> bytes:
    return np.asarray(tensor).astype(np.uint8).tobytes()


def _checksum(data: bytes) -> int:
    return int(np.frombuffer(data, dtype=np.uint8).sum(dtype=np.uint64))


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    header, body, offset = [], [], 0
    for name, tensor in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise IntegrityError(f"Tensor name must be non-empty without whitespace: '{name}'")
        # 0-d tensors keep shape ()
        array = np.asarray(tensor, dtype=np.float64).astype(STORAGE_DTYPE, order="C")
        dims = " ".join(str(d) for d in array.shape)
        header.append(f"{name} {array.ndim} {dims} {offset}" if dims else f"{name} 0 {offset}")
        body.append(array.tobytes())
        offset += array.nbytes
    data = ("".join(line + "\n" for line in header) + "\n").encode("ascii") + b"".join(body)
    return data + np.array(_checksum(data), dtype=CHECKSUM_DTYPE).tobytes()


def decode_tensors(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < CHECKSUM_DTYPE.itemsize + 1:
        raise IntegrityError("Checkpoint is truncated")
    payload, stored = data[:-CHECKSUM_DTYPE.itemsize], data[-CHECKSUM_DTYPE.itemsize:]
    if _checksum(payload) != int(np.frombuffer(stored, dtype=CHECKSUM_DTYPE)[0]):
        raise IntegrityError("Checksum mismatch")

    if payload.startswith(b"\n"):
        header_end = 1
    else:
        terminator = payload.find(b"\n\n")
        if terminator < 0:
            raise IntegrityError("Header is not terminated by a blank line")
        header_end = terminator + 2
    try:
        lines = payload[:header_end - 1].decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise IntegrityError("Header is not ASCII")
    body = payload[header_end:]

    tensors: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for line in lines:
        fields = line.split()
        try:
            ndim = int(fields[1])
            shape = tuple(int(d) for d in fields[2:2 + ndim])
            offset = int(fields[2 + ndim])
            if len(fields) != ndim + 3:
                raise ValueError(line)
        except (IndexError, ValueError):
            raise IntegrityError(f"Malformed header line '{line}'")
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * STORAGE_DTYPE.itemsize
        if offset != expected_offset or offset + nbytes > len(body):
            raise IntegrityError(f"Tensor '{fields[0]}' at offset {offset} disagrees with the body length")
        if count == 0:
            tensors[fields[0]] = np.zeros(shape)
        else:
            tensors[fields[0]] = (
                np.frombuffer(body, dtype=STORAGE_DTYPE, count=count, offset=offset).astype(np.float64).reshape(shape)
            )
        expected_offset = offset + nbytes
    if expected_offset != len(body):
        raise IntegrityError(f"Body has {len(body) - expected_offset} bytes not described by the header")
    return tensors


def write_tensors(path: PathLike, tensors: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    return path


def read_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise StateError(f"Checkpoint not found: {path}")
    return decode_tensors(path.read_bytes())


# ==================== TrainState ====================

def state_to_tensors(state: TrainState) -> Dict[str, np.ndarray]:
    meta = {
        "step": state.step,
        "trained": state.trained,
        "last_bridge_loss": state.last_bridge_loss,
        "adam_steps": {group: getattr(state, group).step for group in ADAM_GROUPS},
    }
    tensors = {
        "meta.config": pack_bytes(state.config.to_json().encode("utf-8")),
        "meta.state": pack_bytes(json.dumps(meta, sort_keys=True).encode("ascii")),
        "meta.controller": pack_bytes(
            json.dumps(dataclasses.asdict(state.controller), sort_keys=True).encode("ascii")
        ),
        "meta.rng": pack_bytes(state.rng.get_state()),
    }
    tensors.update(state.model_parameters())
    tensors.update(state.codebook.buffers())
    for group in ADAM_GROUPS:
        adam: AdamState = getattr(state, group)
        for name in sorted(adam.m):
            tensors[f"{group}.m.{name}"] = adam.m[name]
            tensors[f"{group}.v.{name}"] = adam.v[name]
    if state.latent_mean is not None:
        tensors["latent.mean"] = state.latent_mean
        tensors["latent.scale"] = state.latent_scale
    tensors["history"] = np.array(
        [[getattr(r, f) for f in HISTORY_FIELDS] for r in state.history], dtype=np.float64
    ).reshape(-1, len(HISTORY_FIELDS))
    return tensors


def _copy_into(target: np.ndarray, tensors: Dict[str, np.ndarray], name: str) -> None:
    if name not in tensors:
        raise IntegrityError(f"Checkpoint has no tensor '{name}'")
    if tensors[name].shape != target.shape:
        raise IntegrityError(f"Tensor '{name}' has shape {tensors[name].shape}, expected {target.shape}")
    target[...] = tensors[name]


def state_from_tensors(tensors: Dict[str, np.ndarray]) -> TrainState:
    try:
        config = StyleConfig.from_json(unpack_bytes(tensors["meta.config"]).decode("utf-8"))
        meta = json.loads(unpack_bytes(tensors["meta.state"]).decode("ascii"))
        controller = json.loads(unpack_bytes(tensors["meta.controller"]).decode("ascii"))
        rng_state = unpack_bytes(tensors["meta.rng"])
    except KeyError as e:
        raise IntegrityError(f"Checkpoint is missing {e}")

    state = build_train_state(config)
    for name, param in state.model_parameters().items():
        _copy_into(param, tensors, name)
    for name, buffer in state.codebook.buffers().items():
        _copy_into(buffer, tensors, name)

    for group in ADAM_GROUPS:
        adam: AdamState = getattr(state, group)
        adam.step = int(meta["adam_steps"][group])
        prefix = f"{group}.m."
        for key in tensors:
            if key.startswith(prefix):
                name = key[len(prefix):]
                adam.m[name] = tensors[key].copy()
                adam.v[name] = tensors[f"{group}.v.{name}"].copy()

    for field, value in controller.items():
        setattr(state.controller, field, value)
    state.rng.set_state(rng_state)
    state.step = int(meta["step"])
    state.trained = bool(meta["trained"])
    state.last_bridge_loss = float(meta["last_bridge_loss"])
    if "latent.mean" in tensors:
        state.latent_mean = tensors["latent.mean"].copy()
        state.latent_scale = tensors["latent.scale"].copy()
    state.history = [
        LossRecord(step=int(row[0]), **{f: float(v) for f, v in zip(HISTORY_FIELDS[1:], row[1:])})
        for row in tensors.get("history", np.zeros((0, len(HISTORY_FIELDS))))
    ]
    return state


def save_checkpoint(state: TrainState, path: PathLike) -> Path:
    path = write_tensors(path, state_to_tensors(state))
    logger.info(f"Saved checkpoint at step {state.step} to {path}")
    return path


def load_checkpoint(path: PathLike) -> TrainState:
    state = state_from_tensors(read_tensors(path))
    logger.info(f"Loaded checkpoint {path} (step {state.step}, trained={state.trained})")
    return state


def save_mels(path: PathLike, mels: np.ndarray, **extra: np.ndarray) -> Path:
    """Mel container: `mels` (n, F, L) plus optional side tensors (contents, factors, ...)."""
    return write_tensors(path, {"mels": np.asarray(mels), **extra})


def load_mels(path: PathLike) -> np.ndarray:
    tensors = read_tensors(path)
    if "mels" not in tensors:
        raise IntegrityError(f"{path} holds no 'mels' tensor")
    return tensors["mels"]
