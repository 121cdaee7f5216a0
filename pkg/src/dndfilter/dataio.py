"""Binary dataset (DNDF) and checkpoint (DNDC) formats.

Both formats are little-endian with float32 payloads and are bit-exact under
write/read/write round trips. Datasets end with a human-readable JSON
manifest (config, seeds, occlusion statistics) whose offset is stored in the
final 8 bytes; checkpoints carry named parameter blocks plus normalizer and
schedule arrays.
"""

from __future__ import annotations

import json
import struct
import subprocess
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError
from .simulators import DISK, ODOM, Episode

DATASET_MAGIC = b"DNDF"
CHECKPOINT_MAGIC = b"DNDC"
FORMAT_VERSION = 1
_TASK_IDS = {DISK: 0, ODOM: 1}
_TASK_NAMES = {v: k for k, v in _TASK_IDS.items()}

_build_id_cache = None


def build_id() -> str:
    """Git-describable build identifier, falling back to the version."""
    global _build_id_cache
    if _build_id_cache is None:
        try:
            out = subprocess.run(
                ["git", "describe", "--always", "--dirty"],
                capture_output=True, text=True, timeout=5,
                cwd=Path(__file__).resolve().parent)
            desc = out.stdout.strip()
        except OSError:
            desc = ""
        _build_id_cache = f"dndfilter-{__version__}" + (f"+g{desc}" if desc else "")
    return _build_id_cache


def _check_exists(path: Path, overwrite: bool):
    if path.exists() and not overwrite:
        raise FormatError(f"{path} exists; pass overwrite to replace it")


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


def write_dataset(path, episodes: list[Episode], manifest: dict,
                  overwrite: bool = False) -> None:
    path = Path(path)
    _check_exists(path, overwrite)
    if not episodes:
        raise FormatError("cannot write an empty dataset")
    task = episodes[0].task
    t_steps = episodes[0].seq_len
    state_dim = episodes[0].state_dim
    obs_dim = episodes[0].obs.shape[1]
    const_dim = episodes[0].constants.shape[0]
    layout = json.dumps({
        "obs": ("slots[x,y,valid]" if task == DISK
                else "speed,turn,distractors"),
        "states": "frames 0..T",
        "obs_frames": "1..T",
    }).encode()
    body = bytearray()
    body += DATASET_MAGIC
    body += struct.pack("<IBIIBHHI", FORMAT_VERSION, _TASK_IDS[task],
                        len(episodes), t_steps, state_dim, obs_dim, const_dim,
                        len(layout))
    body += layout
    for ep in episodes:
        if ep.seq_len != t_steps or ep.task != task:
            raise FormatError("episodes do not share task/length")
        body += ep.states.astype("<f4").tobytes()
        body += ep.obs.astype("<f4").tobytes()
        body += ep.occluded.astype(np.uint8).tobytes()
        body += ep.target_slot.astype("<i2").tobytes()
        body += ep.constants.astype("<f4").tobytes()
    manifest_offset = len(body)
    body += json.dumps(manifest, indent=2, sort_keys=True).encode()
    body += struct.pack("<Q", manifest_offset)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(body))


def read_dataset(path):
    """Returns (episodes, manifest)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise FormatError(f"cannot read dataset {path}: {err}") from err
    if len(raw) < 30 or raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path} is not a DNDF dataset")
    (version, task_id, n_eps, t_steps, state_dim, obs_dim, const_dim,
     layout_len) = struct.unpack_from("<IBIIBHHI", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if task_id not in _TASK_NAMES:
        raise FormatError(f"unknown task id {task_id}")
    task = _TASK_NAMES[task_id]
    off = 4 + struct.calcsize("<IBIIBHHI") + layout_len
    (manifest_offset,) = struct.unpack_from("<Q", raw, len(raw) - 8)
    try:
        manifest = json.loads(raw[manifest_offset: len(raw) - 8].decode())
    except (ValueError, UnicodeDecodeError) as err:
        raise FormatError(f"bad dataset manifest: {err}") from err
    episodes = []
    for _ in range(n_eps):
        states = np.frombuffer(raw, "<f4", (t_steps + 1) * state_dim, off)
        off += states.nbytes
        obs = np.frombuffer(raw, "<f4", t_steps * obs_dim, off)
        off += obs.nbytes
        occl = np.frombuffer(raw, np.uint8, t_steps, off)
        off += occl.nbytes
        slot = np.frombuffer(raw, "<i2", t_steps, off)
        off += slot.nbytes
        consts = np.frombuffer(raw, "<f4", const_dim, off)
        off += consts.nbytes
        episodes.append(Episode(
            task, states.reshape(t_steps + 1, state_dim).copy(),
            obs.reshape(t_steps, obs_dim).copy(), occl.copy(), slot.copy(),
            consts.copy()))
    if off != manifest_offset:
        raise FormatError("dataset payload does not match declared counts")
    return episodes, manifest


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


def write_checkpoint(path, blocks: list[tuple[str, np.ndarray]], meta: dict,
                     overwrite: bool = True) -> None:
    """`blocks` is an ordered list of (name, float array); `meta` must carry
    task, k_steps and config_hash."""
    path = Path(path)
    if not overwrite:
        _check_exists(path, overwrite=False)
    body = bytearray()
    body += CHECKPOINT_MAGIC
    meta_bytes = json.dumps(meta, indent=2, sort_keys=True).encode()
    body += struct.pack("<IBHII", FORMAT_VERSION, _TASK_IDS[meta["task"]],
                        int(meta["k_steps"]), len(meta_bytes), len(blocks))
    body += meta_bytes
    for name, arr in blocks:
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        body += struct.pack("<H", len(nb))
        body += nb
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(body))


def read_checkpoint(path):
    """Returns (blocks, meta) with blocks in file order."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise FormatError(f"cannot read checkpoint {path}: {err}") from err
    if len(raw) < 19 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a DNDC checkpoint")
    version, task_id, k_steps, meta_len, n_blocks = struct.unpack_from("<IBHII", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IBHII")
    try:
        meta = json.loads(raw[off: off + meta_len].decode())
    except (ValueError, UnicodeDecodeError) as err:
        raise FormatError(f"bad checkpoint metadata: {err}") from err
    off += meta_len
    meta.setdefault("task", _TASK_NAMES.get(task_id))
    meta.setdefault("k_steps", k_steps)
    blocks = []
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off: off + name_len].decode()
        off += name_len
        ndim = raw[off]
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, "<f4", count, off).reshape(shape).copy()
        off += 4 * count
        blocks.append((name, arr))
    if off != len(raw):
        raise FormatError("checkpoint payload does not match declared counts")
    return blocks, meta
