"""
检查点容器：npz 兼容的 zip，每个数组一个 .npy 成员，元数据以 JSON 存放。
成员按名字排序、时间戳固定、不压缩，同一状态写出的文件逐字节相同
"""

from __future__ import annotations

import io
import json
import logging
import os
import zipfile
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from amos.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
META_MEMBER = "__meta__"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.lib.format.write_array(buffer, np.ascontiguousarray(array), allow_pickle=False)
    return buffer.getvalue()


def write_checkpoint(path: os.PathLike, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> Path:
    """先写临时文件再原子替换"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if META_MEMBER in arrays:
        raise CheckpointError(f"array name {META_MEMBER!r} is reserved")
    meta = dict(meta, version=CHECKPOINT_VERSION)
    payload = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    members = dict(arrays)
    members[META_MEMBER] = np.frombuffer(payload, dtype=np.uint8)

    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as archive:
        for name in sorted(members):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_FIXED_DATE)
            info.compress_type = zipfile.ZIP_STORED
            info.external_attr = 0o644 << 16
            archive.writestr(info, _npy_bytes(np.asarray(members[name])))
    os.replace(tmp, path)
    logger.debug("wrote checkpoint %s (%d arrays)", path, len(arrays))
    return path


def read_checkpoint(path: os.PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    arrays: Dict[str, np.ndarray] = {}
    try:
        with zipfile.ZipFile(path, "r") as archive:
            for name in archive.namelist():
                if not name.endswith(".npy"):
                    raise CheckpointError(f"unexpected member {name!r} in {path}")
                with archive.open(name) as fh:
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None

    if META_MEMBER not in arrays:
        raise CheckpointError(f"checkpoint {path} has no metadata")
    try:
        meta = json.loads(arrays.pop(META_MEMBER).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata in {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {meta.get('version')}, expected {CHECKPOINT_VERSION}")
    return arrays, meta
