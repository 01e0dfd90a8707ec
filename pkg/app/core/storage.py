import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Type, TypeVar, Union

import numpy as np
import pandas as pd
import torch
import yaml
from pydantic import BaseModel

from .errors import MissingArtifactError, VQProfilesError
import logging

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "VQPCKPT"
POSTERIOR_MAGIC = "VQPPOST"
FORMAT_VERSION = 1

PathLike = Union[str, Path]
M = TypeVar("M", bound=BaseModel)


class ArtifactFormatError(VQProfilesError):
    pass


def _atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: PathLike, data: Union[BaseModel, Dict[str, Any], list]) -> None:
    """Write JSON atomically"""
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    payload = json.dumps(data, indent=2, sort_keys=True, default=str)
    _atomic_write_bytes(path, payload.encode("utf-8"))


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Missing artifact {path}", path=str(path))
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def read_model(path: PathLike, model: Type[M]) -> M:
    return model.model_validate(read_json(path))


def write_csv(path: PathLike, frame: pd.DataFrame) -> None:
    """Write a CSV with a header row, atomically"""
    _atomic_write_bytes(path, frame.to_csv(index=False).encode("utf-8"))


def read_csv(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Missing artifact {path}", path=str(path))
    return pd.read_csv(path)


def read_yaml(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Missing config file {path}", path=str(path))
    with open(path, "r", encoding="utf-8") as handle:
        data = yaml.safe_load(handle)
    return data or {}


def save_checkpoint(path: PathLike, state: Dict[str, Any], **metadata: Any) -> None:
    """Save a torch checkpoint wrapped in a versioned container"""
    container = {
        "magic": CHECKPOINT_MAGIC,
        "format_version": FORMAT_VERSION,
        "metadata": metadata,
        **state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        torch.save(container, tmp)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.info(f"Checkpoint written to {path}")


def load_checkpoint(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Missing checkpoint {path}", path=str(path))
    container = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(container, dict) or container.get("magic") != CHECKPOINT_MAGIC:
        raise ArtifactFormatError(f"{path} is not a checkpoint", path=str(path))
    if container.get("format_version") != FORMAT_VERSION:
        raise ArtifactFormatError(
            f"Unsupported checkpoint version {container.get('format_version')}",
            path=str(path),
        )
    return container


def save_posteriors(path: PathLike, arrays: Dict[str, np.ndarray]) -> None:
    """Dump run-length posteriors as a versioned npz archive"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".npz")
    os.close(fd)
    try:
        np.savez_compressed(
            tmp,
            magic=np.array(POSTERIOR_MAGIC),
            format_version=np.array(FORMAT_VERSION),
            **arrays,
        )
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_posteriors(path: PathLike) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Missing posterior dump {path}", path=str(path))
    with np.load(path, allow_pickle=False) as archive:
        if str(archive["magic"]) != POSTERIOR_MAGIC or int(archive["format_version"]) != FORMAT_VERSION:
            raise ArtifactFormatError(f"{path} is not a posterior dump", path=str(path))
        return {key: archive[key] for key in archive.files if key not in ("magic", "format_version")}


def hash_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_directory(path: PathLike, exclude: Optional[Iterable[str]] = None) -> str:
    """Hash a directory tree over sorted relative paths and file digests"""
    root = Path(path)
    if not root.is_dir():
        raise MissingArtifactError(f"Missing artifact directory {root}", path=str(root))
    skip = set(exclude or ())
    digest = hashlib.sha256()
    for file in sorted(p for p in root.rglob("*") if p.is_file()):
        relative = file.relative_to(root).as_posix()
        if file.name in skip or relative in skip or file.name.startswith("."):
            continue
        digest.update(relative.encode("utf-8"))
        digest.update(hash_file(file).encode("ascii"))
    return digest.hexdigest()


def hash_payload(data: Any) -> str:
    payload = json.dumps(data, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()
