"""Versioned checkpoint archive.

A zip file with ``meta.json`` (format version, stage, model config, codec
and schedule parameters, free-form extras) and one ``.npy`` member per
parameter under ``params/<canonical name>.npy``.  Member timestamps are
pinned so identical parameters give byte-identical files.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .errors import DataError, PrerequisiteError
from .models import HairTransferModel

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def model_config_dict(cfg: ModelConfig) -> dict:
    d = dict(cfg.__dict__)
    d["channel_mults"] = list(cfg.channel_mults)
    return d


def save_checkpoint(path: str | Path, model: HairTransferModel, stage: str, codec, schedule, extra=None) -> str:
    """Write the archive; returns its sha256."""
    meta = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "model_config": model_config_dict(model.cfg),
        "codec": codec.meta(),
        "schedule": {"T": schedule.T, "beta_start": schedule.beta_start, "beta_end": schedule.beta_end},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _member(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        for name, p in sorted(model.named_parameters()):
            arr = io.BytesIO()
            np.save(arr, p.detach().cpu().numpy(), allow_pickle=False)
            _member(zf, f"params/{name}.npy", arr.getvalue())
    data = buf.getvalue()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def read_meta(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise PrerequisiteError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path} is not a valid checkpoint: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return meta


def load_checkpoint(path: str | Path) -> tuple[HairTransferModel, dict]:
    meta = read_meta(path)
    mc = dict(meta["model_config"])
    mc["channel_mults"] = tuple(mc["channel_mults"])
    model = HairTransferModel(ModelConfig(**mc))
    state = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            if name.startswith("params/"):
                state[name[len("params/") : -len(".npy")]] = torch.from_numpy(np.load(io.BytesIO(zf.read(name))))
    own = dict(model.named_parameters())
    missing = set(own) - set(state)
    if missing:
        raise DataError(f"{path}: checkpoint lacks parameters {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(state[name])
    return model, meta


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
