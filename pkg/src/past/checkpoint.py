"""Model checkpoint archives: one zip holding ``arch.json`` plus one ``.npy``
member per named parameter tensor. Member timestamps are pinned so identical
parameters always give byte-identical archives."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_archive(path, arch: dict, tensors: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_member("arch.json"), json.dumps(arch, indent=2, sort_keys=True))
        if extra is not None:
            zf.writestr(_member("extra.json"), json.dumps(extra, sort_keys=True))
        for name in sorted(tensors):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(tensors[name]), allow_pickle=False)
            zf.writestr(_member(f"tensors/{name}.npy"), buf.getvalue())
    return path


def read_archive(path) -> tuple[dict, dict[str, np.ndarray], dict | None]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ValidationError(f"{path}: not a checkpoint archive") from exc
    with zf:
        names = zf.namelist()
        if "arch.json" not in names:
            raise ValidationError(f"{path}: checkpoint lacks arch.json")
        arch = json.loads(zf.read("arch.json"))
        extra = json.loads(zf.read("extra.json")) if "extra.json" in names else None
        tensors = {}
        for n in names:
            if n.startswith("tensors/") and n.endswith(".npy"):
                tensors[n[len("tensors/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(n)))
    return arch, tensors, extra


def state_to_numpy(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def numpy_to_state(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
    module.load_state_dict(state, strict=True)
