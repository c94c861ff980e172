"""Parameter archives: a zip holding ``arch.json`` and one ``.npy`` per tensor."""
from __future__ import annotations

import io
import json
import zipfile

import numpy as np
import torch
from torch import nn

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_module(module: nn.Module, path, kind: str, arch: dict):
    """Write an archive of ``arch.json`` plus one ``.npy`` entry per tensor.

    Entries carry a fixed timestamp so identical parameters give identical bytes.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        header = json.dumps({"kind": kind, "arch": arch}, sort_keys=True)
        zf.writestr(zipfile.ZipInfo("arch.json", _ZIP_DATE), header)
        for name, tensor in module.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", _ZIP_DATE), buf.getvalue())


def read_archive(path) -> tuple:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("arch.json"))
        tensors = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                array = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
                tensors[name[: -len(".npy")]] = torch.from_numpy(array)
    return header, tensors
