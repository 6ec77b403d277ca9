"""Tensor container files: a zip archive holding a JSON manifest and raw
little-endian tensor payloads.

Layout::

    manifest.json            {"format_version", "kind", "meta", "tensors": {name: {dtype, shape, file}}}
    tensors/<index>.bin      raw little-endian bytes, C order
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Mapping, Union

import numpy as np
import torch

FORMAT_VERSION = 1
# fixed member timestamps keep identical content byte-identical on disk
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "int64": (torch.int64, np.dtype("<i8")),
    "uint8": (torch.uint8, np.dtype("u1")),
}
_BY_TORCH = {v[0]: k for k, v in _DTYPES.items()}


def save_container(path: Union[str, Path], tensors: Mapping[str, torch.Tensor], *,
                   kind: str, meta: Mapping | None = None) -> None:
    """Write ``tensors`` to ``path``. Floating tensors are stored as float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, (name, t) in enumerate(tensors.items()):
            t = t.detach().cpu()
            if t.is_floating_point():
                t = t.float()
            if t.dtype not in _BY_TORCH:
                raise TypeError(f"unsupported dtype {t.dtype} for {name}")
            dtype = _BY_TORCH[t.dtype]
            arr = t.contiguous().numpy().astype(_DTYPES[dtype][1], copy=False)
            fname = f"tensors/{i:05d}.bin"
            zf.writestr(zipfile.ZipInfo(fname, _ZIP_EPOCH), arr.tobytes(order="C"))
            index[name] = {"dtype": dtype, "shape": list(t.shape), "file": fname}
        manifest = {"format_version": FORMAT_VERSION, "kind": kind,
                    "meta": dict(meta or {}), "tensors": index}
        zf.writestr(zipfile.ZipInfo("manifest.json", _ZIP_EPOCH), json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(path)


def read_manifest(path: Union[str, Path]) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load_container(path: Union[str, Path]):
    """Return ``(tensors, manifest)``."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported container version {manifest.get('format_version')}")
        tensors = {}
        for name, entry in manifest["tensors"].items():
            tdtype, npdtype = _DTYPES[entry["dtype"]]
            arr = np.frombuffer(zf.read(entry["file"]), dtype=npdtype)
            arr = arr.reshape(entry["shape"]).astype(npdtype.newbyteorder("="))
            tensors[name] = torch.from_numpy(arr.copy()).to(tdtype)
    return tensors, manifest
