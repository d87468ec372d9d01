"""Byte-reproducible ``.npz`` archives.

``numpy.savez`` stamps each member with the current time, so two saves of
the same arrays differ. These archives pin every timestamp and write the
members in sorted order; :func:`numpy.load` reads them unchanged.
"""
import io
import json
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)
META_MEMBER = "__meta__.json"


def _member(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_archive(path, arrays, meta=None):
    with zipfile.ZipFile(path, "w") as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_member(name + ".npy"), buf.getvalue())
        if meta is not None:
            text = json.dumps(meta, sort_keys=True, indent=1)
            zf.writestr(_member(META_MEMBER), text.encode())


def read_archive(path):
    """Return ``(arrays, meta)``."""
    arrays = {}
    meta = None
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == META_MEMBER:
                meta = json.loads(data)
            elif name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    return arrays, meta
