"""Self-describing binary container of named tensors.

Layout (little-endian)::

    b"SDFLOWCK" | u32 version | u32 n_entries
    per entry: u16 name_len | name (utf-8) | u8 dtype | u8 ndim | u64 * ndim shape | payload
"""
import os
import struct

import numpy as np
import torch

from .errors import CheckpointError, CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError

MAGIC = b"SDFLOWCK"
VERSION = 1

_DTYPES = {
    0: (torch.float64, "<f8"),
    1: (torch.float32, "<f4"),
    2: (torch.int64, "<i8"),
    3: (torch.int32, "<i4"),
    4: (torch.uint8, "u1"),
    5: (torch.bool, "?"),
}
_CODES = {t: c for c, (t, _) in _DTYPES.items()}


def encode(entries):
    """``{name: tensor}`` -> bytes.  Entry order is preserved."""
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, t in entries.items():
        t = torch.as_tensor(t).detach().cpu()
        if t.dtype not in _CODES:
            raise CheckpointError(f"entry {name}: unsupported dtype {t.dtype}")
        code = _CODES[t.dtype]
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, t.dim()))
        out.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        out.append(t.contiguous().numpy().astype(_DTYPES[code][1], copy=False).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"file truncated while reading {what}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf):
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, n = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    entries = {}
    for k in range(n):
        (ln,) = r.unpack("<H", f"entry {k} name length")
        name = r.take(ln, f"entry {k} name").decode("utf-8")
        code, ndim = r.unpack("<BB", f"entry {name} header")
        if code not in _DTYPES:
            raise CheckpointError(f"entry {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q", f"entry {name} shape")
        dt = np.dtype(_DTYPES[code][1])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dt.itemsize, f"entry {name} payload"), dtype=dt).reshape(shape)
        entries[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last entry")
    return entries


def write_entries(path, entries):
    """Atomic write: temp file in the same directory, then rename."""
    data = encode(entries)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_entries(path):
    with open(path, "rb") as f:
        return decode(f.read())


def text_entry(s):
    return torch.tensor(list(s.encode("utf-8")), dtype=torch.uint8)


def entry_text(t):
    return bytes(t.tolist()).decode("utf-8")


def load_into(module, entries, prefix):
    """Copy ``prefix.*`` entries into ``module``'s state, checking names and shapes."""
    state = module.state_dict()
    for key, ref in state.items():
        name = f"{prefix}.{key}"
        if name not in entries:
            raise CheckpointShapeError(f"entry {name} missing from checkpoint")
        got = entries[name]
        if tuple(got.shape) != tuple(ref.shape):
            raise CheckpointShapeError(
                f"entry {name}: checkpoint shape {tuple(got.shape)} does not match configured {tuple(ref.shape)}")
    extra = [n for n in entries if n.startswith(prefix + ".") and n[len(prefix) + 1:] not in state]
    if extra:
        raise CheckpointShapeError(f"entry {extra[0]} has no counterpart in the configured architecture")
    module.load_state_dict({k: entries[f"{prefix}.{k}"].to(v.dtype) for k, v in state.items()})


def module_entries(module, prefix):
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}
