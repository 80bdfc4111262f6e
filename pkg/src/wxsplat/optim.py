"""Adam over named parameter arrays, with moment-array surgery so state
stays consistent through densification and pruning."""

from __future__ import annotations

import struct

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


class Adam:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lrs: dict[str, float],
    ) -> None:
        """One update per named parameter present in ``grads``, in place."""
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * (g * g)
            m_hat = m / (1.0 - BETA1**t)
            v_hat = v / (1.0 - BETA2**t)
            p -= lrs[name] * m_hat / (np.sqrt(v_hat) + EPS)

    def resize(self, names, src_index: np.ndarray, fresh_mask: np.ndarray) -> None:
        """Remap moment rows after a densify/prune event.

        Row i of the new arrays copies the parent row ``src_index[i]``;
        rows flagged fresh restart from zero moments.
        """
        for name in names:
            if name not in self.m:
                continue
            m = self.m[name][src_index]
            v = self.v[name][src_index]
            m[fresh_mask] = 0.0
            v[fresh_mask] = 0.0
            self.m[name] = m
            self.v[name] = v

    # -- checkpoint block ------------------------------------------------------

    def to_bytes(self) -> bytes:
        names = sorted(self.m.keys())
        out = struct.pack("<I", len(names))
        for name in names:
            nb = name.encode()
            arr = self.m[name]
            out += struct.pack("<H", len(nb)) + nb
            out += struct.pack("<BQ", arr.ndim, self.t[name])
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
            out += np.ascontiguousarray(self.v[name], dtype="<f8").tobytes()
        return out

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Adam":
        opt = cls()
        (count,) = struct.unpack("<I", raw[:4])
        off = 4
        for _ in range(count):
            (nlen,) = struct.unpack("<H", raw[off : off + 2])
            off += 2
            name = raw[off : off + nlen].decode()
            off += nlen
            ndim, t = struct.unpack("<BQ", raw[off : off + 9])
            off += 9
            shape = struct.unpack(f"<{ndim}I", raw[off : off + 4 * ndim])
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            m = np.frombuffer(raw[off : off + size * 8], dtype="<f8").reshape(shape).copy()
            off += size * 8
            v = np.frombuffer(raw[off : off + size * 8], dtype="<f8").reshape(shape).copy()
            off += size * 8
            opt.m[name] = m
            opt.v[name] = v
            opt.t[name] = t
        return opt
