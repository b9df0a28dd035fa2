"""Parameters, the Adam optimizer, a minimal module base and checkpoint I/O."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

_MAGIC = b"CGCK"


class Parameter(Tensor):
    """A trainable leaf tensor that carries its own Adam moments."""

    __slots__ = ("m", "v", "steps", "frozen")

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.steps = 0
        self.frozen = False

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def adam_step(params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place, then clear the gradients."""
    for p in params:
        if p.frozen:
            p.zero_grad()
            continue
        g = p.grad
        p.steps += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.steps)
        v_hat = p.v / (1.0 - beta2 ** p.steps)
        if lr != 0.0:
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


class Module:
    """Collects :class:`Parameter` attributes (recursively) by dotted name."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``arrays`` as: magic, u64 header length, JSON header, little-endian f64 data.

    Header offsets are byte offsets into the data section.
    """
    entries, offset, chunks = [], 0, []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    base = 12 + hlen
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(entry["shape"]).astype(np.float64)
    return arrays, header.get("meta", {})
