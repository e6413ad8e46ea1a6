"""Learnable parameters, their registry, and the on-disk snapshot format.

Snapshot layout (all text ASCII, newline-terminated)::

    NUMCORE-SNAPSHOT 1
    <count>
    <name> <d0>,<d1>,...      # one line per parameter, creation order
    END
    <raw little-endian float64 payload, parameters concatenated in order>

A scalar parameter writes an empty dimension list.
"""
from __future__ import annotations

import os
from collections import OrderedDict

import numpy as np

from ..errors import ContractError, ParseError
from .tensor import Tensor

MAGIC = b"NUMCORE-SNAPSHOT 1\n"


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParameterSet:
    """Ordered name -> :class:`Parameter` registry."""

    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def count(self) -> int:
        return sum(p.size for p in self._params.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self._params.items())

    def load_state(self, state):
        for name, arr in state.items():
            if name not in self._params:
                raise ContractError(f"unknown parameter {name!r}")
            p = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"shape mismatch for {name!r}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()
            p.zero_grad()


def write_snapshot(path, params) -> None:
    """Write a :class:`ParameterSet` (or a ``name -> array`` mapping) to ``path``."""
    items = list(params.items()) if hasattr(params, "items") else [(p.name, p.data) for p in params]
    header = [MAGIC, f"{len(items)}\n".encode()]
    for name, arr in items:
        if not name or " " in name or "\n" in name:
            raise ContractError(f"parameter name {name!r} is empty or contains whitespace")
        dims = ",".join(str(d) for d in np.shape(arr))
        header.append(f"{name} {dims}\n".encode())
    header.append(b"END\n")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in items)
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(payload)


def read_snapshot(path) -> "OrderedDict[str, np.ndarray]":
    """Parse a snapshot into an ordered ``name -> array`` mapping."""
    if not os.path.exists(path):
        raise ParseError("snapshot file not found", path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise ParseError("bad snapshot magic", path, 0)
    pos = len(MAGIC)

    def line():
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ParseError("truncated snapshot header", path, pos)
        start, pos = pos, end + 1
        return raw[start:end].decode("ascii"), start

    text, off = line()
    try:
        count = int(text)
    except ValueError:
        raise ParseError(f"bad parameter count {text!r}", path, off) from None
    manifest = []
    for _ in range(count):
        text, off = line()
        try:
            name, dims = text.split(" ")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        except ValueError:
            raise ParseError(f"bad manifest line {text!r}", path, off) from None
        manifest.append((name, shape))
    text, off = line()
    if text != "END":
        raise ParseError("missing END marker", path, off)
    out = OrderedDict()
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if pos + nbytes > len(raw):
            raise ParseError(f"payload truncated in {name!r}", path, pos)
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(raw):
        raise ParseError("trailing bytes after payload", path, pos)
    return out
