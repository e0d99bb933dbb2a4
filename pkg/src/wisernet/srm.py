"""The 30-filter SRM high-pass bank used to seed the bottom layer.

Kernels are read from a line-oriented text file::

    name; native_rows native_cols; divisor; c00 c01 ... (row-major integers)

Blank lines and ``#`` comments are ignored.  Each stencil is divided by its
divisor and zero-embedded at the center of a 5x5 window.  The bundled file
ships with the package; :func:`load_bank` accepts another path.

Indexing is 1-based to match the usual K1..K30 naming.  Index 5 is the
5x5 SQUARE stencil (divisor 12), the kernel referred to as K5 throughout the
toolkit.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import IndexOutOfRange, NonZeroSum, ParseError, WrongKernelCount

BANK_SIZE = 30
WINDOW = 5
K5_INDEX = 5


@dataclass(frozen=True, eq=False)
class KernelBank:
    names: tuple[str, ...]
    native_shapes: tuple[tuple[int, int], ...]
    divisors: tuple[int, ...]
    raw: tuple[np.ndarray, ...]
    kernels: np.ndarray  # (30, 5, 5) float64, read-only

    def __len__(self) -> int:
        return self.kernels.shape[0]

    def kernel(self, index: int) -> np.ndarray:
        return kernel(self, index)

    def index_of(self, name: str) -> int:
        return self.names.index(name) + 1


def _embed(stencil: np.ndarray) -> np.ndarray:
    r, c = stencil.shape
    if r > WINDOW or c > WINDOW or r % 2 == 0 or c % 2 == 0:
        raise ParseError(f"native extent {r}x{c} cannot be centered in a {WINDOW}x{WINDOW} window")
    out = np.zeros((WINDOW, WINDOW))
    top, left = (WINDOW - r) // 2, (WINDOW - c) // 2
    out[top:top + r, left:left + c] = stencil
    return out


def parse_bank(text: str) -> KernelBank:
    names, shapes, divisors, raws, kernels = [], [], [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(";")]
        if len(fields) != 4:
            raise ParseError(f"line {lineno}: expected 4 ';'-separated fields, got {len(fields)}")
        name, extent, divisor, coeffs = fields
        try:
            rows, cols = (int(v) for v in extent.split())
            div = int(divisor)
            values = [int(v) for v in coeffs.split()]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if div <= 0:
            raise ParseError(f"line {lineno}: divisor must be positive")
        if len(values) != rows * cols:
            raise ParseError(f"line {lineno}: {len(values)} coefficients for a {rows}x{cols} stencil")
        stencil = np.array(values, dtype=np.int64).reshape(rows, cols)
        if not stencil.any():
            raise ParseError(f"line {lineno}: all-zero stencil {name!r}")
        if stencil.sum() != 0:
            raise NonZeroSum(f"kernel {name!r} sums to {stencil.sum()}/{div}")
        names.append(name)
        shapes.append((rows, cols))
        divisors.append(div)
        raw = stencil.copy()
        raw.setflags(write=False)
        raws.append(raw)
        kernels.append(_embed(stencil / div))
    if len(kernels) != BANK_SIZE:
        raise WrongKernelCount(f"expected {BANK_SIZE} kernels, found {len(kernels)}")
    bank = np.stack(kernels)
    bank.setflags(write=False)
    return KernelBank(tuple(names), tuple(shapes), tuple(divisors), tuple(raws), bank)


def default_bank_text() -> str:
    return resources.files("wisernet").joinpath("data/srm30.txt").read_text(encoding="utf-8")


def load_bank(path=None) -> KernelBank:
    """Load the bank from ``path``, or the bundled definition when omitted."""
    text = default_bank_text() if path is None else Path(path).read_text(encoding="utf-8")
    return parse_bank(text)


def kernel(bank: KernelBank, index: int) -> np.ndarray:
    """Return a writable copy of the 1-based ``index``-th normalized kernel."""
    if not 1 <= index <= len(bank):
        raise IndexOutOfRange(f"kernel index {index} outside 1..{len(bank)}")
    return bank.kernels[index - 1].copy()
