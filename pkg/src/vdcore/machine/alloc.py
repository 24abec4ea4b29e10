"""Shared-memory slot allocation over a 32-bit occupancy vector."""

from __future__ import annotations

from .. import _kernels
from ..costmodel import MAX_SLOTS


class AllocationError(RuntimeError):
    pass


def alloc_slots(mask: int, n: int, nslots: int = MAX_SLOTS) -> tuple[int, int] | None:
    """First-fit ``n`` contiguous clear bits; returns (new mask, first slot) or None."""
    start = _kernels.first_fit(mask, n, nslots)
    if start < 0:
        return None
    return mask | (((1 << n) - 1) << start), start


def free_slots(mask: int, start: int, n: int) -> int:
    bits = ((1 << n) - 1) << start
    if mask & bits != bits:
        raise AllocationError(f"double free of slots {start}..{start + n - 1}")
    return mask & ~bits


class SlotAllocator:
    """Per-VMC slot state plus the tile data each slot holds."""

    def __init__(self, nslots: int):
        if not 1 <= nslots <= MAX_SLOTS:
            raise ValueError(f"slot count must be 1..{MAX_SLOTS}")
        self.nslots = nslots
        self.mask = 0
        self.data: dict[int, object] = {}

    @property
    def used(self) -> int:
        return bin(self.mask).count("1")

    def try_alloc(self, n: int) -> int | None:
        if n > self.nslots:
            raise AllocationError(f"request for {n} slots exceeds the {self.nslots}-slot budget")
        got = alloc_slots(self.mask, n, self.nslots)
        if got is None:
            return None
        self.mask, start = got
        return start

    def free(self, start: int, n: int) -> None:
        self.mask = free_slots(self.mask, start, n)
        for s in range(start, start + n):
            self.data.pop(s, None)
