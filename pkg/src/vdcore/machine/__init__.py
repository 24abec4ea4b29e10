"""Discrete-event model of decoupled virtual memory and compute cores."""

from .alloc import AllocationError, SlotAllocator, alloc_slots, free_slots
from .core import BuildError, Machine, barrierize, run
from .handlers import default_handlers, input_count
from .report import ExecutionReport, Span, load_report

__all__ = [
    "AllocationError", "BuildError", "ExecutionReport", "Machine", "SlotAllocator", "Span", "alloc_slots",
    "barrierize", "default_handlers", "free_slots", "input_count", "load_report", "run",
]
