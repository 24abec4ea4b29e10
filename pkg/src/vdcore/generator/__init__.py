"""Program generator: operator graph -> per-core µop streams."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..costmodel import HardwareProfile
from ..workload import OperatorGraph
from .lower import lower
from .passes import (DeadlockError, allocation_model, apply_dynamic_fusion, assign_virtual_flows,
                     eliminate_redundant_dependencies, fix_deadlocks, fold_loops, unfold_program,
                     verify_certificate)
from .program import (LoweredProgram, LoweringError, QueueEntry, load_program, parse_core,
                      parse_queue_table, program_from_assembly, save_program, vcc_name,
                      vmc_name)
from .tiling import TilingEstimate, estimate, select_tilings


@dataclass
class GenerateOptions:
    theta: float = 1.2
    fusion: bool = True
    fold: bool = True
    flows: bool = True
    barrier: bool = False
    tilings: dict | None = None          # node id -> TilingChoice, bypasses selection
    refinements: list = field(default_factory=list)


def generate(g: OperatorGraph, hw: HardwareProfile, options: GenerateOptions | None = None) -> LoweredProgram:
    """Run the whole pipeline and return a validated program."""
    opt = options or GenerateOptions()
    tilings = opt.tilings or select_tilings(g, hw, opt.theta, trace=opt.refinements)
    p = lower(g, tilings, hw)
    if opt.fusion:
        p = apply_dynamic_fusion(p)
    if opt.fold:
        p = fold_loops(p)
    p = assign_virtual_flows(p, enabled=opt.flows)
    p = fix_deadlocks(p, refold=opt.fold)
    p = eliminate_redundant_dependencies(p)
    p.barrier = opt.barrier
    p.check()
    return p


__all__ = [
    "DeadlockError", "GenerateOptions", "LoweredProgram", "LoweringError", "QueueEntry",
    "TilingEstimate", "allocation_model", "apply_dynamic_fusion", "assign_virtual_flows",
    "eliminate_redundant_dependencies", "estimate", "fix_deadlocks", "fold_loops", "generate",
    "load_program", "lower", "parse_core", "parse_queue_table", "program_from_assembly",
    "save_program", "select_tilings", "unfold_program", "vcc_name", "vmc_name", "verify_certificate",
]
