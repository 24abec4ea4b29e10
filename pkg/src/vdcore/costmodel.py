"""Hardware profiles and per-µop latency estimates.

The same model drives the generator's scheduling estimates and the machine's
timing. Time is measured in integer nanoseconds; every latency rounds up.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from .isa import OpClass, Opcode, UopWord

KB = 1024
MAX_SLOTS = 32


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    sm_count: int
    shmem_per_sm: int          # bytes
    dram_bw: float             # bytes / second
    vmc_per_sm: int = 1
    vcc_per_sm: int = 2
    slot_size: int = 8 * KB
    ldu_count: int = 2
    stu_count: int = 1
    eu_flops: float = 3.7e12   # FLOP/s per execution unit; a calibration knob
    issue_ns: int = 22
    queue_op_ns: int = 12

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name == "name":
                continue
            v = getattr(self, f.name)
            if not v > 0:
                raise ProfileError(f"{self.name}: {f.name} must be positive, got {v!r}")
        if self.vmc_per_sm != 1:
            raise ProfileError(f"{self.name}: only one VMC per SM is supported")
        if self.vcc_per_sm > 4:
            raise ProfileError(f"{self.name}: at most 4 VCCs per SM")
        if self.slot_size > self.shmem_per_sm:
            raise ProfileError(f"{self.name}: slot_size exceeds shared memory")

    @property
    def slot_count(self) -> int:
        """Slots per VMC: bounded by the 32-bit occupancy vector and by shared memory."""
        return min(MAX_SLOTS, self.shmem_per_sm // self.slot_size)

    @property
    def pair_count(self) -> int:
        return self.sm_count * self.vcc_per_sm

    @property
    def bytes_per_ns(self) -> float:
        return self.dram_bw / 1e9

    def pair_location(self, pair: int) -> tuple[int, int]:
        """(sm, lane) for a virtual core pair; pairs spread across SMs first."""
        return pair % self.sm_count, pair // self.sm_count

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def builtin_profiles() -> list[HardwareProfile]:
    # compute throughput per EU is nominal (dense tensor throughput / EUs),
    # never used as an acceptance target
    return [
        HardwareProfile("H100", 132, 228 * KB, 3.35e12, eu_flops=3.7e12),
        HardwareProfile("GH200", 132, 228 * KB, 4.00e12, eu_flops=3.7e12),
        HardwareProfile("RTX6000 Pro", 188, 100 * KB, 960e9, eu_flops=1.3e12),
    ]


def get_profile(name: str) -> HardwareProfile:
    for p in builtin_profiles():
        if p.name.lower().replace(" ", "") == name.lower().replace(" ", ""):
            return p
    raise ProfileError(f"unknown profile {name!r}")


def scaled(base: HardwareProfile, sm_count: int, **overrides) -> HardwareProfile:
    """A slice of ``base`` with ``sm_count`` SMs and proportionally scaled DRAM bandwidth."""
    fields = base.to_dict()
    fields["dram_bw"] = base.dram_bw * sm_count / base.sm_count
    fields["sm_count"] = sm_count
    fields["name"] = overrides.pop("name", f"{base.name}/{sm_count}")
    fields.update(overrides)
    return HardwareProfile(**fields)


def profile_from_dict(data: dict) -> HardwareProfile:
    if "base" in data:
        data = dict(data)
        base = get_profile(data.pop("base"))
        sm = data.pop("sm_count", base.sm_count)
        return scaled(base, sm, **data)
    names = {f.name for f in dataclasses.fields(HardwareProfile)}
    unknown = set(data) - names
    if unknown:
        raise ProfileError(f"unknown profile fields: {sorted(unknown)}")
    return HardwareProfile(**data)


def dump_profile(p: HardwareProfile) -> str:
    return yaml.safe_dump(p.to_dict(), sort_keys=False)


def load_profile(name_or_path: str | Path) -> HardwareProfile:
    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml") or path.exists():
        if not path.exists():
            raise ProfileError(f"profile file not found: {path}")
        return profile_from_dict(yaml.safe_load(path.read_text()))
    return get_profile(str(name_or_path))


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

def transfer_ns(nbytes: int, hw: HardwareProfile, active_vmcs: int = 1) -> int:
    if nbytes <= 0:
        return 0
    share = hw.bytes_per_ns / max(1, active_vmcs)
    return math.ceil(nbytes / share - 1e-9)


def compute_ns(flops: float, hw: HardwareProfile) -> int:
    if flops <= 0:
        return 0
    return math.ceil(flops * 1e9 / hw.eu_flops - 1e-9)


def uop_latency(u: UopWord, hw: HardwareProfile, *, nbytes: int = 0, flops: float = 0,
                active_vmcs: int = 1) -> int:
    """Estimated execution time of one µop in ns.

    Memory µops cost the issue interval plus their DRAM transfer at this
    VMC's share of bandwidth (plus one queue operation when they carry a
    dep_id); compute µops cost issue plus FLOPs over EU throughput; control
    µops cost issue only. ``nbytes``/``flops`` come from the program's tensor
    table (see ``LoweredProgram.uop_work``).
    """
    cls = Opcode(u.opcode).op_class
    if cls is OpClass.CONTROL:
        return hw.issue_ns
    if cls is OpClass.COMPUTE:
        return hw.issue_ns + compute_ns(flops, hw)
    t = hw.issue_ns + transfer_ns(nbytes, hw, active_vmcs)
    if u.dep_id:
        t += hw.queue_op_ns
    return t
