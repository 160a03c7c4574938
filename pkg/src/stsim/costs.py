"""Cost model mapping protocol events to virtual nanoseconds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace


@dataclass(frozen=True)
class CostModel:
    # GPU side
    kernel_launch: int = 5000
    signal: int = 500
    mmio: int = 100
    intra_bw: float = 50.0  # bytes/ns
    xgmi_latency: int = 0
    # host side
    host_enqueue: int = 300
    host_sync: int = 10000
    host_poll: int = 200
    # NIC side
    nic_enqueue: int = 500
    trigger_fire: int = 200
    inter_latency: int = 2000
    inter_bw: float = 25.0  # bytes/ns

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise ValueError(f"cost {f.name} must be non-negative, got {v}")
        if self.intra_bw <= 0 or self.inter_bw <= 0:
            raise ValueError("bandwidths must be positive")

    def intra_copy_ns(self, nbytes: int) -> int:
        return self.xgmi_latency + math.ceil(nbytes / self.intra_bw)

    def inter_put_ns(self, nbytes: int) -> int:
        return self.inter_latency + math.ceil(nbytes / self.inter_bw)

    def inter_signal_ns(self) -> int:
        return self.inter_latency + self.signal

    def with_overrides(self, **overrides) -> "CostModel":
        return replace(self, **overrides)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)
