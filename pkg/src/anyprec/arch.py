"""Deployment footprint accounting for sets of bit-widths.

One overlaid parent model stores every weight once at the largest bit-width
plus a centroid table per deployed bit-width; deploying each bit-width as its
own model pays k bits per weight per model. Non-quantized tensors (embeddings,
output head) stay in half precision and are counted once per deployment by
default; a flag charges them once per model in the separate scenario instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ParameterError, ShapeError
from .quantizer import MAX_BITS, MIN_BITS

FP16_BYTES = 2


@dataclass(frozen=True)
class LayerShape:
    name: str
    out_channels: int
    in_features: int
    repeat: int = 1

    def __post_init__(self):
        if self.out_channels <= 0 or self.in_features <= 0:
            raise ShapeError(f"layer {self.name}: dimensions must be positive")
        if self.repeat < 1:
            raise ParameterError(f"layer {self.name}: repeat must be >= 1")

    @property
    def params(self) -> int:
        return self.out_channels * self.in_features * self.repeat


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[LayerShape, ...]
    fp16_passthrough_params: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ParameterError("architecture needs at least one layer")
        if self.fp16_passthrough_params < 0:
            raise ParameterError("passthrough parameter count must be >= 0")

    @property
    def quantized_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        layers = tuple(
            LayerShape(
                name=entry.get("name", f"layer{i}"),
                out_channels=int(entry["out"]),
                in_features=int(entry["in"]),
                repeat=int(entry.get("repeat", 1)),
            )
            for i, entry in enumerate(d.get("layers", []))
        )
        return cls(layers, int(d.get("fp16_passthrough_params", 0)))

    @classmethod
    def from_json(cls, path) -> "ArchSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))


# One decoder block of Llama-2-7B: q/k/v/o projections, gate/up, down.
LLAMA2_7B = ArchSpec(
    layers=(
        LayerShape("attn_qkvo", 4096, 4096, repeat=32 * 4),
        LayerShape("mlp_gate_up", 11008, 4096, repeat=32 * 2),
        LayerShape("mlp_down", 4096, 11008, repeat=32),
    ),
    fp16_passthrough_params=2 * 32000 * 4096,  # embeddings + lm head
)


def _check_bits(bits) -> list[int]:
    bits = sorted(set(int(b) for b in bits))
    if not bits:
        raise ParameterError("bit-width set must be non-empty")
    for b in bits:
        if not MIN_BITS <= b <= MAX_BITS:
            raise ParameterError(f"bit width {b} outside [{MIN_BITS}, {MAX_BITS}]")
    return bits


def table_bytes(arch: ArchSpec, k: int) -> int:
    return sum(l.out_channels * (1 << k) * FP16_BYTES * l.repeat for l in arch.layers)


def any_precision_bytes(arch: ArchSpec, bits) -> int:
    """One parent model at max(bits) plus a table per deployed bit-width."""
    bits = _check_bits(bits)
    n_max = bits[-1]
    weights = sum(-(-l.params * n_max // 8) for l in arch.layers)
    tables = sum(table_bytes(arch, k) for k in bits)
    return weights + tables + arch.fp16_passthrough_params * FP16_BYTES


def separate_bytes(arch: ArchSpec, bits, passthrough_per_model: bool = False) -> int:
    """Independent models, one per bit-width."""
    bits = _check_bits(bits)
    total = 0
    for k in bits:
        total += sum(-(-l.params * k // 8) for l in arch.layers)
        total += table_bytes(arch, k)
    copies = len(bits) if passthrough_per_model else 1
    return total + arch.fp16_passthrough_params * FP16_BYTES * copies


@dataclass(frozen=True)
class FootprintReport:
    bits: tuple[int, ...]
    any_precision: int
    separate: int

    @property
    def ratio(self) -> float:
        return self.separate / self.any_precision

    def format(self) -> str:
        gb = 1e9
        return (
            f"bits {{{','.join(map(str, self.bits))}}}: "
            f"any-precision {self.any_precision / gb:.2f} GB, "
            f"separate {self.separate / gb:.2f} GB, "
            f"savings {self.ratio:.2f}x"
        )


def footprint(arch: ArchSpec, bits, passthrough_per_model: bool = False) -> FootprintReport:
    bits = _check_bits(bits)
    return FootprintReport(
        bits=tuple(bits),
        any_precision=any_precision_bytes(arch, bits),
        separate=separate_bytes(arch, bits, passthrough_per_model),
    )
