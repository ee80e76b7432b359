"""Target machine description: ISA tag, vector width, register budget."""

from __future__ import annotations

from dataclasses import dataclass

from .core import LayoutError, SUPPORTED_ELEM_WIDTHS

ISA_TAGS = ("x86-avx", "arm-sve", "sunway-simd", "abstract")
BIT_WIDTHS = (128, 256, 512)


@dataclass(frozen=True)
class MachineConfig:
    isa_tag: str = "abstract"
    bit_width: int = 512
    elem_width: int = 4
    num_vector_registers: int = 32

    def __post_init__(self):
        if self.isa_tag not in ISA_TAGS:
            raise LayoutError(f"unknown isa {self.isa_tag!r}, expected one of {ISA_TAGS}")
        if self.bit_width not in BIT_WIDTHS:
            raise LayoutError(f"bit width must be one of {BIT_WIDTHS}")
        if self.elem_width not in SUPPORTED_ELEM_WIDTHS:
            raise LayoutError(f"element width must be one of {SUPPORTED_ELEM_WIDTHS}")
        if self.num_vector_registers < 4:
            raise LayoutError("register budget must be at least 4")
        w = self.bit_width // (8 * self.elem_width)
        if w < 2 or w & (w - 1):
            raise LayoutError(f"lane count {w} is not a power of two >= 2")

    @property
    def lanes(self) -> int:
        """Elements per vector register."""
        return self.bit_width // (8 * self.elem_width)

    @property
    def lane_bits(self) -> int:
        return self.lanes.bit_length() - 1
