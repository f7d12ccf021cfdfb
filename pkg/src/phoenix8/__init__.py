"""8-bit minifloat quantization, bit-accurate datapath emulation and an accelerator cycle model."""

__version__ = "0.1.0"
