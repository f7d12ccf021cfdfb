"""Cycle model of the PE array, on-chip buffers and DMA.

The array has Np groups of Ng PEs, each PE an Nm-wide dot product. PEs in a
group share weights (different output pixels); groups share activations
(different output channels). One cycle retires one Nm-wide pass per PE.

A layer is cut into tiles, output-channel block first, then output-pixel
band, then input-channel chunk. Block sizes are multiples of Np, Ng and Nm
so per-tile compute sums exactly to the whole-layer count. Each buffer is
ping-ponged, so a tile whose loads fit half of each buffer overlaps its DMA
with compute; a tile that does not fit serializes them and the excess is
counted as stall.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

from .graph import CONV, FC, INPUT, NetworkGraph

log = logging.getLogger(__name__)

KB = 1024


@dataclass(frozen=True)
class PerfConfig:
    Nm: int = 32
    Ng: int = 4
    Np: int = 16
    ifmb_bytes: int = 64 * KB
    ofmb_bytes: int = 64 * KB
    wb_bytes: int = 32 * KB
    dma_bandwidth: float = 64.0  # bytes per cycle
    clock_hz: float = 1e9
    act_bytes: int = 1
    weight_bytes: int = 1
    psum_bytes: int = 2  # OFMB holds 16-bit partial sums

    def __post_init__(self) -> None:
        for name in ("Nm", "Ng", "Np", "ifmb_bytes", "ofmb_bytes", "wb_bytes", "dma_bandwidth", "clock_hz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def multipliers(self) -> int:
        return self.Nm * self.Ng * self.Np

    # buffer port widths in bits
    @property
    def ifmb_width_bits(self) -> int:
        return self.Ng * self.Nm * 8

    @property
    def wb_width_bits(self) -> int:
        return self.Np * self.Nm * 8

    @property
    def ofmb_width_bits(self) -> int:
        return self.Np * self.Ng * 16


PRESETS = {
    "default": PerfConfig(),
    # iso-area comparison point: 768 multipliers, 51.5KB weight buffer
    "eyeriss-iso": PerfConfig(Np=6, wb_bytes=int(51.5 * KB)),
}


def preset(name: str) -> PerfConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def peak_throughput(cfg: PerfConfig) -> float:
    """MAC/s with every multiplier busy."""
    return cfg.Nm * cfg.Ng * cfg.Np * cfg.clock_hz


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class LayerGeometry:
    name: str
    ic: int  # reduction channels (IC*K*K when flattened)
    oc: int
    k: int  # kernel factor in the cycle count (1 when flattened)
    stride: int
    ih: int
    iw: int
    oh: int
    ow: int
    kernel: int  # real kernel size, for input-row footprint
    flattened: bool

    @property
    def pixels(self) -> int:
        return self.oh * self.ow

    @property
    def macs(self) -> int:
        return self.oc * self.pixels * self.ic * self.k * self.k


def layer_geometry(net: NetworkGraph, index: int, flatten_first: bool = True) -> LayerGeometry | None:
    layer = net.layers[index]
    shapes = net.shapes()
    src = layer.inputs[0]
    c, h, w = net.input_shape if src == INPUT else shapes[src]
    oc, oh, ow = shapes[index]
    if layer.kind == FC:
        return LayerGeometry(layer.name, c * h * w, oc, 1, 1, 1, 1, 1, 1, 1, False)
    if layer.kind != CONV:
        return None
    k = layer.kernel
    if flatten_first and src == INPUT:
        return LayerGeometry(layer.name, c * k * k, oc, 1, layer.stride, h, w, oh, ow, k, True)
    return LayerGeometry(layer.name, c, oc, k, layer.stride, h + 2 * layer.pad, w + 2 * layer.pad, oh, ow, k, False)


def compute_cycles_formula(g: LayerGeometry, cfg: PerfConfig) -> int:
    return math.ceil(g.oc / cfg.Np) * math.ceil(g.pixels / cfg.Ng) * math.ceil(g.ic / cfg.Nm) * g.k * g.k


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Instr:
    op: str  # load_ifm | load_w | compute_tile | store_ofm
    layer: str
    oc: tuple[int, int]
    px: tuple[int, int]
    ic: tuple[int, int]
    bytes: int = 0
    cycles: int = 0
    fits: bool = True

    def dump(self) -> str:
        return (
            f"{self.op} layer={self.layer} oc={self.oc[0]}:{self.oc[1]} px={self.px[0]}:{self.px[1]} "
            f"ic={self.ic[0]}:{self.ic[1]} bytes={self.bytes} cycles={self.cycles} fits={int(self.fits)}"
        )


def _round_down(x: int, m: int) -> int:
    return (x // m) * m


def _round_up(x: int, m: int) -> int:
    return -(-x // m) * m


def _ifm_bytes(g: LayerGeometry, p0: int, p1: int, ic: int, cfg: PerfConfig) -> int:
    """Input bytes needed for output pixels [p0, p1) over ``ic`` channels."""
    if g.flattened or g.ih == 1:
        # flattened rows are stored im2col-style: one ic-vector per output pixel
        return (p1 - p0) * ic * cfg.act_bytes
    r0, r1 = p0 // g.ow, (p1 - 1) // g.ow
    rows = min((r1 - r0) * g.stride + g.kernel, g.ih)
    return rows * g.iw * ic * cfg.act_bytes


def _band_ifm_bytes(g: LayerGeometry, band: int, ic: int, cfg: PerfConfig) -> int:
    """Worst-case input bytes of a ``band``-pixel tile over all start offsets."""
    if g.flattened or g.ih == 1:
        return min(band, g.pixels) * ic * cfg.act_bytes
    start = g.ow - 1 if band > 1 and g.oh > 1 else 0
    return _ifm_bytes(g, start, min(start + band, g.pixels), ic, cfg)


def _tiling(g: LayerGeometry, cfg: PerfConfig) -> tuple[int, int, int]:
    """(oc_block, pixel_band, ic_chunk) sized to half of each ping-pong buffer."""
    half_w, half_i, half_o = cfg.wb_bytes // 2, cfg.ifmb_bytes // 2, cfg.ofmb_bytes // 2
    kk = g.k * g.k * cfg.weight_bytes
    # input channels: Np output channels of weights and one output row of input must fit
    ic_chunk = g.ic
    row = _round_up(min(g.ow, g.pixels), cfg.Ng)
    if cfg.Np * ic_chunk * kk > half_w or _band_ifm_bytes(g, row, ic_chunk, cfg) > half_i:
        by_w = half_w // (cfg.Np * kk)
        by_i = ic_chunk * half_i // max(1, _band_ifm_bytes(g, row, ic_chunk, cfg))
        ic_chunk = min(g.ic, max(cfg.Nm, _round_down(min(by_w, by_i), cfg.Nm)))
    oc_block = max(cfg.Np, _round_down(half_w // max(1, ic_chunk * kk), cfg.Np))
    oc_block = min(oc_block, _round_up(g.oc, cfg.Np))
    band = _round_up(g.pixels, cfg.Ng)
    while band > cfg.Ng:
        if (
            _band_ifm_bytes(g, band, ic_chunk, cfg) <= half_i
            and band * min(oc_block, g.oc) * cfg.psum_bytes <= half_o
        ):
            break
        band = max(cfg.Ng, _round_down(band // 2, cfg.Ng))
    return oc_block, band, ic_chunk


def compile_layer(g: LayerGeometry, cfg: PerfConfig) -> list[Instr]:
    oc_block, band, ic_chunk = _tiling(g, cfg)
    half_w, half_i, half_o = cfg.wb_bytes // 2, cfg.ifmb_bytes // 2, cfg.ofmb_bytes // 2
    kk = g.k * g.k
    # whole-block weights (all input chunks) stay resident across pixel bands
    w_resident = oc_block * g.ic * kk * cfg.weight_bytes <= half_w
    # whole input feature map stays resident across output-channel blocks
    i_resident = _ifm_bytes(g, 0, g.pixels, g.ic, cfg) <= half_i
    loaded_w: set = set()
    loaded_i: set = set()
    last_w = last_i = None
    out: list[Instr] = []
    for o0 in range(0, g.oc, oc_block):
        o1 = min(g.oc, o0 + oc_block)
        for p0 in range(0, g.pixels, band):
            p1 = min(g.pixels, p0 + band)
            for c0 in range(0, g.ic, ic_chunk):
                c1 = min(g.ic, c0 + ic_chunk)
                tile = dict(layer=g.name, oc=(o0, o1), px=(p0, p1), ic=(c0, c1))
                ib = _ifm_bytes(g, p0, p1, c1 - c0, cfg)
                wb = (o1 - o0) * (c1 - c0) * kk * cfg.weight_bytes
                ob = (p1 - p0) * (o1 - o0) * cfg.psum_bytes
                fits = ib <= half_i and wb <= half_w and ob <= half_o
                ikey, wkey = (p0, p1, c0, c1), (o0, o1, c0, c1)
                if ikey != last_i and not (i_resident and ikey in loaded_i):
                    out.append(Instr("load_ifm", bytes=ib, **tile))
                    loaded_i.add(ikey)
                last_i = ikey
                if wkey != last_w and not (w_resident and wkey in loaded_w):
                    out.append(Instr("load_w", bytes=wb, **tile))
                    loaded_w.add(wkey)
                last_w = wkey
                cyc = math.ceil((o1 - o0) / cfg.Np) * math.ceil((p1 - p0) / cfg.Ng) * math.ceil((c1 - c0) / cfg.Nm) * kk
                out.append(Instr("compute_tile", cycles=cyc, fits=fits, **tile))
            out.append(
                Instr("store_ofm", layer=g.name, oc=(o0, o1), px=(p0, p1), ic=(0, g.ic), bytes=(p1 - p0) * (o1 - o0) * cfg.act_bytes)
            )
    return out


def compile_schedule(net: NetworkGraph, cfg: PerfConfig, flatten_first: bool = True) -> list[Instr]:
    """Block-level instruction list for every conv/fc layer, in graph order."""
    out: list[Instr] = []
    for i, layer in enumerate(net.layers):
        g = layer_geometry(net, i, flatten_first)
        if g is None:
            continue
        out.extend(compile_layer(g, cfg))
    return out


# --------------------------------------------------------------- simulation


@dataclass
class LayerPerf:
    name: str
    kind: str
    compute_cycles: int = 0
    dma_cycles: float = 0.0
    stall_cycles: float = 0.0
    total_cycles: float = 0.0
    macs: int = 0
    utilization: float = 0.0
    bytes_in: int = 0
    bytes_w: int = 0
    bytes_out: int = 0
    min_bandwidth: float = 0.0  # bytes/cycle to stay compute-bound
    tiles: int = 0
    supported: bool = True


@dataclass
class NetworkPerf:
    config: PerfConfig
    layers: list[LayerPerf] = field(default_factory=list)

    @property
    def total_cycles(self) -> float:
        return sum(p.total_cycles for p in self.layers)

    @property
    def compute_cycles(self) -> int:
        return sum(p.compute_cycles for p in self.layers)

    @property
    def macs(self) -> int:
        return sum(p.macs for p in self.layers)

    @property
    def min_bandwidth(self) -> float:
        return max((p.min_bandwidth for p in self.layers), default=0.0)

    @property
    def utilization(self) -> float:
        t = self.total_cycles
        return 0.0 if t == 0 else 100.0 * self.macs / (t * self.config.multipliers)

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "config": asdict(cfg),
            "peak_throughput": peak_throughput(cfg),
            "total_cycles": self.total_cycles,
            "compute_cycles": self.compute_cycles,
            "latency_s": self.total_cycles / cfg.clock_hz,
            "macs": self.macs,
            "utilization": self.utilization,
            "min_bandwidth_bytes_per_cycle": self.min_bandwidth,
            "min_bandwidth_bytes_per_s": self.min_bandwidth * cfg.clock_hz,
            "layers": [asdict(p) for p in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["name", "compute_cycles", "dma_cycles", "total_cycles", "utilization", "bytes_in", "bytes_w", "bytes_out"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for p in self.layers:
            w.writerow([getattr(p, c) for c in cols])
        return buf.getvalue()


def _run_schedule(instrs: list[Instr], cfg: PerfConfig, perf: LayerPerf) -> None:
    """Fold one layer's instruction stream into ``perf``."""
    tiles: list[dict] = []
    pending = 0
    for ins in instrs:
        if ins.op == "load_ifm":
            perf.bytes_in += ins.bytes
            pending += ins.bytes
        elif ins.op == "load_w":
            perf.bytes_w += ins.bytes
            pending += ins.bytes
        elif ins.op == "compute_tile":
            tiles.append({"compute": ins.cycles, "bytes": pending, "fits": ins.fits})
            pending = 0
        elif ins.op == "store_ofm":
            perf.bytes_out += ins.bytes
            tiles[-1]["bytes"] += ins.bytes
        else:
            raise ValueError(f"unknown instruction {ins.op!r}")
    for t in tiles:
        dma = t["bytes"] / cfg.dma_bandwidth
        perf.compute_cycles += t["compute"]
        perf.dma_cycles += dma
        perf.total_cycles += max(t["compute"], dma) if t["fits"] else t["compute"] + dma
        if t["compute"]:
            perf.min_bandwidth = max(perf.min_bandwidth, t["bytes"] / t["compute"])
    perf.stall_cycles = perf.total_cycles - perf.compute_cycles
    perf.tiles = len(tiles)


def layer_cycles(net: NetworkGraph, index: int, cfg: PerfConfig, flatten_first: bool = True) -> LayerPerf:
    layer = net.layers[index]
    g = layer_geometry(net, index, flatten_first)
    if g is None:
        log.warning("%s: %s layers are not modelled; counted as zero-cost pass-through", layer.name, layer.kind)
        return LayerPerf(layer.name, layer.kind, supported=False)
    perf = LayerPerf(layer.name, layer.kind, macs=g.macs)
    _run_schedule(compile_layer(g, cfg), cfg, perf)
    if perf.total_cycles:
        perf.utilization = 100.0 * g.macs / (perf.total_cycles * cfg.multipliers)
    return perf


def simulate_network(net: NetworkGraph, cfg: PerfConfig, flatten_first: bool = True) -> NetworkPerf:
    report = NetworkPerf(cfg)
    warned: set[str] = set()
    for i, layer in enumerate(net.layers):
        if layer.kind not in (CONV, FC):
            if layer.kind not in warned:
                log.warning("%s layers are not modelled; counted as zero-cost pass-through", layer.kind)
                warned.add(layer.kind)
            report.layers.append(LayerPerf(layer.name, layer.kind, supported=False))
            continue
        report.layers.append(layer_cycles(net, i, cfg, flatten_first))
    return report


def sweep(net: NetworkGraph, base: PerfConfig, param: str, values) -> list[tuple[int, NetworkPerf]]:
    return [(v, simulate_network(net, replace(base, **{param: v}))) for v in values]


def parse_sweep(spec: str) -> tuple[str, list[int]]:
    """``"Np=1..128x2"`` -> ("Np", [1, 2, 4, ..., 128]); ``"Np=1..8+1"`` steps linearly."""
    try:
        name, rng = spec.split("=", 1)
        lo_s, rest = rng.split("..", 1)
        if "x" in rest:
            hi_s, step_s = rest.split("x", 1)
            mul = True
        elif "+" in rest:
            hi_s, step_s = rest.split("+", 1)
            mul = False
        else:
            hi_s, step_s, mul = rest, "1", False
        lo, hi, step = int(lo_s), int(hi_s), int(step_s)
    except ValueError:
        raise ValueError(f"bad sweep {spec!r}; expected e.g. Np=1..128x2") from None
    name = name.strip()
    if name not in PerfConfig.__dataclass_fields__:
        raise ValueError(f"unknown sweep parameter {name!r}")
    if lo < 1 or hi < lo or (mul and step < 2) or (not mul and step < 1):
        raise ValueError(f"bad sweep range {spec!r}")
    vals, v = [], lo
    while v <= hi:
        vals.append(v)
        v = v * step if mul else v + step
    return name, vals
