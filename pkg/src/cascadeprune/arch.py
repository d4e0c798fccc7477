"""Architecture descriptions and exact cost accounting.

An architecture is a small text file, one layer per line, key=value
tokens, residual blocks as indented groups::

    input c=3 h=32 w=32
    conv k=3 in=3 out=64            # stride=1 pad=same maskable=true
    bn
    relu
    pool kind=max k=2 stride=2
    block proj=true
      conv k=1 in=64 out=64
      bn
      relu
      ...
    pool kind=gap
    classifier in=512 out=10

Residual blocks add their input to the body output and apply relu; a
projection shortcut (1x1 conv at the block's overall stride, followed
by bn) is implied when proj=true. Maskable convs are numbered in
document order, body convs before a block's projection.

Cost accounting is pure integer arithmetic. One multiply-accumulate
counts as one FLOP; only conv and dense layers carry cost, batch norm
and pooling and residual additions are free, and nothing has a bias.
With a mask, channel counts shrink to the kept filters, chained so a
layer's input width is the previous maskable layer's kept width. At a
residual join the surviving width is the larger of the two branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .masking import FilterMask


class ArchError(ValueError):
    """Malformed or inconsistent architecture description."""


@dataclass
class ConvL:
    k: int
    cin: int
    cout: int
    stride: int = 1
    padding: str = "same"
    maskable: bool = True
    layer_id: Optional[int] = None
    label: str = ""


@dataclass
class DWConvL:
    k: int
    c: int
    stride: int = 1
    label: str = ""


@dataclass
class BNL:
    c: int


@dataclass
class ReLUL:
    pass


@dataclass
class PoolL:
    kind: str  # "max" or "gap"
    k: int = 0
    stride: int = 0
    padding: str = "valid"


@dataclass
class DenseL:
    din: int
    dout: int
    label: str = ""


@dataclass
class ClassifierL:
    din: int
    dout: int
    label: str = "classifier"


@dataclass
class BlockL:
    body: list
    proj: Optional[ConvL]
    label: str = ""


@dataclass
class ArchSpec:
    name: str
    in_c: int
    in_h: int
    in_w: int
    items: list
    classes: int
    maskable_sizes: dict[int, int] = field(default_factory=dict)

    def full_mask(self) -> FilterMask:
        import numpy as np
        return FilterMask({lid: np.ones(sz, dtype=bool)
                           for lid, sz in self.maskable_sizes.items()})


@dataclass
class LayerStats:
    label: str
    group: str
    layer_id: Optional[int]
    params: int
    flops: int
    out_shape: tuple


@dataclass
class StatsReport:
    layers: list[LayerStats]
    total_flops: int
    total_params: int

    def by_group(self) -> list[tuple[str, int, int]]:
        """(group, flops, params) subtotals in first-appearance order."""
        order, sums = [], {}
        for row in self.layers:
            if row.group not in sums:
                order.append(row.group)
                sums[row.group] = [0, 0]
            sums[row.group][0] += row.flops
            sums[row.group][1] += row.params
        return [(g, sums[g][0], sums[g][1]) for g in order]


@dataclass
class CompressionReport:
    flops_ratio: float
    param_ratio: float
    flops_reduction_pct: float
    param_reduction_pct: float

    def __str__(self) -> str:
        return (f"{self.param_ratio:.1f}x fewer parameters "
                f"({self.param_reduction_pct:.1f}% removed), "
                f"{self.flops_ratio:.1f}x fewer FLOPs "
                f"({self.flops_reduction_pct:.1f}% removed)")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _out_hw(h: int, w: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return -(-h // stride), -(-w // stride)
    return (h - k) // stride + 1, (w - k) // stride + 1


def _kv(tokens: list[str], where: str) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ArchError(f"{where}: expected key=value, got {tok!r}")
        key, val = tok.split("=", 1)
        if key in out:
            raise ArchError(f"{where}: duplicate key {key!r}")
        out[key] = val
    return out


def _take_int(kv: dict, key: str, where: str, default=None, minimum=1) -> int:
    if key not in kv:
        if default is not None:
            return default
        raise ArchError(f"{where}: missing required key {key!r}")
    try:
        v = int(kv.pop(key))
    except ValueError:
        raise ArchError(f"{where}: {key} must be an integer") from None
    if v < minimum:
        raise ArchError(f"{where}: {key} must be >= {minimum}, got {v}")
    return v


def _take_bool(kv: dict, key: str, where: str, default: bool) -> bool:
    if key not in kv:
        return default
    v = kv.pop(key)
    if v not in ("true", "false"):
        raise ArchError(f"{where}: {key} must be true or false, got {v!r}")
    return v == "true"


def _take_pad(kv: dict, where: str) -> str:
    v = kv.pop("pad", "same")
    if v not in ("same", "valid"):
        raise ArchError(f"{where}: pad must be same or valid, got {v!r}")
    return v


def _no_extras(kv: dict, where: str) -> None:
    if kv:
        raise ArchError(f"{where}: unknown key {sorted(kv)[0]!r}")


def parse_arch(text: str, name: str = "<arch>") -> ArchSpec:
    """Parse an architecture description, validating shape chaining.

    Errors carry the source name and 1-based line number.
    """
    lines = text.splitlines()
    entries = []  # (lineno, indented, kind, kv-tokens)
    for i, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        indented = line[0] in (" ", "\t")
        tokens = line.split()
        entries.append((i, indented, tokens[0], tokens[1:]))

    if not entries:
        raise ArchError(f"{name}: empty architecture")

    lineno, indented, kind, toks = entries[0]
    if indented or kind != "input":
        raise ArchError(f"{name}:{lineno}: first line must be 'input c=.. h=.. w=..'")
    kv = _kv(toks, f"{name}:{lineno}")
    c = _take_int(kv, "c", f"{name}:{lineno}")
    h = _take_int(kv, "h", f"{name}:{lineno}")
    w = _take_int(kv, "w", f"{name}:{lineno}")
    _no_extras(kv, f"{name}:{lineno}")
    in_c, in_h, in_w = c, h, w

    items: list = []
    next_layer_id = 0
    conv_count = 0
    dw_count = 0
    block_count = 0
    dense_count = 0
    flat: Optional[int] = None  # set once spatial structure collapses
    closed = False

    def parse_conv(kv: dict, where: str, cur_c: int) -> ConvL:
        nonlocal next_layer_id, conv_count
        k = _take_int(kv, "k", where)
        cin = _take_int(kv, "in", where)
        cout = _take_int(kv, "out", where)
        stride = _take_int(kv, "stride", where, default=1)
        pad = _take_pad(kv, where)
        maskable = _take_bool(kv, "maskable", where, True)
        _no_extras(kv, where)
        if cin != cur_c:
            raise ArchError(f"{where}: conv expects in={cur_c} "
                            f"(previous layer width), got in={cin}")
        layer = ConvL(k, cin, cout, stride, pad, maskable,
                      layer_id=None, label=f"conv{conv_count}")
        conv_count += 1
        if maskable:
            layer.layer_id = next_layer_id
            next_layer_id += 1
        return layer

    idx = 1
    while idx < len(entries):
        lineno, indented, kind, toks = entries[idx]
        where = f"{name}:{lineno}"
        if closed:
            raise ArchError(f"{where}: nothing may follow the classifier")
        if indented:
            raise ArchError(f"{where}: indented line outside a block")
        kv = _kv(toks, where) if kind != "relu" else {}

        if kind == "conv":
            if flat is not None:
                raise ArchError(f"{where}: conv after the features were flattened")
            layer = parse_conv(kv, where, c)
            ho, wo = _out_hw(h, w, layer.k, layer.stride, layer.padding)
            if layer.padding == "valid" and (layer.k > h or layer.k > w):
                raise ArchError(f"{where}: {layer.k}x{layer.k} window does not "
                                f"fit {h}x{w} input")
            c, h, w = layer.cout, ho, wo
            items.append(layer)

        elif kind == "dwconv":
            if flat is not None:
                raise ArchError(f"{where}: dwconv after the features were flattened")
            k = _take_int(kv, "k", where)
            cc = _take_int(kv, "c", where, default=c)
            stride = _take_int(kv, "stride", where, default=1)
            pad = _take_pad(kv, where)
            _no_extras(kv, where)
            if cc != c:
                raise ArchError(f"{where}: dwconv expects c={c}, got c={cc}")
            h, w = _out_hw(h, w, k, stride, pad)
            items.append(DWConvL(k, c, stride, label=f"dwconv{dw_count}"))
            dw_count += 1

        elif kind == "bn":
            if flat is not None:
                raise ArchError(f"{where}: bn requires spatial features")
            cc = _take_int(kv, "c", where, default=c)
            _no_extras(kv, where)
            if cc != c:
                raise ArchError(f"{where}: bn expects c={c}, got c={cc}")
            items.append(BNL(c))

        elif kind == "relu":
            if toks:
                raise ArchError(f"{where}: relu takes no arguments")
            items.append(ReLUL())

        elif kind == "pool":
            if flat is not None:
                raise ArchError(f"{where}: pool after the features were flattened")
            pk = kv.pop("kind", None)
            if pk == "max":
                k = _take_int(kv, "k", where)
                stride = _take_int(kv, "stride", where)
                pad = _take_pad(kv, where) if "pad" in kv else "valid"
                _no_extras(kv, where)
                if pad == "valid" and (k > h or k > w):
                    raise ArchError(f"{where}: {k}x{k} window does not fit "
                                    f"{h}x{w} input")
                h, w = _out_hw(h, w, k, stride, pad)
                items.append(PoolL("max", k, stride, pad))
            elif pk == "gap":
                _no_extras(kv, where)
                items.append(PoolL("gap"))
                flat = c
            else:
                raise ArchError(f"{where}: pool kind must be max or gap")

        elif kind in ("dense", "classifier"):
            din = _take_int(kv, "in", where)
            dout = _take_int(kv, "out", where)
            _no_extras(kv, where)
            want = flat if flat is not None else c * h * w
            if din != want:
                raise ArchError(f"{where}: {kind} expects in={want}, got in={din}")
            if kind == "dense":
                items.append(DenseL(want, dout, label=f"dense{dense_count}"))
                dense_count += 1
            else:
                items.append(ClassifierL(want, dout))
                closed = True
            flat = dout

        elif kind == "block":
            if flat is not None:
                raise ArchError(f"{where}: block after the features were flattened")
            has_proj = _take_bool(kv, "proj", where, False)
            _no_extras(kv, where)
            body: list = []
            entry_c, entry_h, entry_w = c, h, w
            overall_stride = 1
            idx += 1
            while idx < len(entries) and entries[idx][1]:
                blineno, _, bkind, btoks = entries[idx]
                bwhere = f"{name}:{blineno}"
                bkv = _kv(btoks, bwhere) if bkind != "relu" else {}
                if bkind == "conv":
                    layer = parse_conv(bkv, bwhere, c)
                    ho, wo = _out_hw(h, w, layer.k, layer.stride, layer.padding)
                    c, h, w = layer.cout, ho, wo
                    overall_stride *= layer.stride
                    body.append(layer)
                elif bkind == "bn":
                    cc = _take_int(bkv, "c", bwhere, default=c)
                    _no_extras(bkv, bwhere)
                    if cc != c:
                        raise ArchError(f"{bwhere}: bn expects c={c}, got c={cc}")
                    body.append(BNL(c))
                elif bkind == "relu":
                    if btoks:
                        raise ArchError(f"{bwhere}: relu takes no arguments")
                    body.append(ReLUL())
                else:
                    raise ArchError(f"{bwhere}: {bkind!r} not allowed inside a block")
                idx += 1
            idx -= 1  # outer loop advances once more
            if not any(isinstance(b, ConvL) for b in body):
                raise ArchError(f"{where}: block body needs at least one conv")
            proj = None
            if has_proj:
                proj = ConvL(1, entry_c, c, overall_stride, "same", True,
                             layer_id=next_layer_id,
                             label=f"block{block_count}.proj")
                next_layer_id += 1
            elif entry_c != c or overall_stride != 1:
                raise ArchError(f"{where}: identity shortcut needs matching "
                                f"width and stride 1 (in={entry_c} out={c} "
                                f"stride={overall_stride}); set proj=true")
            if (h, w) != _out_hw(entry_h, entry_w, 1, overall_stride, "same"):
                raise ArchError(f"{where}: body spatial reduction is not a "
                                f"clean stride; shortcut cannot align")
            for j, b in enumerate(x for x in body if isinstance(x, ConvL)):
                b.label = f"block{block_count}.conv{j}"
            items.append(BlockL(body, proj, label=f"block{block_count}"))
            block_count += 1

        else:
            raise ArchError(f"{where}: unknown layer kind {kind!r}")
        idx += 1

    if not closed:
        raise ArchError(f"{name}: architecture must end with a classifier line")

    spec = ArchSpec(name=name, in_c=in_c, in_h=in_h, in_w=in_w,
                    items=items, classes=flat)
    spec.maskable_sizes = _collect_maskable(items)
    return spec


def _collect_maskable(items) -> dict[int, int]:
    sizes: dict[int, int] = {}

    def visit(seq):
        for it in seq:
            if isinstance(it, ConvL) and it.maskable:
                sizes[it.layer_id] = it.cout
            elif isinstance(it, BlockL):
                visit(it.body)
                if it.proj is not None:
                    sizes[it.proj.layer_id] = it.proj.cout
    visit(items)
    return sizes


def load_arch(path) -> ArchSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_arch(fh.read(), name=str(path))


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------

def count_stats(arch: ArchSpec, mask: Optional[FilterMask] = None) -> StatsReport:
    """Per-layer FLOPs and parameter counts, full-width or masked.

    Only cost-bearing layers (convs, depthwise convs, dense, classifier)
    appear in the row list. All arithmetic is on Python ints.
    """
    if mask is not None:
        for lid, sz in arch.maskable_sizes.items():
            if lid not in mask.layers:
                raise ArchError(f"mask is missing layer {lid}")
            if mask.layers[lid].size != sz:
                raise ArchError(f"mask for layer {lid} has "
                                f"{mask.layers[lid].size} entries, expected {sz}")

    def kept(layer: ConvL) -> int:
        if layer.maskable and mask is not None:
            return int(mask.layers[layer.layer_id].sum())
        return layer.cout

    rows: list[LayerStats] = []

    def conv_row(layer: ConvL, cin_eff: int, h: int, w: int, group: str):
        ho, wo = _out_hw(h, w, layer.k, layer.stride, layer.padding)
        cout_eff = kept(layer)
        p = layer.k * layer.k * cin_eff * cout_eff
        f = p * ho * wo
        rows.append(LayerStats(layer.label, group, layer.layer_id,
                               p, f, (cout_eff, ho, wo)))
        return cout_eff, ho, wo

    c, h, w = arch.in_c, arch.in_h, arch.in_w
    flat = None
    for it in arch.items:
        if isinstance(it, ConvL):
            c, h, w = conv_row(it, c, h, w, it.label)
        elif isinstance(it, DWConvL):
            ho, wo = _out_hw(h, w, it.k, it.stride, "same")
            p = it.k * it.k * c
            rows.append(LayerStats(it.label, it.label, None, p, p * ho * wo,
                                   (c, ho, wo)))
            h, w = ho, wo
        elif isinstance(it, PoolL):
            if it.kind == "max":
                h, w = _out_hw(h, w, it.k, it.stride, it.padding)
            else:
                flat = c
        elif isinstance(it, (DenseL, ClassifierL)):
            din_eff = flat if flat is not None else c * h * w
            p = din_eff * it.dout
            rows.append(LayerStats(it.label, it.label, None, p, p,
                                   (it.dout,)))
            flat = it.dout
        elif isinstance(it, BlockL):
            entry_c, entry_h, entry_w = c, h, w
            for b in it.body:
                if isinstance(b, ConvL):
                    c, h, w = conv_row(b, c, h, w, it.label)
            branch_c = c
            short_c = entry_c
            if it.proj is not None:
                short_c, _, _ = conv_row(it.proj, entry_c, entry_h, entry_w,
                                         it.label)
            c = max(branch_c, short_c)
        # bn / relu carry no cost and no shape change

    total_f = sum(r.flops for r in rows)
    total_p = sum(r.params for r in rows)
    return StatsReport(rows, total_f, total_p)


def compression_report(baseline, pruned) -> CompressionReport:
    """Reduction ratios between two (flops, params) totals.

    Accepts StatsReport objects or plain (flops, params) pairs, so paper
    tables can be compared against computed counts directly.
    """
    bf, bp = _totals(baseline)
    pf, pp = _totals(pruned)
    if pf <= 0 or pp <= 0:
        raise ValueError("pruned totals must be positive")
    return CompressionReport(
        flops_ratio=bf / pf,
        param_ratio=bp / pp,
        flops_reduction_pct=100.0 * (1.0 - pf / bf),
        param_reduction_pct=100.0 * (1.0 - pp / bp),
    )


def _totals(x) -> tuple[int, int]:
    if isinstance(x, StatsReport):
        return x.total_flops, x.total_params
    f, p = x
    return int(f), int(p)
