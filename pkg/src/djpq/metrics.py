"""Static complexity accounting: pruning ratios, MAC and BOP counts.

Only weighted layers (conv, dense) carry cost; pooling, batch norm and
elementwise ops count zero. A layer's BOPs multiply its MACs by the weight
bit-width and the bit-width of the activations it consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError, StructuralError

KINDS = ("conv", "dense")


@dataclass(frozen=True)
class LayerSpec:
    """Shape and compression state of one weighted layer."""

    kind: str
    c_in: int
    c_out: int
    k_w: int = 1
    k_h: int = 1
    m_w: int = 1
    m_h: int = 1
    weight_bits: float = 32.0
    input_act_bits: float = 32.0
    prune_in: float = 0.0
    prune_out: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"layer kind must be one of {KINDS}, "
                                f"got {self.kind!r}")
        for name in ("c_in", "c_out", "k_w", "k_h", "m_w", "m_h"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                raise ContractError(f"{name} must be a positive integer, "
                                    f"got {v!r}")
        for name in ("weight_bits", "input_act_bits"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        for name in ("prune_in", "prune_out"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")


def layerwise_pruning_ratio(prune_in: float, prune_out: float) -> float:
    """Fraction of a layer's weights removed when prune_in of its inputs
    and prune_out of its outputs are gone."""
    for name, v in (("input ratio", prune_in), ("output ratio", prune_out)):
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"{name} must lie in [0, 1], got {v}")
    return 1.0 - (1.0 - prune_in) * (1.0 - prune_out)


def mac_count(spec: LayerSpec) -> float:
    """Multiply-accumulate count of the layer after pruning."""
    return ((1.0 - spec.prune_in) * spec.c_in *
            (1.0 - spec.prune_out) * spec.c_out *
            spec.m_w * spec.m_h * spec.k_w * spec.k_h)


def bop_count(spec: LayerSpec) -> float:
    """Bit operations: MACs scaled by weight and input-activation widths."""
    return mac_count(spec) * spec.weight_bits * spec.input_act_bits


@dataclass
class LayerReport:
    """One row of a compression report."""

    layer_id: str
    weight_bits: float
    act_bits: float
    prune_out: float
    prune_combined: float
    macs: float
    bops: float


@dataclass
class CompressionReport:
    """Per-layer compression table with totals, ratios, and accuracy."""

    rows: list = field(default_factory=list)
    total_macs: float = 0.0
    total_bops: float = 0.0
    mac_ratio: float = 1.0
    bop_ratio: float = 1.0
    accuracy: float = 0.0

    def validate(self):
        if abs(self.total_macs - sum(r.macs for r in self.rows)) > 1e-6 * max(
                1.0, self.total_macs):
            raise ContractError("report total MACs do not match row sum")
        if abs(self.total_bops - sum(r.bops for r in self.rows)) > 1e-6 * max(
                1.0, self.total_bops):
            raise ContractError("report total BOPs do not match row sum")
        if not (self.mac_ratio > 0 and self.bop_ratio > 0):
            raise ContractError("compression ratios must be positive")
        return self


def model_report(layers, baseline, accuracy: float) -> CompressionReport:
    """Build the per-layer table and compression ratios.

    layers and baseline are aligned sequences of (layer_id, LayerSpec,
    act_bits) triples, where act_bits is the bit-width of the layer's own
    output activations (what its successor consumes; purely informational
    in the row).
    """
    if len(layers) != len(baseline):
        raise StructuralError(
            f"graphs are not aligned: {len(layers)} layers vs "
            f"{len(baseline)} baseline layers")
    rows = []
    for (lid, spec, act_bits), (bid, bspec, _) in zip(layers, baseline):
        if lid != bid or spec.kind != bspec.kind:
            raise StructuralError(
                f"layer {lid!r} ({spec.kind}) does not align with baseline "
                f"layer {bid!r} ({bspec.kind})")
        rows.append(LayerReport(
            layer_id=lid,
            weight_bits=spec.weight_bits,
            act_bits=act_bits,
            prune_out=spec.prune_out,
            prune_combined=layerwise_pruning_ratio(spec.prune_in,
                                                   spec.prune_out),
            macs=mac_count(spec),
            bops=bop_count(spec)))
    total_macs = sum(r.macs for r in rows)
    total_bops = sum(r.bops for r in rows)
    base_macs = sum(mac_count(s) for _, s, _ in baseline)
    base_bops = sum(bop_count(s) for _, s, _ in baseline)
    if total_macs <= 0 or total_bops <= 0:
        raise StructuralError("compressed model has zero cost; nothing left")
    return CompressionReport(
        rows=rows,
        total_macs=total_macs,
        total_bops=total_bops,
        mac_ratio=base_macs / total_macs,
        bop_ratio=base_bops / total_bops,
        accuracy=float(accuracy)).validate()
