"""Learnable uniform quantizer with a nonlinear range mapping.

Each quantizer owns three learnable scalars: a step size, the upper end of
the mapped range, and a mapping exponent (fixed to 1 on unsigned/activation
grids). A small fixed dead zone around zero maps to exactly zero. Rounding
is non-differentiable, so parameter gradients use the straight-through
surrogate formulas and the reported bit-width has a smooth twin for use
inside the loss.

Parameter values live as float64 (grid-level counts up to 2^31 cannot be
reconstructed from float32), with float32 scalar Tensors alongside acting
as gradient receptacles and loss-graph inputs.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegenerateQuantizerError

log = logging.getLogger(__name__)

POW2_BITS = (2, 4, 8, 16, 32)

# floor for log arguments at branch boundaries
_LOG_FLOOR = 1e-12
# relative slack when deciding whether a level ratio is an exact integer,
# so step sizes constructed as range/k survive the float division round trip
_INT_SLACK = 1e-12
# positivity floor applied after gradient steps
_PARAM_FLOOR = 1e-6

_LN2 = math.log(2.0)


class QuantizerState:
    """Parameters of one quantizer: step size, mapped range, exponent.

    signed=True is the symmetric weight grid; signed=False is the unsigned
    grid used after ReLU, where the exponent must be exactly 1. step_size,
    max_range and exponent are plain floats; step_param, range_param and
    exp_param are their Tensor shadows for gradient flow.
    """

    __slots__ = ("step_size", "max_range", "exponent", "dead_zone", "signed",
                 "step_param", "range_param", "exp_param")

    def __init__(self, step_size, max_range, exponent=1.0, dead_zone=0.01,
                 signed=True, trainable=False):
        step_size = float(step_size)
        max_range = float(max_range)
        exponent = float(exponent)
        dead_zone = float(dead_zone)
        if not (step_size > 0 and math.isfinite(step_size)):
            raise ContractError(f"step size must be positive, got {step_size}")
        if not (exponent > 0 and math.isfinite(exponent)):
            raise ContractError(f"exponent must be positive, got {exponent}")
        if not 0 < dead_zone < max_range:
            raise ContractError(
                f"need 0 < dead zone < max range, got {dead_zone} vs {max_range}")
        if not signed and exponent != 1.0:
            raise ContractError(
                f"unsigned quantizers require exponent 1, got {exponent}")
        self.step_size = step_size
        self.max_range = max_range
        self.exponent = exponent
        self.dead_zone = dead_zone
        self.signed = bool(signed)
        self.step_param = Tensor(step_size, requires_grad=trainable)
        self.range_param = Tensor(max_range, requires_grad=trainable)
        self.exp_param = Tensor(exponent, requires_grad=trainable and signed)

    def trainable_params(self):
        return [p for p in (self.step_param, self.range_param, self.exp_param)
                if p.requires_grad]

    def scalars(self):
        """Current (step, range, exponent) as python floats."""
        return self.step_size, self.max_range, self.exponent

    def mapped_range(self) -> float:
        """(max_range - dead_zone) ** exponent, the top of the mapped scale."""
        return (self.max_range - self.dead_zone) ** self.exponent

    def apply_step(self, lr: float, lr_scale: float = 1.0):
        """Gradient-descend each parameter that accumulated a gradient, then
        project back onto the valid region (positive, range above the dead
        zone, step small enough that the grid keeps at least one bit) and
        refresh the Tensor shadows."""
        for name, mirror in (("step_size", self.step_param),
                             ("max_range", self.range_param),
                             ("exponent", self.exp_param)):
            if not mirror.requires_grad or mirror.grad is None:
                continue
            value = getattr(self, name) - lr * lr_scale * float(mirror.grad)
            mirror.grad = None
            floor = (self.dead_zone + _PARAM_FLOOR if name == "max_range"
                     else _PARAM_FLOOR)
            setattr(self, name, float(max(value, floor)))
        # the bit pressure pushes the step up (and the range down) without
        # bound; the joint projection keeps the mapped range wide enough for
        # two step floors and the step within half the mapped range, so the
        # grid always retains at least one usable bit
        span_floor = max(_PARAM_FLOOR,
                         (2.0 * _PARAM_FLOOR) ** (1.0 / self.exponent))
        if self.max_range - self.dead_zone < span_floor:
            self.max_range = self.dead_zone + span_floor
        cap = self.mapped_range() / 2.0
        if self.step_size > cap:
            self.step_size = max(cap, _PARAM_FLOOR)
        for name, mirror in (("step_size", self.step_param),
                             ("max_range", self.range_param),
                             ("exponent", self.exp_param)):
            mirror.data = np.asarray(getattr(self, name), dtype=np.float32)

    def __repr__(self):
        kind = "signed" if self.signed else "unsigned"
        return (f"QuantizerState(step={self.step_size:g}, "
                f"range={self.max_range:g}, exp={self.exponent:g}, "
                f"dead={self.dead_zone:g}, {kind})")


# ---------------------------------------------------------------------------
# elementwise kernels (float64; branch boundaries: |x| < qs dead,
# qs <= |x| <= qm in range, |x| > qm clipped)
# ---------------------------------------------------------------------------

def _round_half_away(v):
    return np.floor(v + 0.5)  # v >= 0 on every call site


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


def _scalar_like(x, out):
    if np.isscalar(x) or getattr(x, "ndim", None) == 0:
        return float(out)
    return out


def nonlinear_map(x, state: QuantizerState):
    """Dead-zone / power / clip mapping of x before uniform rounding."""
    xv = _as_f64(x)
    d, qm, t = state.scalars()
    qs = state.dead_zone
    ax = np.abs(xv)
    mag = np.clip(ax - qs, 0.0, qm - qs) ** t
    out = np.sign(xv) * np.where(ax < qs, 0.0, mag)
    return _scalar_like(x, out)


def _quantize_values(xv, d, qm, t, qs):
    ax = np.abs(xv)
    mag = np.clip(ax - qs, 0.0, qm - qs) ** t
    q = d * _round_half_away(mag / d)
    return np.sign(xv) * np.where(ax < qs, 0.0, q)


def quantize(x, state: QuantizerState, forward_state: QuantizerState = None):
    """Quantize x onto the grid; Tensor in, Tensor out (with surrogate
    gradients to the input and the quantizer parameters), ndarray in,
    ndarray out.

    forward_state, when given, supplies the grid actually evaluated (the
    bit-restricted mode snaps it to a power-of-two width per step) while
    gradients keep flowing through the continuous parameters of state.
    """
    d, qm, t = (forward_state or state).scalars()
    qs = (forward_state or state).dead_zone
    if not isinstance(x, Tensor):
        return _scalar_like(x, _quantize_values(_as_f64(x), d, qm, t, qs))

    xv = _as_f64(x.data)
    out = Tensor._wrap(_quantize_values(xv, d, qm, t, qs).astype(np.float32))
    params = (state.step_param, state.range_param, state.exp_param)

    def bwd(g):
        g64 = _as_f64(g)
        if x.requires_grad:
            ad.accumulate(x, (g64 * quantizer_input_grad(xv, state))
                          .astype(np.float32))
        grads = None
        for k, p in enumerate(params):
            if p.requires_grad:
                if grads is None:
                    grads = quantizer_param_grads(xv, state)
                ad.accumulate(p, np.asarray((g64 * grads[k]).sum(),
                                            dtype=np.float32))

    return ad.record("quantize", (x, *params), out, bwd)


def quantizer_param_grads(x, state: QuantizerState):
    """Straight-through gradients of the quantized output with respect to
    (step size, max range, exponent), branch by branch."""
    xv = _as_f64(x)
    d, qm, t = state.scalars()
    qs = state.dead_zone
    ax = np.abs(xv)
    sgn = np.sign(xv)
    dead = ax < qs
    clipped = ax > qm
    in_range = ~dead & ~clipped

    base = np.where(in_range, ax - qs, qm - qs)
    mag = base ** t
    ratio = mag / d
    g_step = np.where(dead, 0.0, sgn * (_round_half_away(ratio) - ratio))
    g_range = np.where(clipped, sgn * t * (qm - qs) ** (t - 1.0), 0.0)
    g_exp = np.where(dead, 0.0,
                     sgn * mag * np.log(np.maximum(base, _LOG_FLOOR)))
    return (_scalar_like(x, g_step), _scalar_like(x, g_range),
            _scalar_like(x, g_exp))


def quantizer_input_grad(x, state: QuantizerState):
    """Straight-through gradient with respect to the input: the mapping's
    slope in range, zero in the dead zone and past the clip."""
    xv = _as_f64(x)
    d, qm, t = state.scalars()
    qs = state.dead_zone
    ax = np.abs(xv)
    in_range = (ax >= qs) & (ax <= qm)
    base = np.where(in_range, ax - qs, 1.0)
    if t < 1.0:
        base = np.maximum(base, _LOG_FLOOR)
    out = np.where(in_range, t * base ** (t - 1.0), 0.0)
    return _scalar_like(x, out)


# ---------------------------------------------------------------------------
# bit-widths
# ---------------------------------------------------------------------------

def _ceil_with_slack(v: float) -> int:
    """math.ceil, treating values within ~1e-12 relative of an integer as
    that integer (guards range/k -> k float round trips)."""
    n = round(v)
    if abs(v - n) <= _INT_SLACK * max(1.0, abs(n)):
        return int(n)
    return math.ceil(v)


def effective_bitwidth(state: QuantizerState) -> float:
    """Exact bit count of the current grid (fractional values are legal)."""
    ratio = state.mapped_range() / state.step_size
    if state.signed:
        return math.log2(_ceil_with_slack(ratio + 1.0)) + 1.0
    if ratio < 1.0:
        raise DegenerateQuantizerError(
            f"mapped range {state.mapped_range():g} is narrower than one "
            f"step {state.step_size:g}")
    return math.log2(_ceil_with_slack(ratio))


def surrogate_bitwidth(state: QuantizerState) -> Tensor:
    """Smooth bit-width (rounding dropped) as a differentiable Tensor; this
    is what the bit-operation loss term differentiates through."""
    if state.max_range - state.dead_zone <= 0:
        raise ContractError(
            f"max range {state.max_range:g} not above dead zone")
    if not state.signed and state.mapped_range() / state.step_size < 1.0:
        raise DegenerateQuantizerError(
            f"mapped range {state.mapped_range():g} is narrower than one "
            f"step {state.step_size:g}")
    span = state.range_param - state.dead_zone
    mapped = ad.exp(state.exp_param * ad.log(span))
    ratio = mapped / state.step_param
    if state.signed:
        return ad.log(ratio + 1.0) * (1.0 / _LN2) + 1.0
    return ad.log(ratio) * (1.0 / _LN2)


def adjust_pow2(state: QuantizerState) -> QuantizerState:
    """Snap the effective bit-width to the nearest power of two (in log
    space) and recompute the step size so the grid fills the mapped range.

    Range, dead zone and exponent are untouched. Exponents are clamped to
    [1, 5] (bit-widths 2..32); hitting either end records a warning.
    """
    b = effective_bitwidth(state)
    s = math.floor(math.log2(b) + 0.5) if b > 0 else 0
    if s > 5:
        log.warning("bit-width %.3f rounds past 32, clamping to 32", b)
        s = 5
    elif s < 1:
        log.warning("bit-width %.3f rounds below 2, clamping to 2", b)
        s = 1
    bits = 2 ** s
    rng = state.mapped_range()
    step = rng / (2 ** (bits - 1) - 1) if state.signed else rng / 2 ** bits
    return QuantizerState(step, state.max_range, exponent=state.exponent,
                          dead_zone=state.dead_zone, signed=state.signed)


def calibrated_state(values, bits: int, dead_zone=0.01, exponent=1.0,
                     signed=True, trainable=True) -> QuantizerState:
    """Initialize a quantizer for a tensor: range at the largest magnitude
    observed, step sized so the grid starts at the requested bit count."""
    if not 2 <= bits <= 32:
        raise ContractError(f"initial bit-width {bits} outside [2, 32]")
    peak = float(np.max(np.abs(np.asarray(values)))) if np.size(values) else 0.0
    qm = max(peak, dead_zone * 2.0, 1e-3)
    rng = (qm - dead_zone) ** exponent
    step = rng / (2 ** (bits - 1) - 1) if signed else rng / 2 ** bits
    return QuantizerState(step, qm, exponent=exponent, dead_zone=dead_zone,
                          signed=signed, trainable=trainable)
