"""Layer graph: declarative architectures bound to weights, quantizers and
pruning gates.

Architectures are plain text, one layer per line::

    input 3x32x32 bits=8
    conv name=c1 out=128 k=3 pad=1
    maxpool k=2
    flatten
    dense name=f2 out=10 act=none gate=0

Each layer reads from the previous line unless ``from=`` names explicit
inputs; ``add`` merges two branches and marks a skip connection. Weighted
layers default to batch norm (conv only), ReLU, a pruning gate and a
quantizer pair; any of these can be switched off per line.

Forward order inside a weighted layer is: quantized weights, linear op,
batch norm, activation, gate, activation quantizer. Layers feeding a
common ``add`` share one GateState so channel removal stays consistent
across the skip.
"""

from __future__ import annotations

import logging
import math
import re

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     StructuralError)
from .gates import GateState, gate_forward, hard_prune_ratio, sample_gates
from .metrics import LayerSpec
from .quantizer import (QuantizerState, adjust_pow2, calibrated_state,
                        effective_bitwidth, quantize)

log = logging.getLogger(__name__)

WEIGHTED = ("conv", "dense")

# valid keys per layer kind; the parser rejects anything else by name
_KEYS = {
    "conv": {"name", "from", "out", "k", "stride", "pad", "bn", "act",
             "gate", "quant"},
    "dense": {"name", "from", "out", "act", "gate", "quant"},
    "maxpool": {"name", "from", "k", "stride", "pad"},
    "avgpool": {"name", "from"},
    "flatten": {"name", "from"},
    "add": {"name", "from", "act"},
}
_ACTS = ("relu", "none")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class LayerNode:
    """One graph node: topology attributes plus bound parameter state."""

    def __init__(self, kind, name, preds, *, out_channels=None, kernel=None,
                 stride=1, padding=0, batch_norm=False, act="none",
                 gated=False, quantized=False):
        self.kind = kind
        self.name = name
        self.preds = list(preds)
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.batch_norm = batch_norm
        self.act = act
        # gated/quantized record the architecture's request; the actual
        # attachment is gate/weight_quant being non-None
        self.gated = gated
        self.quantized = quantized
        self.weight = None
        self.bias = None
        self.bn_gamma = None
        self.bn_beta = None
        self.bn_mean = None
        self.bn_var = None
        self.weight_quant = None
        self.act_quant = None
        self.gate = None
        self.in_shape = None
        self.out_shape = None

    def __repr__(self):
        return f"LayerNode({self.kind} {self.name!r} {self.out_shape})"


def _kvpairs(tokens, ln, allowed):
    kv = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"line {ln}: expected key=value, got {tok!r}")
        key, _, val = tok.partition("=")
        if key not in allowed:
            raise ConfigError(
                f"line {ln}: unknown key {key!r}; valid keys: "
                f"{', '.join(sorted(allowed))}")
        if key in kv:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        kv[key] = val
    return kv


def _ival(key, kv, ln, default=None, minimum=1):
    if key not in kv:
        if default is None:
            raise ConfigError(f"line {ln}: missing required key {key!r}")
        return default
    try:
        v = int(kv[key])
    except ValueError:
        raise ConfigError(
            f"line {ln}: {key} must be an integer, got {kv[key]!r}") from None
    if v < minimum:
        raise ConfigError(f"line {ln}: {key} must be >= {minimum}, got {v}")
    return v


def _bval(key, kv, ln, default):
    if key not in kv:
        return default
    if kv[key] not in ("0", "1"):
        raise ConfigError(f"line {ln}: {key} must be 0 or 1, got {kv[key]!r}")
    return kv[key] == "1"


def _aval(kv, ln, default="relu"):
    act = kv.get("act", default)
    if act not in _ACTS:
        raise ConfigError(
            f"line {ln}: act must be one of {', '.join(_ACTS)}, got {act!r}")
    return act


def parse_architecture(text):
    """Parse architecture text into (input_shape, input_bits, nodes).

    Raises ConfigError with a line number for any malformed, unknown or
    inconsistent declaration; never crashes on arbitrary text.
    """
    input_shape = None
    input_bits = 32.0
    nodes = []
    by_name = {}
    counts = {}
    prev = "input"
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        kind = toks[0]
        if input_shape is None:
            if kind != "input":
                raise ConfigError(
                    f"line {ln}: architecture must start with an input line")
            if len(toks) < 2 or "=" in toks[1]:
                raise ConfigError(f"line {ln}: input needs a CxHxW shape")
            dims = toks[1].split("x")
            try:
                c, h, w = (int(d) for d in dims)
            except ValueError:
                raise ConfigError(
                    f"line {ln}: input shape must be CxHxW integers, "
                    f"got {toks[1]!r}") from None
            if min(c, h, w) < 1:
                raise ConfigError(f"line {ln}: input dims must be positive")
            kv = _kvpairs(toks[2:], ln, {"bits"})
            if "bits" in kv:
                try:
                    input_bits = float(kv["bits"])
                except ValueError:
                    raise ConfigError(
                        f"line {ln}: bits must be a number, "
                        f"got {kv['bits']!r}") from None
                if not input_bits > 0:
                    raise ConfigError(f"line {ln}: bits must be positive")
            input_shape = (c, h, w)
            continue
        if kind == "input":
            raise ConfigError(f"line {ln}: duplicate input line")
        if kind not in _KEYS:
            raise ConfigError(
                f"line {ln}: unknown layer kind {kind!r}; valid kinds: "
                f"{', '.join(sorted(_KEYS))}")
        kv = _kvpairs(toks[1:], ln, _KEYS[kind])

        name = kv.get("name")
        if name is None:
            counts[kind] = counts.get(kind, 0) + 1
            name = f"{kind}{counts[kind]}"
        if not _NAME_RE.match(name) or name == "input":
            raise ConfigError(f"line {ln}: invalid layer name {name!r}")
        if name in by_name:
            raise ConfigError(f"line {ln}: duplicate layer name {name!r}")

        if "from" in kv:
            preds = [p.strip() for p in kv["from"].split(",") if p.strip()]
        elif kind == "add":
            raise ConfigError(
                f"line {ln}: add requires from= naming two inputs")
        else:
            preds = [prev]
        for p in preds:
            if p != "input" and p not in by_name:
                raise ConfigError(
                    f"line {ln}: from= references unknown layer {p!r}")
        want = 2 if kind == "add" else 1
        if len(preds) != want:
            raise ConfigError(
                f"line {ln}: {kind} takes exactly "
                f"{'two inputs' if want == 2 else 'one input'}, "
                f"got {len(preds)}")

        if kind == "conv":
            node = LayerNode(
                kind, name, preds,
                out_channels=_ival("out", kv, ln),
                kernel=_ival("k", kv, ln),
                stride=_ival("stride", kv, ln, default=1),
                padding=_ival("pad", kv, ln, default=0, minimum=0),
                batch_norm=_bval("bn", kv, ln, True),
                act=_aval(kv, ln),
                gated=_bval("gate", kv, ln, True),
                quantized=_bval("quant", kv, ln, True))
        elif kind == "dense":
            node = LayerNode(
                kind, name, preds,
                out_channels=_ival("out", kv, ln),
                act=_aval(kv, ln),
                gated=_bval("gate", kv, ln, True),
                quantized=_bval("quant", kv, ln, True))
        elif kind == "maxpool":
            k = _ival("k", kv, ln)
            pad = _ival("pad", kv, ln, default=0, minimum=0)
            if pad >= k:
                raise ConfigError(
                    f"line {ln}: pad must be smaller than the window, "
                    f"got pad={pad} k={k}")
            node = LayerNode(kind, name, preds, kernel=k,
                             stride=_ival("stride", kv, ln, default=k),
                             padding=pad)
        elif kind == "add":
            node = LayerNode(kind, name, preds, act=_aval(kv, ln))
        else:  # avgpool, flatten
            node = LayerNode(kind, name, preds)

        nodes.append(node)
        by_name[name] = node
        prev = name
    if input_shape is None:
        raise ConfigError("architecture file has no input line")
    if not nodes:
        raise ConfigError("architecture file declares no layers")
    return input_shape, input_bits, nodes


def _fmt_num(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def emit_architecture(graph: "NetworkGraph") -> str:
    """Canonical architecture text for a graph, reparseable by
    parse_architecture. Channel counts reflect the graph's current state,
    so the emitted text stays valid after pruning surgery."""
    c, h, w = graph.input_shape
    lines = [f"input {c}x{h}x{w} bits={_fmt_num(graph.input_bits)}"]
    prev = "input"
    for n in graph.nodes:
        parts = [n.kind, f"name={n.name}"]
        if n.kind != "add" and n.preds != [prev]:
            parts.append(f"from={n.preds[0]}")
        if n.kind == "conv":
            parts += [f"out={n.out_channels}", f"k={n.kernel}",
                      f"stride={n.stride}", f"pad={n.padding}",
                      f"bn={int(n.batch_norm)}", f"act={n.act}",
                      f"gate={int(n.gated)}", f"quant={int(n.quantized)}"]
        elif n.kind == "dense":
            parts += [f"out={n.out_channels}", f"act={n.act}",
                      f"gate={int(n.gated)}", f"quant={int(n.quantized)}"]
        elif n.kind == "maxpool":
            parts += [f"k={n.kernel}", f"stride={n.stride}",
                      f"pad={n.padding}"]
        elif n.kind == "add":
            parts += [f"from={n.preds[0]},{n.preds[1]}", f"act={n.act}"]
        lines.append(" ".join(parts))
        prev = n.name
    return "\n".join(lines) + "\n"


class NetworkGraph:
    """Ordered layers with bound parameters, quantizers and gates.

    quantized/gated master switches combine with the per-layer flags from
    the architecture text; an audit-only graph is built with both off.
    """

    def __init__(self, arch_text, rng=None, *, quantized=False, gated=False,
                 weight_bits=6, act_bits=6, act_range=6.0, alpha_th=1e-3,
                 tau=1e-2, mu_init=1.0, sigma_init=0.5, trainable=True):
        self.arch_text = arch_text
        self.input_shape, self.input_bits, self.nodes = \
            parse_architecture(arch_text)
        self._by_name = {n.name: n for n in self.nodes}
        self.is_quantized = bool(quantized)
        self.is_gated = bool(gated)
        self._infer_shapes()
        if rng is None:
            rng = np.random.default_rng(0)
        self._init_params(rng, trainable)
        if gated:
            self._attach_gates(alpha_th, tau, mu_init, sigma_init, trainable)
            self._share_skip_gates()
        if quantized:
            self._attach_quantizers(weight_bits, act_bits, act_range,
                                    trainable)

    @classmethod
    def from_file(cls, path, rng=None, **kwargs):
        with open(path, "r", encoding="utf-8") as fh:
            return cls(fh.read(), rng=rng, **kwargs)

    def __getitem__(self, name) -> LayerNode:
        if name not in self._by_name:
            raise ContractError(f"no layer named {name!r} in graph")
        return self._by_name[name]

    @property
    def output_layer(self) -> LayerNode:
        return self.nodes[-1]

    @property
    def skip_edges(self):
        return [(tuple(n.preds), n.name) for n in self.nodes
                if n.kind == "add"]

    # -- construction ------------------------------------------------------

    def _infer_shapes(self):
        shapes = {"input": self.input_shape}
        for n in self.nodes:
            pin = shapes[n.preds[0]]
            if n.kind == "conv":
                if len(pin) != 3:
                    raise DimensionError(
                        f"layer '{n.name}': conv needs CxHxW input, got {pin}")
                _, h, w = pin
                ho = (h + 2 * n.padding - n.kernel) // n.stride + 1
                wo = (w + 2 * n.padding - n.kernel) // n.stride + 1
                if ho < 1 or wo < 1:
                    raise DimensionError(
                        f"layer '{n.name}': kernel {n.kernel} does not fit "
                        f"input {pin} with pad {n.padding}")
                out = (n.out_channels, ho, wo)
            elif n.kind == "maxpool":
                if len(pin) != 3:
                    raise DimensionError(
                        f"layer '{n.name}': maxpool needs CxHxW input, "
                        f"got {pin}")
                c, h, w = pin
                ho = (h + 2 * n.padding - n.kernel) // n.stride + 1
                wo = (w + 2 * n.padding - n.kernel) // n.stride + 1
                if ho < 1 or wo < 1:
                    raise DimensionError(
                        f"layer '{n.name}': window {n.kernel} does not fit "
                        f"input {pin}")
                out = (c, ho, wo)
            elif n.kind == "avgpool":
                if len(pin) != 3:
                    raise DimensionError(
                        f"layer '{n.name}': avgpool needs CxHxW input, "
                        f"got {pin}")
                out = (pin[0], 1, 1)
            elif n.kind == "flatten":
                out = (int(np.prod(pin)),)
            elif n.kind == "dense":
                if len(pin) != 1:
                    raise DimensionError(
                        f"layer '{n.name}': dense needs a flattened input, "
                        f"got {pin}; add a flatten layer")
                out = (n.out_channels,)
            else:  # add
                pin2 = shapes[n.preds[1]]
                if pin != pin2:
                    raise DimensionError(
                        f"layer '{n.name}': add inputs disagree, "
                        f"{pin} vs {pin2}")
                out = pin
            n.in_shape, n.out_shape = pin, out
            shapes[n.name] = out

    def _init_params(self, rng, trainable):
        for n in self.nodes:
            if n.kind == "conv":
                c_in = n.in_shape[0]
                w = rng.standard_normal(
                    (n.out_channels, c_in, n.kernel, n.kernel),
                    dtype=np.float32)
                w *= np.float32(math.sqrt(2.0 / (c_in * n.kernel * n.kernel)))
                n.weight = Tensor(w, requires_grad=trainable)
                n.bias = Tensor(np.zeros(n.out_channels, dtype=np.float32),
                                requires_grad=trainable)
                if n.batch_norm:
                    n.bn_gamma = Tensor(
                        np.ones(n.out_channels, dtype=np.float32),
                        requires_grad=trainable)
                    n.bn_beta = Tensor(
                        np.zeros(n.out_channels, dtype=np.float32),
                        requires_grad=trainable)
                    n.bn_mean = np.zeros(n.out_channels, dtype=np.float32)
                    n.bn_var = np.ones(n.out_channels, dtype=np.float32)
            elif n.kind == "dense":
                f_in = n.in_shape[0]
                w = rng.standard_normal((f_in, n.out_channels),
                                        dtype=np.float32)
                w *= np.float32(math.sqrt(2.0 / f_in))
                n.weight = Tensor(w, requires_grad=trainable)
                n.bias = Tensor(np.zeros(n.out_channels, dtype=np.float32),
                                requires_grad=trainable)

    def _attach_gates(self, alpha_th, tau, mu_init, sigma_init, trainable):
        for n in self.nodes:
            if n.kind in WEIGHTED and n.gated:
                n.gate = GateState.fresh(
                    n.out_channels, mu_init=mu_init, sigma_init=sigma_init,
                    alpha_th=alpha_th, tau=tau, trainable=trainable)

    def _gate_owner(self, name):
        """Nearest weighted ancestor at or above `name` (None for input)."""
        while name != "input":
            node = self._by_name[name]
            if node.kind in WEIGHTED:
                return node
            name = node.preds[0]
        return None

    def _share_skip_gates(self):
        # layers merged by an add must prune the same channels, so their
        # producers share a single GateState
        for n in self.nodes:
            if n.kind != "add":
                continue
            owners = [self._gate_owner(p) for p in n.preds]
            owners = [o for o in owners if o is not None and o.gate is not None]
            if len(owners) < 2:
                continue
            shared = owners[0].gate
            for o in owners[1:]:
                o.gate = shared

    def _attach_quantizers(self, weight_bits, act_bits, act_range, trainable):
        for n in self.nodes:
            if n.kind not in WEIGHTED or not n.quantized:
                continue
            n.weight_quant = calibrated_state(
                n.weight.data, weight_bits, signed=True, trainable=trainable)
            signed = n.act != "relu"
            n.act_quant = calibrated_state(
                np.array([act_range]), act_bits, signed=signed,
                trainable=trainable)
            # activation grids keep a linear mapping; only weights learn t
            n.act_quant.exp_param.requires_grad = False

    # -- forward -----------------------------------------------------------

    def forward(self, x, mode="train", rng=None, restricted=False) -> Tensor:
        """Run the graph, returning the output layer's Tensor.

        mode "train" samples gates (rng required when gates are present)
        and updates batch-norm running stats; "eval" uses gate means and
        running stats. restricted=True snaps every quantizer to the
        power-of-two grid for the forward values only.
        """
        if mode not in ("train", "eval"):
            raise ContractError(f"forward: unknown mode {mode!r}")
        if isinstance(x, np.ndarray):
            x = Tensor(x)
        if x.data.ndim != 4 or tuple(x.data.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"forward: input shape {x.data.shape} does not match "
                f"declared input {self.input_shape}")
        if (mode == "train" and rng is None
                and any(n.gate is not None for n in self.nodes)):
            raise ContractError(
                "forward in train mode requires an rng to sample gates")

        # checked after every sub-step: batch norm and gating can map an
        # overflow back onto finite values, hiding the layer that produced it
        def checked(n, h):
            if not np.isfinite(h.data).all():
                raise DataError(
                    f"non-finite activations in layer '{n.name}'")
            return h

        outs = {"input": x}
        for n in self.nodes:
            h = outs[n.preds[0]]
            if n.kind == "conv":
                w = n.weight
                if n.weight_quant is not None:
                    fs = adjust_pow2(n.weight_quant) if restricted else None
                    w = quantize(w, n.weight_quant, forward_state=fs)
                h = checked(n, ad.conv2d(h, w, n.bias, stride=n.stride,
                                         padding=n.padding))
                if n.batch_norm:
                    h = checked(n, ad.batchnorm2d(h, n.bn_gamma, n.bn_beta,
                                                  n.bn_mean, n.bn_var, mode))
                h = self._activate(n, h, mode, rng, restricted)
            elif n.kind == "dense":
                w = n.weight
                if n.weight_quant is not None:
                    fs = adjust_pow2(n.weight_quant) if restricted else None
                    w = quantize(w, n.weight_quant, forward_state=fs)
                h = checked(n, ad.dense(h, w, n.bias))
                h = self._activate(n, h, mode, rng, restricted)
            elif n.kind == "maxpool":
                h = ad.maxpool2d(h, n.kernel, stride=n.stride,
                                 padding=n.padding)
            elif n.kind == "avgpool":
                h = ad.global_avgpool2d(h)
            elif n.kind == "flatten":
                h = ad.flatten(h)
            else:  # add
                h = outs[n.preds[0]] + outs[n.preds[1]]
                if n.act == "relu":
                    h = ad.relu(h)
            outs[n.name] = checked(n, h)
        return outs[self.nodes[-1].name]

    def _activate(self, n, h, mode, rng, restricted):
        if n.act == "relu":
            h = ad.relu(h)
        if n.gate is not None:
            h = gate_forward(h, sample_gates(n.gate, rng, mode))
        if n.act_quant is not None:
            fs = adjust_pow2(n.act_quant) if restricted else None
            h = quantize(h, n.act_quant, forward_state=fs)
        return h

    # -- enumeration for training and persistence --------------------------

    def weighted_nodes(self):
        return [n for n in self.nodes if n.kind in WEIGHTED]

    def weight_parameters(self):
        """All (name, Tensor) pairs updated with the base learning rate."""
        out = []
        for n in self.weighted_nodes():
            out.append((f"{n.name}.weight", n.weight))
            out.append((f"{n.name}.bias", n.bias))
            if n.bn_gamma is not None:
                out.append((f"{n.name}.bn_gamma", n.bn_gamma))
                out.append((f"{n.name}.bn_beta", n.bn_beta))
        return out

    def gate_states(self):
        """Unique (owner_name, GateState) pairs; shared gates appear once."""
        seen = {}
        out = []
        for n in self.nodes:
            if n.gate is not None and id(n.gate) not in seen:
                seen[id(n.gate)] = n.name
                out.append((n.name, n.gate))
        return out

    def quantizer_states(self):
        out = []
        for n in self.weighted_nodes():
            if n.weight_quant is not None:
                out.append((f"{n.name}.weight", n.weight_quant))
            if n.act_quant is not None:
                out.append((f"{n.name}.act", n.act_quant))
        return out

    def input_gate(self, node: LayerNode):
        """GateState governing the channels this layer consumes, or None."""
        owner = self._gate_owner(node.preds[0])
        return owner.gate if owner is not None else None

    def input_act_quant(self, node: LayerNode):
        """Quantizer of the activations this layer consumes, or None."""
        owner = self._gate_owner(node.preds[0])
        return owner.act_quant if owner is not None else None

    # -- reporting ---------------------------------------------------------

    def _input_bits(self, node, restricted):
        q = self.input_act_quant(node)
        if q is not None:
            return effective_bitwidth(adjust_pow2(q) if restricted else q)
        if self._gate_owner(node.preds[0]) is None and self.is_quantized:
            return self.input_bits
        return 32.0

    def layer_specs(self, float_baseline=False, restricted=False):
        """(layer_id, LayerSpec, output_act_bits) triples for model_report.

        float_baseline=True reports the same shapes at 32/32 with no
        pruning, the reference a compression ratio divides by.
        """
        triples = []
        for n in self.weighted_nodes():
            if n.kind == "conv":
                c_out, c_in, kh, kw = n.weight.data.shape
                m_h, m_w = n.out_shape[1], n.out_shape[2]
            else:
                c_in, c_out = n.weight.data.shape
                kh = kw = m_h = m_w = 1
            if float_baseline:
                wb, ab_in, ab_out, p_in, p_out = 32.0, 32.0, 32.0, 0.0, 0.0
            else:
                wq = n.weight_quant
                if wq is not None and restricted:
                    wq = adjust_pow2(wq)
                wb = effective_bitwidth(wq) if wq is not None else 32.0
                ab_in = self._input_bits(n, restricted)
                aq = n.act_quant
                if aq is not None and restricted:
                    aq = adjust_pow2(aq)
                ab_out = effective_bitwidth(aq) if aq is not None else 32.0
                p_out = hard_prune_ratio(n.gate) if n.gate is not None else 0.0
                in_gate = self.input_gate(n)
                p_in = hard_prune_ratio(in_gate) if in_gate is not None else 0.0
            spec = LayerSpec(
                kind=n.kind, c_in=int(c_in), c_out=int(c_out),
                k_w=int(kw), k_h=int(kh), m_w=int(m_w), m_h=int(m_h),
                weight_bits=wb, input_act_bits=ab_in,
                prune_in=p_in, prune_out=p_out)
            triples.append((n.name, spec, ab_out))
        return triples

    # -- persistence -------------------------------------------------------

    def state_items(self):
        """Ordered (key, array) pairs capturing every stored value.

        Weight tensors and gate vectors are float32; quantizer parameters
        are float64 [step, range, exponent, dead_zone] so a round trip
        is bit-exact.
        """
        items = []
        for n in self.nodes:
            if n.kind not in WEIGHTED:
                continue
            items.append((f"{n.name}.weight", n.weight.data))
            items.append((f"{n.name}.bias", n.bias.data))
            if n.bn_gamma is not None:
                items.append((f"{n.name}.bn_gamma", n.bn_gamma.data))
                items.append((f"{n.name}.bn_beta", n.bn_beta.data))
                items.append((f"{n.name}.bn_mean", n.bn_mean))
                items.append((f"{n.name}.bn_var", n.bn_var))
            for tag, q in ((f"{n.name}.wquant", n.weight_quant),
                           (f"{n.name}.aquant", n.act_quant)):
                if q is not None:
                    items.append((tag, np.array(
                        [q.step_size, q.max_range, q.exponent, q.dead_zone],
                        dtype=np.float64)))
            if n.gate is not None:
                items.append((f"{n.name}.gate_mu", n.gate.mu.data))
                items.append((f"{n.name}.gate_sigma", n.gate.sigma.data))
        return items

    def load_state_items(self, arrays):
        """Install arrays produced by state_items on a structurally
        identical graph. Shared gates stay shared."""
        expected = [k for k, _ in self.state_items()]
        missing = [k for k in expected if k not in arrays]
        extra = [k for k in arrays if k not in expected]
        if missing or extra:
            raise ContractError(
                "state does not match graph topology"
                + (f"; missing: {', '.join(missing)}" if missing else "")
                + (f"; unexpected: {', '.join(extra)}" if extra else ""))

        def _install(tensor, key):
            arr = np.asarray(arrays[key], dtype=np.float32)
            if arr.shape != tensor.data.shape:
                raise ContractError(
                    f"state {key!r} has shape {arr.shape}, graph expects "
                    f"{tensor.data.shape}")
            tensor.data = np.ascontiguousarray(arr)
            tensor.grad = None

        gate_memo = {}
        for n in self.nodes:
            if n.kind not in WEIGHTED:
                continue
            _install(n.weight, f"{n.name}.weight")
            _install(n.bias, f"{n.name}.bias")
            if n.bn_gamma is not None:
                _install(n.bn_gamma, f"{n.name}.bn_gamma")
                _install(n.bn_beta, f"{n.name}.bn_beta")
                for buf, key in ((n.bn_mean, f"{n.name}.bn_mean"),
                                 (n.bn_var, f"{n.name}.bn_var")):
                    arr = np.asarray(arrays[key], dtype=np.float32)
                    if arr.shape != buf.shape:
                        raise ContractError(
                            f"state {key!r} has shape {arr.shape}, graph "
                            f"expects {buf.shape}")
                    buf[...] = arr
            for attr, tag in (("weight_quant", "wquant"),
                              ("act_quant", "aquant")):
                old = getattr(n, attr)
                if old is None:
                    continue
                vals = np.asarray(arrays[f"{n.name}.{tag}"], dtype=np.float64)
                if vals.shape != (4,):
                    raise ContractError(
                        f"state '{n.name}.{tag}' must hold 4 quantizer "
                        f"parameters, got shape {vals.shape}")
                fresh = QuantizerState(
                    vals[0], vals[1], exponent=vals[2], dead_zone=vals[3],
                    signed=old.signed,
                    trainable=old.step_param.requires_grad)
                fresh.exp_param.requires_grad = old.exp_param.requires_grad
                setattr(n, attr, fresh)
            if n.gate is not None:
                if id(n.gate) in gate_memo:
                    n.gate = gate_memo[id(n.gate)]
                    continue
                mu = np.asarray(arrays[f"{n.name}.gate_mu"], dtype=np.float32)
                sigma = np.asarray(arrays[f"{n.name}.gate_sigma"],
                                   dtype=np.float32)
                if mu.shape != n.gate.mu.data.shape:
                    raise ContractError(
                        f"state '{n.name}.gate_mu' has shape {mu.shape}, "
                        f"graph expects {n.gate.mu.data.shape}")
                fresh = GateState(mu, sigma, alpha_th=n.gate.alpha_th,
                                  tau=n.gate.tau,
                                  trainable=n.gate.mu.requires_grad)
                gate_memo[id(n.gate)] = fresh
                n.gate = fresh

    # -- pruning surgery ---------------------------------------------------

    def _structural_copy(self) -> "NetworkGraph":
        new = object.__new__(NetworkGraph)
        new.arch_text = self.arch_text
        new.input_shape = self.input_shape
        new.input_bits = self.input_bits
        new.is_quantized = self.is_quantized
        new.is_gated = self.is_gated
        gate_memo = {}
        new.nodes = [_clone_node(n, gate_memo) for n in self.nodes]
        new._by_name = {n.name: n for n in new.nodes}
        return new


def _clone_tensor(t):
    if t is None:
        return None
    return Tensor(t.data.copy(), requires_grad=t.requires_grad)


def _clone_quant(q):
    if q is None:
        return None
    fresh = QuantizerState(q.step_size, q.max_range, exponent=q.exponent,
                           dead_zone=q.dead_zone, signed=q.signed,
                           trainable=q.step_param.requires_grad)
    fresh.exp_param.requires_grad = q.exp_param.requires_grad
    return fresh


def _clone_gate(g, memo):
    if g is None:
        return None
    if id(g) in memo:
        return memo[id(g)]
    fresh = GateState(g.mu.data.copy(), g.sigma.data.copy(),
                      alpha_th=g.alpha_th, tau=g.tau,
                      trainable=g.mu.requires_grad)
    memo[id(g)] = fresh
    return fresh


def _clone_node(n: LayerNode, gate_memo) -> LayerNode:
    c = LayerNode(n.kind, n.name, list(n.preds), out_channels=n.out_channels,
                  kernel=n.kernel, stride=n.stride, padding=n.padding,
                  batch_norm=n.batch_norm, act=n.act, gated=n.gated,
                  quantized=n.quantized)
    c.weight = _clone_tensor(n.weight)
    c.bias = _clone_tensor(n.bias)
    c.bn_gamma = _clone_tensor(n.bn_gamma)
    c.bn_beta = _clone_tensor(n.bn_beta)
    c.bn_mean = None if n.bn_mean is None else n.bn_mean.copy()
    c.bn_var = None if n.bn_var is None else n.bn_var.copy()
    c.weight_quant = _clone_quant(n.weight_quant)
    c.act_quant = _clone_quant(n.act_quant)
    c.gate = _clone_gate(n.gate, gate_memo)
    c.in_shape, c.out_shape = n.in_shape, n.out_shape
    return c


def apply_hard_pruning(graph: NetworkGraph) -> NetworkGraph:
    """Physically remove channels whose gate alpha fell below threshold.

    Returns a new graph; the input is untouched. Surviving gate means are
    folded into the input channels of every consumer, so the compressed
    graph carries no gates. Folding commutes exactly with ReLU, pooling
    and addition for non-negative means; a negative surviving mean crossing
    a max-pool or a post-add ReLU is folded anyway and logged, since only
    a sign-flipped gate can produce it.
    """
    for n in graph.nodes:
        if n.gate is not None and not bool(n.gate.keep_mask().any()):
            raise StructuralError(
                f"pruning removes every channel of layer '{n.name}'")

    new = graph._structural_copy()
    c_in = graph.input_shape[0]
    # per node: (keep mask over the full original channel space,
    #            fold scale aligned with the survivors)
    state = {"input": (np.ones(c_in, dtype=bool),
                       np.ones(c_in, dtype=np.float32))}
    for n in new.nodes:
        if n.kind in WEIGHTED:
            mask, scale = state[n.preds[0]]
            if n.kind == "conv":
                w = n.weight.data[:, mask] * scale[None, :, None, None]
            else:
                w = n.weight.data[mask] * scale[:, None]
            bias = n.bias.data
            if n.gate is not None:
                keep = n.gate.keep_mask()
                mu = n.gate.mu.data[keep].astype(np.float32)
                if n.kind == "conv":
                    w = w[keep]
                else:
                    w = w[:, keep]
                bias = bias[keep]
                if n.bn_gamma is not None:
                    n.bn_gamma = Tensor(n.bn_gamma.data[keep].copy(),
                                        requires_grad=n.bn_gamma.requires_grad)
                    n.bn_beta = Tensor(n.bn_beta.data[keep].copy(),
                                       requires_grad=n.bn_beta.requires_grad)
                    n.bn_mean = n.bn_mean[keep].copy()
                    n.bn_var = n.bn_var[keep].copy()
                n.out_channels = int(keep.sum())
                n.gate = None
                n.gated = False
                state[n.name] = (keep, mu)
            else:
                state[n.name] = (np.ones(n.out_channels, dtype=bool),
                                 np.ones(n.out_channels, dtype=np.float32))
            n.weight = Tensor(np.ascontiguousarray(w),
                              requires_grad=n.weight.requires_grad)
            n.bias = Tensor(np.ascontiguousarray(bias),
                            requires_grad=n.bias.requires_grad)
        elif n.kind in ("maxpool", "avgpool"):
            mask, scale = state[n.preds[0]]
            if n.kind == "maxpool" and np.any(scale < 0):
                log.warning(
                    "folding negative gate means across max-pool '%s'; "
                    "compressed outputs are approximate", n.name)
            state[n.name] = (mask, scale)
        elif n.kind == "flatten":
            mask, scale = state[n.preds[0]]
            if len(n.in_shape) == 3:
                hw = n.in_shape[1] * n.in_shape[2]
                mask, scale = np.repeat(mask, hw), np.repeat(scale, hw)
            state[n.name] = (mask, scale)
        else:  # add
            m1, s1 = state[n.preds[0]]
            m2, s2 = state[n.preds[1]]
            if m1.shape != m2.shape or not np.array_equal(m1, m2):
                raise StructuralError(
                    f"skip branches disagree on pruned channels at "
                    f"'{n.name}'; producers must share a gate")
            if not np.allclose(s1, s2):
                raise StructuralError(
                    f"skip branches disagree on folded gate means at "
                    f"'{n.name}'")
            if n.act == "relu" and np.any(s1 < 0):
                log.warning(
                    "folding negative gate means across the activation of "
                    "'%s'; compressed outputs are approximate", n.name)
            state[n.name] = (m1, s1)

    new._infer_shapes()
    new.is_gated = False
    new.arch_text = emit_architecture(new)
    return new
