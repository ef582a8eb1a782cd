"""Graph construction, shape inference, forward wiring and channel surgery."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from importlib import resources

from djpq import autodiff as ad
from djpq.autodiff import Tensor
from djpq.errors import (ConfigError, ContractError, DataError,
                         DimensionError, StructuralError)
from djpq.metrics import model_report
from djpq.network import (NetworkGraph, apply_hard_pruning,
                          emit_architecture, parse_architecture)
from djpq.quantizer import adjust_pow2, effective_bitwidth, quantize

VGG7_MACS = 615_917_568
RESNET18_MACS = 1_814_073_344

TINY = """
input 3x8x8 bits=8
conv name=c1 out=6 k=3 pad=1
flatten name=fl
dense name=f1 out=4 act=none gate=0
"""

POOLED = """
input 3x8x8 bits=8
conv name=c1 out=6 k=3 pad=1
maxpool name=p1 k=2
flatten name=fl
dense name=f1 out=4 act=none gate=0
"""

RESIDUAL = """
input 3x8x8 bits=8
conv name=a out=4 k=3 pad=1
conv name=b1 out=4 k=3 pad=1
conv name=b2 out=4 k=3 pad=1 act=none
add name=r from=a,b2
flatten name=fl
dense name=f out=3 act=none gate=0
"""


def preset_text(name):
    return (resources.files("djpq") / "presets" / name).read_text()


def build(text, seed=0, **kw):
    return NetworkGraph(text, rng=np.random.default_rng(seed), **kw)


def batch(graph, n=2, seed=10):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n,) + graph.input_shape,
                               dtype=np.float32)


class TestParser:
    def test_minimal_arch_with_auto_names(self):
        shape, bits, nodes = parse_architecture(
            "input 1x4x4\nconv out=2 k=3\nflatten\ndense out=2")
        assert shape == (1, 4, 4) and bits == 32.0
        assert [n.name for n in nodes] == ["conv1", "flatten1", "dense1"]
        assert nodes[1].preds == ["conv1"]

    def test_input_bits_parsed(self):
        shape, bits, _ = parse_architecture("input 3x32x32 bits=8\nconv out=1 k=1")
        assert bits == 8.0

    def test_missing_input_line(self):
        with pytest.raises(ConfigError, match="start with an input"):
            parse_architecture("conv out=2 k=3")

    def test_empty_text(self):
        with pytest.raises(ConfigError, match="no input line"):
            parse_architecture("# nothing here\n")

    def test_duplicate_input(self):
        with pytest.raises(ConfigError, match="duplicate input"):
            parse_architecture("input 1x4x4\ninput 1x4x4")

    def test_unknown_kind_lists_valid(self):
        with pytest.raises(ConfigError, match="valid kinds.*conv"):
            parse_architecture("input 1x4x4\nlstm out=2")

    def test_unknown_key_lists_valid(self):
        with pytest.raises(ConfigError, match="valid keys.*stride"):
            parse_architecture("input 1x4x4\nconv out=2 k=3 dilation=2")

    def test_missing_required_key(self):
        with pytest.raises(ConfigError, match="missing required key 'out'"):
            parse_architecture("input 1x4x4\nconv k=3")

    def test_bad_integer(self):
        with pytest.raises(ConfigError, match="must be an integer"):
            parse_architecture("input 1x4x4\nconv out=two k=3")

    def test_nonpositive_out(self):
        with pytest.raises(ConfigError, match="out must be >= 1"):
            parse_architecture("input 1x4x4\nconv out=0 k=3")

    def test_duplicate_name(self):
        with pytest.raises(ConfigError, match="duplicate layer name"):
            parse_architecture(
                "input 1x4x4\nconv name=x out=2 k=3\nconv name=x out=2 k=3")

    def test_reserved_name(self):
        with pytest.raises(ConfigError, match="invalid layer name"):
            parse_architecture("input 1x4x4\nconv name=input out=2 k=3")

    def test_from_unknown_layer(self):
        with pytest.raises(ConfigError, match="unknown layer 'zz'"):
            parse_architecture("input 1x4x4\nconv out=2 k=3 from=zz")

    def test_forward_reference_rejected(self):
        with pytest.raises(ConfigError, match="unknown layer 'later'"):
            parse_architecture(
                "input 1x4x4\nconv out=2 k=3 from=later\n"
                "conv name=later out=2 k=3")

    def test_add_needs_two_inputs(self):
        with pytest.raises(ConfigError, match="add requires from="):
            parse_architecture("input 1x4x4\nconv out=2 k=3\nadd")
        with pytest.raises(ConfigError, match="exactly two inputs"):
            parse_architecture("input 1x4x4\nconv name=a out=2 k=3\nadd from=a")

    def test_bad_act(self):
        with pytest.raises(ConfigError, match="act must be one of"):
            parse_architecture("input 1x4x4\nconv out=2 k=3 act=tanh")

    def test_bad_input_shape(self):
        with pytest.raises(ConfigError, match="CxHxW"):
            parse_architecture("input 4x4\nconv out=2 k=3")

    def test_maxpool_pad_bound(self):
        with pytest.raises(ConfigError, match="pad must be smaller"):
            parse_architecture("input 1x8x8\nmaxpool k=2 pad=2")

    def test_line_numbers_in_errors(self):
        with pytest.raises(ConfigError, match="line 3"):
            parse_architecture("input 1x4x4\nconv out=2 k=3\nconv out=2")

    @settings(max_examples=200, deadline=None)
    @given(st.text(max_size=200))
    def test_parser_is_total(self, text):
        # any input yields a value or a ConfigError, never another crash
        try:
            parse_architecture(text)
        except ConfigError:
            pass


class TestShapeInference:
    def test_vgg7_shapes(self):
        g = build(preset_text("vgg7.arch"))
        assert g["c1"].out_shape == (128, 32, 32)
        assert g["c6"].out_shape == (512, 8, 8)
        assert g["p3"].out_shape == (512, 4, 4)
        assert g["fl"].out_shape == (8192,)
        assert g["f1"].out_shape == (1024,)
        assert g["f2"].out_shape == (10,)

    def test_resnet18_shapes(self):
        g = build(preset_text("resnet18.arch"))
        assert g["stem"].out_shape == (64, 112, 112)
        assert g["p0"].out_shape == (64, 56, 56)
        assert g["s2b1"].out_shape == (128, 28, 28)
        assert g["s3b2"].out_shape == (256, 14, 14)
        assert g["s4b2"].out_shape == (512, 7, 7)
        assert g["fl"].out_shape == (512,)
        assert len(g.skip_edges) == 8

    def test_maxpool_truncates(self):
        g = build("input 1x5x5\nconv name=c out=2 k=1\nmaxpool name=p k=2")
        assert g["p"].out_shape == (2, 2, 2)

    def test_dense_needs_flatten(self):
        with pytest.raises(DimensionError, match="flatten"):
            build("input 1x4x4\ndense out=2")

    def test_kernel_too_big(self):
        with pytest.raises(DimensionError, match="does not fit"):
            build("input 1x4x4\nconv out=2 k=5")

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError, match="add inputs disagree"):
            build("input 1x8x8\nconv name=a out=2 k=3\n"
                  "conv name=b out=2 k=3 from=a\nadd from=a,b")


class TestAuditCounts:
    def test_vgg7_totals(self):
        g = build(preset_text("vgg7.arch"))
        specs = g.layer_specs(float_baseline=True)
        rep = model_report(specs, specs, accuracy=1.0)
        assert rep.total_macs == VGG7_MACS
        assert rep.total_bops == VGG7_MACS * 1024
        gmacs, gbops = rep.total_macs / 1e9, rep.total_bops / 1e9
        assert abs(gmacs - 0.613) / 0.613 < 0.01
        assert abs(gbops - 629.0) / 629.0 < 0.01

    def test_resnet18_totals(self):
        g = build(preset_text("resnet18.arch"))
        specs = g.layer_specs(float_baseline=True)
        rep = model_report(specs, specs, accuracy=1.0)
        assert rep.total_macs == RESNET18_MACS
        assert rep.total_bops == RESNET18_MACS * 1024
        assert round(rep.total_macs / 1e9, 2) == 1.81


class TestBuild:
    def test_float_graph_has_no_extras(self):
        g = build(TINY)
        assert g["c1"].gate is None and g["c1"].weight_quant is None
        assert g["c1"].act_quant is None
        assert not g.gate_states() and not g.quantizer_states()

    def test_gates_attach_to_gated_layers(self):
        g = build(TINY, gated=True)
        assert g["c1"].gate is not None
        assert g["c1"].gate.channels == 6
        assert g["f1"].gate is None  # gate=0 in the arch
        assert [name for name, _ in g.gate_states()] == ["c1"]

    def test_quantizers_attach_in_pairs(self):
        g = build(TINY, quantized=True, weight_bits=6, act_bits=6)
        for n in g.weighted_nodes():
            assert n.weight_quant is not None and n.act_quant is not None
        assert len(g.quantizer_states()) == 4

    def test_initial_bitwidths_match_request(self):
        g = build(TINY, quantized=True, weight_bits=6, act_bits=5)
        assert effective_bitwidth(g["c1"].weight_quant) == 6.0
        assert effective_bitwidth(g["c1"].act_quant) == 5.0

    def test_act_quantizer_signedness(self):
        g = build(TINY, quantized=True)
        assert g["c1"].act_quant.signed is False  # after relu
        assert g["f1"].act_quant.signed is True   # raw logits
        # activation grids never learn the mapping exponent
        assert g["c1"].act_quant.exp_param.requires_grad is False
        assert g["f1"].act_quant.exp_param.requires_grad is False
        assert g["c1"].weight_quant.exp_param.requires_grad is True

    def test_skip_branches_share_one_gate(self):
        g = build(RESIDUAL, gated=True)
        assert g["a"].gate is g["b2"].gate
        assert g["b1"].gate is not g["a"].gate
        names = [name for name, _ in g.gate_states()]
        assert names == ["a", "b1"]  # shared state reported once

    def test_weight_parameters_cover_bn(self):
        g = build(TINY)
        names = [name for name, _ in g.weight_parameters()]
        assert names == ["c1.weight", "c1.bias", "c1.bn_gamma", "c1.bn_beta",
                         "f1.weight", "f1.bias"]

    def test_unknown_layer_lookup(self):
        g = build(TINY)
        with pytest.raises(ContractError, match="no layer named"):
            g["nope"]


class TestForward:
    def test_output_shape(self):
        g = build(TINY)
        y = g.forward(batch(g, 3), mode="eval")
        assert y.data.shape == (3, 4)

    def test_same_seed_same_graph_bitwise(self):
        g1 = build(TINY, seed=7)
        g2 = build(TINY, seed=7)
        x = batch(g1)
        assert np.array_equal(g1.forward(x, mode="eval").data,
                              g2.forward(x, mode="eval").data)

    def test_train_needs_rng_with_gates(self):
        g = build(TINY, gated=True)
        with pytest.raises(ContractError, match="rng"):
            g.forward(batch(g), mode="train")

    def test_train_rng_reproducible(self):
        g = build(TINY, gated=True)
        x = batch(g)
        y1 = g.forward(x, mode="train", rng=np.random.default_rng(3))
        g2 = build(TINY, gated=True)
        y2 = g2.forward(x, mode="train", rng=np.random.default_rng(3))
        assert np.array_equal(y1.data, y2.data)

    def test_gate_noise_changes_train_output(self):
        g = build(TINY, gated=True)
        x = batch(g)
        y_eval = g.forward(x, mode="eval").data.copy()
        y_train = g.forward(x, mode="train", rng=np.random.default_rng(1)).data
        assert not np.array_equal(y_eval, y_train)

    def test_eval_applies_gate_means(self):
        g = build(TINY, gated=True)
        x = batch(g)
        base = build(TINY, gated=False, seed=0)
        y_plain = base.forward(x, mode="eval")
        mu = np.array([0.5, 1.0, 2.0, 0.0, 1.5, 0.25], dtype=np.float32)
        g["c1"].gate.mu.data = mu
        y_gated = g.forward(x, mode="eval")
        # manual: scale the conv block output channels, then the dense layer
        h = ad.conv2d(Tensor(x), base["c1"].weight, base["c1"].bias, padding=1)
        h = ad.batchnorm2d(h, base["c1"].bn_gamma, base["c1"].bn_beta,
                           base["c1"].bn_mean, base["c1"].bn_var, "eval")
        h = ad.relu(h)
        h = Tensor(h.data * mu[None, :, None, None])
        h = ad.flatten(h)
        want = ad.dense(h, base["f1"].weight, base["f1"].bias)
        assert np.allclose(y_gated.data, want.data, atol=1e-6)

    def test_bad_mode(self):
        g = build(TINY)
        with pytest.raises(ContractError, match="unknown mode"):
            g.forward(batch(g), mode="predict")

    def test_input_shape_mismatch(self):
        g = build(TINY)
        with pytest.raises(DimensionError, match="does not match"):
            g.forward(np.zeros((2, 3, 9, 9), dtype=np.float32), mode="eval")

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_diagnostic_names_layer(self):
        g = build("input 3x8x8\nconv name=c1 out=4 k=3\n"
                  "conv name=c2 out=4 k=3\nflatten\ndense name=f out=2")
        g["c2"].weight.data[:] = np.float32(3e38)
        with pytest.raises(DataError, match="'c2'"):
            g.forward(batch(g), mode="eval")

    def test_quantized_forward_matches_manual(self):
        g = build("input 2x6x6\nconv name=c1 out=3 k=3 bn=0 gate=0",
                  quantized=True, seed=4)
        x = batch(g)
        y = g.forward(x, mode="eval")
        n = g["c1"]
        w = quantize(n.weight, n.weight_quant)
        h = ad.relu(ad.conv2d(Tensor(x), w, n.bias))
        want = quantize(h, n.act_quant)
        assert np.array_equal(y.data, want.data)

    def test_restricted_forward_uses_pow2_grids(self):
        g = build("input 2x6x6\nconv name=c1 out=3 k=3 bn=0 gate=0",
                  quantized=True, weight_bits=6, act_bits=6, seed=4)
        x = batch(g)
        y = g.forward(x, mode="eval", restricted=True)
        n = g["c1"]
        w = quantize(n.weight, n.weight_quant,
                     forward_state=adjust_pow2(n.weight_quant))
        h = ad.relu(ad.conv2d(Tensor(x), w, n.bias))
        want = quantize(h, n.act_quant,
                        forward_state=adjust_pow2(n.act_quant))
        assert np.array_equal(y.data, want.data)
        assert not np.array_equal(y.data,
                                  g.forward(x, mode="eval").data)

    def test_residual_forward_runs(self):
        g = build(RESIDUAL, gated=True, quantized=True)
        y = g.forward(batch(g), mode="train", rng=np.random.default_rng(2))
        assert y.data.shape == (2, 3)


class TestLayerSpecs:
    def test_float_baseline_is_32_32_unpruned(self):
        g = build(TINY, quantized=True, gated=True)
        for _, spec, ab in g.layer_specs(float_baseline=True):
            assert spec.weight_bits == 32.0
            assert spec.input_act_bits == 32.0
            assert ab == 32.0
            assert spec.prune_in == spec.prune_out == 0.0

    def test_bit_wiring_follows_the_chain(self):
        g = build(POOLED, quantized=True, weight_bits=6, act_bits=5)
        triples = {lid: (spec, ab) for lid, spec, ab in g.layer_specs()}
        spec_c1, ab_c1 = triples["c1"]
        spec_f1, _ = triples["f1"]
        assert spec_c1.input_act_bits == 8.0  # declared input bit-width
        assert spec_c1.weight_bits == 6.0
        assert ab_c1 == 5.0
        assert spec_f1.input_act_bits == 5.0  # consumes c1 activations

    def test_unquantized_graph_reports_32(self):
        g = build(POOLED)
        for _, spec, ab in g.layer_specs():
            assert spec.weight_bits == 32.0
            assert spec.input_act_bits == 32.0
            assert ab == 32.0

    def test_prune_ratios_propagate(self):
        g = build(POOLED, gated=True)
        g["c1"].gate.mu.data[:3] = 0.0  # 3 of 6 channels below threshold
        triples = {lid: (spec, ab) for lid, spec, ab in g.layer_specs()}
        assert triples["c1"][0].prune_out == pytest.approx(0.5)
        assert triples["c1"][0].prune_in == 0.0
        assert triples["f1"][0].prune_in == pytest.approx(0.5)

    def test_restricted_reports_pow2(self):
        g = build(POOLED, quantized=True, weight_bits=6, act_bits=5)
        for _, spec, ab in g.layer_specs(restricted=True):
            assert spec.weight_bits in (2.0, 4.0, 8.0, 16.0, 32.0)
            assert ab in (2.0, 4.0, 8.0, 16.0, 32.0)

    def test_dims_come_from_inference(self):
        g = build(preset_text("vgg7.arch"))
        triples = {lid: spec for lid, spec, _ in g.layer_specs()}
        assert (triples["c5"].m_h, triples["c5"].m_w) == (8, 8)
        assert triples["c5"].c_in == 256 and triples["c5"].c_out == 512
        assert triples["f1"].c_in == 8192 and triples["f1"].m_w == 1


def gate_pattern(graph, name, mu):
    arr = np.asarray(mu, dtype=np.float32)
    graph[name].gate.mu.data = arr
    return arr


class TestPruning:
    def test_two_layer_equivalence_oracle(self):
        g = build(TINY, gated=True, seed=3)
        gate_pattern(g, "c1", [0.9, 0.0, 1.2, 0.0, 0.6, 1.1])
        pruned = apply_hard_pruning(g)
        x = batch(g, 4)
        y0 = g.forward(x, mode="eval").data
        y1 = pruned.forward(x, mode="eval").data
        assert np.max(np.abs(y0 - y1)) <= 1e-4

    def test_channel_bookkeeping(self):
        g = build(TINY, gated=True)
        gate_pattern(g, "c1", [1.0, 0.0, 1.0, 1.0, 1.0, 1.0])
        pruned = apply_hard_pruning(g)
        assert pruned["c1"].weight.data.shape == (5, 3, 3, 3)
        assert pruned["c1"].bias.data.shape == (5,)
        assert pruned["c1"].out_shape == (5, 8, 8)
        # dense consumes 5 surviving channels of 64 positions each
        assert pruned["f1"].weight.data.shape == (5 * 64, 4)
        assert pruned["fl"].out_shape == (320,)

    def test_noop_prune_only_folds_means(self):
        g = build(TINY, gated=True)
        mu = gate_pattern(g, "c1", [2.0, 1.0, 0.5, 1.5, 3.0, 0.25])
        pruned = apply_hard_pruning(g)
        assert pruned["c1"].gate is None
        assert np.array_equal(pruned["c1"].weight.data, g["c1"].weight.data)
        assert np.array_equal(pruned["c1"].bias.data, g["c1"].bias.data)
        folded = g["f1"].weight.data * np.repeat(mu, 64)[:, None]
        assert np.array_equal(pruned["f1"].weight.data, folded)
        assert np.array_equal(pruned["f1"].bias.data, g["f1"].bias.data)

    def test_fully_pruned_layer_names_itself(self):
        g = build(TINY, gated=True)
        gate_pattern(g, "c1", [0.0] * 6)
        with pytest.raises(StructuralError, match="every channel of layer 'c1'"):
            apply_hard_pruning(g)

    def test_original_graph_untouched(self):
        g = build(TINY, gated=True)
        gate_pattern(g, "c1", [1.0, 0.0, 1.0, 1.0, 1.0, 1.0])
        w_before = g["c1"].weight.data.copy()
        f_before = g["f1"].weight.data.copy()
        apply_hard_pruning(g)
        assert g["c1"].gate is not None
        assert np.array_equal(g["c1"].weight.data, w_before)
        assert np.array_equal(g["f1"].weight.data, f_before)

    def test_equivalence_through_maxpool(self):
        g = build(POOLED, gated=True, seed=5)
        gate_pattern(g, "c1", [0.7, 0.0, 1.3, 0.0, 0.5, 2.0])
        pruned = apply_hard_pruning(g)
        x = batch(g, 4)
        y0 = g.forward(x, mode="eval").data
        y1 = pruned.forward(x, mode="eval").data
        assert np.max(np.abs(y0 - y1)) <= 1e-4

    def test_equivalence_through_shared_skip(self):
        g = build(RESIDUAL, gated=True, seed=6)
        gate_pattern(g, "a", [1.1, 0.0, 0.8, 1.3])  # shared with b2
        pruned = apply_hard_pruning(g)
        assert pruned["a"].weight.data.shape[0] == 3
        assert pruned["b2"].weight.data.shape[0] == 3
        assert pruned["b1"].weight.data.shape == (4, 3, 3, 3)
        x = batch(g, 4)
        y0 = g.forward(x, mode="eval").data
        y1 = pruned.forward(x, mode="eval").data
        assert np.max(np.abs(y0 - y1)) <= 1e-4

    def test_unshared_skip_masks_conflict(self):
        text = ("input 3x8x8\nconv name=a out=4 k=3 pad=1 gate=0\n"
                "conv name=b out=4 k=3 pad=1 act=none\nadd name=r from=a,b\n"
                "flatten\ndense name=f out=3 act=none gate=0")
        g = build(text, gated=True)
        gate_pattern(g, "b", [1.0, 0.0, 1.0, 1.0])
        with pytest.raises(StructuralError, match="disagree on pruned"):
            apply_hard_pruning(g)

    def test_pruned_arch_text_rebuilds(self):
        g = build(POOLED, gated=True, quantized=True, seed=5)
        gate_pattern(g, "c1", [0.7, 0.0, 1.3, 0.0, 0.5, 2.0])
        pruned = apply_hard_pruning(g)
        rebuilt = build(pruned.arch_text, quantized=True)
        assert rebuilt["c1"].out_shape == (4, 8, 8)
        assert rebuilt["c1"].gate is None  # emitted text says gate=0
        y = rebuilt.forward(batch(g), mode="eval")
        assert y.data.shape == (2, 4)

    def test_pruned_graph_keeps_quantizers(self):
        g = build(POOLED, gated=True, quantized=True, seed=5)
        gate_pattern(g, "c1", [0.7, 0.0, 1.3, 0.0, 0.5, 2.0])
        pruned = apply_hard_pruning(g)
        assert pruned["c1"].weight_quant is not None
        assert pruned["c1"].weight_quant is not g["c1"].weight_quant
        y = pruned.forward(batch(g), mode="eval")
        assert np.isfinite(y.data).all()


class TestStatePersistence:
    def test_round_trip_restores_forward_bitwise(self):
        g = build(POOLED, gated=True, quantized=True, seed=5)
        other = build(POOLED, gated=True, quantized=True, seed=99)
        other.load_state_items(dict(g.state_items()))
        x = batch(g)
        assert np.array_equal(g.forward(x, mode="eval").data,
                              other.forward(x, mode="eval").data)
        for (k1, a1), (k2, a2) in zip(g.state_items(), other.state_items()):
            assert k1 == k2 and np.array_equal(a1, a2)

    def test_quantizer_scalars_round_trip_float64(self):
        from djpq.quantizer import QuantizerState
        g = build(TINY, quantized=True)
        g["c1"].weight_quant = QuantizerState(
            0.1, 1.7, exponent=1.3, dead_zone=0.007, signed=True,
            trainable=True)
        other = build(TINY, quantized=True, seed=2)
        other.load_state_items(dict(g.state_items()))
        q = other["c1"].weight_quant
        assert (q.step_size, q.max_range, q.exponent, q.dead_zone) == \
            (0.1, 1.7, 1.3, 0.007)

    def test_shared_gates_stay_shared(self):
        g = build(RESIDUAL, gated=True, seed=1)
        other = build(RESIDUAL, gated=True, seed=2)
        other.load_state_items(dict(g.state_items()))
        assert other["a"].gate is other["b2"].gate
        assert np.array_equal(other["a"].gate.mu.data, g["a"].gate.mu.data)

    def test_missing_key_rejected(self):
        g = build(TINY, quantized=True)
        items = dict(g.state_items())
        del items["c1.weight"]
        with pytest.raises(ContractError, match="missing: c1.weight"):
            g.load_state_items(items)

    def test_unexpected_key_rejected(self):
        g = build(TINY)
        items = dict(g.state_items())
        items["bogus"] = np.zeros(3, dtype=np.float32)
        with pytest.raises(ContractError, match="unexpected: bogus"):
            g.load_state_items(items)

    def test_shape_mismatch_rejected(self):
        g = build(TINY)
        items = dict(g.state_items())
        items["c1.weight"] = np.zeros((2, 2), dtype=np.float32)
        with pytest.raises(ContractError, match="c1.weight"):
            g.load_state_items(items)


class TestEmit:
    def test_emit_is_a_fixpoint(self):
        for name in ("vgg7.arch", "resnet18.arch", "vgg_mini.arch"):
            t1 = emit_architecture(build(preset_text(name)))
            t2 = emit_architecture(build(t1))
            assert t1 == t2

    def test_emit_preserves_topology_and_flags(self):
        g = build(preset_text("vgg7.arch"))
        g2 = build(emit_architecture(g))
        assert [n.name for n in g2.nodes] == [n.name for n in g.nodes]
        assert g2["f2"].gated is False
        assert g2.input_bits == 8.0
        assert g2["c1"].out_shape == (128, 32, 32)
