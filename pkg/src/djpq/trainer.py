"""Joint compression training.

The loss couples cross-entropy with the variational-bottleneck pruning
penalty and a differentiable bit-operation budget: soft pruning ratios
stand in for hard channel removal and smooth (rounding-free) bit-widths
stand in for the quantizer's exact grid, so one SGD pass moves weights,
gate distributions, and quantizer parameters together. Parameter groups
run at scaled learning rates off one base rate; strengths anneal once
per epoch. The two-stage baseline (prune, then quantize) and the export
path (hard prune, freeze bit-widths, measure) live here too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, clear_tape, no_grad, sgd_step
from .config import TrainConfig, load_arch_text
from .datasets import BatchStream
from .errors import ContractError, DivergenceError, StructuralError
from .gates import hard_prune_ratio, soft_prune_ratio, vib_regularizer
from .metrics import LayerSpec, model_report
from .network import NetworkGraph, apply_hard_pruning
from .quantizer import (QuantizerState, adjust_pow2, calibrated_state,
                        effective_bitwidth, surrogate_bitwidth)

DIVERGENCE_LIMIT = 1e4


@dataclass
class TrainState:
    """Mutable loop state: live strengths, optimizer memory, epoch count.

    Annealing touches gamma and beta only; velocity buffers and the
    epoch counter belong to the optimizer and are never annealed.
    """

    gamma: float
    beta: float
    lr: float
    lr_scale_prune: float = 1.0
    lr_scale_quant: float = 1.0
    momentum: float = 0.0
    anneal: float = 1.0
    restricted: bool = False
    epoch: int = 0
    velocity: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg) -> "TrainState":
        baseline = cfg.mode == "float-baseline"
        return cls(gamma=0.0 if baseline else cfg.gamma,
                   beta=0.0 if baseline else cfg.beta,
                   lr=cfg.lr,
                   lr_scale_prune=cfg.lr_scale_prune,
                   lr_scale_quant=cfg.lr_scale_quant,
                   momentum=cfg.momentum,
                   anneal=cfg.anneal,
                   restricted=cfg.mode == "djpq-restrict")

    def step_param(self, param, lr_scale=1.0):
        """One descent step on a Tensor, honoring momentum."""
        if param.grad is None:
            return
        if self.momentum > 0.0:
            v = self.velocity.get(id(param))
            if v is None:
                v = np.zeros_like(param.data)
            v = np.float32(self.momentum) * v + param.grad
            self.velocity[id(param)] = v
            param.data -= np.float32(self.lr * lr_scale) * v
            param.grad = None
        else:
            sgd_step(param, self.lr, lr_scale)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    gamma: float
    beta: float
    surrogate_bops: float
    bits: dict    # layer -> (weight bits, activation bits)
    prune: dict   # gate owner -> hard pruning ratio


def _static_cost(n) -> float:
    if n.kind == "conv":
        c_out, c_in, k_h, k_w = n.weight.data.shape
        m_h, m_w = n.out_shape[1], n.out_shape[2]
    else:
        c_in, c_out = n.weight.data.shape
        k_h = k_w = m_h = m_w = 1
    return float(c_in * c_out * k_h * k_w * m_h * m_w)


def surrogate_bop_terms(graph, literal_sign=False):
    """Differentiable per-layer BOP terms as (name, Tensor) pairs.

    Each term is the layer's static MAC count scaled by soft pruning
    ratios of both gate ends and by the smooth bit-widths of its weight
    quantizer and incoming activation quantizer.
    """
    terms = []
    for n in graph.weighted_nodes():
        term = Tensor(np.float32(_static_cost(n)))
        in_gate = graph.input_gate(n)
        if in_gate is not None:
            term = term * (1.0 - soft_prune_ratio(in_gate, literal_sign))
        if n.gate is not None:
            term = term * (1.0 - soft_prune_ratio(n.gate, literal_sign))
        if n.weight_quant is not None:
            term = term * surrogate_bitwidth(n.weight_quant)
        else:
            term = term * 32.0
        in_quant = graph.input_act_quant(n)
        if in_quant is not None:
            term = term * surrogate_bitwidth(in_quant)
        elif graph._gate_owner(n.preds[0]) is None and graph.is_quantized:
            term = term * float(graph.input_bits)
        else:
            term = term * 32.0
        terms.append((n.name, term))
    return terms


def surrogate_bop_total(graph, literal_sign=False) -> float:
    with no_grad():
        return float(sum(t.item() for _, t in
                         surrogate_bop_terms(graph, literal_sign)))


def djpq_loss(logits, labels, gate_states, graph, cfg,
              gamma=None, beta=None) -> Tensor:
    """Cross-entropy plus gamma * VIB penalty plus beta * soft BOPs."""
    gamma = cfg.gamma if gamma is None else gamma
    beta = cfg.beta if beta is None else beta
    loss = ad.softmax_cross_entropy(logits, labels)
    if gamma > 0.0 and gate_states:
        loss = loss + vib_regularizer(gate_states) * gamma
    if beta > 0.0:
        total = None
        for _, term in surrogate_bop_terms(graph, cfg.literal_sign):
            total = term if total is None else total + term
        if total is not None:
            loss = loss + total * beta
    if not np.isfinite(loss.data):
        raise DivergenceError("loss is non-finite with finite activations; "
                              "check strengths and learning rates")
    return loss


def _epoch_bits(graph, restricted):
    bits = {}
    for n in graph.weighted_nodes():
        wq = n.weight_quant
        aq = n.act_quant
        if restricted:
            wq = adjust_pow2(wq) if wq is not None else None
            aq = adjust_pow2(aq) if aq is not None else None
        bits[n.name] = (effective_bitwidth(wq) if wq is not None else 32.0,
                        effective_bitwidth(aq) if aq is not None else 32.0)
    return bits


def train_epoch(graph, stream, cfg, rng, state=None) -> EpochStats:
    """One pass over the stream; anneals strengths afterwards."""
    state = state if state is not None else TrainState.from_config(cfg)
    gate_pairs = graph.gate_states()
    gate_states = [g for _, g in gate_pairs]
    quant_pairs = graph.quantizer_states()
    loss_sum = 0.0
    correct = 0
    seen = 0
    batches = 0
    try:
        for x, y in stream:
            logits = graph.forward(Tensor(x), mode="train", rng=rng,
                                   restricted=state.restricted)
            loss = djpq_loss(logits, y, gate_states, graph, cfg,
                             gamma=state.gamma, beta=state.beta)
            value = loss.item()
            if value > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"diverged: loss {value:.4g} exceeds "
                    f"{DIVERGENCE_LIMIT:g} at epoch {state.epoch}, "
                    f"batch {batches}")
            backward(loss)
            with no_grad():
                for _, p in graph.weight_parameters():
                    state.step_param(p)
                for g in gate_states:
                    state.step_param(g.mu, state.lr_scale_prune)
                    state.step_param(g.sigma, state.lr_scale_prune)
                    g.project()
                for _, q in quant_pairs:
                    q.apply_step(state.lr, state.lr_scale_quant)
            loss_sum += value
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += y.shape[0]
            batches += 1
    except Exception:
        clear_tape()
        raise
    if batches == 0:
        raise ContractError("train_epoch: data stream is empty")
    stats = EpochStats(
        epoch=state.epoch,
        loss=loss_sum / batches,
        accuracy=correct / seen,
        gamma=state.gamma,
        beta=state.beta,
        surrogate_bops=surrogate_bop_total(graph, cfg.literal_sign),
        bits=_epoch_bits(graph, state.restricted),
        prune={owner: hard_prune_ratio(g) for owner, g in gate_pairs})
    state.gamma *= state.anneal
    state.beta *= state.anneal
    state.epoch += 1
    return stats


def eval_accuracy(graph, images, labels, batch_size=256) -> float:
    """Top-1 accuracy in eval mode (gate means, running stats)."""
    correct = 0
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = Tensor(images[start:start + batch_size])
            logits = graph.forward(x, mode="eval")
            pred = logits.data.argmax(axis=1)
            correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / images.shape[0]


def _frozen_quantizer(q, restricted) -> QuantizerState:
    """Deployable copy: bit-width snapped up to an integer (a power of two
    when restricted), step size re-derived, parameters no longer trained."""
    base = adjust_pow2(q) if restricted else q
    b = effective_bitwidth(base)
    b_int = min(32, max(2 if base.signed else 1, math.ceil(b - 1e-9)))
    mapped = base.mapped_range()
    levels = (2 ** (b_int - 1) - 1) if base.signed else 2 ** b_int
    return QuantizerState(step_size=mapped / levels,
                          max_range=base.max_range,
                          exponent=base.exponent,
                          dead_zone=base.dead_zone,
                          signed=base.signed,
                          trainable=False)


def _export_specs(exported, baseline):
    """Report triples for a hard-pruned graph, with pruning expressed
    against the baseline channel counts so P_l survives the surgery."""
    names = [name for name, _, _ in baseline]
    nodes = exported.weighted_nodes()
    if names != [n.name for n in nodes]:
        raise StructuralError("exported graph does not align with baseline")
    triples = []
    for (name, base, _), n in zip(baseline, nodes):
        if n.kind == "conv":
            c_out, c_in, k_h, k_w = n.weight.data.shape
            m_h, m_w = n.out_shape[1], n.out_shape[2]
        else:
            c_in, c_out = n.weight.data.shape
            k_h = k_w = m_h = m_w = 1
        wq = n.weight_quant
        aq = n.act_quant
        spec = LayerSpec(
            kind=n.kind, c_in=base.c_in, c_out=base.c_out,
            k_w=k_w, k_h=k_h, m_w=m_w, m_h=m_h,
            weight_bits=effective_bitwidth(wq) if wq is not None else 32.0,
            input_act_bits=exported._input_bits(n, restricted=False),
            prune_in=1.0 - c_in / base.c_in,
            prune_out=1.0 - c_out / base.c_out)
        triples.append((name, spec,
                        effective_bitwidth(aq) if aq is not None else 32.0))
    return triples


def export_compressed(graph, baseline, eval_images=None, eval_labels=None,
                      restricted=False, batch_size=256):
    """Hard-prune, freeze bit-widths, measure. Returns (graph, report).

    baseline is the float-reference triple list the ratios divide by.
    The returned graph carries integer (pow2 when restricted) bit-widths
    and no gates; the input graph is left untouched.
    """
    exported = apply_hard_pruning(graph)
    for n in exported.weighted_nodes():
        if n.weight_quant is not None:
            n.weight_quant = _frozen_quantizer(n.weight_quant, restricted)
        if n.act_quant is not None:
            n.act_quant = _frozen_quantizer(n.act_quant, restricted)
    accuracy = 0.0
    if eval_images is not None:
        accuracy = eval_accuracy(exported, eval_images, eval_labels,
                                 batch_size)
    report = model_report(_export_specs(exported, baseline), baseline,
                          accuracy)
    return exported, report


def report_for_graph(graph, baseline, eval_images=None, eval_labels=None,
                     batch_size=256):
    """Deployment metrics of an already-exported graph (no surgery)."""
    accuracy = 0.0
    if eval_images is not None:
        accuracy = eval_accuracy(graph, eval_images, eval_labels, batch_size)
    return model_report(_export_specs(graph, baseline), baseline, accuracy)


@dataclass
class RunResult:
    """Everything a finished run hands to the CLI."""

    config: TrainConfig
    graph: NetworkGraph      # training-time graph (gates, live quantizers)
    exported: NetworkGraph   # hard-pruned, frozen-bit deployment graph
    report: object
    stats: list
    baseline: list


def _rngs(seed):
    init, gates, stream = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(gates),
            int(stream.generate_state(1)[0]))


def _adopt_weights(dst, src, bits):
    """Copy weighted-layer parameters from src into the aligned dst graph
    and recalibrate dst's weight quantizers on the copied tensors."""
    for n_src in src.weighted_nodes():
        n_dst = dst[n_src.name]
        for attr in ("weight", "bias", "bn_gamma", "bn_beta"):
            t_src = getattr(n_src, attr)
            if t_src is None:
                continue
            getattr(n_dst, attr).data[...] = t_src.data
        for attr in ("bn_mean", "bn_var"):  # raw arrays, not Tensors
            buf = getattr(n_src, attr)
            if buf is not None:
                getattr(n_dst, attr)[...] = buf
    for n in dst.weighted_nodes():
        if n.weight_quant is not None:
            n.weight_quant = calibrated_state(
                n.weight.data, bits,
                dead_zone=n.weight_quant.dead_zone,
                signed=True,
                trainable=n.weight_quant.step_param.requires_grad)


def _log(log, message):
    if log is not None:
        log(message)


def _stats_line(stats):
    width = max((v for pair in stats.bits.values() for v in pair),
                default=32.0)
    return (f"epoch {stats.epoch:3d}  loss {stats.loss:8.4f}  "
            f"acc {stats.accuracy:6.2%}  "
            f"bops {stats.surrogate_bops:12.4g}  max-bits {width:.2f}")


def _pretrain_float(arch_text, cfg, stream, rng_init, rng_gates, log):
    """Float warm-up; compression always starts from a trained model."""
    graph = NetworkGraph(arch_text, rng=rng_init)
    state = TrainState(gamma=0.0, beta=0.0, lr=cfg.lr,
                       momentum=cfg.momentum)
    stats = []
    _log(log, f"pretraining float model for {cfg.pretrain_epochs} epochs")
    for _ in range(cfg.pretrain_epochs):
        stats.append(train_epoch(graph, stream, cfg, rng_gates, state))
        _log(log, _stats_line(stats[-1]))
    return graph, stats


def two_stage_pipeline(cfg, train_split, test_split, log=None) -> RunResult:
    """Prune-only stage, hard prune, then quantize-only stage, export."""
    arch_text = load_arch_text(cfg.arch)
    rng_init, rng_gates, stream_seed = _rngs(cfg.seed)
    stream = BatchStream(train_split, cfg.batch_size, seed=stream_seed,
                         flip=cfg.flip)
    stats = []
    warm = None
    if cfg.pretrain_epochs > 0:
        warm, stats = _pretrain_float(arch_text, cfg, stream, rng_init,
                                      rng_gates, log)
    g1 = NetworkGraph(arch_text, rng=rng_init, gated=True, quantized=False,
                      alpha_th=cfg.alpha_th, tau=cfg.tau)
    baseline = g1.layer_specs(float_baseline=True)
    if warm is not None:
        _adopt_weights(g1, warm, cfg.b_init_w)
    s1 = cfg.stage1
    state = TrainState(gamma=s1.gamma, beta=0.0, lr=s1.lr,
                       lr_scale_prune=s1.lr_scale_prune,
                       momentum=cfg.momentum, anneal=cfg.anneal,
                       epoch=cfg.pretrain_epochs)
    _log(log, f"stage 1: pruning for {s1.epochs} epochs "
              f"(gamma={s1.gamma:g})")
    for _ in range(s1.epochs):
        stats.append(train_epoch(g1, stream, cfg, rng_gates, state))
        _log(log, _stats_line(stats[-1]))
    pruned = apply_hard_pruning(g1)

    s2 = cfg.stage2
    g2 = NetworkGraph(pruned.arch_text, rng=rng_init, quantized=True,
                      gated=False, weight_bits=cfg.b_init_w,
                      act_bits=cfg.b_init_a, alpha_th=cfg.alpha_th,
                      tau=cfg.tau)
    if s2.freeze_bits:
        # fixed-grid protocol: weights keep training, grids stay at init
        for _, q in g2.quantizer_states():
            for mirror in (q.step_param, q.range_param, q.exp_param):
                mirror.requires_grad = False
    _adopt_weights(g2, pruned, cfg.b_init_w)
    state = TrainState(gamma=0.0, beta=s2.beta, lr=s2.lr,
                       lr_scale_quant=s2.lr_scale_quant,
                       momentum=cfg.momentum, anneal=cfg.anneal,
                       epoch=cfg.pretrain_epochs + s1.epochs)
    _log(log, f"stage 2: quantizing for {s2.epochs} epochs "
              f"(beta={s2.beta:g}, frozen bits: {s2.freeze_bits})")
    for _ in range(s2.epochs):
        stats.append(train_epoch(g2, stream, cfg, rng_gates, state))
        _log(log, _stats_line(stats[-1]))
    exported, report = export_compressed(
        g2, baseline, test_split.images, test_split.labels)
    return RunResult(config=cfg, graph=g2, exported=exported, report=report,
                     stats=stats, baseline=baseline)


def run_mode(cfg, train_split, test_split, log=None) -> RunResult:
    """Dispatch one full training run according to cfg.mode."""
    if cfg.mode == "two-stage":
        return two_stage_pipeline(cfg, train_split, test_split, log)
    joint = cfg.mode in ("djpq", "djpq-restrict")
    arch_text = load_arch_text(cfg.arch)
    rng_init, rng_gates, stream_seed = _rngs(cfg.seed)
    stream = BatchStream(train_split, cfg.batch_size, seed=stream_seed,
                         flip=cfg.flip)
    stats = []
    # the warm-up graph takes the first weight draw so its float epochs
    # replay the float-baseline run exactly
    warm = None
    if cfg.pretrain_epochs > 0 and joint:
        warm, stats = _pretrain_float(arch_text, cfg, stream, rng_init,
                                      rng_gates, log)
    graph = NetworkGraph(arch_text, rng=rng_init, quantized=joint,
                         gated=joint, weight_bits=cfg.b_init_w,
                         act_bits=cfg.b_init_a, alpha_th=cfg.alpha_th,
                         tau=cfg.tau)
    baseline = graph.layer_specs(float_baseline=True)
    if warm is not None:
        _adopt_weights(graph, warm, cfg.b_init_w)
    state = TrainState.from_config(cfg)
    state.epoch = cfg.pretrain_epochs if joint else 0
    # the float baseline trains through the warm-up budget as well, so
    # both runs see the same number of passes over the data
    epochs = cfg.epochs if joint else cfg.pretrain_epochs + cfg.epochs
    _log(log, f"{cfg.mode}: {epochs} epochs on "
              f"{len(train_split)} samples")
    for _ in range(epochs):
        stats.append(train_epoch(graph, stream, cfg, rng_gates, state))
        _log(log, _stats_line(stats[-1]))
    exported, report = export_compressed(
        graph, baseline, test_split.images, test_split.labels,
        restricted=state.restricted)
    return RunResult(config=cfg, graph=graph, exported=exported,
                     report=report, stats=stats, baseline=baseline)


def matched_two_stage(cfg, train_split, test_split, target_bops,
                      tolerance=0.05, max_runs=4, log=None) -> RunResult:
    """Two-stage run tuned to land within tolerance of a BOP budget.

    Retunes the stage-2 bit pressure by secant steps on log(beta); the
    retry loop is deterministic, so matched comparisons stay
    reproducible. Returns the closest run if no retry lands inside."""
    history = []
    beta = cfg.stage2.beta
    best = None
    for attempt in range(max_runs):
        trial = replace(cfg, stage2=replace(cfg.stage2, beta=beta))
        result = two_stage_pipeline(trial, train_split, test_split, log)
        bops = result.report.total_bops
        gap = math.log(bops / target_bops)
        history.append((math.log(beta), gap))
        if best is None or abs(gap) < abs(best[0]):
            best = (gap, result)
        _log(log, f"matched run {attempt}: beta={beta:.3g} "
                  f"bops={bops:.4g} target={target_bops:.4g}")
        if abs(bops - target_bops) <= tolerance * target_bops:
            return result
        if len(history) >= 2 and history[-1][1] != history[-2][1]:
            (x0, f0), (x1, f1) = history[-2], history[-1]
            step = f1 * (x1 - x0) / (f1 - f0)
            step = max(-math.log(16.0), min(math.log(16.0), step))
            beta = math.exp(x1 - step)
        else:
            # more BOPs than target -> push harder, and vice versa
            beta = beta * (4.0 if gap > 0 else 0.25)
    return best[1]
