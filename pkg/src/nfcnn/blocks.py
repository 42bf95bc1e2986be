"""Composite convolutional blocks.

Two kinds of building block make up the denoiser:

* branch stacks: a fixed-depth pile of [3x3 conv -> batch norm -> leaky
  relu] layers whose widths double up to a plateau and fall back down,
  ending in a plain conv that emits the prediction;
* the fusion block joining two consecutive stages. Its first layer
  encodes each input alone (stacks A1-A3) and each unordered pair of
  inputs (stacks B1-B3); the six feature maps are concatenated into
  stack C, whose output is concatenated with the three raw inputs and
  decoded by stack D into the next stage's input image.

Parameters live in a flat name -> tensor mapping; the functions here
address them as ``{prefix}.layer{j}.{weight|bias|gamma|beta|run_mean|
run_var}`` with 1-based layer indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    batch_norm2d,
    concat_channels,
    conv2d,
    dropout,
    leaky_relu,
)

KERNEL_SIZE = 3

PHASES = ("train", "eval")


def _check_phase(phase):
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")


@dataclass(frozen=True)
class ConvStackSpec:
    """Structure of one conv stack (not its weights).

    ``widths`` optionally fixes each layer's output channel count; when
    omitted, layers 1..layer_count-1 use ``hidden_channels`` and the last
    uses ``out_channels``. With ``final_layer_plain`` the last conv has no
    normalization, activation, or dropout.
    """

    layer_count: int
    in_channels: int
    hidden_channels: int
    out_channels: int
    slope: float = 0.25
    final_layer_plain: bool = False
    dropout_elem_p: float = 0.0
    dropout_chan_p: float = 0.0
    widths: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        if min(self.in_channels, self.hidden_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be >= 1")
        if self.widths is not None:
            if len(self.widths) != self.layer_count:
                raise ValueError("widths must list one output width per layer")
            if self.widths[-1] != self.out_channels:
                raise ValueError("widths[-1] must equal out_channels")

    def layer_widths(self):
        """Output channel count of each layer."""
        if self.widths is not None:
            return tuple(self.widths)
        return (self.hidden_channels,) * (self.layer_count - 1) + (self.out_channels,)

    def layer_pairs(self):
        """(in_channels, out_channels) per layer."""
        outs = self.layer_widths()
        ins = (self.in_channels,) + outs[:-1]
        return tuple(zip(ins, outs))

    def has_norm(self, layer_index):
        """Whether 1-based layer ``layer_index`` carries BN + activation."""
        return not (self.final_layer_plain and layer_index == self.layer_count)


def make_branch_spec(image_channels, widths=(32, 64, 128, 256, 256, 128, 64, 32),
                     slope=0.25):
    """Stack spec for one prediction branch: hidden widths plus a plain
    conv back to the image channel count."""
    widths = tuple(widths)
    return ConvStackSpec(
        layer_count=len(widths) + 1,
        in_channels=image_channels,
        hidden_channels=widths[0],
        out_channels=image_channels,
        slope=slope,
        final_layer_plain=True,
        widths=widths + (image_channels,),
    )


@dataclass(frozen=True)
class FusionBlockParams:
    """Structure of one fusion block: its eight sub-stacks."""

    image_channels: int
    a_specs: tuple[ConvStackSpec, ConvStackSpec, ConvStackSpec]
    b_specs: tuple[ConvStackSpec, ConvStackSpec, ConvStackSpec]
    c_spec: ConvStackSpec
    d_spec: ConvStackSpec

    def stacks(self):
        """(name, spec) pairs in parameter order."""
        named = [(f"A{i}", s) for i, s in enumerate(self.a_specs, start=1)]
        named += [(f"B{i}", s) for i, s in enumerate(self.b_specs, start=1)]
        named += [("C", self.c_spec), ("D", self.d_spec)]
        return named


def make_fusion_spec(image_channels, feature_width=32, slope=0.25,
                     dropout_elem_p=0.05, dropout_chan_p=0.05):
    """Fusion block structure: encoder depths 3 (A) and 4 (B), joint
    encoder depth 5 (C), decoder depth 6 (D)."""
    f = feature_width
    c = image_channels

    def stack(depth, in_ch, out_ch, plain):
        return ConvStackSpec(
            layer_count=depth,
            in_channels=in_ch,
            hidden_channels=f,
            out_channels=out_ch,
            slope=slope,
            final_layer_plain=plain,
            dropout_elem_p=dropout_elem_p,
            dropout_chan_p=dropout_chan_p,
        )

    a = stack(3, c, f, plain=False)
    b = stack(4, 2 * c, f, plain=False)
    c_stack = stack(5, 6 * f, f, plain=False)
    # D emits the next stage's input image, so its last conv is plain.
    d = stack(6, f + 3 * c, c, plain=True)
    return FusionBlockParams(
        image_channels=c, a_specs=(a, a, a), b_specs=(b, b, b),
        c_spec=c_stack, d_spec=d,
    )


def _kaiming_uniform_bound(fan_in, slope):
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    return gain * math.sqrt(3.0 / fan_in)


def init_conv_stack(params, prefix, spec, rng, dtype=np.float32):
    """Create one stack's tensors under ``prefix`` in creation order."""
    for j, (c_in, c_out) in enumerate(spec.layer_pairs(), start=1):
        bound = _kaiming_uniform_bound(c_in * KERNEL_SIZE * KERNEL_SIZE, spec.slope)
        w = rng.uniform(-bound, bound, (c_out, c_in, KERNEL_SIZE, KERNEL_SIZE))
        params.add(f"{prefix}.layer{j}.weight",
                   Tensor(w.astype(dtype), requires_grad=True))
        params.add(f"{prefix}.layer{j}.bias",
                   Tensor(np.zeros(c_out, dtype), requires_grad=True))
        if spec.has_norm(j):
            params.add(f"{prefix}.layer{j}.gamma",
                       Tensor(np.ones(c_out, dtype), requires_grad=True))
            params.add(f"{prefix}.layer{j}.beta",
                       Tensor(np.zeros(c_out, dtype), requires_grad=True))
            params.add(f"{prefix}.layer{j}.run_mean", np.zeros(c_out, dtype))
            params.add(f"{prefix}.layer{j}.run_var", np.ones(c_out, dtype))


def conv_stack_forward(params, prefix, spec, x, phase, rng=None):
    """Run one stack. ``rng`` is only consumed by train-phase dropout."""
    _check_phase(phase)
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"{prefix}: expected {spec.in_channels} input channels, "
            f"got {x.shape[1]}"
        )
    training = phase == "train"
    h = x
    for j in range(1, spec.layer_count + 1):
        h = conv2d(h, params[f"{prefix}.layer{j}.weight"],
                   params[f"{prefix}.layer{j}.bias"])
        if not spec.has_norm(j):
            continue
        h = batch_norm2d(
            h,
            params[f"{prefix}.layer{j}.gamma"],
            params[f"{prefix}.layer{j}.beta"],
            run_mean=params[f"{prefix}.layer{j}.run_mean"],
            run_var=params[f"{prefix}.layer{j}.run_var"],
            training=training,
        )
        h = leaky_relu(h, spec.slope)
        if training and spec.dropout_elem_p > 0.0:
            h = dropout(h, spec.dropout_elem_p, "elementwise", True, rng)
        if training and spec.dropout_chan_p > 0.0:
            h = dropout(h, spec.dropout_chan_p, "channelwise", True, rng)
    return h


def branch_block_forward(params, prefix, spec, x, phase, rng=None):
    """One prediction branch; spatial size and channel count are preserved."""
    out = conv_stack_forward(params, prefix, spec, x, phase, rng)
    if out.shape != x.shape:
        raise ValueError(f"{prefix}: branch changed shape {x.shape} -> {out.shape}")
    return out


def init_fusion_block(params, prefix, fusion, rng, dtype=np.float32):
    for name, spec in fusion.stacks():
        init_conv_stack(params, f"{prefix}.{name}", spec, rng, dtype)


def fusion_forward(params, prefix, fusion, y1, c_i, n_i, phase, rng=None):
    """Mix the original noisy input with one stage's two predictions.

    Pairing: (y1, c_i) -> B1 with the left-out n_i -> A1, (y1, n_i) -> B2
    with c_i -> A2, (c_i, n_i) -> B3 with y1 -> A3. Each input appears in
    exactly two pairs and one single. The C stack encodes all six feature
    maps; D decodes C's output concatenated with the three raw inputs.
    """
    _check_phase(phase)
    if y1.shape != c_i.shape or y1.shape != n_i.shape:
        raise ValueError(
            f"fusion inputs must share one shape, got {y1.shape}, "
            f"{c_i.shape}, {n_i.shape}"
        )
    b_inputs = (
        concat_channels([y1, c_i]),
        concat_channels([y1, n_i]),
        concat_channels([c_i, n_i]),
    )
    a_inputs = (n_i, c_i, y1)

    encoded = []
    for i in range(3):
        encoded.append(conv_stack_forward(
            params, f"{prefix}.B{i + 1}", fusion.b_specs[i], b_inputs[i],
            phase, rng))
    for i in range(3):
        encoded.append(conv_stack_forward(
            params, f"{prefix}.A{i + 1}", fusion.a_specs[i], a_inputs[i],
            phase, rng))

    joint = conv_stack_forward(
        params, f"{prefix}.C", fusion.c_spec, concat_channels(encoded),
        phase, rng)
    d_in = concat_channels([joint, y1, c_i, n_i])
    return conv_stack_forward(params, f"{prefix}.D", fusion.d_spec, d_in,
                              phase, rng)


def conv_stack_parameter_count(spec):
    """Trainable scalar count of one stack (conv + BN affine)."""
    total = 0
    for j, (c_in, c_out) in enumerate(spec.layer_pairs(), start=1):
        total += c_out * c_in * KERNEL_SIZE * KERNEL_SIZE + c_out
        if spec.has_norm(j):
            total += 2 * c_out
    return total


def fusion_parameter_count(fusion):
    return sum(conv_stack_parameter_count(s) for _, s in fusion.stacks())
