"""Stage assembly and the end-to-end denoising pipeline.

A model with T stages runs:

    y_1 = y
    (C_i, N_i) = stage_i(y_i)            clean and noise branches
    y_{i+1}    = fusion_i(y_1, C_i, N_i)  for i < T (when fusion is on)

and the last stage's clean prediction C_T is the denoised image. With
fusion disabled (the ablated variant) stage i+1 consumes C_i directly.
Every stage gets an independent pair of branch stacks; the original noisy
input y_1 is an argument of every fusion call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks
from .tensor import Tensor

DEFAULT_BRANCH_WIDTHS = (32, 64, 128, 256, 256, 128, 64, 32)


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 2
    image_channels: int = 1
    branch_widths: tuple[int, ...] = DEFAULT_BRANCH_WIDTHS
    fusion_width: int = 32
    slope: float = 0.25
    fusion_dropout_elem: float = 0.05
    fusion_dropout_chan: float = 0.05
    fusion_enabled: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.image_channels not in (1, 3):
            raise ValueError("image_channels must be 1 (gray) or 3 (color)")
        if len(self.branch_widths) < 1 or min(self.branch_widths) < 1:
            raise ValueError("branch_widths must be nonempty positive ints")
        if self.fusion_width < 1:
            raise ValueError("fusion_width must be >= 1")
        object.__setattr__(self, "branch_widths", tuple(self.branch_widths))

    def branch_spec(self):
        return blocks.make_branch_spec(self.image_channels, self.branch_widths,
                                       self.slope)

    def fusion_spec(self):
        return blocks.make_fusion_spec(
            self.image_channels, self.fusion_width, self.slope,
            dropout_elem_p=self.fusion_dropout_elem,
            dropout_chan_p=self.fusion_dropout_chan,
        )

    def fusion_count(self):
        return self.stages - 1 if self.fusion_enabled else 0


@dataclass
class StageOutput:
    """One stage's pair of predictions, each shaped like the stage input."""

    clean: Tensor
    noise: Tensor


class Parameters:
    """Ordered store of named values: learnable tensors plus batch-norm
    running statistics (plain arrays, mutated in place during training)."""

    def __init__(self):
        self._items: dict[str, Tensor | np.ndarray] = {}

    def add(self, name, value):
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._items[name] = value

    def __getitem__(self, name):
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def __len__(self):
        return len(self._items)

    def names(self):
        return list(self._items)

    def items(self):
        return self._items.items()

    def trainable(self):
        """(name, tensor) pairs of learnable entries, in creation order."""
        return [(n, v) for n, v in self._items.items()
                if isinstance(v, Tensor) and v.requires_grad]

    def zero_grad(self):
        for _, t in self.trainable():
            t.zero_grad()

    def total_parameter_count(self):
        return sum(int(t.size) for _, t in self.trainable())


def _stage_prefixes(i):
    return f"stage{i}.clean", f"stage{i}.noise"


def model_init(config, seed, dtype=np.float32):
    """Build all parameters, deterministically under ``seed``.

    Conv weights are fan-in-scaled uniform with the leaky-relu gain,
    biases zero, BN gamma 1 / beta 0, running stats (0, 1). Creation
    order follows the pipeline: stage 1, fusion 1, stage 2, ...
    """
    params = Parameters()
    rng = np.random.default_rng(seed)
    branch = config.branch_spec()
    fusion = config.fusion_spec()
    for i in range(1, config.stages + 1):
        clean_p, noise_p = _stage_prefixes(i)
        blocks.init_conv_stack(params, clean_p, branch, rng, dtype)
        blocks.init_conv_stack(params, noise_p, branch, rng, dtype)
        if config.fusion_enabled and i < config.stages:
            blocks.init_fusion_block(params, f"fusion{i}", fusion, rng, dtype)
    return params


def stage_forward(params, config, stage_index, y_i, phase, rng=None):
    """Run stage ``stage_index`` (1-based) on its input image."""
    if y_i.shape[1] != config.image_channels:
        raise ValueError(
            f"stage input has {y_i.shape[1]} channels, model expects "
            f"{config.image_channels}"
        )
    branch = config.branch_spec()
    clean_p, noise_p = _stage_prefixes(stage_index)
    c_i = blocks.branch_block_forward(params, clean_p, branch, y_i, phase, rng)
    n_i = blocks.branch_block_forward(params, noise_p, branch, y_i, phase, rng)
    return StageOutput(clean=c_i, noise=n_i)


def model_forward(params, config, y, phase, rng=None):
    """Run the full pipeline.

    Returns (stage outputs, final clean prediction). The list has one
    StageOutput per stage so a stage-wise loss can supervise every pair.
    """
    fusion = config.fusion_spec()
    y1 = y
    y_i = y
    outputs = []
    for i in range(1, config.stages + 1):
        out = stage_forward(params, config, i, y_i, phase, rng)
        outputs.append(out)
        if i < config.stages:
            if config.fusion_enabled:
                y_i = blocks.fusion_forward(
                    params, f"fusion{i}", fusion, y1, out.clean, out.noise,
                    phase, rng)
            else:
                y_i = out.clean
    return outputs, outputs[-1].clean


def count_parameters(config):
    """Closed-form trainable scalar count from the width schedules."""
    branch = blocks.conv_stack_parameter_count(config.branch_spec())
    total = 2 * branch * config.stages
    total += config.fusion_count() * blocks.fusion_parameter_count(
        config.fusion_spec())
    return total
