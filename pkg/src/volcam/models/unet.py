"""Two-class 2D U-Net with configurable depth and width."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .graph import LayerGraph, LayerNode, init_parameters


@dataclass
class UnetConfig:
    depth: int = 4
    base_channels: int = 16
    classes: int = 2
    in_channels: int = 1
    spatial: list[int] = field(default_factory=lambda: [128, 128])

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("U-Net depth must be >= 1")
        if self.classes != 2:
            raise ValueError("the segmenter is two-class")
        if len(self.spatial) != 2:
            raise ValueError("the segmenter takes 2D slices")
        step = 2**self.depth
        for s in self.spatial:
            if s % step:
                raise ValueError(f"input extent {s} is not divisible by 2^depth = {step}")


def _block(nodes, prefix, src, channels):
    for i in (1, 2):
        nodes.append(LayerNode(f"{prefix}.conv{i}", "conv", [src],
                               {"out_channels": channels, "kernel": [3, 3], "stride": [1, 1], "padding": [1, 1], "bias": False}))
        nodes.append(LayerNode(f"{prefix}.bn{i}", "bn", [f"{prefix}.conv{i}"]))
        nodes.append(LayerNode(f"{prefix}.relu{i}", "relu", [f"{prefix}.bn{i}"]))
        src = f"{prefix}.relu{i}"
    return src


def build_unet(config: UnetConfig, seed: int = 0) -> LayerGraph:
    """Encoder (conv blocks + 2x max-pool), bottleneck, decoder (2x nearest
    upsample, skip concatenation, conv block) and a 1x1 conv to class logits
    followed by a channel softmax.

    Probes: ``bottleneck`` (deepest block output) and ``logits`` (pre-softmax).
    """
    nodes = [LayerNode("input", "input", [])]
    src = "input"
    skips = []
    for level in range(config.depth):
        src = _block(nodes, f"enc{level}", src, config.base_channels * 2**level)
        skips.append(src)
        nodes.append(LayerNode(f"enc{level}.pool", "maxpool", [src], {"window": [2, 2], "stride": [2, 2], "padding": [0, 0]}))
        src = f"enc{level}.pool"
    src = _block(nodes, "bottleneck", src, config.base_channels * 2**config.depth)
    bottleneck = src
    for level in reversed(range(config.depth)):
        nodes.append(LayerNode(f"dec{level}.up", "upsample", [src], {"factor": [2, 2], "mode": "nearest"}))
        nodes.append(LayerNode(f"dec{level}.cat", "concat", [f"dec{level}.up", skips[level]]))
        src = _block(nodes, f"dec{level}", f"dec{level}.cat", config.base_channels * 2**level)
    nodes.append(LayerNode("logits", "conv", [src],
                           {"out_channels": config.classes, "kernel": [1, 1], "stride": [1, 1], "padding": [0, 0], "bias": True}))
    nodes.append(LayerNode("probs", "softmax", ["logits"]))
    cfg = {"family": "unet", **asdict(config)}
    g = LayerGraph("unet2d", (config.in_channels, tuple(config.spatial)), nodes, "probs",
                   {"bottleneck": bottleneck, "logits": "logits"}, cfg)
    init_parameters(g, seed)
    return g
