"""Bottleneck residual classifiers (50 weighted layers by default) in 2D or 3D."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .graph import LayerGraph, LayerNode, init_parameters, propagate_shapes

PROBE_LABELS = ("first", "middle", "last")
STEM_ALIGNMENTS = ("symmetric", "shifted")


@dataclass
class ResnetConfig:
    dim: int = 2
    blocks: list[int] = field(default_factory=lambda: [3, 4, 6, 3])
    base_width: int = 64
    width_multiplier: Fraction | float | str = 1
    in_channels: int = 1
    spatial: list[int] = field(default_factory=lambda: [128, 128])
    stem_pool: bool = True
    stage_strides: list[int] = field(default_factory=lambda: [1, 2, 2, 2])
    expansion: int = 4
    # "shifted" moves one unit of stem padding from the leading to the trailing side
    stem_alignment: str = "symmetric"

    def __post_init__(self):
        self.width_multiplier = Fraction(str(self.width_multiplier))
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if len(self.spatial) != self.dim:
            raise ValueError(f"spatial extents {self.spatial} do not match dim={self.dim}")
        if self.width_multiplier <= 0:
            raise ValueError("width multiplier must be positive")
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            raise ValueError(f"expected four stages with >= 1 block each, got {self.blocks}")
        if len(self.stage_strides) != 4 or not set(self.stage_strides) <= {1, 2}:
            raise ValueError(f"stage_strides must be four entries from {{1, 2}}, got {self.stage_strides}")
        if self.stem_alignment not in STEM_ALIGNMENTS:
            raise ValueError(f"stem_alignment must be one of {STEM_ALIGNMENTS}, got {self.stem_alignment!r}")

    def width(self, channels: int) -> int:
        w = round(channels * self.width_multiplier)
        if w < 1:
            raise ValueError(f"width multiplier {self.width_multiplier} collapses {channels} channels to zero")
        return int(w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width_multiplier"] = str(self.width_multiplier)
        return d


def _conv(node_id, src, out_channels, kernel, stride, padding, dim, role="", bias=False):
    return LayerNode(
        node_id,
        "conv",
        [src],
        {"out_channels": out_channels, "kernel": [kernel] * dim, "stride": [stride] * dim,
         "padding": [padding] * dim, "bias": bias},
        role,
    )


def _conv_bn(nodes, prefix, src, out_channels, kernel, stride, padding, dim, relu=True, role=""):
    nodes.append(_conv(f"{prefix}", src, out_channels, kernel, stride, padding, dim, role))
    bn_id = f"{prefix}_bn" if role else prefix.replace("conv", "bn")
    nodes.append(LayerNode(bn_id, "bn", [prefix], {}, role))
    if not relu:
        return bn_id
    relu_id = prefix.replace("conv", "relu")
    nodes.append(LayerNode(relu_id, "relu", [bn_id]))
    return relu_id


def build_resnet(config: ResnetConfig, seed: int = 0) -> LayerGraph:
    """Stem + four bottleneck stages + global average pool + single-logit head.

    Default downsampling is the standard schedule: stem conv stride 2, stem
    max-pool stride 2, stride 2 on the 3x3 conv of the first block in stages
    3-5. ``stem_pool`` and ``stage_strides`` trade that schedule for a finer
    last feature grid. Node ids follow ``stage{s}.block{b}.{layer}``; the stem
    is stage 1.

    With symmetric padding a stride-2 layer centres output j on input 2j.
    ``stem_alignment="shifted"`` pads the stem conv (2, 4) and the stem pool
    (0, 2) instead, which centres both on 2j + 1 without changing any extent.
    Behind a stride-2 stage 3 (three halvings) feature cell i then sits on
    input 8i + 3, half a voxel from the 8i + 3.5 where pixel-centre
    upsampling of a CAM puts it; symmetric padding leaves it at 8i.
    """
    dim = config.dim
    nodes = [LayerNode("input", "input", [])]
    stem_c = config.width(config.base_width)
    shifted = config.stem_alignment == "shifted"
    src = _conv_bn(nodes, "stem.conv", "input", stem_c, 7, 2, [2, 4] if shifted else 3, dim)
    if config.stem_pool:
        pad = [[0, 2] if shifted else 1] * dim
        nodes.append(LayerNode("stem.pool", "maxpool", [src], {"window": [3] * dim, "stride": [2] * dim, "padding": pad}))
        src = "stem.pool"
    stem_out = src
    in_c = stem_c
    stage_outputs = {}
    for s, nblocks in enumerate(config.blocks):
        stage = s + 2
        mid = config.width(config.base_width * 2**s)
        out_c = mid * config.expansion
        for b in range(1, nblocks + 1):
            stride = config.stage_strides[s] if b == 1 else 1
            p = f"stage{stage}.block{b}"
            x = _conv_bn(nodes, f"{p}.conv1", src, mid, 1, 1, 0, dim)
            x = _conv_bn(nodes, f"{p}.conv2", x, mid, 3, stride, 1, dim)
            x = _conv_bn(nodes, f"{p}.conv3", x, out_c, 1, 1, 0, dim, relu=False)
            shortcut = src
            if stride != 1 or in_c != out_c:
                shortcut = _conv_bn(nodes, f"{p}.proj", src, out_c, 1, stride, 0, dim, relu=False, role="shortcut")
            nodes.append(LayerNode(f"{p}.add", "add", [x, shortcut]))
            nodes.append(LayerNode(f"{p}.out", "relu", [f"{p}.add"]))
            src = f"{p}.out"
            in_c = out_c
        stage_outputs[stage] = src
    nodes.append(LayerNode("gap", "gap", [src]))
    nodes.append(LayerNode("head", "dense", ["gap"], {"units": 1}))

    signature = (config.in_channels, tuple(config.spatial))
    _check_extents(nodes, signature, stage_outputs)
    probes = {
        "first": "stem.relu",
        "middle": stage_outputs[3],
        "last": stage_outputs[5],
        "stem": stem_out,
    }
    cfg = {"family": "resnet", **config.to_dict()}
    g = LayerGraph(f"resnet{dim}d", signature, nodes, "head", probes, cfg)
    init_parameters(g, seed)
    return g


def _check_extents(nodes, signature, stage_outputs):
    """Reject inputs too small for the stride schedule.

    Padded convs and pools never produce an extent below 1 by formula, so a
    stride-s layer applied to an extent smaller than s (in / s < 1) counts as
    the collapse.
    """
    shapes = propagate_shapes(nodes, signature)
    for n in nodes:
        stride = n.hp.get("stride")
        if not stride or n.role == "shortcut":
            continue
        extents = shapes[n.inputs[0]][1:]
        for d, (e, s) in enumerate(zip(extents, stride)):
            if e < s:
                stage = n.id.split(".")[0]
                raise ValueError(
                    f"spatial extents collapse below 1 in {stage} (node {n.id}, dim {d}: extent {e} at stride {s}); "
                    "use a larger input or fewer downsampling steps"
                )


def select_probe_layer(model: LayerGraph, which: str) -> str:
    """Node id used as a CAM probe.

    ``first``: stem conv unit (post-ReLU); ``middle``: output of the last
    bottleneck unit of stage 3; ``last``: output of the last unit of stage 5,
    right before global pooling.
    """
    if model.config.get("family") != "resnet":
        raise ValueError("probe selection by first/middle/last needs a resnet classifier")
    if which not in PROBE_LABELS:
        raise ValueError(f"unknown probe label {which!r}; expected one of {PROBE_LABELS}")
    return model.probes[which]
