"""Layer graphs: a topologically ordered node list plus the parameters it owns."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .. import ops
from ..ops import BatchNormState
from ..tensor import Tape, Tensor, no_tape

FORMAT_VERSION = 1

# kinds that carry trainable weights and count toward the "weighted layer" total
WEIGHTED_KINDS = ("conv", "dense")


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list[str]
    hp: dict[str, Any] = field(default_factory=dict)
    role: str = ""

    def to_dict(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "inputs": list(self.inputs), "hp": self.hp}
        if self.role:
            d["role"] = self.role
        return d


@dataclass
class LayerGraph:
    kind: str
    input_signature: tuple[int, tuple[int, ...]]
    nodes: list[LayerNode]
    output: str
    probes: dict[str, str] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    params: dict[str, Tensor] = field(default_factory=dict)
    bn_state: dict[str, BatchNormState] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {n.id: n for n in self.nodes}
        if len(self._index) != len(self.nodes):
            raise ValueError("duplicate node ids in layer graph")
        seen: set[str] = set()
        inputs = [n for n in self.nodes if n.kind == "input"]
        if len(inputs) != 1:
            raise ValueError(f"layer graph needs exactly one input node, found {len(inputs)}")
        for n in self.nodes:
            for i in n.inputs:
                if i not in seen:
                    raise ValueError(f"node {n.id!r} consumes {i!r} before it is defined (graph not acyclic/ordered)")
            seen.add(n.id)
        if self.output not in self._index:
            raise ValueError(f"output node {self.output!r} missing")

    def node(self, node_id: str) -> LayerNode:
        return self._index[node_id]

    @property
    def spatial_rank(self) -> int:
        return len(self.input_signature[1])

    def weighted_layer_count(self) -> int:
        """Convolutions on the main path plus dense layers (projection shortcuts excluded)."""
        return sum(1 for n in self.nodes if n.kind in WEIGHTED_KINDS and n.role != "shortcut")

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- serialization -------------------------------------------------
    def to_descriptor(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "config": self.config,
            "input_signature": {"channels": self.input_signature[0], "spatial": list(self.input_signature[1])},
            "nodes": [n.to_dict() for n in self.nodes],
            "output": self.output,
            "probes": self.probes,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_descriptor(cls, text: str, seed: int = 0) -> "LayerGraph":
        doc = json.loads(text)
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported architecture descriptor version {version!r} (expected {FORMAT_VERSION})")
        sig = doc["input_signature"]
        nodes = [LayerNode(d["id"], d["kind"], list(d["inputs"]), dict(d["hp"]), d.get("role", "")) for d in doc["nodes"]]
        g = cls(
            kind=doc["kind"],
            input_signature=(int(sig["channels"]), tuple(int(s) for s in sig["spatial"])),
            nodes=nodes,
            output=doc["output"],
            probes=dict(doc["probes"]),
            config=dict(doc["config"]),
        )
        init_parameters(g, seed)
        return g

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.to_descriptor().encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()[:16]


# ----------------------------------------------------------------------
# shape propagation
# ----------------------------------------------------------------------

def node_param_shapes(node: LayerNode, in_shapes: list[tuple[int, ...]]) -> dict[str, tuple[int, ...]]:
    hp = node.hp
    if node.kind == "conv":
        cin = in_shapes[0][0]
        k = tuple(hp["kernel"])
        shapes = {"weight": (hp["out_channels"], cin) + k}
        if hp.get("bias", False):
            shapes["bias"] = (hp["out_channels"],)
        return shapes
    if node.kind == "bn":
        c = in_shapes[0][0]
        return {"gamma": (c,), "beta": (c,)}
    if node.kind == "dense":
        return {"weight": (in_shapes[0][0], hp["units"]), "bias": (hp["units"],)}
    return {}


def propagate_shape(node: LayerNode, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    """Per-sample output shape (channels, *spatial) of ``node``."""
    hp = node.hp
    kind = node.kind
    if kind == "conv":
        c, *sp = in_shapes[0]
        out = ops.conv_output_shape(sp, hp["kernel"], hp["stride"], hp["padding"])
        return (hp["out_channels"],) + tuple(out)
    if kind == "maxpool":
        c, *sp = in_shapes[0]
        return (c,) + tuple(ops.conv_output_shape(sp, hp["window"], hp["stride"], hp["padding"]))
    if kind in ("bn", "relu", "sigmoid", "softmax"):
        return in_shapes[0]
    if kind == "add":
        if in_shapes[0] != in_shapes[1]:
            raise ValueError(f"add node {node.id!r} joins mismatched shapes {in_shapes[0]} and {in_shapes[1]}")
        return in_shapes[0]
    if kind == "gap":
        return (in_shapes[0][0],)
    if kind == "dense":
        return (hp["units"],)
    if kind == "upsample":
        c, *sp = in_shapes[0]
        return (c,) + tuple(s * f for s, f in zip(sp, hp["factor"]))
    if kind == "concat":
        sp = in_shapes[0][1:]
        for s in in_shapes[1:]:
            if s[1:] != sp:
                raise ValueError(f"concat node {node.id!r} joins mismatched spatial shapes {in_shapes}")
        return (sum(s[0] for s in in_shapes),) + sp
    raise ValueError(f"unknown node kind {kind!r}")


def propagate_shapes(nodes: Iterable[LayerNode], signature) -> dict[str, tuple[int, ...]]:
    channels, spatial = signature
    shapes: dict[str, tuple[int, ...]] = {}
    for n in nodes:
        if n.kind == "input":
            shapes[n.id] = (channels,) + tuple(spatial)
            continue
        out = propagate_shape(n, [shapes[i] for i in n.inputs])
        if any(s < 1 for s in out):
            raise ValueError(f"node {n.id!r} collapses to shape {out}")
        shapes[n.id] = out
    return shapes


@dataclass
class AuditRow:
    node: str
    kind: str
    shape: tuple[int, ...]
    params: int


@dataclass
class AuditReport:
    rows: list[AuditRow]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def shape_of(self, node_id: str) -> tuple[int, ...]:
        for r in self.rows:
            if r.node == node_id:
                return r.shape
        raise KeyError(node_id)

    def format(self) -> str:
        lines = [f"{'node':<28} {'kind':<9} {'shape':<22} {'params':>10}"]
        for r in self.rows:
            lines.append(f"{r.node:<28} {r.kind:<9} {str(r.shape):<22} {r.params:>10}")
        lines.append(f"{'total':<61} {self.total_params:>10}")
        return "\n".join(lines)


def audit_shapes(model: LayerGraph, signature=None) -> AuditReport:
    """Propagate shapes from ``signature`` (default: the model's own) and count parameters."""
    signature = signature or model.input_signature
    shapes = propagate_shapes(model.nodes, signature)
    rows = []
    for n in model.nodes:
        pshapes = node_param_shapes(n, [shapes[i] for i in n.inputs]) if n.kind != "input" else {}
        count = sum(int(np.prod(s)) for s in pshapes.values())
        rows.append(AuditRow(n.id, n.kind, shapes[n.id], count))
    return AuditReport(rows)


# ----------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------

def init_parameters(model: LayerGraph, seed: int = 0, dtype=np.float32) -> None:
    """Fan-in scaled Gaussian weights for conv/dense; gamma=1, beta=0; zero biases."""
    rng = np.random.default_rng(seed)
    shapes = propagate_shapes(model.nodes, model.input_signature)
    model.params.clear()
    model.bn_state.clear()
    for n in model.nodes:
        if n.kind == "input":
            continue
        for pname, shape in node_param_shapes(n, [shapes[i] for i in n.inputs]).items():
            key = f"{n.id}.{pname}"
            if pname == "weight":
                fan_in = int(np.prod(shape[1:])) if n.kind == "conv" else shape[0]
                gain = 2.0 if n.kind == "conv" else 1.0
                arr = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
            elif pname == "gamma":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            model.params[key] = Tensor(arr.astype(dtype), name=key)
        if n.kind == "bn":
            model.bn_state[n.id] = BatchNormState(shapes[n.id][0], dtype=dtype)


def cast(model: LayerGraph, dtype) -> LayerGraph:
    """Change parameter and running-stat precision in place (64-bit for verification runs)."""
    for k, p in model.params.items():
        model.params[k] = Tensor(p.data.astype(dtype), name=k)
    for st in model.bn_state.values():
        st.mean = st.mean.astype(dtype)
        st.var = st.var.astype(dtype)
    return model


# ----------------------------------------------------------------------
# execution
# ----------------------------------------------------------------------

@dataclass
class ForwardPass:
    output: Tensor
    tape: Tape | None
    activations: dict[str, Tensor]


def _last_use(model: LayerGraph, keep: set[str]) -> dict[str, int]:
    last = {}
    for i, n in enumerate(model.nodes):
        for src in n.inputs:
            last[src] = i
    for k in keep | {model.output}:
        last[k] = len(model.nodes)
    return last


def _run_node(model: LayerGraph, n: LayerNode, args: list[Tensor], mode: str) -> Tensor:
    hp = n.hp
    p = model.params
    if n.kind == "conv":
        return ops.conv_nd(args[0], p[f"{n.id}.weight"], p.get(f"{n.id}.bias"), hp["stride"], hp["padding"])
    if n.kind == "bn":
        return ops.batch_norm(
            args[0], p[f"{n.id}.gamma"], p[f"{n.id}.beta"], model.bn_state[n.id], mode,
            hp.get("momentum", 0.1), hp.get("eps", 1e-5),
        )
    if n.kind == "relu":
        return ops.relu(args[0])
    if n.kind == "sigmoid":
        return ops.sigmoid(args[0])
    if n.kind == "softmax":
        return ops.softmax(args[0], axis=1)
    if n.kind == "maxpool":
        return ops.pool_max_nd(args[0], hp["window"], hp["stride"], hp["padding"])
    if n.kind == "add":
        return ops.add(args[0], args[1])
    if n.kind == "gap":
        return ops.global_avg_pool(args[0])
    if n.kind == "dense":
        return ops.dense(args[0], p[f"{n.id}.weight"], p[f"{n.id}.bias"])
    if n.kind == "upsample":
        return ops.upsample_nd(args[0], hp["factor"], hp.get("mode", "nearest"))
    if n.kind == "concat":
        return ops.concat(args, axis=1)
    raise ValueError(f"unknown node kind {n.kind!r}")


def forward(
    model: LayerGraph,
    batch,
    mode: str = "infer",
    record: bool | None = None,
    keep: Iterable[str] = (),
) -> ForwardPass:
    """Run ``model`` on ``batch`` (N, C, *spatial).

    Train mode records a tape by default (parameters registered by name) and
    uses batch statistics; infer mode uses running statistics and records only
    when ``record=True`` (needed for gradient-based explanations). ``keep``
    names nodes whose activations are returned.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    channels, spatial = model.input_signature
    if x.ndim != 2 + len(spatial) or x.shape[1] != channels or tuple(x.shape[2:]) != tuple(spatial):
        raise ValueError(
            f"batch shape {x.shape} does not match input signature (N, {channels}, {', '.join(map(str, spatial))})"
        )
    record = (mode == "train") if record is None else record
    keep = set(keep)
    for k in keep:
        if k not in model._index:
            raise KeyError(f"unknown node {k!r}")
    last = _last_use(model, keep)
    values: dict[str, Tensor] = {}
    tape = Tape() if record else None

    def run():
        for i, n in enumerate(model.nodes):
            if n.kind == "input":
                values[n.id] = x
            else:
                values[n.id] = _run_node(model, n, [values[s] for s in n.inputs], mode)
            if not record:
                for s in set(n.inputs):
                    if last.get(s, -1) <= i:
                        values.pop(s, None)

    if tape is not None:
        with tape:
            tape.register_all(model.params)
            run()
    else:
        with no_tape():
            run()
    return ForwardPass(values[model.output], tape, {k: values[k] for k in keep})


def predict(model: LayerGraph, batch) -> np.ndarray:
    return forward(model, batch, "infer").output.data
