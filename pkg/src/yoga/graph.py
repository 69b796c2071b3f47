"""Declarative model assembly, scaling rules, analytic counters and weight files."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import yaml

from . import blocks as B
from . import ops
from .detect import AnchorSet
from .errors import DimensionError, WeightFileError
from .tensor import FlopCounter, Tensor, no_grad

SCHEMA_VERSION = 1
CONFIG_ENV = "YOGA_CONFIG_DIR"
CONFIG_NAME = "yoga.yaml"

# Published totals: (parameters, FLOPs at 640x640).
REFERENCE = {
    "n": (1.9e6, 4.9e9),
    "s": (7.6e6, 16.6e9),
    "m": (16.3e6, 34.6e9),
    "l": (33.6e6, 71.8e9),
}

KINDS = ("ConvBlock", "GhostConv", "CSPGhost", "SPP", "Upsample", "AFF", "Concat", "Detect")


def scale_width(base_width: int, width_factor: float) -> int:
    """Scaled channel count rounded up to a multiple of 8 (at least 8)."""
    if base_width <= 0 or width_factor <= 0:
        raise ValueError("base width and width factor must be positive")
    if base_width % 8:
        raise ValueError(f"base width {base_width} is not a multiple of 8")
    # round() absorbs binary noise such as 64 * 0.5 / 8 = 4.000000000000001
    return max(8, math.ceil(round(base_width * width_factor / 8, 9)) * 8)


def scale_depth(base_repeats: int, depth_factor: float) -> int:
    if base_repeats < 1:
        raise ValueError("base repeats must be at least 1")
    return max(1, math.ceil(round(base_repeats * depth_factor, 9)))


@dataclass(frozen=True)
class ScaleProfile:
    name: str
    depth_factor: float
    width_factor: float

    def __post_init__(self):
        if not (self.depth_factor > 0 and self.width_factor > 0):
            raise ValueError("scaling factors must be positive")


@dataclass(frozen=True)
class LayerNode:
    index: int
    kind: str
    sources: Tuple[int, ...]      # absolute indices; -1 denotes the network input
    args: Tuple[Any, ...]
    repeats: int = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
def default_config_path() -> Path:
    env = os.environ.get(CONFIG_ENV)
    if env:
        return Path(env) / CONFIG_NAME
    return Path(__file__).with_name("configs") / CONFIG_NAME


def load_config(path: Union[str, Path, None] = None) -> dict:
    """Read and validate a model definition document."""
    path = Path(path) if path is not None else default_config_path()
    with open(path, "r", encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg, dict):
        raise ValueError("model config must be a mapping")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {cfg.get('schema_version')!r}; "
                         f"expected {SCHEMA_VERSION}")
    for key in ("profiles", "strides", "anchors", "backbone", "neck"):
        if key not in cfg:
            raise ValueError(f"model config lacks '{key}'")
    rows = cfg["backbone"] + cfg["neck"]
    for i, row in enumerate(rows):
        if len(row) != 4:
            raise ValueError(f"row {i}: expected [from, repeats, kind, args]")
        src, n, kind, _ = row
        if kind not in KINDS:
            raise ValueError(f"row {i}: unknown block kind {kind!r}")
        for s in (src if isinstance(src, list) else [src]):
            absolute = i + s if s < 0 else s
            if not (absolute < i and (absolute >= 0 or (i == 0 and s == -1))):
                raise ValueError(f"row {i}: source {s} does not reference an earlier node")
        if not isinstance(n, int) or n < 1:
            raise ValueError(f"row {i}: repeats must be a positive integer")
    if rows[-1][2] != "Detect":
        raise ValueError("the last row must be the Detect head")


def profiles(cfg: Optional[dict] = None) -> Dict[str, ScaleProfile]:
    cfg = cfg or load_config()
    return {k: ScaleProfile(k, float(v[0]), float(v[1])) for k, v in cfg["profiles"].items()}


PROFILES = profiles(yaml.safe_load(
    (Path(__file__).with_name("configs") / CONFIG_NAME).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------
@dataclass
class ModelGraph:
    nodes: List[LayerNode]
    detect_sources: Tuple[int, ...]
    num_classes: int
    anchors: AnchorSet
    profile: ScaleProfile
    input_size: Tuple[int, int]
    config: dict
    channels: List[int] = field(default_factory=list)   # output channels per node
    _meta: Optional[List[Optional[B.Module]]] = field(default=None, repr=False)

    @property
    def max_stride(self) -> int:
        return max(self.anchors.strides)

    @property
    def detect_channels(self) -> Tuple[int, ...]:
        return tuple(self.channels[i] for i in self.detect_sources)

    def make_modules(self, rng: np.random.Generator) -> List[Optional[B.Module]]:
        cfg = self.config
        d = int(cfg.get("cheap_kernel", 5))
        e = float(cfg.get("expansion", 0.5))
        split = float(cfg.get("csp_split", 0.5))
        mods: List[Optional[B.Module]] = []
        for node in self.nodes:
            c1 = self.channels[node.sources[0]] if node.sources[0] >= 0 else 3
            c2 = self.channels[node.index]
            a = node.args
            if node.kind == "ConvBlock":
                k, s = int(a[1]), int(a[2])
                p = int(a[3]) if len(a) > 3 else None
                mods.append(B.ConvBlock(c1, c2, k, s, p, rng=rng))
            elif node.kind == "GhostConv":
                mods.append(B.GhostConv(c1, c2, int(a[1]), int(a[2]), d, rng=rng))
            elif node.kind == "CSPGhost":
                mods.append(B.CSPGhost(c1, c2, node.repeats, split, e, d, rng=rng))
            elif node.kind == "SPP":
                mods.append(B.SPP(c1, c2, tuple(a[1]), rng=rng))
            elif node.kind == "AFF":
                mods.append(B.AFF(c2, int(cfg.get("mscam_reduction", 4)), rng=rng))
            elif node.kind == "Detect":
                mods.append(B.Detect(self.num_classes, self.detect_channels,
                                     self.anchors.per_scale, self.anchors.strides,
                                     bool(cfg.get("head_depthwise", True)), rng=rng))
            else:
                mods.append(None)
        return mods

    @property
    def meta_modules(self) -> List[Optional[B.Module]]:
        if self._meta is None:
            with B.meta_init():
                self._meta = self.make_modules(np.random.default_rng(0))
        return self._meta

    def instantiate(self, seed: int = 0) -> "YogaModel":
        return YogaModel(self, seed)

    def to_dict(self) -> dict:
        """Everything needed to rebuild this graph."""
        return {"profile": [self.profile.name, self.profile.depth_factor,
                            self.profile.width_factor],
                "num_classes": self.num_classes,
                "input_size": list(self.input_size),
                "anchors": self.anchors.to_flat(),
                "model": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        name, df, wf = d["profile"]
        cfg = d["model"]
        validate_config(cfg)
        anchors = AnchorSet.from_flat(d["anchors"], cfg["strides"])
        return build_yoga(ScaleProfile(name, df, wf), d["num_classes"],
                          tuple(d["input_size"]), config=cfg, anchors=anchors)


def _resolve_profile(profile, cfg) -> ScaleProfile:
    if isinstance(profile, ScaleProfile):
        return profile
    table = profiles(cfg)
    if profile not in table:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(table)}")
    return table[profile]


def build_yoga(profile: Union[str, ScaleProfile], num_classes: int = 80,
               input_size: Tuple[int, int] = (640, 640), config: Optional[dict] = None,
               anchors: Optional[AnchorSet] = None) -> ModelGraph:
    """Assemble the scaled backbone, neck and head for one profile."""
    cfg = copy.deepcopy(config) if config is not None else load_config()
    validate_config(cfg)
    prof = _resolve_profile(profile, cfg)
    if num_classes < 1:
        raise ValueError("num_classes must be at least 1")
    h, w = (int(v) for v in input_size)
    max_stride = max(cfg["strides"])
    if h <= 0 or w <= 0 or h % max_stride or w % max_stride:
        raise DimensionError(f"input size {h}x{w} is not divisible by {max_stride}",
                             axis="spatial")
    if anchors is None:
        anchors = AnchorSet.from_flat(cfg["anchors"], cfg["strides"])

    nodes, channels = [], []
    for i, (src, n, kind, args) in enumerate(cfg["backbone"] + cfg["neck"]):
        srcs = tuple((i + s if s < 0 else s) for s in (src if isinstance(src, list) else [src]))
        repeats = scale_depth(n, prof.depth_factor) if kind == "CSPGhost" else n
        node = LayerNode(i, kind, srcs, tuple(args), repeats)
        cin = [channels[s] if s >= 0 else 3 for s in srcs]
        if kind in ("ConvBlock", "GhostConv", "CSPGhost", "SPP"):
            c = scale_width(int(args[0]), prof.width_factor)
        elif kind == "Concat":
            c = sum(cin)
        elif kind == "AFF":
            if len(srcs) != 2 or cin[0] != cin[1]:
                raise DimensionError(f"AFF node {i} needs two equal-width inputs, got {cin}",
                                     axis="channels")
            c = cin[0]
        elif kind == "Detect":
            c = 0
        else:
            c = cin[0]
        nodes.append(node)
        channels.append(c)
    head = nodes[-1]
    if len(head.sources) != len(cfg["strides"]):
        raise ValueError("Detect needs one source per stride")
    g = ModelGraph(nodes, head.sources, num_classes, anchors, prof, (h, w), cfg, channels)
    shapes = propagate_shapes(g, (1, 3, h, w))
    for s, stride in zip(g.detect_sources, anchors.strides):
        if shapes[s][2] * stride != h:
            raise DimensionError(f"detect source {s} is not at stride {stride}", axis="spatial")
    return g


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------
def _node_flops(node: LayerNode, mod, in_shapes):
    if node.kind == "Upsample":
        n, c, h, w = in_shapes[0]
        return 0, (n, c, 2 * h, 2 * w)
    if node.kind == "Concat":
        ref = in_shapes[0]
        if any(s[2:] != ref[2:] for s in in_shapes):
            raise DimensionError(f"concat node {node.index} spatial mismatch", axis="spatial")
        return 0, (ref[0], sum(s[1] for s in in_shapes), ref[2], ref[3])
    if node.kind == "AFF":
        if in_shapes[0] != in_shapes[1]:
            raise DimensionError(f"AFF node {node.index} shape mismatch {in_shapes}",
                                 axis="shape")
        return mod.flops(in_shapes[0])
    if node.kind == "Detect":
        f, _ = mod.flops_multi(in_shapes)
        return f, None
    return mod.flops(in_shapes[0])


def _walk(graph: ModelGraph, input_shape):
    mods = graph.meta_modules
    shapes, costs = [], []
    for node, mod in zip(graph.nodes, mods):
        ins = [shapes[s] if s >= 0 else tuple(input_shape) for s in node.sources]
        f, out = _node_flops(node, mod, ins)
        shapes.append(out)
        costs.append(f)
    return shapes, costs


def propagate_shapes(graph: ModelGraph, input_shape) -> List[Optional[tuple]]:
    return _walk(graph, input_shape)[0]


def param_count(graph: Optional[ModelGraph]) -> int:
    """Closed-form count of learnable scalars."""
    if graph is None:
        return 0
    return sum(m.param_count() for m in graph.meta_modules if m is not None)


def flop_count(graph: Optional[ModelGraph], input_size: Optional[Tuple[int, int]] = None,
               batch: int = 1) -> int:
    """Analytic forward FLOPs (2 x MAC plus elementwise work)."""
    if graph is None:
        return 0
    h, w = input_size or graph.input_size
    return int(sum(_walk(graph, (batch, 3, h, w))[1]))


def layer_table(graph: ModelGraph, input_size: Optional[Tuple[int, int]] = None) -> List[dict]:
    h, w = input_size or graph.input_size
    shapes, costs = _walk(graph, (1, 3, h, w))
    rows = []
    for node, mod, shp, f in zip(graph.nodes, graph.meta_modules, shapes, costs):
        p = mod.param_count() if mod is not None else 0
        sp = mod.standard_param_count() if mod is not None and node.kind != "Detect" else p
        rows.append({"index": node.index, "kind": node.kind, "from": list(node.sources),
                     "repeats": node.repeats,
                     "out_shape": list(shp[1:]) if shp else None,
                     "params": int(p), "standard_params": int(sp),
                     "ghost_saving": int(sp - p), "flops": int(f)})
    return rows


def instrumented_flops(model: "YogaModel", input_size: Optional[Tuple[int, int]] = None,
                       seed: int = 0) -> int:
    """FLOPs reported by the primitives during an actual forward pass."""
    h, w = input_size or model.graph.input_size
    x = np.random.default_rng(seed).standard_normal((1, 3, h, w)).astype(np.float32)
    was_training = model.training
    model.eval()
    try:
        with FlopCounter() as fc, no_grad():
            model(Tensor(x))
    finally:
        model.train(was_training)
    return fc.flops


# ---------------------------------------------------------------------------
# executable model
# ---------------------------------------------------------------------------
class YogaModel(B.Module):
    """Executable network for a :class:`ModelGraph`; returns the raw head maps."""

    def __init__(self, graph: ModelGraph, seed: int = 0):
        self.graph = graph
        self.seed = seed
        self.model = graph.make_modules(np.random.default_rng(seed))

    @property
    def head(self) -> B.Detect:
        return self.model[-1]

    def forward(self, x) -> List[Tensor]:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected (n, 3, h, w) input, got {x.shape}", axis="channels")
        stride = self.graph.max_stride
        if x.shape[2] % stride or x.shape[3] % stride:
            raise DimensionError(f"input {x.shape[2]}x{x.shape[3]} not divisible by {stride}",
                                 axis="spatial")
        outs: List[Any] = []
        for node, mod in zip(self.graph.nodes, self.model):
            ins = [outs[s] if s >= 0 else x for s in node.sources]
            if node.kind == "Upsample":
                y = ops.upsample_nearest2x(ins[0])
            elif node.kind == "Concat":
                y = ops.concat_channels(ins)
            elif node.kind in ("AFF", "Detect"):
                y = mod(*ins) if node.kind == "AFF" else mod(ins)
            else:
                y = mod(ins[0])
            outs.append(y)
        return outs[-1]

    def param_count(self) -> int:
        return param_count(self.graph)


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------
MAGIC = b"YOGW"
FORMAT_VERSION = 1
_PARAM, _BUFFER = 0, 1
_DTYPES = {0: "<f4"}


def _config_bytes(graph: ModelGraph) -> bytes:
    return json.dumps(graph.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def config_hash(graph: ModelGraph) -> str:
    return hashlib.sha256(_config_bytes(graph)).hexdigest()


def _tensor_table(model: YogaModel):
    table = [(n, t.data, _PARAM) for n, t in model.named_parameters()]
    table += [(n, a, _BUFFER) for n, a in model.named_buffers()]
    return table


def serialize(model: YogaModel) -> bytes:
    """Self-describing weight file: header, graph config, tensor table, f32 payloads."""
    cfg = _config_bytes(model.graph)
    table = _tensor_table(model)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(hashlib.sha256(cfg).digest())
    buf.write(struct.pack("<I", len(table)))
    for name, arr, kind in table:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BBB", 0, kind, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr, _ in table:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_weights(model: YogaModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(serialize(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str, tensor: Optional[str] = None) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFileError(f"weight file truncated while reading {what}", tensor=tensor)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_header(data: bytes):
    """Parse magic, version, config and tensor table; returns (config, table, reader)."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise WeightFileError("not a YOGW weight file (bad magic)")
    version, clen = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    cfg = r.take(clen, "config")
    digest = r.take(32, "config hash")
    if hashlib.sha256(cfg).digest() != digest:
        raise WeightFileError("config hash mismatch: embedded graph config is corrupt")
    (count,) = r.unpack("<I", "tensor count")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor table")
        name = r.take(nlen, "tensor table").decode()
        code, kind, ndim = r.unpack("<BBB", "tensor table")
        if code not in _DTYPES:
            raise WeightFileError(f"unknown dtype code {code}", tensor=name)
        shape = r.unpack(f"<{ndim}I", "tensor table")
        table.append((name, tuple(shape), kind))
    return json.loads(cfg), table, r, digest.hex()


def deserialize(data: bytes, model: Optional[YogaModel] = None) -> YogaModel:
    """Load weights into ``model`` (or a model rebuilt from the embedded config)."""
    cfg, table, r, _ = read_header(data)
    if model is None:
        model = ModelGraph.from_dict(cfg).instantiate(0)
    targets = _tensor_table(model)
    for (name, shape, kind), (tname, arr, tkind) in zip(table, targets):
        if name != tname or kind != tkind:
            raise WeightFileError(f"tensor {name!r} does not match model tensor {tname!r}",
                                  tensor=name)
        if tuple(arr.shape) != shape:
            raise WeightFileError(f"shape mismatch for tensor {name!r}: file {shape}, "
                                  f"model {tuple(arr.shape)}", tensor=name)
    if len(table) != len(targets):
        name = (targets[len(table)][0] if len(targets) > len(table) else table[len(targets)][0])
        raise WeightFileError(f"tensor count differs ({len(table)} in file, {len(targets)} "
                              f"in model); first unmatched tensor {name!r}", tensor=name)
    for name, shape, _ in table:
        n = int(np.prod(shape, dtype=np.int64)) * 4
        raw = r.take(n, f"payload of tensor {name!r}", tensor=name)
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        t = _lookup(model, name)
        if isinstance(t, Tensor):
            t.data = arr.astype(np.float32).copy()
        else:
            t[...] = arr
    if r.pos != len(data):
        raise WeightFileError("trailing bytes after the last tensor")
    return model


def _lookup(model: B.Module, name: str):
    obj: Any = model
    for part in name.split("."):
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    return obj


def load_weights(path: Union[str, Path], model: Optional[YogaModel] = None) -> YogaModel:
    return deserialize(Path(path).read_bytes(), model)
