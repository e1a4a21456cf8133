"""UResNet and RectNet as declarative layer graphs, receptive-field analysis
and a binary checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Tensor

ARCHITECTURES = ("uresnet", "rectnet")
DEFAULT_SCALES = {"uresnet": (1, 2, 4, 8), "rectnet": (1, 2)}
# input side lengths must be multiples of these (the coarsest output grid)
DIVISORS = {"uresnet": 8, "rectnet": 4}
RECT_BANK = (((3, 3), (1, 9)), ((5, 5), (3, 9)))
AREA_TOLERANCE = 0.2


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "rectnet"
    input_h: int = 128
    input_w: int = 256
    width: int = 8
    dilations: tuple[int, ...] = (2, 4, 8, 16)
    rect_bank: tuple = RECT_BANK
    scales: tuple[int, ...] = ()
    dropout: float = 0.0
    padding: str = "sphere"
    max_depth: float = 20.0

    def __post_init__(self):
        # normalise containers so JSON round trips compare equal
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "rect_bank", tuple(tuple(tuple(int(v) for v in k) for k in pair) for pair in self.rect_bank))
        if not self.scales and self.architecture in DEFAULT_SCALES:
            object.__setattr__(self, "scales", DEFAULT_SCALES[self.architecture])
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        self.validate()

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        div = DIVISORS[self.architecture]
        if self.input_h % div or self.input_w % div:
            raise ConfigError(f"{self.architecture} input dims must be divisible by {div}, got {self.input_h}x{self.input_w}")
        if self.width < 2 or self.width % 2:
            raise ConfigError(f"width must be an even number >= 2, got {self.width}")
        if 1 not in self.scales:
            raise ConfigError("prediction scales must include 1 (full resolution)")
        if tuple(sorted(self.scales)) != DEFAULT_SCALES[self.architecture]:
            raise ConfigError(f"{self.architecture} predicts at scales {DEFAULT_SCALES[self.architecture]}, got {self.scales}")
        for s in self.scales:
            if self.input_h % s or self.input_w % s:
                raise ConfigError(f"scale {s} does not divide input {self.input_h}x{self.input_w}")
        if self.architecture == "rectnet":
            if len(self.dilations) != 4 or min(self.dilations) < 1:
                raise ConfigError(f"rectnet needs 4 positive dilations, got {self.dilations}")
            if len(self.rect_bank) != 2:
                raise ConfigError("rectnet needs two (square, rectangle) filter pairs")
            for square, rect in self.rect_bank:
                a_sq, a_rect = square[0] * square[1], rect[0] * rect[1]
                if abs(a_rect - a_sq) / a_sq > AREA_TOLERANCE:
                    raise ConfigError(f"rectangle {rect} area {a_rect} deviates more than 20% from square {square} area {a_sq}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.padding not in T.PADDING_MODES:
            raise ConfigError(f"padding must be one of {T.PADDING_MODES}")
        if self.max_depth <= 0:
            raise ConfigError("max_depth must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls(**json.loads(text))


@dataclass
class Node:
    name: str
    op: str  # input | conv | deconv | concat | add | upsample | dropout
    inputs: tuple[str, ...] = ()
    conv: ConvSpec | None = None
    act: bool = False
    factor: int = 1
    channels: int = 0
    scale: int = 1  # downscale factor relative to the input


class _Builder:
    def __init__(self, padding):
        self.padding = padding
        self.nodes: list[Node] = [Node("input", "input", channels=3)]
        self._by_name = {"input": self.nodes[0]}

    def _add(self, node):
        if node.name in self._by_name:
            raise ConfigError(f"duplicate layer name {node.name}")
        self.nodes.append(node)
        self._by_name[node.name] = node
        return node.name

    def conv(self, name, src, out, kernel=(3, 3), stride=1, dilation=1, act=True):
        s = self._by_name[src]
        spec = ConvSpec(s.channels, out, tuple(kernel), stride, dilation, self.padding)
        return self._add(Node(name, "conv", (src,), spec, act, channels=out, scale=s.scale * stride))

    def deconv(self, name, src, out, kernel=(3, 3), act=True):
        s = self._by_name[src]
        spec = ConvSpec(s.channels, out, tuple(kernel), 2, 1, self.padding, transpose=True)
        return self._add(Node(name, "deconv", (src,), spec, act, channels=out, scale=s.scale // 2))

    def concat(self, name, *srcs):
        nodes = [self._by_name[s] for s in srcs]
        return self._add(Node(name, "concat", tuple(srcs), channels=sum(n.channels for n in nodes), scale=nodes[0].scale))

    def add(self, name, a, b):
        na = self._by_name[a]
        return self._add(Node(name, "add", (a, b), channels=na.channels, scale=na.scale))

    def upsample(self, name, src, factor):
        s = self._by_name[src]
        return self._add(Node(name, "upsample", (src,), factor=factor, channels=s.channels, scale=s.scale // factor))

    def dropout(self, name, src):
        s = self._by_name[src]
        return self._add(Node(name, "dropout", (src,), channels=s.channels, scale=s.scale))


def _uresnet_graph(spec: ModelSpec):
    w = spec.width
    g = _Builder(spec.padding)
    x = g.conv("in1", "input", w, (7, 7))
    x = g.conv("in2", x, w, (5, 5))
    for i, out in enumerate((2 * w, 4 * w, 8 * w, 8 * w), 1):
        s = g.conv(f"down{i}_s", x, out, stride=2)
        h = g.conv(f"down{i}_a", s, out)
        h = g.conv(f"down{i}_b", h, out)
        x = g.add(f"down{i}", s, h)
    # up-scaling block: 1/16 -> 1/8
    x = g.deconv("up0_t", x, 4 * w)
    x = g.conv("up0_c", x, 4 * w)
    preds = {}
    for i, (scale, out) in enumerate(((8, 2 * w), (4, w), (2, w)), 1):
        d = g.dropout(f"pred{scale}_drop", x)
        preds[scale] = g.conv(f"pred{scale}", d, 1, act=False)
        h = g.deconv(f"up{i}_t", x, out)
        h = g.conv(f"up{i}_c", h, out)
        p = g.upsample(f"pred{scale}_up", preds[scale], 2)
        x = g.concat(f"up{i}", h, p)
    d = g.dropout("pred1_drop", x)
    preds[1] = g.conv("pred1", d, 1, act=False)
    return g.nodes, preds


def _rectnet_graph(spec: ModelSpec):
    w = spec.width
    g = _Builder(spec.padding)
    (sq1, rc1), (sq2, rc2) = spec.rect_bank
    a = g.conv("pre1_sq", "input", w // 2, sq1)
    b = g.conv("pre1_rect", "input", w // 2, rc1)
    x = g.concat("pre1", a, b)
    a = g.conv("pre2_sq", x, w, sq2)
    b = g.conv("pre2_rect", x, w, rc2)
    x = g.concat("pre2", a, b)
    x = g.conv("down_s1", x, 4 * w, stride=2)
    x = g.conv("down_s2", x, 4 * w, stride=2)
    x = g.conv("down_a", x, 4 * w)
    x = g.conv("down_b", x, 4 * w)
    d1, d2, d3, d4 = spec.dilations
    for blk, (da, db) in (("dilA", (d1, d2)), ("dilB", (d3, d4))):
        h = g.conv(f"{blk}_1", x, 4 * w, dilation=da)
        h = g.conv(f"{blk}_2", h, 4 * w, dilation=db)
        h = g.conv(f"{blk}_3", h, 4 * w, (1, 1))
        x = g.add(blk, x, h)
    x = g.deconv("up2_t", x, 2 * w)
    x = g.conv("up2_c", x, 2 * w)
    d = g.dropout("pred2_drop", x)
    p2 = g.conv("pred2", d, 1, act=False)
    x = g.deconv("up1_t", x, w)
    x = g.conv("up1_c", x, w)
    x = g.concat("up1", x, g.upsample("pred2_up", p2, 2))
    d = g.dropout("pred1_drop", x)
    p1 = g.conv("pred1", d, 1, act=False)
    return g.nodes, {2: p2, 1: p1}


@dataclass
class ModelOutput:
    depth: Tensor
    preds: dict[int, Tensor]
    features: dict[str, Tensor] = field(default_factory=dict)


class DepthNet:
    """A built network: layer graph plus named parameters."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.step = 0
        builder = _uresnet_graph if spec.architecture == "uresnet" else _rectnet_graph
        self.nodes, self.pred_nodes = builder(spec)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        for node in self.nodes:
            if node.conv is None:
                continue
            cs = node.conv
            fan_in = cs.in_ch * cs.kernel[0] * cs.kernel[1]
            std = np.sqrt(2.0 / fan_in) * (0.1 if not node.act else 1.0)
            self.params[f"{node.name}.weight"] = Tensor(
                (rng.standard_normal(cs.weight_shape) * std).astype(dtype), requires_grad=True, name=f"{node.name}.weight")
            self.params[f"{node.name}.bias"] = Tensor(
                np.zeros(cs.out_ch, dtype=dtype), requires_grad=True, name=f"{node.name}.bias")
        self._drop_ids = {n.name: i for i, n in enumerate(self.nodes) if n.op == "dropout"}

    @property
    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "DepthNet":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, x, train: bool = False, seed: int = 0, step: int = 0, keep: bool = False) -> ModelOutput:
        """Run the graph on an (N, 3, H, W) input.

        ``train`` enables dropout, keyed by (seed, layer, step). With ``keep``
        every intermediate tensor is returned in ``features``.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        n, c, h, w = x.shape
        if c != 3 or (h, w) != (self.spec.input_h, self.spec.input_w):
            raise ValueError(f"model expects (N, 3, {self.spec.input_h}, {self.spec.input_w}) input, got {x.shape}")
        vals = {"input": x}
        pad = self.spec.padding
        for node in self.nodes[1:]:
            ins = [vals[i] for i in node.inputs]
            if node.op == "conv":
                cs = node.conv
                out = T.conv2d(ins[0], self.params[f"{node.name}.weight"], self.params[f"{node.name}.bias"],
                               cs.stride, cs.dilation, pad)
            elif node.op == "deconv":
                out = T.conv_transpose2d(ins[0], self.params[f"{node.name}.weight"], self.params[f"{node.name}.bias"],
                                         2, pad)
                # a ceil-rounded coarse stage upsamples past the target grid
                for axis, size in ((2, -(-h // node.scale)), (3, -(-w // node.scale))):
                    if out.shape[axis] != size:
                        out = T.crop(out, axis, 0, size)
            elif node.op == "concat":
                out = T.concat(ins, 1)
            elif node.op == "add":
                out = T.add(ins[0], ins[1])
            elif node.op == "upsample":
                out = T.upsample_nearest(ins[0], node.factor)
            else:
                out = T.dropout(ins[0], self.spec.dropout, seed, train, self._drop_ids[node.name], step)
            if node.act:
                out = T.elu(out)
            vals[node.name] = out
        preds = {s: vals[name] for s, name in self.pred_nodes.items()}
        return ModelOutput(preds[1], preds, vals if keep else {})

    __call__ = forward

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def build_uresnet(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> DepthNet:
    if spec.architecture != "uresnet":
        raise ConfigError("build_uresnet needs a uresnet spec")
    return DepthNet(spec, seed, dtype)


def build_rectnet(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> DepthNet:
    if spec.architecture != "rectnet":
        raise ConfigError("build_rectnet needs a rectnet spec")
    return DepthNet(spec, seed, dtype)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> DepthNet:
    return DepthNet(spec, seed, dtype)


# receptive fields ---------------------------------------------------------

def stack_receptive_field(convs) -> tuple[int, int]:
    """(h, w) receptive field of a plain sequential stack of ConvSpecs."""
    rf, jump = [1, 1], [1, 1]
    for cs in convs:
        for ax in range(2):
            rf[ax] += (cs.kernel[ax] - 1) * cs.dilation * jump[ax]
            jump[ax] *= cs.stride
    return rf[0], rf[1]


def receptive_field(model: DepthNet) -> dict[str, tuple[int, int]]:
    """Per-node receptive field (h, w) in input pixels.

    Convs apply rf += (k - 1) * dilation * jump, jump *= stride. Branches
    (concat, add) take the widest input. Transposed convs halve the jump
    before adding their kernel extent; nearest upsampling only halves it.
    """
    rf: dict[str, tuple] = {}
    for node in model.nodes:
        if node.op == "input":
            rf[node.name] = (1.0, 1.0, 1.0, 1.0)
            continue
        srcs = [rf[i] for i in node.inputs]
        rh, rw = max(s[0] for s in srcs), max(s[1] for s in srcs)
        jh, jw = srcs[0][2], srcs[0][3]
        if node.op == "conv":
            cs = node.conv
            rh += (cs.kernel[0] - 1) * cs.dilation * jh
            rw += (cs.kernel[1] - 1) * cs.dilation * jw
            jh, jw = jh * cs.stride, jw * cs.stride
        elif node.op == "deconv":
            jh, jw = jh / 2, jw / 2
            rh += (node.conv.kernel[0] - 1) * jh
            rw += (node.conv.kernel[1] - 1) * jw
        elif node.op == "upsample":
            jh, jw = jh / node.factor, jw / node.factor
        rf[node.name] = (rh, rw, jh, jw)
    return {k: (int(np.ceil(v[0])), int(np.ceil(v[1]))) for k, v in rf.items()}


def last_dilation_layer(model: DepthNet) -> str:
    """Name of the output of RectNet's final dilation block."""
    if model.spec.architecture != "rectnet":
        raise ConfigError("only rectnet has dilation blocks")
    return "dilB"


# checkpoints --------------------------------------------------------------

MAGIC = b"ODCK"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_checkpoint(model: DepthNet, step: int | None = None) -> bytes:
    spec = model.spec.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(spec)), spec,
             struct.pack("<Q", model.step if step is None else step), struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", p.data.ndim),
                  struct.pack(f"<{p.data.ndim}I", *p.shape), p.data.astype("<f4").tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> DepthNet:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    (slen,) = r.unpack("<I", "spec length")
    at = r.pos
    try:
        spec = ModelSpec.from_json(r.take(slen, "spec").decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid model spec: {exc}", at) from None
    (step,) = r.unpack("<Q", "step")
    (count,) = r.unpack("<I", "tensor count")
    model = DepthNet(spec)
    if count != len(model.params):
        raise CheckpointError(f"checkpoint has {count} tensors, spec needs {len(model.params)}", r.pos - 4)
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        (rank,) = r.unpack("<I", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        if name not in model.params:
            raise CheckpointError(f"unexpected tensor {name!r}", at)
        if tuple(dims) != model.params[name].shape:
            raise CheckpointError(f"tensor {name} has dims {dims}, spec needs {model.params[name].shape}", at)
        data = np.frombuffer(r.take(4 * int(np.prod(dims)), f"tensor {name}"), dtype="<f4")
        model.params[name].data = data.reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor", r.pos)
    model.step = step
    return model


def save_checkpoint(model: DepthNet, path, step: int | None = None):
    data = encode_checkpoint(model, step)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> DepthNet:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
