"""MLP backbone grouped into freezable macro-blocks, softmax heads, checkpoints.

Checkpoint layout (all integers little-endian)::

    offset 0   8 bytes   magic b"RKDSCKPT"
    offset 8   u16       format version (1)
    offset 10  u32       header length H
    offset 14  H bytes   UTF-8 JSON header (sorted keys): backbone config,
                         its sha256 digest, head inventory, tensor table
                         (name, shape, frozen), PRNG state, run metadata
    ...        8*n bytes float64 payloads in tensor-table order
    last 4     u32       CRC-32 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .ndcore import DimensionError, Linear, Parameter, glorot_uniform, relu, relu_backward, softmax

HEAD_KINDS = ("rotation", "labelled", "unlabelled", "incremental")
CKPT_MAGIC = b"RKDSCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    input_dims: tuple = (1, 16, 16)
    layer_widths: tuple = (128, 128, 96, 64)
    # number of consecutive layers in each macro-block
    macro_blocks: tuple = (1, 1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        object.__setattr__(self, "layer_widths", tuple(int(v) for v in self.layer_widths))
        object.__setattr__(self, "macro_blocks", tuple(int(v) for v in self.macro_blocks))
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self):
        out = []
        if len(self.input_dims) != 3 or min(self.input_dims, default=0) < 1:
            out.append(f"input_dims must be three positive ints, got {self.input_dims}")
        if not self.layer_widths or min(self.layer_widths) < 1:
            out.append("layer_widths must be nonempty positive ints")
        if not self.macro_blocks or min(self.macro_blocks, default=0) < 1:
            out.append("macro_blocks must be nonempty positive layer counts")
        elif sum(self.macro_blocks) != len(self.layer_widths):
            out.append(f"macro_blocks {self.macro_blocks} do not partition "
                       f"{len(self.layer_widths)} layers")
        if self.layer_widths and self.layer_widths[-1] < 2:
            out.append("feature_dim must be >= 2")
        return out

    @property
    def input_size(self) -> int:
        c, h, w = self.input_dims
        return c * h * w

    @property
    def feature_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_blocks(self) -> int:
        return len(self.macro_blocks)

    def block_of_layer(self):
        return [b for b, n in enumerate(self.macro_blocks) for _ in range(n)]

    def to_dict(self):
        return {k: list(v) for k, v in asdict(self).items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class Backbone:
    """Stack of Linear+ReLU layers; the ReLU is applied after every layer."""

    def __init__(self, config: BackboneConfig, layers):
        self.config = config
        self.layers = list(layers)
        self._pre = []

    @classmethod
    def init(cls, config: BackboneConfig, rng: np.random.Generator) -> "Backbone":
        widths = (config.input_size,) + config.layer_widths
        return cls(config, [Linear.init(rng, a, b) for a, b in zip(widths[:-1], widths[1:])])

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def block_parameters(self, block: int):
        owner = self.config.block_of_layer()
        return [p for i, layer in enumerate(self.layers) if owner[i] == block
                for p in layer.parameters()]

    def freeze_blocks(self, blocks):
        """Freeze exactly ``blocks`` (0-based); every other block is trainable."""
        blocks = set(blocks)
        owner = self.config.block_of_layer()
        for i, layer in enumerate(self.layers):
            for p in layer.parameters():
                p.frozen = owner[i] in blocks

    def frozen_blocks(self):
        owner = self.config.block_of_layer()
        return sorted({owner[i] for i, layer in enumerate(self.layers) if layer.weight.frozen})

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.config.input_size:
            raise DimensionError(
                f"backbone expects (B, {self.config.input_size}) input, got {x.shape}"
            )
        pre = []
        h = x
        for layer in self.layers:
            a = layer.forward(h, cache=cache)
            pre.append(a)
            h = relu(a)
        if cache:
            self._pre = pre
        return h

    def backward(self, grad_z: np.ndarray):
        """Backpropagate ``dL/dz``; stops below the lowest trainable layer."""
        trainable = [i for i, layer in enumerate(self.layers) if not layer.weight.frozen]
        if not trainable:
            return
        lowest = trainable[0]
        g = grad_z
        for i in range(len(self.layers) - 1, lowest - 1, -1):
            g = relu_backward(self._pre[i], g)
            g = self.layers[i].backward(g, need_input_grad=i > lowest)


def forward_features(backbone: Backbone, batch: np.ndarray) -> np.ndarray:
    """Features ``z`` for a batch; images are flattened row-major."""
    batch = np.asarray(batch, dtype=np.float64)
    return backbone.forward(batch.reshape(batch.shape[0], -1), cache=False)


class Head:
    """Linear layer followed by softmax."""

    def __init__(self, kind: str, linear: Linear):
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.linear = linear
        self._probs = None

    @classmethod
    def init(cls, kind: str, dim: int, out: int, rng: np.random.Generator) -> "Head":
        return cls(kind, Linear.init(rng, dim, out))

    @property
    def out(self) -> int:
        return self.linear.n_out

    @property
    def weight(self) -> Parameter:
        return self.linear.weight

    @property
    def bias(self) -> Parameter:
        return self.linear.bias

    def parameters(self):
        return self.linear.parameters()

    def logits(self, z: np.ndarray, cache: bool = False) -> np.ndarray:
        return self.linear.forward(np.atleast_2d(z), cache=cache)

    def forward(self, z: np.ndarray, cache: bool = False) -> np.ndarray:
        return softmax(self.logits(z, cache=cache))

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        return self.linear.backward(grad_logits)


def predict_unlabelled(head: Head, z: np.ndarray, n_new: int | None = None) -> np.ndarray:
    """Argmax cluster index per row (lowest index wins ties).

    For an incremental head pass ``n_new`` to restrict the argmax to the
    trailing new-class slice; the result is then in ``[0, n_new)``.
    """
    probs = head.forward(z)
    if head.kind == "incremental":
        if n_new is None:
            raise ValueError("incremental head needs n_new to select the new-class slice")
        probs = probs[:, head.out - n_new:]
    elif head.kind != "unlabelled":
        raise ValueError(f"cannot cluster with a {head.kind} head")
    pred = np.argmax(probs, axis=1)
    return pred if np.ndim(z) > 1 else pred[0]


def extend_head(head: Head, c_new: int, rng: np.random.Generator) -> Head:
    """Labelled head with ``c_new`` extra freshly initialised output columns."""
    if head.kind != "labelled":
        raise ValueError(f"only a labelled head can be extended, got {head.kind}")
    if c_new <= 0:
        raise ValueError(f"c_new must be positive, got {c_new}")
    dim, old = head.weight.value.shape
    new_w = glorot_uniform(rng, dim, old + c_new)[:, old:]
    weight = Parameter(np.concatenate([head.weight.value, new_w], axis=1))
    bias = Parameter(np.concatenate([head.bias.value, np.zeros(c_new)]))
    return Head("incremental", Linear(weight, bias))


@dataclass(eq=False)
class Model:
    config: BackboneConfig
    backbone: Backbone
    rng: np.random.Generator
    heads: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: BackboneConfig, seed: int) -> "Model":
        rng = np.random.default_rng(seed)
        return cls(config, Backbone.init(config, rng), rng, {}, {"stages": []})

    def add_head(self, kind: str, out: int) -> Head:
        head = Head.init(kind, self.config.feature_dim, out, self.rng)
        self.heads[kind] = head
        return head

    def parameters(self):
        params = self.backbone.parameters()
        for kind in HEAD_KINDS:
            if kind in self.heads:
                params += self.heads[kind].parameters()
        return params

    def features(self, x: np.ndarray) -> np.ndarray:
        return forward_features(self.backbone, x)

    def mark_stage(self, stage: str):
        self.meta.setdefault("stages", []).append(stage)

    def has_stage(self, stage: str) -> bool:
        return stage in self.meta.get("stages", [])

    def snapshot(self):
        return [p.value.copy() for p in self.parameters()]

    def named_tensors(self):
        out = []
        for i, layer in enumerate(self.backbone.layers):
            out.append((f"backbone.{i}.weight", layer.weight))
            out.append((f"backbone.{i}.bias", layer.bias))
        for kind in HEAD_KINDS:
            if kind in self.heads:
                out.append((f"head.{kind}.weight", self.heads[kind].weight))
                out.append((f"head.{kind}.bias", self.heads[kind].bias))
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def encode_checkpoint(model: Model) -> bytes:
    tensors = model.named_tensors()
    header = {
        "backbone": model.config.to_dict(),
        "backbone_digest": model.config.digest(),
        "heads": [{"kind": k, "out": model.heads[k].out} for k in HEAD_KINDS if k in model.heads],
        "tensors": [{"name": n, "shape": list(p.value.shape), "frozen": p.frozen}
                    for n, p in tensors],
        "rng_state": _jsonable(model.rng.bit_generator.state),
        "meta": _jsonable(model.meta),
    }
    head_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(head_bytes)), head_bytes]
    parts += [np.ascontiguousarray(p.value, dtype="<f8").tobytes() for _, p in tensors]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes, expected_digest: str | None = None) -> Model:
    if len(buf) < 14:
        raise CheckpointError("file too short for a checkpoint header", len(buf))
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError("bad magic", 0)
    version, head_len = struct.unpack("<HI", buf[8:14])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}", 8)
    pos = 14
    if len(buf) < pos + head_len:
        raise CheckpointError("truncated header", len(buf))
    try:
        header = json.loads(buf[pos:pos + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}", pos) from None
    pos += head_len

    try:
        config = BackboneConfig(**header["backbone"])
        table = header["tensors"]
        heads = header["heads"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed header: {exc}", 14) from None
    if config.digest() != header.get("backbone_digest"):
        raise CheckpointError("backbone config digest mismatch", 14)

    need = sum(8 * int(np.prod(t["shape"], dtype=np.int64)) for t in table)
    if len(buf) != pos + need + 4:
        raise CheckpointError(
            f"payload is {len(buf) - pos - 4} bytes, header declares {need}", min(len(buf), pos + need)
        )
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("CRC mismatch", len(buf) - 4)

    params = {}
    for t in table:
        n = int(np.prod(t["shape"], dtype=np.int64))
        value = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(t["shape"])
        params[t["name"]] = Parameter(value.astype(np.float64), frozen=bool(t["frozen"]))
        pos += 8 * n

    try:
        layers = [Linear(params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"])
                  for i in range(len(config.layer_widths))]
        backbone = Backbone(config, layers)
        model_heads = {h["kind"]: Head(h["kind"], Linear(params[f"head.{h['kind']}.weight"],
                                                        params[f"head.{h['kind']}.bias"]))
                       for h in heads}
    except (KeyError, DimensionError) as exc:
        raise CheckpointError(f"tensor table inconsistent with config: {exc}", 14) from None

    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    model = Model(config, backbone, rng, model_heads, header["meta"])
    if expected_digest is not None:
        found = model.meta.get("config_digest")
        if found != expected_digest:
            raise IncompatibleCheckpointError(
                f"checkpoint was produced by config digest {found}, expected {expected_digest}; "
                "rerun the earlier stage with this config"
            )
    return model


def save_checkpoint(model: Model, path):
    data = encode_checkpoint(model)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path, expected_digest: str | None = None) -> Model:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expected_digest)
