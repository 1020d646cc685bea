"""The two-branch model: shared convolutional trunk, an identity branch with
a bottleneck embedding, an expression branch with one extra dense layer, and
the task-weighting unit (a single dense-to-softmax head on the shared
features) whose batch-averaged outputs weight the two losses.

Parameters live in a flat name -> float64 array dict; batch-norm running
statistics are separate non-trainable buffers. Checkpoints round-trip both
bit-exactly.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .errors import CompatibilityError, ConfigError, DataError, FormatError

CHECKPOINT_MAGIC = b"FLNP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvBlockSpec:
    filters: int
    kernel: int = 3
    pool: bool = True


@dataclass
class ModelConfig:
    input_hw: tuple = (32, 32)
    in_channels: int = 1
    trunk: tuple = (ConvBlockSpec(16), ConvBlockSpec(32), ConvBlockSpec(64))
    embedding_dim: int = 64
    k_id: int = 20
    k_expr: int = 7
    dropout: float = 0.5

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.trunk = tuple(
            b if isinstance(b, ConvBlockSpec) else ConvBlockSpec(**b) for b in self.trunk)
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.k_id < 2:
            raise ConfigError(f"k_id must be >= 2, got {self.k_id}")
        if self.k_expr not in (7, 8):
            raise ConfigError(f"k_expr must be 7 or 8, got {self.k_expr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        self.shared_dim()  # must flatten cleanly

    def shared_dim(self) -> int:
        """Flattened width of the trunk output, from the block arithmetic."""
        h, w = self.input_hw
        c = self.in_channels
        for i, block in enumerate(self.trunk):
            c = block.filters
            if block.pool:
                if h % 2 or w % 2:
                    raise ConfigError(
                        f"trunk block {i} pools odd extents {h}x{w}; adjust input/pools")
                h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ConfigError("trunk pools the feature map away entirely")
        return c * h * w

    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "in_channels": self.in_channels,
            "trunk": [{"filters": b.filters, "kernel": b.kernel, "pool": b.pool}
                      for b in self.trunk],
            "embedding_dim": self.embedding_dim,
            "k_id": self.k_id,
            "k_expr": self.k_expr,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"input_hw", "in_channels", "trunk", "embedding_dim", "k_id",
                 "k_expr", "dropout"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict = field(default_factory=dict)   # name -> float64 array
    buffers: dict = field(default_factory=dict)  # batch-norm running stats

    def clone(self) -> "ModelState":
        return ModelState(
            config=copy.deepcopy(self.config),
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def names(self, *prefixes: str) -> list:
        if not prefixes:
            return list(self.params)
        return [n for n in self.params if n.startswith(prefixes)]

    def decayed_names(self) -> set:
        """Weight matrices/filters only: no biases, no batch-norm scale/shift,
        nothing in the weighting unit."""
        return {n for n in self.params if n.endswith(".w") and not n.startswith("dwu.")}


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Xavier weights, zero biases, unit batch-norm scale."""
    rng = np.random.default_rng([int(seed), 11])
    state = ModelState(config=config)
    p, buf = state.params, state.buffers

    c_in = config.in_channels
    for i, block in enumerate(config.trunk):
        pre = f"trunk.block{i}"
        p[f"{pre}.conv.w"] = layers.xavier_init((block.filters, c_in, block.kernel, block.kernel), rng)
        p[f"{pre}.conv.b"] = np.zeros(block.filters)
        p[f"{pre}.bn.gamma"] = np.ones(block.filters)
        p[f"{pre}.bn.beta"] = np.zeros(block.filters)
        buf[f"{pre}.bn.mean"] = np.zeros(block.filters)
        buf[f"{pre}.bn.var"] = np.ones(block.filters)
        c_in = block.filters

    d = config.shared_dim()
    e = config.embedding_dim
    p["branch1.bottleneck.w"] = layers.xavier_init((d, e), rng)
    p["branch1.bottleneck.b"] = np.zeros(e)
    p["branch1.classifier.w"] = layers.xavier_init((e, config.k_id), rng)
    p["branch1.classifier.b"] = np.zeros(config.k_id)
    p["branch2.bottleneck.w"] = layers.xavier_init((d, e), rng)
    p["branch2.bottleneck.b"] = np.zeros(e)
    p["branch2.extra.w"] = layers.xavier_init((e, e), rng)
    p["branch2.extra.b"] = np.zeros(e)
    p["branch2.classifier.w"] = layers.xavier_init((e, config.k_expr), rng)
    p["branch2.classifier.b"] = np.zeros(config.k_expr)
    p["dwu.w"] = layers.xavier_init((d, 2), rng)
    p["dwu.b"] = np.zeros(2)
    return state


def lift_params(state: ModelState, tape: ad.Tape) -> dict:
    """Wrap every parameter as a leaf on the tape (once per step)."""
    return {name: tape.leaf(arr) for name, arr in state.params.items()}


def _bn_view(state: ModelState, prefix: str) -> dict:
    return {"mean": state.buffers[f"{prefix}.mean"],
            "var": state.buffers[f"{prefix}.var"]}


def forward_shared(state: ModelState, lifted: dict, images: np.ndarray,
                   mode: str) -> Tensor:
    """Trunk conv blocks then flatten to (m, shared_dim)."""
    cfg = state.config
    images = np.asarray(images, dtype=np.float64)
    expect = (cfg.in_channels, *cfg.input_hw)
    if images.ndim != 4 or images.shape[1:] != expect:
        raise DataError(f"input batch shape {images.shape} does not match "
                        f"(m, {expect[0]}, {expect[1]}, {expect[2]})")
    tape = next(iter(lifted.values())).tape
    # trunk runs channels-last; one layout conversion on the raw batch
    x = tape.leaf(np.ascontiguousarray(images.transpose(0, 2, 3, 1)))
    for i, block in enumerate(cfg.trunk):
        pre = f"trunk.block{i}"
        x = layers.conv_block(
            x, lifted[f"{pre}.conv.w"], lifted[f"{pre}.conv.b"],
            lifted[f"{pre}.bn.gamma"], lifted[f"{pre}.bn.beta"],
            _bn_view(state, f"{pre}.bn"), mode, pool=block.pool)
    m = images.shape[0]
    return ad.reshape(x, (m, cfg.shared_dim()))


def forward_branch1(state: ModelState, lifted: dict, shared: Tensor,
                    mode: str, rng=None):
    """Dropout -> bottleneck dense -> relu embedding -> identity logits."""
    x = layers.dropout(shared, state.config.dropout, mode, rng)
    emb = ad.relu(layers.dense(x, lifted["branch1.bottleneck.w"],
                               lifted["branch1.bottleneck.b"]))
    logits = layers.dense(emb, lifted["branch1.classifier.w"],
                          lifted["branch1.classifier.b"])
    return emb, logits


def forward_branch2(state: ModelState, lifted: dict, shared: Tensor,
                    mode: str, rng=None) -> Tensor:
    """Mirror of branch 1 plus one extra dense layer before the classifier."""
    x = layers.dropout(shared, state.config.dropout, mode, rng)
    h = ad.relu(layers.dense(x, lifted["branch2.bottleneck.w"],
                             lifted["branch2.bottleneck.b"]))
    h = ad.relu(layers.dense(h, lifted["branch2.extra.w"], lifted["branch2.extra.b"]))
    return layers.dense(h, lifted["branch2.classifier.w"], lifted["branch2.classifier.b"])


def dynamic_weights(state: ModelState, lifted: dict, shared: Tensor):
    """Per-sample two-way softmax over a dense head, batch-averaged into the
    scalar task weights (w1, w2); w1 + w2 == 1 up to rounding."""
    logits = layers.dense(shared, lifted["dwu.w"], lifted["dwu.b"])
    per_sample = layers.softmax_rows(logits)          # (m, 2)
    means = ad.col_mean(per_sample)                   # (1, 2)
    tape = shared.tape
    w1 = ad.reduce_sum(ad.mul(means, tape.leaf(np.array([[1.0, 0.0]]))))
    w2 = ad.reduce_sum(ad.mul(means, tape.leaf(np.array([[0.0, 1.0]]))))
    return w1, w2


def transfer_branch1_to_branch2(state: ModelState, seed: int) -> ModelState:
    """Copy the trunk as-is and branch 1's shape-compatible layers into
    branch 2; the extra dense layer and the expression classifier restart
    from Xavier with zero biases."""
    new = state.clone()
    mismatched = [
        name for name in ("bottleneck.w", "bottleneck.b")
        if state.params[f"branch1.{name}"].shape != state.params[f"branch2.{name}"].shape]
    if mismatched:
        raise CompatibilityError(f"branch shapes incompatible for transfer: {mismatched}")
    new.params["branch2.bottleneck.w"] = state.params["branch1.bottleneck.w"].copy()
    new.params["branch2.bottleneck.b"] = state.params["branch1.bottleneck.b"].copy()
    rng = np.random.default_rng([int(seed), 13])
    e = state.config.embedding_dim
    new.params["branch2.extra.w"] = layers.xavier_init((e, e), rng)
    new.params["branch2.extra.b"] = np.zeros(e)
    new.params["branch2.classifier.w"] = layers.xavier_init((e, state.config.k_expr), rng)
    new.params["branch2.classifier.b"] = np.zeros(state.config.k_expr)
    return new


# ---------------------------------------------------------------------------
# checkpoint I/O: magic, u32 version, u32 header length, JSON header with the
# config and a named table of (name, shape, byte offset), then little-endian
# float64 blobs in table order.


def save_checkpoint(state: ModelState, path) -> None:
    entries = []
    offset = 0
    blobs = []
    for section, table in (("params", state.params), ("buffers", state.buffers)):
        for name, arr in table.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"section": section, "name": name,
                            "shape": list(arr.shape), "offset": offset})
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps({"config": state.config.to_dict(), "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 12 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    data = blob[12 + header_len:]
    state = ModelState(config=ModelConfig.from_dict(header["config"]))
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated data for tensor '{entry['name']}'")
        arr = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).copy()
        if entry["section"] == "params":
            state.params[entry["name"]] = arr
        elif entry["section"] == "buffers":
            state.buffers[entry["name"]] = arr
        else:
            raise FormatError(f"{path}: unknown tensor section {entry['section']!r}")
    missing = set(init_model(state.config, 0).params) - set(state.params)
    if missing:
        raise FormatError(f"{path}: checkpoint missing parameters {sorted(missing)}")
    return state
