"""Desk-scale grading network: conv trunk, spatial-attention pooling, softmax head.

The trunk is a stack of conv-relu-maxpool blocks; a single-head soft
attention layer pools the final feature map into one vector per image
(location weights sum to 1), followed by a hidden dense layer and a 5-way
softmax classifier. Training is plain mini-batch Adam on cross-entropy.

Checkpoints are a small binary container: magic ``DRCKPT``, a u16 version,
a length-prefixed JSON header (config, tensor table, training metadata),
then the raw little-endian float32 weight blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .fundus import DataError, DatasetManifest, FundusImage, load_image, preprocess, split_rng

CHECKPOINT_MAGIC = b"DRCKPT"
CHECKPOINT_VERSION = 1

_STAGE_SHUFFLE = 5


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 128
    # (out_channels, kernel, stride, pool) per trunk block; the stride-2 first
    # block keeps laptop-CPU training in minutes without touching weight shapes
    conv_blocks: tuple = ((16, 3, 2, 2), (32, 3, 1, 2), (64, 3, 1, 2), (64, 3, 1, 2))
    attention_channels: int = 64
    hidden_units: int = 64
    classes: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks",
                           tuple(tuple(b) for b in self.conv_blocks))
        if self.classes != 5:
            raise ValueError(f"grading model is 5-class, got classes={self.classes}")
        if self.conv_blocks and self.conv_blocks[-1][0] != self.attention_channels:
            raise ValueError(
                f"attention_channels ({self.attention_channels}) must equal the last "
                f"trunk block's out_channels ({self.conv_blocks[-1][0]})"
            )
        size = self.input_size
        for i, (_, kernel, stride, pool) in enumerate(self.conv_blocks):
            size = (size + 2 * (kernel // 2) - kernel) // stride + 1
            size = size // pool
            if size <= 0:
                raise ValueError(f"trunk block {i} produces non-positive spatial extent")
        if size < 4:
            raise ValueError(
                f"spatial extent before attention must be >= 4, config gives {size}"
            )

    @property
    def attention_extent(self) -> int:
        size = self.input_size
        for _, kernel, stride, pool in self.conv_blocks:
            size = ((size + 2 * (kernel // 2) - kernel) // stride + 1) // pool
        return size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_blocks"] = tuple(tuple(b) for b in d["conv_blocks"])
        return cls(**d)


@dataclass
class PredictionResult:
    probabilities: tuple
    grade: int
    model_id: str


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.epoch_loss[-1] if self.epoch_loss else None

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.epoch_accuracy[-1] if self.epoch_accuracy else None


def attention_pool(features: T.Tensor, weight: T.Tensor, bias: T.Tensor
                   ) -> tuple[T.Tensor, np.ndarray]:
    """Soft attention pooling over spatial locations.

    A 1x1 convolution (weight: one scalar per channel, plus a bias) scores
    every location; softmax over the H*W locations gives weights alpha that
    sum to 1; the output is the alpha-weighted sum of location feature
    vectors. Returns (pooled (N,C) tensor, alpha (N, H*W) array).
    """
    n, c, h, w = features.data.shape
    if weight.data.shape != (c,):
        raise T.ShapeError(
            f"attention weight shape {weight.data.shape} does not match channels ({c},)"
        )
    flat = features.data.reshape(n, c, h * w)
    scores = np.einsum("c,nci->ni", weight.data, flat) + bias.data.reshape(())
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    alpha = e / e.sum(axis=1, keepdims=True)  # (N, HW)
    pooled = np.einsum("nci,ni->nc", flat, alpha)

    def grad_fn(g):
        d_alpha = np.einsum("nc,nci->ni", g, flat)
        dot = (d_alpha * alpha).sum(axis=1, keepdims=True)
        ds = alpha * (d_alpha - dot)
        d_flat = np.einsum("nc,ni->nci", g, alpha) + np.einsum("c,ni->nci", weight.data, ds)
        d_weight = np.einsum("ni,nci->c", ds, flat)
        # softmax over locations is shift-invariant, so the score bias has
        # exactly zero gradient (sum of ds vanishes analytically)
        d_bias = np.zeros_like(bias.data)
        return d_flat.reshape(n, c, h, w), d_weight, d_bias

    pooled_t = T.from_op(pooled, (features, weight, bias), grad_fn, "attention_pool")
    return pooled_t, alpha


class Model:
    """The grading network: immutable weights after training, stateless forward."""

    def __init__(self, config: ModelConfig, weights: dict[str, T.Tensor],
                 meta: Optional[dict] = None, model_id: str = ""):
        self.config = config
        self.weights = weights
        self.meta = dict(meta or {})
        self.model_id = model_id
        self.last_attention: Optional[np.ndarray] = None

    @property
    def parameters(self) -> dict[str, T.Tensor]:
        return self.weights

    def parameter_count(self) -> int:
        return sum(int(np.prod(t.data.shape)) for t in self.weights.values())

    def set_trainable(self, trainable: bool) -> None:
        for t in self.weights.values():
            t.requires_grad = trainable

    def forward_logits(self, x: T.Tensor) -> T.Tensor:
        """Forward pass from (N,3,H,W) input to (N,5) pre-softmax logits."""
        out = x
        for i, (_, kernel, stride, _pool) in enumerate(self.config.conv_blocks):
            out = T.conv2d(out, self.weights[f"block{i}.kernel"],
                           stride=stride, padding=kernel // 2)
            out = T.add(out, self.weights[f"block{i}.bias"])
            out = T.relu(out)
            out = T.maxpool(out, window=_pool, stride=_pool)
        pooled, alpha = attention_pool(out, self.weights["attention.weight"],
                                       self.weights["attention.bias"])
        self.last_attention = alpha
        hidden = T.relu(T.dense(pooled, self.weights["head.weight"],
                                self.weights["head.bias"]))
        return T.dense(hidden, self.weights["classifier.weight"],
                       self.weights["classifier.bias"])

    def forward_probs(self, x: T.Tensor) -> T.Tensor:
        return T.softmax(self.forward_logits(x))


def build(config: ModelConfig, model_id: str = "") -> Model:
    """He-uniform initialized model; identical seeds give identical weights."""
    rng = split_rng(config.seed, 0, 0)

    def he_uniform(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(np.float32)

    weights: dict[str, T.Tensor] = {}
    in_ch = 3
    for i, (out_ch, kernel, _stride, _pool) in enumerate(config.conv_blocks):
        weights[f"block{i}.kernel"] = T.Tensor(
            he_uniform((out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))
        weights[f"block{i}.bias"] = T.Tensor(np.zeros((1, out_ch, 1, 1), dtype=np.float32))
        in_ch = out_ch
    c = config.attention_channels
    weights["attention.weight"] = T.Tensor(he_uniform((c,), c))
    weights["attention.bias"] = T.Tensor(np.zeros((1,), dtype=np.float32))
    weights["head.weight"] = T.Tensor(he_uniform((c, config.hidden_units), c))
    weights["head.bias"] = T.Tensor(np.zeros(config.hidden_units, dtype=np.float32))
    weights["classifier.weight"] = T.Tensor(
        he_uniform((config.hidden_units, config.classes), config.hidden_units))
    weights["classifier.bias"] = T.Tensor(np.zeros(config.classes, dtype=np.float32))
    return Model(config, weights, model_id=model_id)


class Adam:
    """Adam with the conventional bias correction; lr=0 leaves weights untouched."""

    def __init__(self, params: dict[str, T.Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * (g * g)
            m_hat = self.m[k] / b1c
            v_hat = self.v[k] / b2c
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype)


def _one_hot(labels: np.ndarray, classes: int = 5) -> np.ndarray:
    out = np.zeros((len(labels), classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def load_training_arrays(manifest: DatasetManifest, root=None, input_size: int = 128
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Preprocess every manifest entry into stacked (N,3,size,size) + label arrays."""
    if not manifest.entries:
        raise DataError("manifest is empty")
    root = Path(root) if root is not None else Path(".")
    images = []
    labels = []
    for e in manifest.entries:
        img = load_image(root / e.path)
        images.append(preprocess(img, size=input_size).data)
        labels.append(e.label)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def train(model: Model, manifest: DatasetManifest, epochs: int,
          batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
          root=None, progress=None) -> TrainReport:
    """Mini-batch Adam on cross-entropy; shuffling is seed-deterministic.

    ``progress``, when given, is called with (epoch, loss, accuracy) after
    every epoch.
    """
    inputs, labels = load_training_arrays(manifest, root,
                                          input_size=model.config.input_size)
    onehot = _one_hot(labels, model.config.classes)
    n = len(labels)
    model.set_trainable(True)
    opt = Adam(model.weights, lr=lr)
    report = TrainReport()
    for epoch in range(epochs):
        order = split_rng(seed, epoch, _STAGE_SHUFFLE).permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = T.Tensor(inputs[idx])
            y = onehot[idx]
            probs = model.forward_probs(x)
            loss = T.cross_entropy(probs, y)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((probs.data.argmax(axis=1) == labels[idx]).sum())
        epoch_loss = total_loss / n
        epoch_acc = correct / n
        report.epoch_loss.append(epoch_loss)
        report.epoch_accuracy.append(epoch_acc)
        if progress is not None:
            progress(epoch, epoch_loss, epoch_acc)
    model.set_trainable(False)
    model.meta.update({
        "epochs": model.meta.get("epochs", 0) + epochs,
        "final_loss": report.final_loss,
        "final_accuracy": report.final_accuracy,
    })
    return report


def predict(model: Model, img: FundusImage) -> PredictionResult:
    """Grade one image; ties in the argmax break toward the lower grade."""
    x = T.Tensor(preprocess(img, size=model.config.input_size).data[None, ...])
    probs = model.forward_probs(x).data[0]
    grade = int(probs.argmax())  # argmax returns the first (lowest) index on ties
    return PredictionResult(
        probabilities=tuple(float(p) for p in probs),
        grade=grade,
        model_id=model.model_id,
    )


def save(model: Model, path) -> None:
    """Write the checkpoint container; round-trips to bit-identical forwards."""
    tensor_table = []
    blobs = []
    offset = 0
    for name, t in model.weights.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        tensor_table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": model.config.to_dict(),
        "tensors": tensor_table,
        "metadata": model.meta,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load(path, model_id: str = "") -> Model:
    """Read a checkpoint, validating magic, version, header, and tensor sizes."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return load_bytes(raw, model_id=model_id, origin=str(path))


def load_bytes(raw: bytes, model_id: str = "", origin: str = "<bytes>") -> Model:
    if len(raw) < len(CHECKPOINT_MAGIC) + 6:
        raise CheckpointError(f"checkpoint {origin} is truncated")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"checkpoint {origin} has wrong magic bytes")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {origin} has version {version}, supported: {CHECKPOINT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if pos + header_len > len(raw):
        raise CheckpointError(f"checkpoint {origin} is truncated inside the header")
    try:
        header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        table = header["tensors"]
        meta = header.get("metadata", {})
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {origin} has a malformed header: {exc}") from exc
    blob = raw[pos + header_len :]

    expected = {name: t.data.shape for name, t in build(config).weights.items()}
    weights: dict[str, T.Tensor] = {}
    total = 0
    for entry in table:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        nbytes = int(np.prod(shape)) * 4
        total += nbytes
        if name not in expected:
            raise CheckpointError(f"checkpoint {origin} has unexpected tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointError(
                f"checkpoint {origin} tensor {name!r} has shape {shape}, "
                f"config requires {expected[name]}"
            )
        if offset < 0 or offset + nbytes > len(blob):
            raise CheckpointError(f"checkpoint {origin} is truncated at tensor {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset)
        weights[name] = T.Tensor(arr.reshape(shape).copy())
    missing = set(expected) - set(weights)
    if missing:
        raise CheckpointError(f"checkpoint {origin} is missing tensors: {sorted(missing)}")
    if total != len(blob):
        raise CheckpointError(
            f"checkpoint {origin} blob is {len(blob)} bytes, tensor table needs {total}"
        )
    return Model(config, weights, meta=meta, model_id=model_id)
