"""Encoder-decoder segmentation network built on the autodiff engine.

The encoder stacks conv/batchnorm/ReLU groups terminated by 2x2 max pooling;
the decoder mirrors it, upsampling with the stored pooling indices.  The last
decoder convolution is a plain classifier emitting two channels into a
per-pixel softmax, so the probability map has the same spatial size as the
input image.  Inputs whose sides are not divisible by 2^num_blocks are
zero-padded (bottom/right) internally and the logits cropped back.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, PoolIndices, RunningStats, Tensor
from .errors import ConfigError, DivergenceError, NumericsError, ShapeError

KERNEL_SIZE = 3
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Layer plan of the network: per-block channel widths and conv counts."""

    num_blocks: int
    channels_per_block: tuple[int, ...]
    convs_per_block: tuple[int, ...]
    input_size: tuple[int, int]
    preset: str = "custom"

    @classmethod
    def full(cls) -> "ModelConfig":
        """Five-block VGG-16-style preset for 120x160 inputs."""
        return cls(5, (64, 128, 256, 512, 512), (2, 2, 3, 3, 3), (120, 160), "full")

    @classmethod
    def mini(cls) -> "ModelConfig":
        """Three-block desk-scale preset for 32x40 inputs."""
        return cls(3, (8, 16, 32), (2, 2, 2), (32, 40), "mini")

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if len(self.channels_per_block) != self.num_blocks:
            raise ConfigError("channels_per_block length must equal num_blocks")
        if len(self.convs_per_block) != self.num_blocks:
            raise ConfigError("convs_per_block length must equal num_blocks")
        if any(c < 1 for c in self.channels_per_block) or any(c < 1 for c in self.convs_per_block):
            raise ConfigError("channel and conv counts must be >= 1")
        h, w = self.input_size
        stride = 2 ** self.num_blocks
        if h < stride or w < stride:
            raise ConfigError(f"input {h}x{w} too small for {self.num_blocks} pooling stages (needs >= {stride})")

    @property
    def padded_size(self) -> tuple[int, int]:
        """Smallest (H, W) >= input_size with both sides divisible by 2^num_blocks."""
        stride = 2 ** self.num_blocks
        h, w = self.input_size
        return (-(-h // stride) * stride, -(-w // stride) * stride)

    def to_dict(self) -> dict:
        return {"num_blocks": self.num_blocks,
                "channels_per_block": list(self.channels_per_block),
                "convs_per_block": list(self.convs_per_block),
                "input_size": list(self.input_size),
                "preset": self.preset}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(int(d["num_blocks"]), tuple(d["channels_per_block"]),
                   tuple(d["convs_per_block"]), tuple(d["input_size"]),
                   str(d.get("preset", "custom")))


def _conv_layers(config: ModelConfig) -> list[tuple[str, int, int, bool]]:
    """Flat (name, c_in, c_out, has_batchnorm) plan over encoder then decoder."""
    ch = config.channels_per_block
    layers = []
    c_prev = 1
    for b in range(config.num_blocks):
        for i in range(config.convs_per_block[b]):
            c_out = ch[b]
            layers.append((f"enc{b}_conv{i}", c_prev, c_out, True))
            c_prev = c_out
    for b in range(config.num_blocks - 1, -1, -1):
        n_convs = config.convs_per_block[b]
        for i in range(n_convs):
            last = i == n_convs - 1
            if last and b == 0:
                layers.append((f"dec{b}_conv{i}", c_prev, 2, False))  # classifier
                c_prev = 2
            else:
                c_out = ch[b - 1] if last else ch[b]
                layers.append((f"dec{b}_conv{i}", c_prev, c_out, True))
                c_prev = c_out
    return layers


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    bn_stats: dict[str, RunningStats]
    mode: str = "train"

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.mode = mode

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count: k*k*c_in*c_out + c_out per conv, plus
    2*c_out per batchnorm."""
    total = 0
    for _, c_in, c_out, has_bn in _conv_layers(config):
        total += KERNEL_SIZE * KERNEL_SIZE * c_in * c_out + c_out
        if has_bn:
            total += 2 * c_out
    return total


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """He-initialized model; bit-identical for identical (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    bn_stats: dict[str, RunningStats] = {}
    for name, c_in, c_out, has_bn in _conv_layers(config):
        std = np.sqrt(2.0 / (c_in * KERNEL_SIZE * KERNEL_SIZE))
        kern = rng.normal(0.0, std, (c_out, c_in, KERNEL_SIZE, KERNEL_SIZE))
        params[f"{name}_w"] = Tensor(kern.astype(np.float32), requires_grad=True)
        params[f"{name}_b"] = Tensor(np.zeros(c_out, np.float32), requires_grad=True)
        if has_bn:
            params[f"{name}_gamma"] = Tensor(np.ones(c_out, np.float32), requires_grad=True)
            params[f"{name}_beta"] = Tensor(np.zeros(c_out, np.float32), requires_grad=True)
            bn_stats[name] = RunningStats.zeros(c_out)
    return Model(config, params, bn_stats, mode="train")


def _conv_group(model: Model, name: str, x: Tensor, with_bn_relu: bool) -> Tensor:
    x = ad.conv2d(x, model.params[f"{name}_w"], model.params[f"{name}_b"])
    if with_bn_relu:
        x = ad.batchnorm(x, model.params[f"{name}_gamma"], model.params[f"{name}_beta"],
                         model.mode, model.bn_stats[name])
        x = ad.relu(x)
    return x


def forward(model: Model, image: Tensor) -> Tensor:
    """(1,H,W) image at config.input_size -> (2,H,W) per-pixel probabilities."""
    cfg = model.config
    h, w = cfg.input_size
    if image.data.shape != (1, h, w):
        raise ShapeError(f"expected input (1,{h},{w}), got {image.data.shape}")

    ph, pw = cfg.padded_size
    if (ph, pw) != (h, w):
        padded = np.zeros((1, ph, pw), np.float32)
        padded[:, :h, :w] = image.data
        x = Tensor(padded, requires_grad=image.requires_grad)
    else:
        x = image

    pool_stack: list[tuple[PoolIndices, tuple[int, int, int]]] = []
    for b in range(cfg.num_blocks):
        for i in range(cfg.convs_per_block[b]):
            x = _conv_group(model, f"enc{b}_conv{i}", x, with_bn_relu=True)
        pre_pool_shape = x.data.shape
        x, idx = ad.maxpool2(x)
        pool_stack.append((idx, pre_pool_shape))

    for b in range(cfg.num_blocks - 1, -1, -1):
        idx, shape = pool_stack.pop()
        x = ad.maxunpool2(x, idx, shape)
        n_convs = cfg.convs_per_block[b]
        for i in range(n_convs):
            classifier = b == 0 and i == n_convs - 1
            x = _conv_group(model, f"dec{b}_conv{i}", x, with_bn_relu=not classifier)

    assert not pool_stack, "every pooling must be consumed by exactly one unpooling"
    if (ph, pw) != (h, w):
        x = ad.crop2d(x, h, w)
    return ad.pixel_softmax(x)


def pool_unpool_pairing(config: ModelConfig) -> list[tuple[str, str]]:
    """(encoder pooling, decoder unpooling) pairs in consumption order."""
    n = config.num_blocks
    return [(f"enc{b}_pool", f"dec{b}_unpool") for b in range(n - 1, -1, -1)]


@dataclass
class TrainConfig:
    epochs: int = 60
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 4
    seed: int = 0
    class_weights: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "learning_rate": self.learning_rate,
                "momentum": self.momentum, "weight_decay": self.weight_decay,
                "batch_size": self.batch_size, "seed": self.seed,
                "class_weights": list(self.class_weights) if self.class_weights else None}


def image_to_input(image: np.ndarray) -> Tensor:
    """uint8 (H,W) grayscale -> (1,H,W) float tensor scaled to [0,1]."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2D grayscale image, got shape {arr.shape}")
    return Tensor(arr[None].astype(np.float32) / np.float32(255.0))


def inverse_class_weights(masks: list[np.ndarray]) -> tuple[float, float]:
    """Inverse-frequency class weights, normalized to mean 1."""
    total = sum(m.size for m in masks)
    fg = sum(int(np.asarray(m, bool).sum()) for m in masks)
    bg = total - fg
    if fg == 0 or bg == 0:
        return (1.0, 1.0)
    w0, w1 = total / (2.0 * bg), total / (2.0 * fg)
    return (w0, w1)


def train(model: Model, dataset: list[tuple[np.ndarray, np.ndarray]],
          cfg: TrainConfig) -> tuple[Model, list[float]]:
    """SGD-with-momentum training loop over (image, mask) pairs.

    Shuffling, and therefore the whole run, is a deterministic function of
    cfg.seed.  Returns the model switched to infer mode plus the per-epoch
    mean loss history.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    h, w = model.config.input_size
    inputs = []
    for i, (image, mask) in enumerate(dataset):
        arr = np.asarray(image)
        if arr.shape != (h, w):
            raise ShapeError(f"dataset image {i} has shape {arr.shape}, expected {(h, w)}")
        if np.asarray(mask).shape != (h, w):
            raise ShapeError(f"dataset mask {i} has shape {np.asarray(mask).shape}, expected {(h, w)}")
        inputs.append((image_to_input(arr), np.asarray(mask, bool)))

    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.for_params(model.params, cfg.learning_rate,
                                      cfg.momentum, cfg.weight_decay)
    model.set_mode("train")
    history: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(inputs))
        epoch_losses: list[float] = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grads()
            try:
                for j in batch:
                    x, mask = inputs[j]
                    probs = forward(model, x)
                    loss = ad.cross_entropy_loss(probs, mask, cfg.class_weights)
                    loss.backward(seed=1.0 / len(batch))
                    epoch_losses.append(loss.item())
                grads = {name: p.grad for name, p in model.params.items()}
                ad.sgd_momentum_step(model.params, grads, state)
            except NumericsError as exc:
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}: {exc}",
                                      epoch=epoch, step=step) from exc
            step += 1
        history.append(float(np.mean(epoch_losses)))
    model.zero_grads()
    model.set_mode("infer")
    return model, history


def predict_mask(model: Model, image: Tensor, target_size: tuple[int, int]) -> np.ndarray:
    """Argmax mask (ties -> non-iris) upscaled to target_size by replication."""
    h, w = model.config.input_size
    th, tw = target_size
    if th % h or tw % w:
        raise ConfigError(f"target size {target_size} is not an integer multiple of {(h, w)}")
    prev_mode = model.mode
    model.set_mode("infer")
    try:
        probs = forward(model, image)
    finally:
        model.set_mode(prev_mode)
    native = probs.data[1] > probs.data[0]
    fy, fx = th // h, tw // w
    if fy == 1 and fx == 1:
        return native
    return np.repeat(np.repeat(native, fy, axis=0), fx, axis=1)


def save_model(model: Model, path: str | os.PathLike) -> None:
    """Self-describing checkpoint: versioned npz with config JSON, parameter
    blobs, and batchnorm running statistics (all little-endian float32)."""
    payload: dict[str, np.ndarray] = {
        "format_version": np.asarray(CHECKPOINT_VERSION, np.int64),
        "config_json": np.frombuffer(json.dumps({"config": model.config.to_dict()}).encode(), np.uint8),
    }
    for name, p in model.params.items():
        payload[f"param:{name}"] = p.data.astype("<f4")
    for name, stats in model.bn_stats.items():
        payload[f"bn_mean:{name}"] = stats.mean.astype("<f4")
        payload[f"bn_var:{name}"] = stats.var.astype("<f4")

    buf = io.BytesIO()
    np.savez(buf, **payload)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str | os.PathLike) -> Model:
    with np.load(path) as npz:
        version = int(npz["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        meta = json.loads(bytes(npz["config_json"]).decode())
        config = ModelConfig.from_dict(meta["config"])
        model = build_model(config, seed=0)
        for name, p in model.params.items():
            key = f"param:{name}"
            if key not in npz:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            blob = npz[key].astype(np.float32)
            if blob.shape != p.data.shape:
                raise ShapeError(f"checkpoint parameter {name!r} has shape {blob.shape}, expected {p.data.shape}")
            p.data = np.ascontiguousarray(blob)
        for name, stats in model.bn_stats.items():
            stats.mean = np.ascontiguousarray(npz[f"bn_mean:{name}"].astype(np.float32))
            stats.var = np.ascontiguousarray(npz[f"bn_var:{name}"].astype(np.float32))
    model.set_mode("infer")
    return model
