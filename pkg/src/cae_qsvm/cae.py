"""Convolutional autoencoders used as 64-feature extractors.

Two stacks are provided. ``resnet10`` is a plain (skip-free) ResNet10-style
encoder of one 7x7 stem with max-pooling and three 3x3 stride-2 stages,
global average pooled to (64, 1, 1), mirrored by five transposed
convolutions. ``simplified`` is three 3x3 stride-2 convolutions
(16 -> 8 -> 4 channels) and three transposed convolutions back. Both decode
to 32x32 and centre-crop to the input size.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, NumericalError, ShapeError
from .nn import (
    Activation,
    AdaptiveAvgPool2d,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    MaxPool2d,
    OptimizerState,
    Sequential,
    adam_update,
    mse_loss,
)
from .nn.functional import center_crop, center_crop_backward

LATENT_DIM = 64
SUPPORTED_SHAPES = {(1, 28, 28), (3, 32, 32), (1, 32, 32)}
ARCHITECTURES = ("resnet10", "simplified")
CHECKPOINT_MAGIC = b"QKCAE1"
MAX_ROTATION = 15.0


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "conv_transpose"
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    batchnorm: bool = False
    activation: str = "relu"
    pool: int = 0  # max-pool window applied after the activation


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    input_shape: tuple
    encoder: tuple
    decoder: tuple
    global_pool: bool = False

    @property
    def crop_target(self):
        return tuple(self.input_shape[1:])

    def to_dict(self):
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "global_pool": self.global_pool,
                "encoder": [asdict(l) for l in self.encoder],
                "decoder": [asdict(l) for l in self.decoder]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d["input_shape"]),
                   tuple(LayerSpec(**l) for l in d["encoder"]),
                   tuple(LayerSpec(**l) for l in d["decoder"]), bool(d["global_pool"]))


def build_network(kind, input_shape):
    """Layer stack for ``kind`` on images of ``input_shape`` (C, H, W)."""
    input_shape = tuple(int(s) for s in input_shape)
    if input_shape not in SUPPORTED_SHAPES:
        raise ConfigError(f"unsupported input shape {input_shape}; expected one of {sorted(SUPPORTED_SHAPES)}")
    c = input_shape[0]
    if kind == "resnet10":
        encoder = (
            LayerSpec("conv", 64, 7, 2, 3, batchnorm=True, pool=2),
            LayerSpec("conv", 128, 3, 2, 1, batchnorm=True),
            LayerSpec("conv", 256, 3, 2, 1, batchnorm=True),
            LayerSpec("conv", 64, 3, 2, 1, batchnorm=True),
        )
        decoder = (
            LayerSpec("conv_transpose", 32, 4, 2, 0),
            LayerSpec("conv_transpose", 16, 4, 2, 1),
            LayerSpec("conv_transpose", 8, 4, 2, 1),
            LayerSpec("conv_transpose", 4, 4, 2, 1),
            # keeps 32x32: the listed 4/2/4 geometry cannot map 32 -> 32
            LayerSpec("conv_transpose", c, 3, 1, 1, activation="tanh"),
        )
        spec = NetworkSpec(kind, input_shape, encoder, decoder, global_pool=True)
    elif kind == "simplified":
        encoder = tuple(LayerSpec("conv", ch, 3, 2, 1) for ch in (16, 8, 4))
        decoder = (
            LayerSpec("conv_transpose", 8, 3, 2, 1, output_padding=1),
            LayerSpec("conv_transpose", 16, 3, 2, 1, output_padding=1),
            LayerSpec("conv_transpose", c, 3, 2, 1, output_padding=1, activation="tanh"),
        )
        spec = NetworkSpec(kind, input_shape, encoder, decoder)
    else:
        raise ConfigError(f"unknown architecture {kind!r}; expected one of {ARCHITECTURES}")
    validate_spec(spec)
    return spec


def _stack(layers, in_channels, rng, encoder, global_pool=False):
    out = []
    c = in_channels
    for l in layers:
        cls = Conv2d if l.kind == "conv" else ConvTranspose2d
        kw = {"output_padding": l.output_padding} if l.kind == "conv_transpose" else {}
        out.append(cls(c, l.out_channels, l.kernel, l.stride, l.padding, rng=rng,
                       bias=not l.batchnorm, **kw))
        if l.batchnorm:
            out.append(BatchNorm2d(l.out_channels))
        out.append(Activation(l.activation))
        if l.pool:
            out.append(MaxPool2d(l.pool))
        c = l.out_channels
    if encoder and global_pool:
        out.append(AdaptiveAvgPool2d((1, 1)))
    return Sequential(out)


def validate_spec(spec):
    """Check the latent flattens to 64 and the decoder output covers the crop."""
    rng = np.random.default_rng(0)
    enc = _stack(spec.encoder, spec.input_shape[0], rng, True, spec.global_pool)
    latent = enc.output_shape(spec.input_shape)
    if int(np.prod(latent)) != LATENT_DIM:
        raise ShapeError(f"encoder output {latent} flattens to {int(np.prod(latent))}, not {LATENT_DIM}")
    dec = _stack(spec.decoder, latent[0], rng, False)
    out = dec.output_shape(latent)
    if out[0] != spec.input_shape[0] or out[1] < spec.input_shape[1] or out[2] < spec.input_shape[2]:
        raise ShapeError(f"decoder output {out} cannot be cropped to {spec.input_shape}")
    return latent, out


@dataclass
class EpochLoss:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class CaeModel:
    spec: NetworkSpec
    encoder: Sequential
    decoder: Sequential
    latent_shape: tuple
    trained: bool = False
    training_log: list = field(default_factory=list)

    @classmethod
    def create(cls, spec, seed=0):
        rng = np.random.default_rng(seed)
        latent, _ = validate_spec(spec)
        enc = _stack(spec.encoder, spec.input_shape[0], rng, True, spec.global_pool)
        dec = _stack(spec.decoder, latent[0], rng, False)
        return cls(spec, enc, dec, latent)

    @property
    def final_train_loss(self):
        return self.training_log[-1].train_loss if self.training_log else None

    def named_params(self):
        p = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        p.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        return p

    def set_named_params(self, named):
        self.encoder.set_params({k[4:]: v for k, v in named.items() if k.startswith("enc.")})
        self.decoder.set_params({k[4:]: v for k, v in named.items() if k.startswith("dec.")})

    def forward(self, x, training=False):
        z = self.encoder.forward(x, training)
        full = self.decoder.forward(z, training)
        out, crop = center_crop(full, *self.spec.crop_target)
        return z, out, crop

    def backward(self, dout, crop):
        self.encoder.backward(self.decoder.backward(center_crop_backward(dout, crop)))

    def grads(self):
        g = {f"enc.{k}": v for k, v in self.encoder.grads.items()}
        g.update({f"dec.{k}": v for k, v in self.decoder.grads.items()})
        return g


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-5
    val_split: float = 0.2
    seed: int = 0
    augmentation: bool = True

    def __post_init__(self):
        if not 0 < self.val_split < 1:
            raise ConfigError(f"val_split must lie in (0, 1), got {self.val_split}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch-norm statistics)")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay nonnegative")


# ----------------------------------------------------------- augmentation


def sample_augmentation(rng, n):
    """Per-image flip decisions and rotation angles in degrees."""
    hflip = rng.random(n) < 0.5
    vflip = rng.random(n) < 0.5
    angles = rng.uniform(-MAX_ROTATION, MAX_ROTATION, n)
    return hflip, vflip, angles


def flip_rotate(img, hflip, vflip, angle):
    """Transform one (C, H, W) image."""
    if hflip:
        img = img[:, :, ::-1]
    if vflip:
        img = img[:, ::-1, :]
    if angle == 0:
        return np.array(img)
    return ndimage.rotate(img, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)


def augment_batch(images, seed=None, enabled=True):
    """Random flips (p=0.5 per axis) and rotations in [-15, 15] degrees.

    Rotation is bilinear about the image centre with zero fill, so values
    stay inside the input range. ``seed`` may be an int or a Generator.
    """
    images = np.asarray(images)
    if not enabled:
        return images
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    hflip, vflip, angles = sample_augmentation(rng, len(images))
    out = np.empty_like(images)
    for i, img in enumerate(images):
        out[i] = flip_rotate(img, hflip[i], vflip[i], angles[i])
    lo, hi = float(images.min()), float(images.max())
    return np.clip(out, min(lo, 0.0), max(hi, 1.0))


# --------------------------------------------------------------- training


def _batches(order, batch_size):
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # a single-sample batch has no batch-norm statistics
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def split_indices(n, val_split, rng):
    """Seeded uniform (train, validation) index split."""
    perm = rng.permutation(n)
    n_val = int(round(val_split * n))
    if n_val == 0 or n_val == n:
        raise ConfigError(f"val_split={val_split} leaves an empty split of {n} images")
    return perm[n_val:], np.sort(perm[:n_val])


def _check_images(model, images):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(model.spec.input_shape):
        raise ShapeError(f"images of shape {images.shape[1:]} do not match network input {model.spec.input_shape}")
    return images


def evaluate_loss(model, images, batch_size=256):
    """Mean reconstruction MSE in eval mode."""
    if len(images) == 0:
        return float("nan")
    _, mse = reconstruct(model, images, batch_size, require_trained=False)
    return float(np.mean(mse))


def train(model, images, config):
    """Fit the autoencoder on ``images`` by minibatch Adam on the MSE.

    A seeded 1 - val_split / val_split split is drawn once; every epoch is one
    shuffled pass over the training part. Returns the model (updated in place)
    and its list of per-epoch losses.
    """
    images = _check_images(model, images)
    n = len(images)
    if config.epochs == 0:
        return model, []
    if n < config.batch_size:
        raise ConfigError(f"{n} images is fewer than batch_size={config.batch_size}")
    rng = np.random.default_rng(config.seed)
    tr_idx, val_idx = split_indices(n, config.val_split, rng)
    opt = OptimizerState(learning_rate=config.lr, weight_decay=config.weight_decay)
    log = []
    start = len(model.training_log)
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(rng.permutation(tr_idx), config.batch_size):
            xb = augment_batch(images[idx], rng, enabled=config.augmentation)
            _, out, crop = model.forward(xb, training=True)
            loss, dout = mse_loss(out, xb)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}; lower the learning rate (lr={config.lr}) "
                    "or check the input scaling"
                )
            model.backward(dout, crop)
            params, opt = adam_update(model.named_params(), model.grads(), opt)
            model.set_named_params(params)
            total += loss * len(idx)
            count += len(idx)
        val = evaluate_loss(model, images[val_idx], config.batch_size)
        log.append(EpochLoss(start + epoch, total / count, val))
    model.training_log.extend(log)
    model.trained = True
    return model, log


def _require_trained(model):
    if not model.trained:
        raise ConfigError("model has not been trained; call train() or load a checkpoint first")


def extract_features(model, images, batch_size=256):
    """Flattened eval-mode latent vectors, shape (n, 64)."""
    _require_trained(model)
    images = _check_images(model, images)
    out = np.empty((len(images), LATENT_DIM))
    for s in range(0, len(images), batch_size):
        z = model.encoder.forward(images[s : s + batch_size], training=False)
        out[s : s + batch_size] = z.reshape(len(z), -1)
    return out


def reconstruct(model, images, batch_size=256, require_trained=True):
    """Cropped reconstructions and per-image MSE."""
    if require_trained:
        _require_trained(model)
    images = _check_images(model, images)
    rec = np.empty_like(images)
    for s in range(0, len(images), batch_size):
        _, rec[s : s + batch_size], _ = model.forward(images[s : s + batch_size], training=False)
    mse = np.mean((rec - images) ** 2, axis=(1, 2, 3))
    return rec, mse


# ------------------------------------------------------------ persistence


def _blobs(model):
    for part, seq in (("enc", model.encoder), ("dec", model.decoder)):
        for i, layer in enumerate(seq.layers):
            for name, arr in list(layer.params.items()) + list(layer.state.items()):
                yield part, i, name, arr


def save_checkpoint(model, path):
    """Binary parameter container plus a ``.json`` sidecar holding the spec."""
    path = Path(path)
    blobs = list(_blobs(model))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", 1, len(blobs)))
        for part, idx, name, arr in blobs:
            key = f"{part}.{name}".encode()
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<IH", idx, len(key)))
            fh.write(key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    sidecar = {"spec": model.spec.to_dict(), "trained": model.trained,
               "training_log": [asdict(e) for e in model.training_log]}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def load_checkpoint(path):
    path = Path(path)
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    model = CaeModel.create(NetworkSpec.from_dict(side["spec"]))
    buf = path.read_bytes()
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", 0)
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        if version != 1:
            raise FormatError(f"{path}: unsupported checkpoint version {version}", pos)
        pos += 8
        for _ in range(count):
            start = pos
            idx, klen = struct.unpack_from("<IH", buf, pos)
            pos += 6
            part, name = buf[pos : pos + klen].decode().split(".", 1)
            pos += klen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(buf):
                raise FormatError(f"{path}: truncated blob {part}.{idx}.{name}", start)
            arr = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
            layer = (model.encoder if part == "enc" else model.decoder).layers[idx]
            store = layer.params if name in layer.params else layer.state
            if name not in store or store[name].shape != arr.shape:
                raise FormatError(f"{path}: blob {part}.{idx}.{name} does not match the network spec", start)
            store[name] = arr
    except struct.error:
        raise FormatError(f"{path}: truncated checkpoint", pos) from None
    model.trained = bool(side["trained"])
    model.training_log = [EpochLoss(**e) for e in side["training_log"]]
    return model


def write_loss_csv(log, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e in log:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss)])
