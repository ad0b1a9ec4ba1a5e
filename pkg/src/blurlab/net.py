"""A small convolutional classifier implemented directly on numpy.

The stack is deliberately plain: 3x3 convolutions (stride 1, zero pad
1), ReLU, 2x2 max-pooling with named taps after each pool, one hidden
fully-connected layer, and a softmax readout.  Forward and backward
passes are written out by hand so gradients are analytically exact and
checkable against finite differences.

Training runs classical-momentum SGD over a *blur distribution*: each
example is independently degraded by a kernel drawn from the
distribution before entering the batch, which is how blurred-data
fine-tuning is expressed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CheckpointError,
    InvalidParameterError,
    ShapeError,
    TrainingDivergenceError,
)
from .imaging import Image, center_crop, degrade_train, resize, resize_array
from .psf import Kernel, camera_shake_kernel, delta_kernel
from .seeding import derive_seed, generator

__all__ = [
    "Architecture",
    "Model",
    "TrainStage",
    "TrainSchedule",
    "TrainPipeline",
    "TrainResult",
    "ShakeBank",
    "BlurDistribution",
    "blurnet_s",
    "build_model",
    "forward",
    "forward_features",
    "loss_and_gradients",
    "cross_entropy",
    "log_softmax",
    "softmax",
    "sgd_step",
    "train",
    "finetune",
    "multiscale_predict",
    "hypercolumn_features",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = "BNCKPT1"
_VERSION = 1


# ---------------------------------------------------------------------------
# Architecture


@dataclass(frozen=True)
class Architecture:
    """Static description of the layer stack.

    ``conv_channels`` gives the output channels of each conv block; every
    block is conv3x3 -> relu -> maxpool2x2, and the pool output is tap
    ``P<i>``.  ``input_size`` must be divisible by ``2 ** len(conv_channels)``.
    """

    name: str
    in_channels: int
    input_size: int
    conv_channels: tuple[int, ...]
    fc_dim: int
    num_classes: int

    def __post_init__(self) -> None:
        if not self.conv_channels:
            raise InvalidParameterError("need at least one conv block")
        if self.input_size % (2 ** len(self.conv_channels)) != 0:
            raise InvalidParameterError(
                f"input_size {self.input_size} not divisible by "
                f"2^{len(self.conv_channels)} pools"
            )
        if self.num_classes < 2:
            raise InvalidParameterError("num_classes must be >= 2")
        if self.fc_dim < 1 or self.in_channels < 1:
            raise InvalidParameterError("fc_dim and in_channels must be >= 1")

    @property
    def tap_names(self) -> tuple[str, ...]:
        return tuple(f"P{i + 1}" for i in range(len(self.conv_channels)))

    @property
    def flat_dim(self) -> int:
        side = self.input_size // (2 ** len(self.conv_channels))
        return side * side * self.conv_channels[-1]

    def descriptor_lines(self) -> list[str]:
        """Canonical text block naming every layer and its dimensions."""
        lines = [self.name, f"input {self.in_channels} {self.input_size} {self.input_size}"]
        prev = self.in_channels
        for i, ch in enumerate(self.conv_channels):
            lines += [f"conv {prev} {ch}", "relu", f"pool P{i + 1}"]
            prev = ch
        lines += [
            "flatten",
            f"fc {self.flat_dim} {self.fc_dim}",
            "relu",
            f"fc {self.fc_dim} {self.num_classes}",
            "softmax",
        ]
        return lines

    @staticmethod
    def from_descriptor(lines: list[str]) -> "Architecture":
        try:
            name = lines[0].strip()
            input_fields = lines[1].split()
            in_channels, input_size = int(input_fields[1]), int(input_fields[2])
            convs = [int(ln.split()[2]) for ln in lines if ln.startswith("conv ")]
            fcs = [ln for ln in lines if ln.startswith("fc ")]
            fc_dim = int(fcs[0].split()[2])
            num_classes = int(fcs[1].split()[2])
        except (IndexError, ValueError) as exc:
            raise CheckpointError(f"unparseable architecture descriptor: {exc}") from exc
        return Architecture(name, in_channels, input_size, tuple(convs), fc_dim, num_classes)


def blurnet_s(num_classes: int, in_channels: int = 1) -> Architecture:
    """The default desk-scale classifier: 64x64 input, convs 16/32/64, fc 128."""
    return Architecture("blurnet-s", in_channels, 64, (16, 32, 64), 128, num_classes)


# ---------------------------------------------------------------------------
# Layers.  Each stores its forward cache on itself (single-threaded use).


class _Conv3x3:
    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w  # (out_c, in_c, 3, 3)
        self.b = b  # (out_c,)
        self.cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        out_c = self.w.shape[0]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (n, c, h, w, 3, 3)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
        out = cols @ self.w.reshape(out_c, -1).T + self.b
        self.cache = (cols, x.shape)
        return out.reshape(n, h, w, out_c).transpose(0, 3, 1, 2)

    def backward(self, dout: np.ndarray):
        cols, x_shape = self.cache
        n, c, h, w = x_shape
        out_c = self.w.shape[0]
        dm = dout.transpose(0, 2, 3, 1).reshape(n * h * w, out_c)
        dw = (dm.T @ cols).reshape(self.w.shape)
        db = dm.sum(axis=0)
        dxp = np.zeros((n, c, h + 2, w + 2))
        for u in range(3):
            for v in range(3):
                # (n, out_c, h, w) x (out_c, c) -> (n, h, w, c)
                t = np.tensordot(dout, self.w[:, :, u, v], axes=(1, 0))
                dxp[:, :, u : u + h, v : v + w] += t.transpose(0, 3, 1, 2)
        return dxp[:, :, 1 : 1 + h, 1 : 1 + w], [dw, db]

    def params(self):
        return [self.w, self.b]


class _ReLU:
    def __init__(self):
        self.cache = None

    def forward(self, x):
        self.cache = x > 0
        return x * self.cache

    def backward(self, dout):
        return dout * self.cache, []

    def params(self):
        return []


class _MaxPool2x2:
    def __init__(self, tap: str):
        self.tap = tap
        self.cache = None

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"pool {self.tap}: spatial dims must be even, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = win.reshape(n, c, h // 2, w // 2, 4)
        idx = flat.argmax(axis=-1)  # first max wins: deterministic tie-break
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        self.cache = (idx, x.shape)
        return out

    def backward(self, dout):
        idx, (n, c, h, w) = self.cache
        dflat = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
        dx = (
            dflat.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return dx, []

    def params(self):
        return []


class _Flatten:
    def __init__(self, expected_dim: int):
        self.expected_dim = expected_dim
        self.cache = None

    def forward(self, x):
        n = x.shape[0]
        flat = x.reshape(n, -1)
        if flat.shape[1] != self.expected_dim:
            raise ShapeError(
                f"flatten: got {flat.shape[1]} features from input {x.shape}, "
                f"expected {self.expected_dim} (wrong input size for this model)"
            )
        self.cache = x.shape
        return flat

    def backward(self, dout):
        return dout.reshape(self.cache), []

    def params(self):
        return []


class _Linear:
    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w  # (d_in, d_out)
        self.b = b
        self.cache = None

    def forward(self, x):
        self.cache = x
        return x @ self.w + self.b

    def backward(self, dout):
        x = self.cache
        return dout @ self.w.T, [x.T @ dout, dout.sum(axis=0)]

    def params(self):
        return [self.w, self.b]


# ---------------------------------------------------------------------------
# Model


class Model:
    """An architecture plus its parameter arrays."""

    def __init__(self, architecture: Architecture, layers: list):
        self.architecture = architecture
        self.layers = layers

    def parameters(self) -> list[np.ndarray]:
        """All parameter arrays in declaration order."""
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def copy(self) -> "Model":
        clone = build_model(self.architecture, seed=0)
        for mine, theirs in zip(clone.parameters(), self.parameters()):
            mine[...] = theirs
        return clone

    def conv_blocks_end(self) -> int:
        """Index just past the last pool layer (the feature prefix)."""
        last = max(i for i, l in enumerate(self.layers) if isinstance(l, _MaxPool2x2))
        return last + 1


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_model(architecture: Architecture, seed: int) -> Model:
    """Initialize parameters: Glorot-uniform weights, zero biases."""
    layers: list = []
    prev = architecture.in_channels
    for i, ch in enumerate(architecture.conv_channels):
        rng = generator(derive_seed(seed, "conv", i))
        w = _glorot(rng, (ch, prev, 3, 3), fan_in=prev * 9, fan_out=ch * 9)
        layers += [_Conv3x3(w, np.zeros(ch)), _ReLU(), _MaxPool2x2(f"P{i + 1}")]
        prev = ch
    layers.append(_Flatten(architecture.flat_dim))
    rng = generator(derive_seed(seed, "fc", 0))
    layers.append(
        _Linear(
            _glorot(rng, (architecture.flat_dim, architecture.fc_dim),
                    architecture.flat_dim, architecture.fc_dim),
            np.zeros(architecture.fc_dim),
        )
    )
    layers.append(_ReLU())
    rng = generator(derive_seed(seed, "fc", 1))
    layers.append(
        _Linear(
            _glorot(rng, (architecture.fc_dim, architecture.num_classes),
                    architecture.fc_dim, architecture.num_classes),
            np.zeros(architecture.num_classes),
        )
    )
    return Model(architecture, layers)


# Images are zero-centered and rescaled to [-1, 1] on entry: without the
# shift, the mean gray level drives channel-wide ReLU saturation under the
# zero-bias init and early training stalls.  Raw arrays pass through
# verbatim so the network itself stays a plain function of its input.
_INPUT_CENTER = 0.5
_INPUT_SCALE = 2.0


def _as_batch(batch) -> np.ndarray:
    """Accept an (n, c, h, w) array, a list of Images, or one Image."""
    if isinstance(batch, Image):
        batch = [batch]
    if isinstance(batch, (list, tuple)):
        if not all(isinstance(b, Image) for b in batch):
            raise ShapeError("batch lists must contain Image objects")
        stacked = np.stack([img.values.transpose(2, 0, 1) for img in batch])
        batch = (stacked - _INPUT_CENTER) * _INPUT_SCALE
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"batch must be (n, c, h, w), got {x.shape}")
    return x


def forward(model: Model, batch, want_taps: bool = False):
    """Run the full stack; returns logits, optionally with the pool taps.

    ``batch`` may be Images (centered to [-1, 1] on entry) or a raw
    (n, c, h, w) array taken verbatim.
    """
    x = _as_batch(batch)
    taps: dict[str, np.ndarray] = {}
    for layer in model.layers:
        x = layer.forward(x)
        if isinstance(layer, _MaxPool2x2):
            taps[layer.tap] = x
    return (x, taps) if want_taps else x


def forward_features(model: Model, batch) -> dict[str, np.ndarray]:
    """Run only the convolutional prefix; works for any even-enough input size."""
    x = _as_batch(batch)
    taps: dict[str, np.ndarray] = {}
    for layer in model.layers[: model.conv_blocks_end()]:
        x = layer.forward(x)
        if isinstance(layer, _MaxPool2x2):
            taps[layer.tap] = x
    return taps


# ---------------------------------------------------------------------------
# Loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood (natural log)."""
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def loss_and_gradients(model: Model, batch, labels) -> tuple[float, list[np.ndarray]]:
    """Forward + backward; returns (loss, grads aligned with model.parameters())."""
    labels = np.asarray(labels)
    logits = forward(model, batch)
    loss = cross_entropy(logits, labels)
    probs = softmax(logits)
    n = len(labels)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads: list[np.ndarray] = []
    d = dlogits
    for layer in reversed(model.layers):
        d, layer_grads = layer.backward(d)
        grads = layer_grads + grads
    return loss, grads


# ---------------------------------------------------------------------------
# Optimization


def sgd_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    velocities: list[np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """Classical momentum: v <- m*v + g; p <- p - lr*v.  In place."""
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v += g
        p -= lr * v


@dataclass(frozen=True)
class TrainStage:
    epochs: int
    lr: float

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidParameterError(f"stage epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise InvalidParameterError(f"stage lr must be >= 0, got {self.lr}")


@dataclass(frozen=True)
class TrainSchedule:
    """Stages of (epochs, lr) sharing one batch size and momentum.

    An empty stage tuple is a zero-step schedule: training returns the
    initialization unchanged.
    """

    stages: tuple[TrainStage, ...]
    batch_size: int = 128
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParameterError("momentum must be in [0, 1)")


@dataclass(frozen=True)
class TrainPipeline:
    """degrade_train parameters shared by all examples of a run."""

    pre_scales: tuple[int, ...]
    canonical: int
    net_scale: int
    crop: int


@dataclass
class TrainResult:
    model: Model
    epoch_losses: list[float]


class ShakeBank:
    """A fixed list of camera-shake seeds with kernel caching."""

    def __init__(self, seeds):
        seeds = tuple(int(s) for s in seeds)
        if not seeds:
            raise InvalidParameterError("shake bank must have at least one seed")
        self.seeds = seeds
        self._cache: dict[int, Kernel] = {}

    def __len__(self) -> int:
        return len(self.seeds)

    def kernel(self, index: int) -> Kernel:
        seed = self.seeds[index]
        if seed not in self._cache:
            self._cache[seed] = camera_shake_kernel(seed)
        return self._cache[seed]

    @staticmethod
    def from_range(base: int, count: int) -> "ShakeBank":
        return ShakeBank(range(base, base + count))


class BlurDistribution:
    """A weighted mixture of blur sources for training.

    Components are ``(source, weight)`` pairs where source is ``None``
    (leave sharp), a :class:`Kernel`, or a :class:`ShakeBank` (draw a
    uniformly random member per example).
    """

    def __init__(self, components):
        comps = []
        total = 0.0
        for source, weight in components:
            if weight <= 0:
                raise InvalidParameterError("component weights must be positive")
            if not (source is None or isinstance(source, (Kernel, ShakeBank))):
                raise InvalidParameterError(f"bad blur source {source!r}")
            comps.append((source, float(weight)))
            total += weight
        if not comps:
            raise InvalidParameterError("blur distribution needs at least one component")
        self.components = tuple((s, w / total) for s, w in comps)

    def sample(self, rng: np.random.Generator) -> Kernel:
        u = rng.random()
        acc = 0.0
        source = self.components[-1][0]
        for s, w in self.components:
            acc += w
            if u < acc:
                source = s
                break
        if source is None:
            return delta_kernel()
        if isinstance(source, ShakeBank):
            return source.kernel(int(rng.integers(0, len(source))))
        return source

    @staticmethod
    def sharp_only() -> "BlurDistribution":
        return BlurDistribution([(None, 1.0)])


def train(
    model: Model,
    examples,
    blur: BlurDistribution,
    schedule: TrainSchedule,
    pipeline: TrainPipeline,
) -> TrainResult:
    """SGD over blur-degraded examples; returns a new model and loss trace.

    Per epoch: shuffle deterministically, degrade each example with a
    fresh kernel drawn from ``blur``, and step the optimizer.  Momentum
    buffers start at zero.  A non-finite loss raises
    :class:`TrainingDivergenceError`.
    """
    trained = model.copy()
    if not schedule.stages:
        return TrainResult(trained, [])
    rng = generator(schedule.seed)
    params = trained.parameters()
    velocities = [np.zeros_like(p) for p in params]
    losses: list[float] = []
    n = len(examples)
    for stage in schedule.stages:
        for _ in range(stage.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, schedule.batch_size):
                chunk = order[start : start + schedule.batch_size]
                batch = []
                labels = []
                for i in chunk:
                    ex = examples[int(i)]
                    kernel = blur.sample(rng)
                    batch.append(
                        degrade_train(
                            ex.image,
                            kernel,
                            pipeline.pre_scales,
                            pipeline.canonical,
                            pipeline.net_scale,
                            pipeline.crop,
                            rng,
                        )
                    )
                    labels.append(ex.label)
                loss, grads = loss_and_gradients(trained, batch, labels)
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(
                        f"loss became {loss!r} at epoch {len(losses) + 1}"
                    )
                sgd_step(params, grads, velocities, stage.lr, schedule.momentum)
                total += loss * len(chunk)
            losses.append(total / n)
    return TrainResult(trained, losses)


def finetune(
    model: Model,
    examples,
    blur: BlurDistribution,
    schedule: TrainSchedule,
    pipeline: TrainPipeline,
) -> TrainResult:
    """Continue training from an existing model with fresh momentum buffers.

    Identical machinery to :func:`train`; the name marks intent at call
    sites (a blurred-distribution adaptation pass over a pretrained model).
    """
    return train(model, examples, blur, schedule, pipeline)


# ---------------------------------------------------------------------------
# Prediction


def multiscale_predict(
    model: Model,
    image: Image,
    scales,
    crop_mode: str = "center",
    stride: int | None = None,
) -> np.ndarray:
    """Average log-probabilities over crops at every scale; softmax the mean.

    The image is resized (min side) to each scale and crops of the
    model's input size are extracted: the central one by default, or a
    dense stride grid with ``crop_mode="dense"``.  Permuting or
    duplicating scales does not change the argmax.
    """
    size = model.architecture.input_size
    if not scales:
        raise InvalidParameterError("need at least one scale")
    if crop_mode not in ("center", "dense"):
        raise InvalidParameterError(f"unknown crop mode {crop_mode!r}")
    logps = []
    for scale in scales:
        if scale < size:
            raise InvalidParameterError(
                f"scale {scale} is below the model input size {size}"
            )
        resized = resize(image, int(scale))
        if crop_mode == "center":
            crops = [center_crop(resized, size)]
        else:
            step = stride or size // 2
            offs_r = sorted(set(list(range(0, resized.height - size + 1, step)) + [resized.height - size]))
            offs_c = sorted(set(list(range(0, resized.width - size + 1, step)) + [resized.width - size]))
            crops = [
                Image(resized.values[r : r + size, c : c + size])
                for r in offs_r
                for c in offs_c
            ]
        logits = forward(model, crops)
        logps.append(log_softmax(logits))
    mean_logp = np.concatenate(logps, axis=0).mean(axis=0)
    return softmax(mean_logp)


def hypercolumn_features(model: Model, image: Image) -> np.ndarray:
    """Per-pixel feature stack: every tap bilinearly upsampled to input size.

    Returns (h, w, sum of tap channels), channels ordered by tap depth.
    """
    taps = forward_features(model, image)
    h, w = image.height, image.width
    planes = []
    for name in model.architecture.tap_names:
        t = taps[name][0].transpose(1, 2, 0)  # (th, tw, c)
        planes.append(resize_array(t, h, w))
    return np.concatenate(planes, axis=2)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: Model, path: str) -> None:
    """Binary checkpoint: text header, then float64 little-endian tensors."""
    arch_lines = model.architecture.descriptor_lines()
    params = model.parameters()
    header = [f"{_MAGIC}", f"version {_VERSION}", f"arch {len(arch_lines)}"]
    header += arch_lines
    header.append(f"tensors {len(params)}")
    for p in params:
        header.append("shape " + " ".join(str(d) for d in p.shape))
    header.append("data")
    blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii") + blob)


def load_checkpoint(path: str, expected: Architecture | None = None) -> Model:
    """Rebuild a model from a checkpoint; verifies magic, version, shapes."""
    with open(path, "rb") as fh:
        data = fh.read()
    sep = data.find(b"\ndata\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing data marker")
    head = data[:sep].decode("ascii", errors="replace").splitlines()
    blob = data[sep + 6 :]
    if not head or head[0] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {head[0]!r}" if head else "empty file")
    if len(head) < 2 or head[1] != f"version {_VERSION}":
        raise CheckpointError(f"{path}: unsupported version {head[1]!r}")
    try:
        n_arch = int(head[2].split()[1])
        arch_lines = head[3 : 3 + n_arch]
        rest = head[3 + n_arch :]
        n_tensors = int(rest[0].split()[1])
        shapes = [tuple(int(x) for x in ln.split()[1:]) for ln in rest[1 : 1 + n_tensors]]
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    arch = Architecture.from_descriptor(arch_lines)
    if expected is not None and arch != expected:
        raise CheckpointError(
            f"{path}: architecture mismatch: checkpoint has {arch}, expected {expected}"
        )
    model = build_model(arch, seed=0)
    params = model.parameters()
    if len(params) != n_tensors:
        raise CheckpointError(f"{path}: expected {len(params)} tensors, header says {n_tensors}")
    offset = 0
    for p, shape in zip(params, shapes):
        if p.shape != shape:
            raise CheckpointError(f"{path}: tensor shape {shape} does not match {p.shape}")
        count = int(np.prod(shape))
        chunk = blob[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointError(f"{path}: truncated tensor data")
        p[...] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
        offset += 8 * count
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return model
