"""Capsule-network next-cell predictor.

Pipeline: tanh convolution over the history matrix -> second convolution
whose channels are regrouped into low-dimensional "basic" capsule vectors
(one group per spatial position and channel) -> agreement routing into one
high-dimensional "advanced" capsule per output class -> fully connected
head with dropout -> per-cell scores.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .geogrid import GridSpec
from .ingest import DatasetSplit, FrameSet, TrajectoryFrame
from . import tensorcore as tc
from .tensorcore import Rng, Tensor


ORIENTATIONS = ("grid_by_time", "time_by_grid")


def derive_dependent_params(conv_filters: int, capsule_dim: int, grid_count: int):
    """Dependent layer sizes from the two tunables and the grid count.

    Returns (capsule channels, advanced capsule dimension, advanced capsule
    count) = (filters / dim, 2 * dim, grid count).
    """
    if conv_filters <= 0 or capsule_dim <= 0 or grid_count <= 0:
        raise ConfigError("conv_filters, capsule_dim and grid_count must be positive")
    if conv_filters % capsule_dim != 0:
        raise ConfigError(
            f"conv_filters ({conv_filters}) must be divisible by capsule_dim ({capsule_dim})"
        )
    return conv_filters // capsule_dim, 2 * capsule_dim, grid_count


@dataclass
class ModelConfig:
    grid_count: int
    window: int
    conv_filters: int
    capsule_dim: int
    conv_kernel: tuple = (1, 2)
    conv_strides: tuple = (1, 1)
    caps_kernel: tuple = (1, 2)
    caps_strides: tuple = (1, 1)
    advanced_capsules: int | None = None  # defaults to one per grid cell
    fc_width: int = 100
    dropout: float = 0.0
    routing_iterations: int = 3
    epochs: int = 50
    patience: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    orientation: str = "grid_by_time"

    @property
    def caps_channels(self) -> int:
        return self.conv_filters // self.capsule_dim

    @property
    def advanced_dim(self) -> int:
        return 2 * self.capsule_dim

    @property
    def num_advanced(self) -> int:
        return self.advanced_capsules if self.advanced_capsules else self.grid_count

    def validate(self):
        derive_dependent_params(self.conv_filters, self.capsule_dim, self.grid_count)
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.routing_iterations < 1:
            raise ConfigError(f"routing_iterations must be >= 1, got {self.routing_iterations}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.fc_width < 1:
            raise ConfigError(f"fc_width must be >= 1, got {self.fc_width}")
        if self.orientation not in ORIENTATIONS:
            raise ConfigError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")
        model_shapes(self)  # kernels must fit

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("conv_kernel", "conv_strides", "caps_kernel", "caps_strides"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("conv_kernel", "conv_strides", "caps_kernel", "caps_strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def model_shapes(config: ModelConfig) -> dict:
    """Walk the layer shapes; raises ConfigError when a kernel cannot fit."""
    if config.orientation == "grid_by_time":
        h, w = config.grid_count, config.window
    else:
        h, w = config.window, config.grid_count
    try:
        h1 = tc.conv_output_size(h, config.conv_kernel[0], config.conv_strides[0])
        w1 = tc.conv_output_size(w, config.conv_kernel[1], config.conv_strides[1])
        h2 = tc.conv_output_size(h1, config.caps_kernel[0], config.caps_strides[0])
        w2 = tc.conv_output_size(w1, config.caps_kernel[1], config.caps_strides[1])
    except ValueError as e:
        raise ConfigError(f"layer geometry does not fit the {h}x{w} input: {e}") from e
    positions = h2 * w2
    return {
        "input": (h, w),
        "conv_out": (config.conv_filters, h1, w1),
        "caps_out": (config.conv_filters, h2, w2),
        "positions": positions,
        "basic_capsules": positions * config.caps_channels,
        "capsule_dim": config.capsule_dim,
        "advanced": (config.num_advanced, config.advanced_dim),
        "fc_width": config.fc_width,
        "scores": config.grid_count,
    }


@dataclass
class ModelParams:
    """All learnable tensors, in a fixed order for optimizer and checkpoint."""

    conv_k: Tensor
    conv_b: Tensor
    caps_k: Tensor
    caps_b: Tensor
    votes_w: Tensor  # [basic capsule, advanced, advanced_dim, capsule_dim]
    fc_w: Tensor
    fc_b: Tensor
    out_w: Tensor
    out_b: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        return [
            ("conv_k", self.conv_k),
            ("conv_b", self.conv_b),
            ("caps_k", self.caps_k),
            ("caps_b", self.caps_b),
            ("votes_w", self.votes_w),
            ("fc_w", self.fc_w),
            ("fc_b", self.fc_b),
            ("out_w", self.out_w),
            ("out_b", self.out_b),
        ]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    def restore(self, arrays: dict[str, np.ndarray]):
        for name, t in self.named():
            t.data = arrays[name].copy()


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """Seeded uniform +/- sqrt(6/(fan_in+fan_out)) weights, zero biases.

    The two capsule-path weight groups get a fixed gain on top of the
    fan-based bound: one-hot frames leave most convolution windows empty, so
    plain fan scaling lands the capsule norms deep in the squash's quadratic
    tail and the forward signal dies. The gains put the pre-squash norms
    near 1 at initialization.
    """
    config.validate()
    m, d = config.conv_filters, config.capsule_dim
    j, a = config.num_advanced, config.advanced_dim
    kh, kw = config.conv_kernel
    qh, qw = config.caps_kernel
    n_basic = model_shapes(config)["basic_capsules"]

    def weight(shape, fan_in, fan_out, gain=1.0):
        return Tensor(gain * tc.glorot_uniform(rng, shape, fan_in, fan_out), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    flat = j * a
    return ModelParams(
        conv_k=weight((m, 1, kh, kw), kh * kw, m * kh * kw),
        conv_b=zeros(m),
        caps_k=weight((m, m, qh, qw), m * qh * qw, m * qh * qw, gain=4.0),
        caps_b=zeros(m),
        votes_w=weight((n_basic, j, a, d), d, a, gain=4.0),
        fc_w=weight((config.fc_width, flat), flat, config.fc_width),
        fc_b=zeros(config.fc_width),
        out_w=weight((config.grid_count, config.fc_width), config.fc_width, config.grid_count),
        out_b=zeros(config.grid_count),
    )


@dataclass
class RoutingState:
    """Per-iteration snapshots of the agreement routing loop."""

    couplings: list[np.ndarray] = field(default_factory=list)  # [B, N, J] each
    weighted: list[np.ndarray] = field(default_factory=list)  # [B, J, A] each
    outputs: list[np.ndarray] = field(default_factory=list)  # [B, J, A] each
    logits: np.ndarray | None = None  # final [B, N, J]


def route(votes, iterations: int) -> tuple[Tensor, RoutingState]:
    """Agreement routing: iteratively recouple basic capsules to the advanced
    capsules whose output their votes agree with.

    Couplings start uniform (zero logits). Each iteration normalizes the
    logits per basic capsule, forms each advanced capsule as the squashed
    coupling-weighted vote sum, then reinforces the logits with the
    vote/output dot products. Accepts [N, J, A] or batched [B, N, J, A]
    votes; returns the final advanced capsules plus per-iteration snapshots.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    votes = tc.as_tensor(votes)
    single = votes.data.ndim == 3
    if single:
        votes = tc.reshape(votes, (1,) + votes.data.shape)
    bsz, n, j, a = votes.data.shape
    logits = Tensor(np.zeros((bsz, n, j)))
    state = RoutingState()
    out = None
    for _ in range(iterations):
        couplings = tc.softmax(logits, axis=-1)
        weighted = tc.mul(tc.reshape(couplings, (bsz, n, j, 1)), votes).sum(axis=1)
        out = tc.squash(weighted, axis=-1)
        agreement = tc.mul(votes, tc.reshape(out, (bsz, 1, j, a))).sum(axis=-1)
        logits = tc.add(logits, agreement)
        state.couplings.append(couplings.data.copy())
        state.weighted.append(weighted.data.copy())
        state.outputs.append(out.data.copy())
    state.logits = logits.data.copy()
    if single:
        out = tc.reshape(out, (j, a))
        state.couplings = [c[0] for c in state.couplings]
        state.weighted = [s[0] for s in state.weighted]
        state.outputs = [v[0] for v in state.outputs]
        state.logits = state.logits[0]
    return out, state


def batch_histories(cells: np.ndarray, num_cells: int) -> np.ndarray:
    """One-hot [B, G, L] history stack from [B, L] cell indices."""
    cells = np.asarray(cells, dtype=np.int64)
    bsz, window = cells.shape
    out = np.zeros((bsz, num_cells, window), dtype=np.float64)
    out[np.arange(bsz)[:, None], cells, np.arange(window)[None, :]] = 1.0
    return out


def forward(
    params: ModelParams,
    config: ModelConfig,
    histories: np.ndarray,
    mode: str = "infer",
    rng: Rng | None = None,
) -> tuple[Tensor, Tensor]:
    """Score every cell for a batch of [B, G, L] history matrices.

    Returns (scores [B, G], advanced capsules [B, J, advanced_dim]).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    histories = np.asarray(histories, dtype=np.float64)
    if histories.ndim == 2:
        histories = histories[None]
    bsz, g, window = histories.shape
    if g != config.grid_count or window != config.window:
        raise ConfigError(
            f"frame is {g}x{window} but the model expects "
            f"{config.grid_count}x{config.window}"
        )
    if config.orientation == "time_by_grid":
        histories = histories.transpose(0, 2, 1)

    x = Tensor(histories[:, None, :, :])
    feat = tc.tanh(tc.conv2d(x, params.conv_k, params.conv_b, config.conv_strides))
    caps_map = tc.conv2d(feat, params.caps_k, params.caps_b, config.caps_strides)

    # regroup channels into capsule vectors: one D-vector per (position, channel)
    _, m, h2, w2 = caps_map.data.shape
    c, d = config.caps_channels, config.capsule_dim
    j, a = config.num_advanced, config.advanced_dim
    caps = tc.reshape(caps_map, (bsz, c, d, h2, w2))
    caps = tc.transpose(caps, (0, 3, 4, 1, 2))  # [B, h2, w2, C, D]
    caps = tc.squash(tc.reshape(caps, (bsz, h2 * w2, c, d)), axis=-1)

    # votes: every basic capsule carries its own transform per advanced
    # capsule; sharing them across positions would make the whole capsule
    # path blind to which grid row fired (kernels have extent 1 there)
    n_basic = h2 * w2 * c
    u = tc.reshape(caps, (bsz, n_basic, 1, d, 1))
    w_ = tc.reshape(params.votes_w, (1, n_basic, j, a, d))
    votes = tc.reshape(tc.matmul(w_, u), (bsz, n_basic, j, a))

    advanced, _ = route(votes, config.routing_iterations)

    flat = tc.reshape(advanced, (bsz, j * a))
    hidden = tc.tanh(tc.linear(flat, params.fc_w, params.fc_b))
    if mode == "train" and config.dropout > 0.0:
        if rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        hidden = tc.dropout(hidden, config.dropout, rng, train=True)
    scores = tc.linear(hidden, params.out_w, params.out_b)
    return scores, advanced


def loss(scores: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of the true cells under the scores."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = tc.log_softmax(scores, axis=-1)
    return tc.pick(logp, labels).mean() * -1.0


def predict_batch(params: ModelParams, config: ModelConfig, histories: np.ndarray) -> np.ndarray:
    """Argmax cell per history; ties break toward the lowest index."""
    with tc.no_grad():
        scores, _ = forward(params, config, histories, mode="infer")
    return np.argmax(scores.data, axis=-1)


def predict(params: ModelParams, config: ModelConfig, frame) -> int:
    if isinstance(frame, TrajectoryFrame):
        frame = frame.history(config.grid_count)
    return int(predict_batch(params, config, np.asarray(frame)[None])[0])


def _accuracy_percent(params, config, frames: FrameSet, batch_size: int) -> float:
    cells, labels = frames.cells_array(), frames.labels_array()
    hits = 0
    for lo in range(0, len(labels), batch_size):
        batch = cells[lo : lo + batch_size]
        pred = predict_batch(params, config, batch_histories(batch, config.grid_count))
        hits += int((pred == labels[lo : lo + batch_size]).sum())
    return 100.0 * hits / len(labels)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)  # percent
    val_acc: list[float] = field(default_factory=list)  # percent
    best_epoch: int = -1
    stopped_epoch: int = 0
    wall_time_s: float = 0.0

    def epochs_ran(self) -> int:
        return len(self.train_loss)


def train(split: DatasetSplit, config: ModelConfig) -> tuple[ModelParams, TrainReport]:
    """Mini-batch Adam training with early stopping on validation accuracy.

    Stops once `patience` consecutive epochs fail to improve validation
    accuracy (or at the epoch cap) and returns the parameters from the best
    validation epoch. Fully deterministic for a fixed config seed.
    """
    config.validate()
    for name, part in (("train", split.train), ("validation", split.validation)):
        if part.grid_spec.num_cells != config.grid_count or part.window != config.window:
            raise ConfigError(
                f"{name} frames are {part.grid_spec.num_cells}x{part.window} but the "
                f"model expects {config.grid_count}x{config.window}"
            )
        if len(part) == 0:
            raise ConfigError(f"{name} partition is empty")

    t_start = time.perf_counter()
    init_rng, shuffle_rng, drop_rng = Rng(config.seed).spawn(3)
    params = init_params(config, init_rng)
    tensors = [t for _, t in params.named()]
    opt = tc.adam_init([t.data for t in tensors], lr=config.learning_rate)

    cells = split.train.cells_array()
    labels = split.train.labels_array()
    n = len(labels)
    report = TrainReport()
    best_val, best_arrays = -1.0, params.snapshot()
    stale = 0

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            hist = batch_histories(cells[idx], config.grid_count)
            scores, _ = forward(params, config, hist, mode="train", rng=drop_rng)
            batch_loss = loss(scores, labels[idx])
            if not np.isfinite(batch_loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting at {lo}"
                )
            for t in tensors:
                t.zero_grad()
            batch_loss.backward()
            new = tc.adam_step([t.data for t in tensors], [t.grad for t in tensors], opt)
            for t, arr in zip(tensors, new):
                t.data = arr
            epoch_loss += float(batch_loss.data) * len(idx)

        report.train_loss.append(epoch_loss / n)
        report.train_acc.append(_accuracy_percent(params, config, split.train, config.batch_size))
        report.val_acc.append(
            _accuracy_percent(params, config, split.validation, config.batch_size)
        )
        if report.val_acc[-1] > best_val:
            best_val = report.val_acc[-1]
            best_arrays = params.snapshot()
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    params.restore(best_arrays)
    report.stopped_epoch = report.epochs_ran()
    report.wall_time_s = time.perf_counter() - t_start
    return params, report


# ----------------------------------------------------------- checkpoints

MODEL_FORMAT = "gridcaps-model-v1"


def save_model(path, params: ModelParams, config: ModelConfig, grid_spec: GridSpec):
    """Self-describing checkpoint: weights plus embedded config and grid."""
    meta = {"format": MODEL_FORMAT, "config": config.to_dict(), "grid": grid_spec.to_dict()}
    tc.save_checkpoint(path, params.arrays(), meta)


def load_model(path) -> tuple[ModelParams, ModelConfig, GridSpec]:
    arrays, meta = tc.load_checkpoint(path)
    if meta.get("format") != MODEL_FORMAT:
        raise ConfigError(f"{path}: not a model checkpoint (format={meta.get('format')!r})")
    config = ModelConfig.from_dict(meta["config"])
    spec = GridSpec.from_dict(meta["grid"])
    fields = {name: Tensor(arrays[name], requires_grad=True) for name in arrays}
    return ModelParams(**fields), config, spec
