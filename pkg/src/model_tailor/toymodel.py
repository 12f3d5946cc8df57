"""Desk-scale MLP substrate: synthetic task families, SGD training, activation capture.

Weights are stored in augmented form: each linear layer is a single matrix of
shape (out, in + 1) whose last column is the bias, and the layer consumes
inputs with a constant-1 feature appended. That way every parameter, bias
included, participates uniformly in masking and compensation downstream.

Hidden layers use tanh; the output layer is identity. The loss is mean
squared error over samples and output dimensions. Scores are reported as
100 / (1 + mse), a bounded higher-is-better surrogate in (0, 100]; it is a
local convention (monotone in mse), flagged as such in report output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .checkpoint import Checkpoint
from .errors import DivergenceError, ShapeError, ValidationError
from .hessian import CalibrationRecord


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input, hidden..., output) and the init seed."""

    widths: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValidationError("an MLP needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ValidationError("layer widths must be positive")

    @property
    def layer_count(self) -> int:
        return len(self.widths) - 1

    def layer_name(self, i: int) -> str:
        return f"layer_{i:02d}"

    def model_id(self) -> str:
        return "mlp-" + "x".join(str(w) for w in self.widths) + f"-s{self.seed}"


def init_model(spec: MlpSpec) -> Checkpoint:
    """Fresh checkpoint with Gaussian weights (std 1/sqrt(fan_in)) and zero bias."""
    rng = np.random.default_rng(spec.seed)
    tensors = {}
    for i in range(spec.layer_count):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in + 1))
        w[:, -1] = 0.0
        tensors[spec.layer_name(i)] = w
    return Checkpoint(
        tensors=tensors,
        metadata={
            "model_id": spec.model_id(),
            "widths": ",".join(str(w) for w in spec.widths),
            "init_seed": str(spec.seed),
            "stage": "init",
            "task_id": "",
        },
    )


def spec_of(ckpt: Checkpoint) -> MlpSpec:
    widths = tuple(int(w) for w in ckpt.metadata["widths"].split(","))
    return MlpSpec(widths=widths, seed=int(ckpt.metadata.get("init_seed", "0")))


def _layer_names(ckpt: Checkpoint) -> list[str]:
    return sorted(n for n in ckpt.tensors if n.startswith("layer_"))


def _augment(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def _layer_out(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Augmented storage, affine compute: splitting the bias column out keeps
    # forward(W_augmented, [x;1]) bit-equal to forward(W, x) + b.
    cols = np.ascontiguousarray(w[:, :-1].T)
    return np.einsum("ij,jk->ik", h, cols) + w[:, -1]


def forward(ckpt: Checkpoint, inputs: np.ndarray, capture: bool = False):
    """Run the network; with capture=True also return per-layer augmented inputs.

    Captured inputs are returned transposed (d_col x N), the layout the
    curvature builder consumes.
    """
    names = _layer_names(ckpt)
    h = linalg.as_matrix(inputs, "inputs")
    captured = {}
    for i, name in enumerate(names):
        w = ckpt.tensors[name]
        if h.shape[1] + 1 != w.shape[1]:
            raise ShapeError(
                f"{name} expects {w.shape[1] - 1} input features, got {h.shape[1]}"
            )
        if capture:
            captured[name] = _augment(h).T.copy()
        z = _layer_out(h, w)
        h = np.tanh(z) if i < len(names) - 1 else z
    if capture:
        return h, captured
    return h


@dataclass
class TaskDataset:
    """Inputs/targets for one synthetic task, rows tagged train or eval."""

    task_id: str
    inputs: np.ndarray
    targets: np.ndarray
    split: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.split = np.asarray(self.split)
        if not (len(self.inputs) == len(self.targets) == len(self.split)):
            raise ShapeError("dataset row counts do not match")

    def rows(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        sel = self.split == tag
        return self.inputs[sel], self.targets[sel]

    @property
    def size(self) -> int:
        return len(self.inputs)


def _task_entropy(task_id: str, seed: int) -> int:
    digest = hashlib.sha256(f"{task_id}|{seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def gen_task(
    task_id: str,
    seed: int,
    n: int,
    in_dim: int = 12,
    out_dim: int = 6,
    noise: float = 0.02,
    eval_fraction: float = 0.25,
) -> TaskDataset:
    """Deterministic teacher-student regression task.

    A small random tanh teacher network (drawn from task_id and seed) maps
    Gaussian inputs to targets with a little additive noise. Distinct task
    ids draw disjoint teachers, so their targets are essentially unrelated.
    """
    if n < 1:
        raise ValidationError("need at least one sample")
    rng = np.random.default_rng(_task_entropy(task_id, seed))
    hidden = max(8, in_dim)
    w1 = rng.normal(0.0, 1.5 / np.sqrt(in_dim), size=(in_dim, hidden))
    b1 = rng.normal(0.0, 0.5, size=hidden)
    w2 = rng.normal(0.0, 1.5 / np.sqrt(hidden), size=(hidden, out_dim))
    b2 = rng.normal(0.0, 0.2, size=out_dim)
    x = rng.normal(0.0, 1.0, size=(n, in_dim))
    y = np.tanh(x @ w1 + b1) @ w2 + b2
    if noise > 0.0:
        y = y + rng.normal(0.0, noise, size=y.shape)
    n_eval = int(round(n * eval_fraction))
    n_eval = min(max(n_eval, 0), n - 1) if n > 1 else 0
    split = np.array(["train"] * (n - n_eval) + ["eval"] * n_eval)
    return TaskDataset(task_id=task_id, inputs=x, targets=y, split=split)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("hyperparameters must be positive (epochs may be 0)")
        if self.loss != "mse":
            raise ValidationError(f"unsupported loss {self.loss!r}")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float] = field(default_factory=list)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    diff = pred - target
    return float(np.mean(diff * diff))


def train(init: Checkpoint, data: TaskDataset, cfg: TrainConfig) -> TrainResult:
    """Minibatch SGD on the train split; deterministic given cfg.seed.

    With epochs=0 the input checkpoint is returned unchanged (bit-exact).
    Raises DivergenceError with the epoch index if the loss goes non-finite.
    """
    names = _layer_names(init)
    x_train, y_train = data.rows("train")
    if not names:
        raise ValidationError("checkpoint holds no layers")
    if x_train.shape[1] + 1 != init.tensors[names[0]].shape[1]:
        raise ShapeError("dataset input width does not match the first layer")
    if y_train.shape[1] != init.tensors[names[-1]].shape[0]:
        raise ShapeError("dataset target width does not match the last layer")
    if cfg.epochs == 0:
        return TrainResult(checkpoint=init.copy(), epoch_losses=[])

    weights = {name: init.tensors[name].copy() for name in names}
    rng = np.random.default_rng(cfg.seed)
    n = len(x_train)
    losses = []

    def run(x):
        h = x
        for i, name in enumerate(names):
            z = _layer_out(h, weights[name])
            h = np.tanh(z) if i < len(names) - 1 else z
        return h

    # divergence shows up as inf/nan mid-epoch and is reported after the
    # epoch loss check; silence the float warnings it would spray until then
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb, yb = x_train[idx], y_train[idx]
                # forward, keeping augmented inputs and activations per layer
                augs, acts = [], []
                h = xb
                for i, name in enumerate(names):
                    augs.append(_augment(h))
                    z = _layer_out(h, weights[name])
                    h = np.tanh(z) if i < len(names) - 1 else z
                    acts.append(h)
                grad = 2.0 * (h - yb) / (xb.shape[0] * yb.shape[1])
                for i in range(len(names) - 1, -1, -1):
                    gw = np.einsum("ij,ik->jk", grad, augs[i])
                    if i > 0:
                        back = np.einsum("ij,jk->ik", grad, weights[names[i]])[:, :-1]
                        grad = back * (1.0 - acts[i - 1] * acts[i - 1])
                    weights[names[i]] -= cfg.learning_rate * gw
            loss = mse(run(x_train), y_train)
            if not np.isfinite(loss):
                raise DivergenceError(epoch=epoch)
            losses.append(loss)

    out = init.with_metadata(task_id=data.task_id, stage="trained")
    for name in names:
        out.tensors[name] = weights[name]
    return TrainResult(checkpoint=out, epoch_losses=losses)


def evaluate(ckpt: Checkpoint, data: TaskDataset) -> float:
    """Score on the eval split: 100 / (1 + mse), in (0, 100]."""
    x_eval, y_eval = data.rows("eval")
    if len(x_eval) == 0:
        x_eval, y_eval = data.inputs, data.targets
    pred = forward(ckpt, x_eval)
    if pred.shape != y_eval.shape:
        raise ShapeError(f"prediction shape {pred.shape} vs targets {y_eval.shape}")
    return 100.0 / (1.0 + mse(pred, y_eval))


def capture_activations(ckpt: Checkpoint, data: TaskDataset, n_calib: int) -> dict[str, CalibrationRecord]:
    """Per-layer input matrices (d_col x n_calib) from the first n_calib rows.

    The constant-1 row for the bias column is included, so each record's
    column dimension matches the augmented weight matrix it calibrates.
    """
    if n_calib < 1:
        raise ValidationError("n_calib must be at least 1")
    if n_calib > data.size:
        raise ValidationError(f"n_calib {n_calib} exceeds dataset size {data.size}")
    x = data.inputs[:n_calib]
    _, captured = forward(ckpt, x, capture=True)
    return {
        name: CalibrationRecord(layer=name, inputs=mat, count=n_calib)
        for name, mat in captured.items()
    }
