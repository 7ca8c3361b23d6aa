"""Per-voxel differentiable models, hand-derived backprop, training loop.

Two architectures, both classifying each voxel independently from its
feature vector: a linear softmax classifier and a one-hidden-layer ReLU
network.  Parameters live in a single flat float64 vector so optimizers
and serialization stay trivial.

backward() chains the loss gradient (taken in probability space from the
losses module) through the softmax Jacobian and the affine layers by
hand; no autodiff anywhere.  For a softmax row p and upstream gradient g
the logit gradient is p * (g - (g . p)), which follows from
dp_j/dz_k = p_j (delta_jk - p_k).

train() wires the pieces together: a loss kind, an epoch-level learning
rate schedule, an optimizer, and either plain shuffling (ERM) or the
hardness-weighted sampler (DRO).  Reweighting in DRO mode lives entirely
in the sampling distribution; batch gradients stay unweighted means.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dro import DEFAULT_BETA, HardnessWeightedSampler
from .losses import DistanceMatrix, LabelMap, LOSS_KINDS, LossValue, ProbMap, composite_loss
from .numerics import Rng, as_f64, require_finite, softmax
from .optim import OPTIMIZER_KINDS, PolySchedule, make_optimizer
from .synthdata import Case

__all__ = [
    "MODEL_KINDS",
    "SAMPLER_MODES",
    "DIVERGENCE_LIMIT",
    "PARAM_LIMIT",
    "ModelSpec",
    "Model",
    "TrainConfig",
    "EpochRecord",
    "TrainedModel",
    "TrainingDiverged",
    "train",
    "predict_tta",
    "save_model",
    "load_model",
    "write_training_log",
]

MODEL_KINDS = ("linear", "mlp")
SAMPLER_MODES = ("erm_shuffle", "dro")
DIVERGENCE_LIMIT = 1e6
# Runaway steps show up as exploding weights long before any loss here can
# overflow (they are all bounded), so the loop also polices magnitude.
PARAM_LIMIT = 1e8


class TrainingDiverged(RuntimeError):
    """Raised when a per-case loss goes non-finite or past the guard limit."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_features: int
    num_classes: int
    hidden_width: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}, expected one of {MODEL_KINDS}")
        if self.input_features < 1:
            raise ValueError(f"input_features must be >= 1, got {self.input_features}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.kind == "mlp":
            if self.hidden_width is None or self.hidden_width < 1:
                raise ValueError("mlp needs hidden_width >= 1")
        elif self.hidden_width is not None:
            raise ValueError("hidden_width only applies to the mlp kind")

    def param_count(self) -> int:
        f, l = self.input_features, self.num_classes
        if self.kind == "linear":
            return l * f + l
        h = self.hidden_width
        return h * f + h + l * h + l


@dataclass
class Model:
    spec: ModelSpec
    params: np.ndarray

    def __post_init__(self):
        p = as_f64(self.params, "params").reshape(-1)
        if p.size != self.spec.param_count():
            raise ValueError(
                f"parameter vector has {p.size} entries, spec needs {self.spec.param_count()}"
            )
        require_finite(p, "params")
        self.params = p

    @classmethod
    def init(cls, spec: ModelSpec) -> "Model":
        """Weights uniform in [-0.1, 0.1] from the spec seed, biases zero.

        The small scale keeps the initial softmax close to uniform so no
        loss starts saturated.
        """
        rng = Rng(spec.seed)
        f, l = spec.input_features, spec.num_classes
        if spec.kind == "linear":
            w = 0.2 * rng.uniform(l * f) - 0.1
            parts = [w, np.zeros(l)]
        else:
            h = spec.hidden_width
            w1 = 0.2 * rng.uniform(h * f) - 0.1
            w2 = 0.2 * rng.uniform(l * h) - 0.1
            parts = [w1, np.zeros(h), w2, np.zeros(l)]
        return cls(spec, np.concatenate(parts))

    def _unpack(self):
        f, l = self.spec.input_features, self.spec.num_classes
        p = self.params
        if self.spec.kind == "linear":
            w = p[: l * f].reshape(l, f)
            b = p[l * f:]
            return w, b
        h = self.spec.hidden_width
        o1, o2, o3 = h * f, h * f + h, h * f + h + l * h
        return (p[:o1].reshape(h, f), p[o1:o2], p[o2:o3].reshape(l, h), p[o3:])

    def _features(self, features) -> np.ndarray:
        x = as_f64(features, "features")
        if x.ndim != 2 or x.shape[1] != self.spec.input_features:
            raise ValueError(
                f"features must be [V, {self.spec.input_features}], got shape {x.shape}"
            )
        require_finite(x, "features")
        return x

    def _logits(self, x: np.ndarray):
        if self.spec.kind == "linear":
            w, b = self._unpack()
            return x @ w.T + b, None
        w1, b1, w2, b2 = self._unpack()
        h_pre = x @ w1.T + b1
        h = np.maximum(h_pre, 0.0)
        return h @ w2.T + b2, (h_pre, h)

    def forward(self, features) -> ProbMap:
        x = self._features(features)
        z, _ = self._logits(x)
        return ProbMap(softmax(z))

    def backward(self, features, gt: LabelMap, loss_kind: str,
                 m: DistanceMatrix | None = None):
        """Loss on the forward pass plus its gradient over the flat params."""
        x = self._features(features)
        z, hidden = self._logits(x)
        p = softmax(z)
        loss = composite_loss(loss_kind, p, gt, m, want_gradient=True)
        g = loss.gradient
        # Softmax Jacobian: dz = p * (g - rowdot(g, p)).
        dz = p * (g - np.einsum("vl,vl->v", g, p)[:, None])
        if self.spec.kind == "linear":
            dw = dz.T @ x
            db = dz.sum(axis=0)
            grad = np.concatenate([dw.reshape(-1), db])
        else:
            _, _, w2, _ = self._unpack()
            h_pre, h = hidden
            dw2 = dz.T @ h
            db2 = dz.sum(axis=0)
            dh = dz @ w2
            dh_pre = dh * (h_pre > 0.0)
            dw1 = dh_pre.T @ x
            db1 = dh_pre.sum(axis=0)
            grad = np.concatenate([dw1.reshape(-1), db1, dw2.reshape(-1), db2])
        return LossValue(value=loss.value, gradient=loss.gradient), grad


@dataclass
class TrainConfig:
    loss: str = "dice_ce"
    distance_matrix: DistanceMatrix | None = None
    sampler_mode: str = "erm_shuffle"
    beta: float = DEFAULT_BETA
    optimizer: str = "sgd"
    lr: float | None = None
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5
    epochs: int = 100
    batch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}, expected one of {LOSS_KINDS}")
        if "gwdl" in self.loss and self.distance_matrix is None:
            raise ValueError(f"loss kind {self.loss!r} requires a distance matrix")
        if self.sampler_mode not in SAMPLER_MODES:
            raise ValueError(
                f"unknown sampler mode {self.sampler_mode!r}, expected one of {SAMPLER_MODES}"
            )
        if self.optimizer not in OPTIMIZER_KINDS:
            raise ValueError(
                f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZER_KINDS}"
            )
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    sampler_entropy: float


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: np.ndarray
    training_log: list = field(default_factory=list)
    # Final sampler state from a DRO run; None for ERM. Not serialized.
    sampler: HardnessWeightedSampler | None = None

    def model(self) -> Model:
        return Model(self.spec, self.params)


def _check_dataset(dataset, spec: ModelSpec) -> None:
    if not dataset:
        raise ValueError("training dataset is empty")
    for case in dataset:
        if case.features.shape[1] != spec.input_features:
            raise ValueError(
                f"case {case.case_id!r} has {case.features.shape[1]} features, "
                f"model expects {spec.input_features}"
            )
        if case.labels.num_classes != spec.num_classes:
            raise ValueError(
                f"case {case.case_id!r} declares {case.labels.num_classes} classes, "
                f"model expects {spec.num_classes}"
            )


def train(model: Model, dataset, config: TrainConfig) -> TrainedModel:
    """Run the training loop; deterministic given the config seed.

    Each epoch draws len(dataset) cases: a fresh permutation in
    erm_shuffle mode, hardness-weighted draws with replacement in dro
    mode.  Draws are consumed in batches; the optimizer steps once per
    batch on the mean of the per-case gradients, at the epoch's scheduled
    learning rate.
    """
    dataset = list(dataset)
    _check_dataset(dataset, model.spec)
    n = len(dataset)

    optimizer = make_optimizer(config.optimizer, config.lr,
                               config.lookahead_k, config.lookahead_alpha)
    base_lr = optimizer.inner.lr if hasattr(optimizer, "inner") else optimizer.lr
    params = model.params.copy()
    log = []
    sampler = None
    shuffle_rng = None
    if config.sampler_mode == "dro":
        sampler = HardnessWeightedSampler(n, beta=config.beta, seed=config.seed + 1)
    else:
        shuffle_rng = Rng(config.seed)

    if config.epochs == 0:
        return TrainedModel(model.spec, params, log, sampler)

    schedule = PolySchedule(initial_lr=base_lr, t_max=config.epochs)
    for epoch in range(config.epochs):
        lr = schedule.at(epoch)
        if sampler is not None:
            order = sampler.sample_batch(n)
        else:
            order = shuffle_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            work = Model(model.spec, params)
            grads = []
            for idx in batch:
                case = dataset[int(idx)]
                loss, grad = work.backward(case.features, case.labels,
                                           config.loss, config.distance_matrix)
                if not math.isfinite(loss.value) or abs(loss.value) > DIVERGENCE_LIMIT:
                    raise TrainingDiverged(
                        f"training diverged at epoch {epoch}: "
                        f"loss {loss.value!r} on case {case.case_id!r}"
                    )
                epoch_losses.append(loss.value)
                grads.append(grad)
                if sampler is not None:
                    sampler.update_loss(int(idx), loss.value)
            params = optimizer.step(params, np.mean(grads, axis=0), lr=lr)
            peak = float(np.abs(params).max())
            if not np.isfinite(params).all() or peak > PARAM_LIMIT:
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch}: "
                    f"parameter magnitude {peak:.3e}"
                )
        entropy = sampler.entropy() if sampler is not None else math.log(n)
        log.append(EpochRecord(epoch=epoch, loss=float(np.mean(epoch_losses)),
                               lr=lr, sampler_entropy=entropy))
    return TrainedModel(model.spec, params, log, sampler)


def predict_tta(model: Model, features, spatial_shape) -> ProbMap:
    """Average forward probabilities over every axis-flip of the grid.

    Features arrive flattened row-major from the grid; each of the 2^D
    flip combinations is predicted and unflipped before averaging.
    """
    spatial_shape = tuple(int(s) for s in spatial_shape)
    x = as_f64(features, "features")
    if x.ndim != 2 or int(np.prod(spatial_shape)) != x.shape[0]:
        raise ValueError(
            f"features of shape {x.shape} do not cover grid {spatial_shape}"
        )
    ndim = len(spatial_shape)
    grid_x = x.reshape(spatial_shape + (x.shape[1],))
    total = None
    count = 0
    for bits in range(2 ** ndim):
        axes = tuple(a for a in range(ndim) if bits >> a & 1)
        flipped = np.flip(grid_x, axes) if axes else grid_x
        probs = model.forward(flipped.reshape(x.shape[0], x.shape[1]))
        grid_p = probs.voxels.reshape(spatial_shape + (probs.num_classes,))
        restored = np.flip(grid_p, axes) if axes else grid_p
        total = restored if total is None else total + restored
        count += 1
    mean = (total / count).reshape(x.shape[0], -1)
    return ProbMap(mean)


def _spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "kind": spec.kind,
        "input_features": spec.input_features,
        "num_classes": spec.num_classes,
        "hidden_width": spec.hidden_width,
        "seed": spec.seed,
    }


def _spec_from_dict(doc: dict) -> ModelSpec:
    keys = ("kind", "input_features", "num_classes", "hidden_width", "seed")
    missing = [k for k in keys if k not in doc]
    if missing:
        raise ValueError(f"model spec is missing fields {missing}")
    hidden = doc["hidden_width"]
    return ModelSpec(
        kind=str(doc["kind"]),
        input_features=int(doc["input_features"]),
        num_classes=int(doc["num_classes"]),
        hidden_width=None if hidden is None else int(hidden),
        seed=int(doc["seed"]),
    )


def save_model(trained: TrainedModel, path) -> None:
    """JSON descriptor plus a raw little-endian float64 parameter sidecar."""
    path = str(path)
    stem = path[:-5] if path.endswith(".json") else path
    param_file = os.path.basename(stem) + ".params.bin"
    doc = {
        "spec": _spec_to_dict(trained.spec),
        "param_file": param_file,
        "param_count": int(trained.params.size),
    }
    trained.params.astype("<f8").tofile(os.path.join(os.path.dirname(path) or ".", param_file))
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_model(path) -> TrainedModel:
    path = str(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"model file not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("spec", "param_file", "param_count"):
        if key not in doc:
            raise ValueError(f"model file {path} is missing field {key!r}")
    spec = _spec_from_dict(doc["spec"])
    param_path = os.path.join(os.path.dirname(path) or ".", doc["param_file"])
    if not os.path.exists(param_path):
        raise FileNotFoundError(f"parameter file not found: {param_path}")
    count = int(doc["param_count"])
    expected_bytes = count * 8
    actual = os.path.getsize(param_path)
    if actual != expected_bytes:
        raise ValueError(
            f"size mismatch in {param_path}: {actual} bytes, expected {expected_bytes}"
        )
    params = np.fromfile(param_path, dtype="<f8")
    if count != spec.param_count():
        raise ValueError(
            f"param_count {count} does not match spec ({spec.param_count()})"
        )
    require_finite(params, "params")
    return TrainedModel(spec=spec, params=params)


def write_training_log(trained: TrainedModel, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr", "sampler_entropy"])
        for rec in trained.training_log:
            writer.writerow([rec.epoch, repr(rec.loss), repr(rec.lr),
                             repr(rec.sampler_entropy)])
