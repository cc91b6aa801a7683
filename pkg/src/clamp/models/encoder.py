"""Multi-kernel 1-D convolutional material classifier.

Blocks follow the multi-branch residual recipe: a 1x1 bottleneck feeds
parallel convolutions of widely different kernel lengths, a max-pool +
1x1 branch taps the block input directly, and the concatenation passes
through batch norm and ReLU. Every third block output is joined by a
1x1-conv shortcut from the start of its group, added post-activation
and re-activated. Global average pooling over time yields the latent
embedding, and a three-layer MLP maps it to class logits.

Inputs are standardized with per-channel statistics of the training set;
those statistics are buffers frozen into the checkpoint, not parameters.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .metrics import evaluate_predictions
from .nn import (
    Adam,
    BatchNorm1d,
    ChannelStandardize,
    Conv1d,
    Dense,
    GlobalAvgPool1d,
    MaxPool1d,
    Param,
    ReLU,
    weighted_cross_entropy,
)

_CHECKPOINT_MAGIC = b"CLCP"
_CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries diagnostics for the post-mortem."""

    def __init__(self, message: str, diagnostics: dict) -> None:
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class HapticEncoderConfig:
    n_blocks: int = 6
    n_filters: int = 256
    kernel_lengths: tuple[int, ...] = (7, 13, 25, 45, 81, 143, 250)
    latent_dim: int = 2048
    head_dims: tuple[int, ...] = (512, 128, 14)
    n_classes: int = 14
    in_channels: int = 9
    lr: float = 1e-5
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    residual_every: int = 3
    pad_mode: str = "zeros"

    def validate(self) -> None:
        ks = self.kernel_lengths
        if not ks or any(b <= a for a, b in zip(ks, ks[1:])) or min(ks) < 1:
            raise ValueError("kernel_lengths must be strictly increasing, >= 1")
        if self.latent_dim != (len(ks) + 1) * self.n_filters:
            raise ValueError(
                "latent_dim must equal (len(kernel_lengths) + 1) * n_filters"
            )
        if len(self.head_dims) < 1 or self.head_dims[-1] != self.n_classes:
            raise ValueError("head_dims must end at n_classes")
        if self.n_blocks < 1 or self.n_filters < 1:
            raise ValueError("n_blocks and n_filters must be >= 1")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad lr / batch_size / epochs")
        if self.residual_every < 2:
            raise ValueError("residual_every must be >= 2")


def full_config(**overrides) -> HapticEncoderConfig:
    cfg = replace(HapticEncoderConfig(), **overrides)
    cfg.validate()
    return cfg


def tiny_config(**overrides) -> HapticEncoderConfig:
    """Desk-scale profile: 2 blocks, 16 filters, 3 kernels, 64-dim latent."""
    base = HapticEncoderConfig(
        n_blocks=2,
        n_filters=16,
        kernel_lengths=(7, 25, 81),
        latent_dim=64,
        head_dims=(32, 16, 14),
        lr=1e-3,
        epochs=12,
    )
    cfg = replace(base, **overrides)
    cfg.validate()
    return cfg


class _InceptionBlock:
    """Bottleneck + parallel kernels + pooled 1x1 tap, concat -> BN -> ReLU.

    Concatenation order: kernel branches in config order, pool branch
    last. Convolutions are bias-free (batch norm directly follows, so a
    bias would be a zero-gradient parameter).
    """

    def __init__(
        self,
        in_channels: int,
        cfg: HapticEncoderConfig,
        rng: np.random.Generator,
        dtype,
        name: str,
    ) -> None:
        nf = cfg.n_filters
        self.n_filters = nf
        self.out_channels = (len(cfg.kernel_lengths) + 1) * nf
        self.bottleneck = Conv1d(
            in_channels, nf, 1, pad_mode=cfg.pad_mode, bias=False, rng=rng,
            dtype=dtype, name=f"{name}.bottleneck",
        )
        self.branches = [
            Conv1d(
                nf, nf, k, pad_mode=cfg.pad_mode, bias=False, rng=rng,
                dtype=dtype, name=f"{name}.branch{j}",
            )
            for j, k in enumerate(cfg.kernel_lengths)
        ]
        self.pool = MaxPool1d(3, pad_mode=cfg.pad_mode)
        self.pool_conv = Conv1d(
            in_channels, nf, 1, pad_mode=cfg.pad_mode, bias=False, rng=rng,
            dtype=dtype, name=f"{name}.pool_conv",
        )
        self.bn = BatchNorm1d(self.out_channels, dtype=dtype, name=f"{name}.bn")
        self.relu = ReLU()

    def params(self) -> list[Param]:
        out = self.bottleneck.params()
        for br in self.branches:
            out.extend(br.params())
        out.extend(self.pool_conv.params())
        out.extend(self.bn.params())
        return out

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        b = self.bottleneck.forward(x, train)
        parts = [br.forward(b, train) for br in self.branches]
        parts.append(self.pool_conv.forward(self.pool.forward(x, train), train))
        cat = np.concatenate(parts, axis=1)
        return self.relu.forward(self.bn.forward(cat, train), train)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dcat = self.bn.backward(self.relu.backward(dy))
        nf = self.n_filters
        db = None
        for j, br in enumerate(self.branches):
            part = br.backward(dcat[:, j * nf : (j + 1) * nf])
            db = part if db is None else db + part
        dx = self.bottleneck.backward(db)
        dpool = self.pool_conv.backward(dcat[:, len(self.branches) * nf :])
        return dx + self.pool.backward(dpool)


class HapticEncoder:
    def __init__(
        self,
        config: HapticEncoderConfig,
        rng: np.random.Generator | None = None,
        norm_mean: np.ndarray | None = None,
        norm_std: np.ndarray | None = None,
        dtype=np.float32,
    ) -> None:
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = rng or np.random.default_rng(config.seed)
        c = config.in_channels
        mean = np.zeros(c) if norm_mean is None else np.asarray(norm_mean)
        std = np.ones(c) if norm_std is None else np.asarray(norm_std)
        self.norm = ChannelStandardize(mean, std)
        self.blocks: list[_InceptionBlock] = []
        self.shortcuts: dict[int, tuple[Conv1d, BatchNorm1d, ReLU]] = {}
        self._group_start: dict[int, int] = {}
        in_ch = c
        group_in_ch = c
        group_start = 0
        for i in range(config.n_blocks):
            block = _InceptionBlock(in_ch, config, rng, dtype, name=f"block{i}")
            self.blocks.append(block)
            in_ch = block.out_channels
            if (i + 1) % config.residual_every == 0:
                conv = Conv1d(
                    group_in_ch, in_ch, 1, pad_mode=config.pad_mode, bias=False,
                    rng=rng, dtype=dtype, name=f"shortcut{i}",
                )
                bn = BatchNorm1d(in_ch, dtype=dtype, name=f"shortcut{i}.bn")
                self.shortcuts[i] = (conv, bn, ReLU())
                self._group_start[i] = group_start
                group_in_ch = in_ch
                group_start = i + 1
        self.gap = GlobalAvgPool1d()
        head_layers: list = []
        dims = (config.latent_dim,) + tuple(config.head_dims)
        for j in range(len(dims) - 1):
            head_layers.append(
                Dense(dims[j], dims[j + 1], rng=rng, dtype=dtype, name=f"head{j}")
            )
            if j < len(dims) - 2:
                head_layers.append(ReLU())
        self.head = head_layers
        self._inputs: list[np.ndarray] | None = None
        self.latent: np.ndarray | None = None

    # -- parameter plumbing

    def params(self) -> list[Param]:
        out: list[Param] = []
        for block in self.blocks:
            out.extend(block.params())
        for conv, bn, _ in self.shortcuts.values():
            out.extend(conv.params())
            out.extend(bn.params())
        for layer in self.head:
            out.extend(layer.params())
        return out

    def head_params(self) -> list[Param]:
        out: list[Param] = []
        for layer in self.head:
            out.extend(layer.params())
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Every array that defines the model: params plus buffers."""
        out: dict[str, np.ndarray] = {
            "norm.mean": self.norm.mean,
            "norm.std": self.norm.std,
        }
        for p in self.params():
            out[p.name] = p.data
        bns = [b.bn for b in self.blocks] + [bn for _, bn, _ in self.shortcuts.values()]
        for bn in bns:
            prefix = bn.gamma.name.rsplit(".", 1)[0]
            out[f"{prefix}.running_mean"] = bn.running_mean
            out[f"{prefix}.running_var"] = bn.running_var
        return out

    # -- forward / backward

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, T) input, got {x.shape}"
            )
        h = self.norm.forward(x.astype(self.dtype, copy=False), train)
        inputs = [h]
        for i, block in enumerate(self.blocks):
            h = block.forward(h, train)
            if i in self.shortcuts:
                conv, bn, relu = self.shortcuts[i]
                sc = bn.forward(conv.forward(inputs[self._group_start[i]], train), train)
                h = relu.forward(h + sc, train)
            inputs.append(h)
        self._inputs = inputs if train else None
        self.latent = self.gap.forward(h, train)
        z = self.latent
        for layer in self.head:
            z = layer.forward(z, train)
        return z

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        if self._inputs is None:
            raise RuntimeError("backward before a train-mode forward")
        dz = dlogits
        for layer in reversed(self.head):
            dz = layer.backward(dz)
        dh = self.gap.backward(dz)
        pending: dict[int, np.ndarray] = {}
        for i in reversed(range(len(self.blocks))):
            if i in self.shortcuts:
                conv, bn, relu = self.shortcuts[i]
                dsum = relu.backward(dh)
                dsc = conv.backward(bn.backward(dsum))
                j = self._group_start[i]
                pending[j] = pending.get(j, 0) + dsc
                dh = dsum
            dh = self.blocks[i].backward(dh)
            if i in pending:
                dh = dh + pending.pop(i)
        return self.norm.backward(dh)


def encoder_forward(
    model: HapticEncoder, x: np.ndarray, train: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Logits and the pooled latent embedding for a batch."""
    logits = model.forward(x, train=train)
    return logits, model.latent


# --------------------------------------------------------------------------
# Datasets, splits, weights


@dataclass
class ArrayDataset:
    """In-memory tensors, labels, and the object each trial came from."""

    x: np.ndarray
    y: np.ndarray
    object_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3 or self.y.shape != (self.x.shape[0],):
            raise ValueError("expected x (N, C, T) and y (N,)")
        if self.object_ids and len(self.object_ids) != self.x.shape[0]:
            raise ValueError("object_ids length mismatch")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def subset(self, idx: np.ndarray) -> "ArrayDataset":
        ids = tuple(self.object_ids[i] for i in idx) if self.object_ids else ()
        return ArrayDataset(self.x[idx], self.y[idx], ids)


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over samples and time; std floored at 1e-6."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=(0, 2))
    std = np.maximum(x.std(axis=(0, 2)), 1e-6)
    return mean, std


def compute_class_weights(labels: Sequence[int], n_classes: int) -> np.ndarray:
    """Inverse-frequency weights, absent classes at the max present weight,
    rescaled to mean 1."""
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ValueError("empty labels")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("label out of range")
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = 1.0 / counts[present]
    w[~present] = w[present].max()
    return w / w.mean()


def stratified_object_split(
    object_ids: Sequence[str],
    labels: Sequence[int],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split sample indices so no object straddles splits, stratified by class.

    Objects are allocated per class roughly in the given proportions;
    classes with >= 3 objects are guaranteed at least one object in each
    split.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative and sum to 1")
    ids = list(object_ids)
    y = np.asarray(labels, dtype=np.int64)
    if len(ids) != y.size:
        raise ValueError("object_ids and labels length mismatch")
    obj_label: dict[str, int] = {}
    for oid, lab in zip(ids, y):
        if obj_label.setdefault(oid, int(lab)) != lab:
            raise ValueError(f"object {oid!r} has inconsistent labels")
    by_class: dict[int, list[str]] = {}
    for oid in dict.fromkeys(ids):  # first-appearance order
        by_class.setdefault(obj_label[oid], []).append(oid)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5B17)))
    assign: dict[str, int] = {}
    for lab in sorted(by_class):
        objs = by_class[lab]
        order = [objs[i] for i in rng.permutation(len(objs))]
        m = len(order)
        n_val = round(fractions[1] * m)
        n_test = round(fractions[2] * m)
        if m >= 3:
            n_val = max(1, n_val)
            n_test = max(1, n_test)
        n_val = min(n_val, m - 1)
        n_test = min(n_test, m - 1 - n_val)
        for k, oid in enumerate(order):
            if k < n_val:
                assign[oid] = 1
            elif k < n_val + n_test:
                assign[oid] = 2
            else:
                assign[oid] = 0
    buckets: list[list[int]] = [[], [], []]
    for i, oid in enumerate(ids):
        buckets[assign[oid]].append(i)
    return tuple(np.asarray(b, dtype=np.intp) for b in buckets)


# --------------------------------------------------------------------------
# Training


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_acc: float
    val_nmcc: float


@dataclass
class TrainResult:
    model: HapticEncoder
    history: list[EpochStats] = field(default_factory=list)
    val_accuracy: float = 0.0
    val_nmcc: float = 0.0
    seed: int = 0


def predict_logits(
    model: HapticEncoder, x: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    if x.shape[0] == 0:
        return np.zeros((0, model.config.n_classes), dtype=model.dtype)
    outs = []
    for i in range(0, x.shape[0], batch_size):
        outs.append(model.forward(x[i : i + batch_size], train=False))
    return np.concatenate(outs, axis=0)


def predict_latents(
    model: HapticEncoder, x: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    if x.shape[0] == 0:
        return np.zeros((0, model.config.latent_dim), dtype=model.dtype)
    outs = []
    for i in range(0, x.shape[0], batch_size):
        model.forward(x[i : i + batch_size], train=False)
        outs.append(model.latent)
    return np.concatenate(outs, axis=0)


def _validation_stats(
    model: HapticEncoder, val_set: ArrayDataset | None, n_classes: int
) -> tuple[float, float]:
    if val_set is None or val_set.n == 0:
        return 0.0, 0.0
    preds = predict_logits(model, val_set.x).argmax(axis=1)
    res = evaluate_predictions(val_set.y, preds, n_classes)
    return res.accuracy, res.nmcc


def train_encoder(
    train_set: ArrayDataset,
    val_set: ArrayDataset | None,
    cfg: HapticEncoderConfig,
    seed: int | None = None,
    class_weights: np.ndarray | None = None,
    model: HapticEncoder | None = None,
    progress: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Minibatch Adam training; deterministic under (cfg, seed, data).

    Raises TrainingDivergedError on a non-finite loss.
    """
    if train_set.n == 0:
        raise ValueError("empty training set")
    seed = cfg.seed if seed is None else seed
    init_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1417)))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5417)))
    if model is None:
        mean, std = channel_stats(train_set.x)
        model = HapticEncoder(cfg, rng=init_rng, norm_mean=mean, norm_std=std)
    if class_weights is None:
        class_weights = compute_class_weights(train_set.y, cfg.n_classes)
    opt = Adam(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(train_set.n)
        total, seen = 0.0, 0
        for start in range(0, train_set.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = train_set.x[idx]
            yb = train_set.y[idx]
            logits = model.forward(xb, train=True)
            loss, dlogits = weighted_cross_entropy(logits, yb, class_weights)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    "non-finite training loss",
                    {
                        "epoch": epoch,
                        "batch_start": int(start),
                        "loss": float(loss),
                        "lr": cfg.lr,
                        "max_abs_logit": float(np.abs(logits).max()),
                    },
                )
            opt.zero_grad()
            model.backward(dlogits)
            opt.step()
            total += loss * idx.size
            seen += idx.size
        val_acc, val_nmcc = _validation_stats(model, val_set, cfg.n_classes)
        stats = EpochStats(
            epoch=epoch,
            train_loss=total / seen,
            val_acc=val_acc,
            val_nmcc=val_nmcc,
        )
        history.append(stats)
        if progress is not None:
            progress(stats)
    val_acc, val_nmcc = _validation_stats(model, val_set, cfg.n_classes)
    return TrainResult(
        model=model, history=history, val_accuracy=val_acc, val_nmcc=val_nmcc,
        seed=seed,
    )


def worst_of_seeds(
    train_set: ArrayDataset,
    val_set: ArrayDataset,
    cfg: HapticEncoderConfig,
    seeds: Sequence[int] = (0, 1, 2),
    progress: Callable[[EpochStats], None] | None = None,
) -> tuple[TrainResult, dict[int, TrainResult]]:
    """Train one run per seed and report the worst by validation accuracy."""
    if not seeds:
        raise ValueError("need at least one seed")
    runs: dict[int, TrainResult] = {}
    for s in seeds:
        runs[s] = train_encoder(train_set, val_set, cfg, seed=s, progress=progress)
    worst = min(runs.values(), key=lambda r: (r.val_accuracy, -r.seed))
    return worst, runs


def fit_compliance_head(
    model: HapticEncoder,
    train_set: ArrayDataset,
    val_set: ArrayDataset | None = None,
    head_dims: tuple[int, ...] = (32, 16, 2),
    lr: float = 1e-3,
    epochs: int = 60,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[list, TrainResult]:
    """Train a fresh binary head on frozen latent embeddings.

    The encoder is only read (eval-mode latent extraction); its tensors
    hash identically before and after. Labels must be 0/1.
    """
    y = train_set.y
    bad = set(np.unique(y)) - {0, 1}
    if bad:
        raise ValueError(f"compliance labels must be 0/1, got extras {sorted(bad)}")
    if head_dims[-1] != 2:
        raise ValueError("compliance head must end at 2 classes")
    if np.unique(y).size < 2:
        warnings.warn("single-class compliance training set", stacklevel=2)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC09D)))
    latents = predict_latents(model, train_set.x)
    dims = (latents.shape[1],) + tuple(head_dims)
    head: list = []
    for j in range(len(dims) - 1):
        head.append(Dense(dims[j], dims[j + 1], rng=rng, dtype=np.float32,
                          name=f"comp_head{j}"))
        if j < len(dims) - 2:
            head.append(ReLU())

    def head_forward(z: np.ndarray, train: bool) -> np.ndarray:
        for layer in head:
            z = layer.forward(z, train)
        return z

    params: list[Param] = []
    for layer in head:
        params.extend(layer.params())
    opt = Adam(params, lr=lr)
    weights = compute_class_weights(y, 2)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC09E)))
    history: list[EpochStats] = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(train_set.n)
        total, seen = 0.0, 0
        for start in range(0, train_set.n, batch_size):
            idx = order[start : start + batch_size]
            logits = head_forward(latents[idx], True)
            loss, dlogits = weighted_cross_entropy(logits, y[idx], weights)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    "non-finite compliance-head loss",
                    {"epoch": epoch, "batch_start": int(start), "lr": lr},
                )
            opt.zero_grad()
            dz = dlogits
            for layer in reversed(head):
                dz = layer.backward(dz)
            opt.step()
            total += loss * idx.size
            seen += idx.size
        val_acc, val_nmcc = 0.0, 0.0
        if val_set is not None and val_set.n:
            vp = head_forward(predict_latents(model, val_set.x), False).argmax(1)
            res = evaluate_predictions(val_set.y, vp, 2)
            val_acc, val_nmcc = res.accuracy, res.nmcc
        history.append(EpochStats(epoch, total / seen, val_acc, val_nmcc))
    final = history[-1] if history else EpochStats(0, 0.0, 0.0, 0.0)
    result = TrainResult(
        model=model, history=history, val_accuracy=final.val_acc,
        val_nmcc=final.val_nmcc, seed=seed,
    )
    return head, result


def predict_head(head: list, latents: np.ndarray) -> np.ndarray:
    z = latents
    for layer in head:
        z = layer.forward(z, train=False)
    return z.argmax(axis=1)


def save_dense_stack(path: str | Path, head: list) -> None:
    """JSON for a Dense/ReLU stack (e.g. the compliance head)."""
    layers = []
    for layer in head:
        if isinstance(layer, Dense):
            layers.append(
                {
                    "kind": "dense",
                    "name": layer.weight.name.rsplit(".", 1)[0],
                    "weight": np.asarray(layer.weight.data,
                                         dtype=np.float64).tolist(),
                    "bias": np.asarray(layer.bias.data,
                                       dtype=np.float64).tolist(),
                }
            )
        elif isinstance(layer, ReLU):
            layers.append({"kind": "relu"})
        else:
            raise ValueError(f"cannot serialize layer {type(layer).__name__}")
    doc = {"format": "clamp-head-v1", "layers": layers}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_dense_stack(path: str | Path) -> list:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "clamp-head-v1":
        raise ValueError(f"{path}: not a dense-stack file")
    head: list = []
    for spec in doc["layers"]:
        if spec["kind"] == "relu":
            head.append(ReLU())
            continue
        w = np.array(spec["weight"], dtype=np.float32)
        b = np.array(spec["bias"], dtype=np.float32)
        layer = Dense(w.shape[0], w.shape[1], name=spec.get("name", "dense"))
        layer.weight.data = w
        layer.bias.data = b
        layer.weight.grad = np.zeros_like(w)
        layer.bias.grad = np.zeros_like(b)
        head.append(layer)
    return head


# --------------------------------------------------------------------------
# Hashing, checkpoints, history


def encoder_hash(model: HapticEncoder) -> str:
    """SHA-256 over every named tensor, cast to little-endian float32."""
    h = hashlib.sha256()
    tensors = model.named_tensors()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | Path, model: HapticEncoder, extra: dict | None = None
) -> None:
    """Versioned binary: magic, header JSON, named little-endian f32 tensors."""
    tensors = model.named_tensors()
    names = sorted(tensors)
    header = {
        "config": asdict(model.config),
        "extra": extra or {},
        "tensors": [
            {"name": n, "shape": list(tensors[n].shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHI", _CHECKPOINT_MAGIC, _CHECKPOINT_VERSION,
                             len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[HapticEncoder, dict]:
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10 or head[:4] != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, blob_len = struct.unpack("<HI", head[4:])
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(blob_len).decode())
        cfg_dict = dict(header["config"])
        for key in ("kernel_lengths", "head_dims"):
            cfg_dict[key] = tuple(cfg_dict[key])
        cfg = HapticEncoderConfig(**cfg_dict)
        model = HapticEncoder(cfg)
        loaded: dict[str, np.ndarray] = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"{path}: truncated tensor {spec['name']}")
            loaded[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    targets = model.named_tensors()
    if set(loaded) != set(targets):
        raise ValueError(f"{path}: tensor names do not match the config")
    model.norm.mean = loaded["norm.mean"].astype(np.float64)
    model.norm.std = loaded["norm.std"].astype(np.float64)
    for p in model.params():
        if loaded[p.name].shape != p.data.shape:
            raise ValueError(f"{path}: shape mismatch for {p.name}")
        p.data = loaded[p.name].astype(model.dtype)
        p.grad = np.zeros_like(p.data)
    bns = [b.bn for b in model.blocks] + [
        bn for _, bn, _ in model.shortcuts.values()
    ]
    for bn in bns:
        prefix = bn.gamma.name.rsplit(".", 1)[0]
        bn.running_mean = loaded[f"{prefix}.running_mean"].astype(np.float64)
        bn.running_var = loaded[f"{prefix}.running_var"].astype(np.float64)
    return model, header["extra"]


def write_history_csv(path: str | Path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_acc", "val_nmcc"])
        for h in history:
            writer.writerow(
                [h.epoch, format(h.train_loss, ".9g"), format(h.val_acc, ".9g"),
                 format(h.val_nmcc, ".9g")]
            )
