"""Visual-prior fusion: provider protocol, prior transform, fusion head.

A pluggable visual provider answers a fixed two-step request plan
(identify the object, then rank the 14 material classes by token
log-probability). The log-probabilities become a 14-class prior:
softmax over the classes the provider named, zeros elsewhere, fourth
root, then standardization to zero mean / unit std. A two-layer MLP
fuses haptic logits with that standardized prior and is trained with
weighted cross-entropy plus a KL pull toward the vision distribution.

An uncertainty filter turns fused probabilities into accept/reject
decisions via a max-probability floor p1 and a top-2 margin floor p2.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .materials import TRAIN_LABELS
from .models.encoder import (
    ArrayDataset,
    EpochStats,
    HapticEncoder,
    compute_class_weights,
    predict_logits,
)
from .models.metrics import evaluate_predictions
from .models.nn import Adam, Dense, Param, ReLU, softmax

REQUEST_STEPS = ("identify_object", "classify_material")


class ProviderError(RuntimeError):
    """A single provider call failed."""


class ProviderFailureError(RuntimeError):
    """Too many objects failed after retries; carries the failure report."""

    def __init__(self, failed: Sequence[str], total: int) -> None:
        super().__init__(
            f"visual provider failed for {len(failed)}/{total} objects: "
            f"{sorted(failed)}"
        )
        self.failed = tuple(sorted(failed))
        self.total = total


# --------------------------------------------------------------------------
# Prompt fixtures and the request plan

_PROMPT_FILES = {
    "system": "system_prompt.txt",
    "user": "user_prompt.txt",
    "example": "in_context_example.txt",
}


@dataclass(frozen=True)
class PromptFixtures:
    system: str
    user: str
    example: str


def load_prompt_fixtures() -> PromptFixtures:
    """Read the three verbatim prompt files shipped with the package."""
    texts = {}
    base = resources.files("clamp") / "prompts"
    for key, fname in _PROMPT_FILES.items():
        ref = base / fname
        if not ref.is_file():
            raise FileNotFoundError(f"missing prompt fixture: prompts/{fname}")
        texts[key] = ref.read_text()
    return PromptFixtures(**texts)


@dataclass(frozen=True)
class VisualProviderRequest:
    step: str
    image_ref: str
    object_hint: str | None = None
    material_vocabulary: tuple[str, ...] = TRAIN_LABELS

    def validate(self) -> None:
        if self.step not in REQUEST_STEPS:
            raise ValueError(f"step must be one of {REQUEST_STEPS}")
        if self.step == "classify_material" and not self.object_hint:
            raise ValueError("material-classification requests need object_hint")

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "image_ref": self.image_ref,
                "object_hint": self.object_hint,
                "material_vocabulary": list(self.material_vocabulary),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "VisualProviderRequest":
        doc = json.loads(text)
        return cls(
            step=doc["step"],
            image_ref=doc["image_ref"],
            object_hint=doc.get("object_hint"),
            material_vocabulary=tuple(doc["material_vocabulary"]),
        )

    def replay_key(self) -> str:
        return json.dumps(
            {"step": self.step, "image_ref": self.image_ref,
             "object_hint": self.object_hint},
            sort_keys=True,
        )


@dataclass(frozen=True)
class VisualProviderResponse:
    step: str
    object_name: str | None = None
    token_logprobs: Mapping[str, float] | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "object_name": self.object_name,
                "token_logprobs": dict(self.token_logprobs)
                if self.token_logprobs is not None
                else None,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "VisualProviderResponse":
        doc = json.loads(text)
        return cls(
            step=doc["step"],
            object_name=doc.get("object_name"),
            token_logprobs=doc.get("token_logprobs"),
        )


@dataclass(frozen=True)
class RequestPlan:
    """Step-1 request plus the step-2 template awaiting the object hint."""

    identify: VisualProviderRequest
    classify_template: VisualProviderRequest
    prompts: PromptFixtures


def two_step_request_plan(
    image_ref: str, vocab: Sequence[str] = TRAIN_LABELS
) -> RequestPlan:
    prompts = load_prompt_fixtures()
    identify = VisualProviderRequest(
        step="identify_object", image_ref=image_ref,
        material_vocabulary=tuple(vocab),
    )
    template = VisualProviderRequest(
        step="classify_material", image_ref=image_ref, object_hint=None,
        material_vocabulary=tuple(vocab),
    )
    return RequestPlan(identify=identify, classify_template=template,
                       prompts=prompts)


def fill_object_hint(
    template: VisualProviderRequest, object_name: str
) -> VisualProviderRequest:
    if template.step != "classify_material":
        raise ValueError("only material-classification requests take a hint")
    if not object_name:
        raise ValueError("empty object name")
    req = replace(template, object_hint=object_name)
    req.validate()
    return req


# --------------------------------------------------------------------------
# Providers


class VisionProvider(Protocol):
    def send(self, request: VisualProviderRequest) -> VisualProviderResponse: ...


def _object_id_from_ref(image_ref: str) -> str:
    return image_ref.split("://", 1)[1] if "://" in image_ref else image_ref


class MockVisionProvider:
    """Deterministic in-process provider backed by an object-id table.

    table[object_id] = {"object": str, "token_logprobs": {token: float}}.
    fail_counts[object_id] = n makes the first n calls for that object
    raise, to exercise the retry path.
    """

    def __init__(
        self,
        table: Mapping[str, Mapping],
        fail_counts: Mapping[str, int] | None = None,
    ) -> None:
        self.table = dict(table)
        self._fails = dict(fail_counts or {})
        self.calls = 0

    def send(self, request: VisualProviderRequest) -> VisualProviderResponse:
        request.validate()
        self.calls += 1
        oid = _object_id_from_ref(request.image_ref)
        if self._fails.get(oid, 0) > 0:
            self._fails[oid] -= 1
            raise ProviderError(f"transient failure for {oid}")
        if oid not in self.table:
            raise ProviderError(f"no table entry for object {oid!r}")
        entry = self.table[oid]
        if request.step == "identify_object":
            return VisualProviderResponse(
                step=request.step, object_name=str(entry["object"])
            )
        return VisualProviderResponse(
            step=request.step,
            token_logprobs={str(k): float(v)
                            for k, v in entry["token_logprobs"].items()},
        )


class FileReplayProvider:
    """Replays recorded responses keyed by (step, image_ref, object_hint)."""

    def __init__(self, path: str | Path) -> None:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "clamp-replay-v1":
            raise ValueError(f"{path}: not a replay file")
        self.responses = {
            key: VisualProviderResponse.from_json(json.dumps(resp))
            for key, resp in doc["responses"].items()
        }

    def send(self, request: VisualProviderRequest) -> VisualProviderResponse:
        request.validate()
        key = request.replay_key()
        if key not in self.responses:
            raise ProviderError(f"no recorded response for {key}")
        return self.responses[key]


class RecordingProvider:
    """Wraps a provider and records request/response pairs for replay."""

    def __init__(self, inner: VisionProvider) -> None:
        self.inner = inner
        self.responses: dict[str, str] = {}

    def send(self, request: VisualProviderRequest) -> VisualProviderResponse:
        response = self.inner.send(request)
        self.responses[request.replay_key()] = response.to_json()
        return response

    def save(self, path: str | Path) -> None:
        doc = {
            "format": "clamp-replay-v1",
            "responses": {k: json.loads(v) for k, v in self.responses.items()},
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_two_step(
    provider: VisionProvider,
    image_ref: str,
    vocab: Sequence[str] = TRAIN_LABELS,
    retries: int = 3,
) -> tuple[str, dict[str, float]]:
    """Execute the plan with a per-step retry budget; raises ProviderError."""
    plan = two_step_request_plan(image_ref, vocab)

    def attempt(request: VisualProviderRequest) -> VisualProviderResponse:
        last: ProviderError | None = None
        for _ in range(max(1, retries)):
            try:
                return provider.send(request)
            except ProviderError as exc:
                last = exc
        raise last  # type: ignore[misc]

    first = attempt(plan.identify)
    if not first.object_name:
        raise ProviderError(f"empty object identification for {image_ref}")
    second = attempt(fill_object_hint(plan.classify_template, first.object_name))
    if not second.token_logprobs:
        raise ProviderError(f"empty material ranking for {image_ref}")
    return first.object_name, dict(second.token_logprobs)


# --------------------------------------------------------------------------
# Prior construction


@dataclass(frozen=True)
class VisionPrior:
    """Per-object 14-class vision distribution and its standardized form."""

    probs: np.ndarray
    std_logits: np.ndarray

    def validate(self) -> None:
        p, s = np.asarray(self.probs), np.asarray(self.std_logits)
        if p.shape != s.shape or p.ndim != 1:
            raise ValueError("probs and std_logits must be equal-length vectors")
        if p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be a distribution")
        if abs(s.mean()) > 1e-9:
            raise ValueError("std_logits must have zero mean")
        std = s.std()
        if not (std < 1e-9 or abs(std - 1.0) < 1e-9):
            raise ValueError("std_logits std must be 0 or 1")


def _normalize_token(token: str) -> str:
    return token.strip().lower().replace(" ", "_")


def uniform_prior(n_classes: int = len(TRAIN_LABELS)) -> VisionPrior:
    return VisionPrior(
        probs=np.full(n_classes, 1.0 / n_classes), std_logits=np.zeros(n_classes)
    )


def vision_prior_from_logprobs(
    token_logprobs: Mapping[str, float],
    vocab: Sequence[str] = TRAIN_LABELS,
) -> VisionPrior:
    """Tokens -> softmax over recognized classes -> fourth root -> standardize.

    Unrecognized tokens are dropped (duplicates keep the max logprob);
    absent classes get probability 0. A constant fourth-root vector
    standardizes to all-zero logits; no recognized token at all warns
    and returns the degenerate uniform prior.
    """
    n = len(vocab)
    index = {_normalize_token(name): i for i, name in enumerate(vocab)}
    kept: dict[int, float] = {}
    for token, lp in token_logprobs.items():
        i = index.get(_normalize_token(token))
        if i is None:
            continue
        lp = float(lp)
        if i not in kept or lp > kept[i]:
            kept[i] = lp
    if not kept:
        warnings.warn("no vocabulary token in provider output; uniform prior",
                      stacklevel=2)
        return uniform_prior(n)
    ids = np.array(sorted(kept))
    lps = np.array([kept[i] for i in ids])
    probs = np.zeros(n)
    probs[ids] = softmax(lps)
    root = probs ** 0.25
    std = root.std()
    if std < 1e-12:
        std_logits = np.zeros(n)
    else:
        std_logits = (root - root.mean()) / std
    prior = VisionPrior(probs=probs, std_logits=std_logits)
    prior.validate()
    return prior


def priors_for_objects(
    object_ids: Sequence[str],
    provider: VisionProvider,
    vocab: Sequence[str] = TRAIN_LABELS,
    retries: int = 3,
    failure_budget: float = 0.10,
    image_ref_fmt: str = "synthetic://{object_id}",
) -> dict[str, VisionPrior]:
    """One prior per unique object, queried in sorted order.

    Objects that still fail after retries get the degenerate uniform
    prior; if more than failure_budget of objects fail, aborts with a
    ProviderFailureError naming them.
    """
    unique = sorted(set(object_ids))
    priors: dict[str, VisionPrior] = {}
    failed: list[str] = []
    for oid in unique:
        ref = image_ref_fmt.format(object_id=oid)
        try:
            _, logprobs = run_two_step(provider, ref, vocab, retries=retries)
            priors[oid] = vision_prior_from_logprobs(logprobs, vocab)
        except ProviderError:
            failed.append(oid)
            priors[oid] = uniform_prior(len(vocab))
    if failed and len(failed) > failure_budget * len(unique):
        raise ProviderFailureError(failed, len(unique))
    if failed:
        warnings.warn(f"uniform fallback priors for {len(failed)} objects",
                      stacklevel=2)
    return priors


def make_mock_prior_table(
    object_materials: Mapping[str, str],
    mode: str = "informative",
    seed: int = 0,
    vocab: Sequence[str] = TRAIN_LABELS,
) -> dict[str, dict]:
    """Synthetic provider table: object_id -> {object, token_logprobs}.

    informative: the true material gets logprob 0, the rest -6 (a
    near-one-hot prior after softmax). uniform: all classes equal.
    """
    if mode not in ("informative", "uniform"):
        raise ValueError("mode must be 'informative' or 'uniform'")
    table: dict[str, dict] = {}
    for oid in sorted(object_materials):
        material = object_materials[oid]
        if mode == "informative" and material not in vocab:
            raise ValueError(f"material {material!r} not in vocabulary")
        if mode == "uniform":
            logprobs = {name: -1.0 for name in vocab}
        else:
            logprobs = {name: (0.0 if name == material else -6.0)
                        for name in vocab}
        table[oid] = {"object": f"object {oid}", "token_logprobs": logprobs}
    return table


def save_priors(path: str | Path, priors: Mapping[str, VisionPrior]) -> None:
    """JSON map object_id -> prior, suitable for later eval/predict runs."""
    doc = {
        "format": "clamp-priors-v1",
        "priors": {
            oid: {
                "probs": np.asarray(priors[oid].probs).tolist(),
                "std_logits": np.asarray(priors[oid].std_logits).tolist(),
            }
            for oid in sorted(priors)
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_priors(path: str | Path) -> dict[str, VisionPrior]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "clamp-priors-v1":
        raise ValueError(f"{path}: not a priors file")
    out: dict[str, VisionPrior] = {}
    for oid, entry in doc["priors"].items():
        prior = VisionPrior(
            probs=np.array(entry["probs"], dtype=np.float64),
            std_logits=np.array(entry["std_logits"], dtype=np.float64),
        )
        prior.validate()
        out[oid] = prior
    return out


# --------------------------------------------------------------------------
# Fusion head


@dataclass(frozen=True)
class FusionConfig:
    n_classes: int = 14
    hidden: int = 64
    lambda_kl: float = 0.1
    lr: float = 1e-5
    batch_size: int = 64
    epochs: int = 120
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2 or self.hidden < 1:
            raise ValueError("bad n_classes / hidden")
        if self.lambda_kl < 0:
            raise ValueError("lambda_kl must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad lr / batch_size / epochs")


def tiny_fusion_config(**overrides) -> FusionConfig:
    cfg = replace(FusionConfig(lr=1e-3), **overrides)
    cfg.validate()
    return cfg


class FusionParams:
    """Two-layer MLP: concat(haptic logits, prior std_logits) -> 14 logits."""

    def __init__(
        self,
        config: FusionConfig | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> None:
        self.config = config or FusionConfig()
        self.config.validate()
        rng = rng or np.random.default_rng(self.config.seed)
        n = self.config.n_classes
        self.fc1 = Dense(2 * n, self.config.hidden, rng=rng, dtype=dtype,
                         name="fusion.fc1")
        self.relu = ReLU()
        self.fc2 = Dense(self.config.hidden, n, rng=rng, dtype=dtype,
                         name="fusion.fc2")

    @property
    def lambda_kl(self) -> float:
        return self.config.lambda_kl

    def params(self) -> list[Param]:
        return self.fc1.params() + self.fc2.params()

    def forward_logits(
        self, haptic_logits: np.ndarray, std_logits: np.ndarray,
        train: bool = False,
    ) -> np.ndarray:
        n = self.config.n_classes
        if haptic_logits.ndim != 2 or haptic_logits.shape[1] != n:
            raise ValueError(f"expected (B, {n}) haptic logits")
        if std_logits.shape != haptic_logits.shape:
            raise ValueError("prior std_logits shape mismatch")
        z = np.concatenate([haptic_logits, std_logits], axis=1)
        z = self.fc1.forward(z.astype(self.fc1.weight.data.dtype), train)
        z = self.relu.forward(z, train)
        return self.fc2.forward(z, train)

    def backward(self, dlogits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns gradients wrt (haptic_logits, std_logits)."""
        dz = self.fc1.backward(self.relu.backward(self.fc2.backward(dlogits)))
        n = self.config.n_classes
        return dz[:, :n], dz[:, n:]

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params()}

    def save(self, path: str | Path) -> None:
        doc = {
            "format": "clamp-fusion-v1",
            "dtype": np.dtype(self.fc1.weight.data.dtype).str,
            "config": {
                "n_classes": self.config.n_classes,
                "hidden": self.config.hidden,
                "lambda_kl": self.config.lambda_kl,
                "lr": self.config.lr,
                "batch_size": self.config.batch_size,
                "epochs": self.config.epochs,
                "seed": self.config.seed,
            },
            "tensors": {
                name: {"shape": list(arr.shape),
                       "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}
                for name, arr in self.named_tensors().items()
            },
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FusionParams":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "clamp-fusion-v1":
            raise ValueError(f"{path}: not a fusion parameter file")
        params = cls(FusionConfig(**doc["config"]),
                     dtype=np.dtype(doc.get("dtype", "<f4")))
        tensors = doc["tensors"]
        for p in params.params():
            spec = tensors[p.name]
            arr = np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
            if arr.shape != p.data.shape:
                raise ValueError(f"{path}: shape mismatch for {p.name}")
            p.data = arr.astype(p.data.dtype)
            p.grad = np.zeros_like(p.data)
        return params


def fuse_forward(
    haptic_logits: np.ndarray,
    prior: VisionPrior,
    params: FusionParams,
) -> np.ndarray:
    """Fused class probabilities for one trial."""
    h = np.asarray(haptic_logits, dtype=np.float64).reshape(1, -1)
    s = np.asarray(prior.std_logits, dtype=np.float64).reshape(1, -1)
    logits = params.forward_logits(h, s, train=False)
    return softmax(logits.astype(np.float64))[0]


# --------------------------------------------------------------------------
# Composite loss


def composite_loss(
    probs: np.ndarray,
    label: int,
    prior_probs: np.ndarray,
    weights: np.ndarray | None,
    lambda_kl: float,
) -> float:
    """w_label * (-log P_label) + lambda * KL(V || P), P floored at 1e-12."""
    p = np.maximum(np.asarray(probs, dtype=np.float64), 1e-12)
    v = np.asarray(prior_probs, dtype=np.float64)
    if p.shape != v.shape or p.ndim != 1:
        raise ValueError("probs and prior must be equal-length vectors")
    if not 0 <= label < p.size:
        raise ValueError("label out of range")
    w = 1.0 if weights is None else float(np.asarray(weights)[label])
    ce = -w * np.log(p[label])
    mask = v > 0
    kl = float(np.sum(v[mask] * np.log(v[mask] / p[mask])))
    return float(ce + lambda_kl * kl)


def composite_loss_batch(
    logits: np.ndarray,
    labels: np.ndarray,
    prior_probs: np.ndarray,
    weights: np.ndarray | None,
    lambda_kl: float,
) -> tuple[float, np.ndarray]:
    """Batch loss and its exact gradient wrt the fused logits.

    d/dlogits = (w_y * (P - onehot_y) + lambda * (P - V)) / B.
    """
    b, n = logits.shape
    labels = np.asarray(labels)
    v = np.asarray(prior_probs, dtype=np.float64)
    if v.shape != (b, n):
        raise ValueError("prior batch shape mismatch")
    p = softmax(logits.astype(np.float64))
    loss = float(
        np.mean(
            [composite_loss(p[i], int(labels[i]), v[i], weights, lambda_kl)
             for i in range(b)]
        )
    )
    wy = (np.ones(b) if weights is None
          else np.asarray(weights, dtype=np.float64)[labels])
    d = wy[:, None] * p
    d[np.arange(b), labels] -= wy
    d += lambda_kl * (p - v)
    return loss, (d / b).astype(logits.dtype)


# --------------------------------------------------------------------------
# Training protocols


@dataclass
class FusionTrainResult:
    params: FusionParams
    history: list[EpochStats] = field(default_factory=list)
    val_accuracy: float = 0.0
    val_nmcc: float = 0.0


def _prior_arrays(
    object_ids: Sequence[str],
    priors: Mapping[str, VisionPrior],
    n_classes: int,
) -> tuple[np.ndarray, np.ndarray]:
    v = np.empty((len(object_ids), n_classes))
    s = np.empty((len(object_ids), n_classes))
    for i, oid in enumerate(object_ids):
        if oid not in priors:
            raise KeyError(f"no prior for object {oid!r}")
        v[i] = priors[oid].probs
        s[i] = priors[oid].std_logits
    return v, s


def _fusion_eval(
    params: FusionParams,
    haptic_logits: np.ndarray,
    std_logits: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
) -> tuple[float, float]:
    logits = params.forward_logits(haptic_logits, std_logits, train=False)
    res = evaluate_predictions(labels, logits.argmax(axis=1), n_classes)
    return res.accuracy, res.nmcc


def pretrain_fusion(
    train_set: ArrayDataset,
    encoder: HapticEncoder,
    priors: Mapping[str, VisionPrior],
    cfg: FusionConfig,
    val_set: ArrayDataset | None = None,
    haptic_logits: np.ndarray | None = None,
    val_logits: np.ndarray | None = None,
) -> FusionTrainResult:
    """Train the fusion MLP on a frozen encoder's logits.

    The encoder is only read; precomputed logits may be passed to skip
    the forward sweep. Deterministic under cfg.seed.
    """
    cfg.validate()
    if not train_set.object_ids:
        raise ValueError("train_set needs object_ids to join priors")
    if val_set is not None and val_set.n == 0:
        val_set = None
    if haptic_logits is None:
        haptic_logits = predict_logits(encoder, train_set.x)
    v_train, s_train = _prior_arrays(train_set.object_ids, priors, cfg.n_classes)
    weights = compute_class_weights(train_set.y, cfg.n_classes)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xF051)))
    params = FusionParams(cfg, rng=rng)
    opt = Adam(params.params(), lr=cfg.lr)
    shuffle = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xF052)))
    if val_set is not None and val_logits is None:
        val_logits = predict_logits(encoder, val_set.x)
    v_val = s_val = None
    if val_set is not None:
        v_val, s_val = _prior_arrays(val_set.object_ids, priors, cfg.n_classes)
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(train_set.n)
        total, seen = 0.0, 0
        for start in range(0, train_set.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = params.forward_logits(
                haptic_logits[idx], s_train[idx], train=True
            )
            loss, dlogits = composite_loss_batch(
                logits, train_set.y[idx], v_train[idx], weights, cfg.lambda_kl
            )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite fusion loss at epoch {epoch}, batch {start}"
                )
            opt.zero_grad()
            params.backward(dlogits)
            opt.step()
            total += loss * idx.size
            seen += idx.size
        val_acc = val_nmcc = 0.0
        if val_set is not None:
            val_acc, val_nmcc = _fusion_eval(
                params, val_logits, s_val, val_set.y, cfg.n_classes
            )
        history.append(EpochStats(epoch, total / seen, val_acc, val_nmcc))
    final = history[-1] if history else EpochStats(0, 0.0, 0.0, 0.0)
    return FusionTrainResult(
        params=params, history=history, val_accuracy=final.val_acc,
        val_nmcc=final.val_nmcc,
    )


FINETUNE_FRACTION_PRESETS = (0.07, 0.15, 0.30)


def select_finetune_subset(
    dataset: ArrayDataset, fraction: float, seed: int = 0
) -> np.ndarray:
    """Object-level stratified subset covering each present class."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if not dataset.object_ids:
        raise ValueError("dataset needs object_ids")
    obj_label: dict[str, int] = {}
    for oid, lab in zip(dataset.object_ids, dataset.y):
        obj_label.setdefault(oid, int(lab))
    by_class: dict[int, list[str]] = {}
    for oid in dict.fromkeys(dataset.object_ids):
        by_class.setdefault(obj_label[oid], []).append(oid)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF7)))
    chosen: set[str] = set()
    for lab in sorted(by_class):
        objs = by_class[lab]
        k = max(1, round(fraction * len(objs)))
        order = rng.permutation(len(objs))
        chosen.update(objs[i] for i in order[:k])
    idx = np.array(
        [i for i, oid in enumerate(dataset.object_ids) if oid in chosen],
        dtype=np.intp,
    )
    if idx.size == 0:
        raise ValueError("empty finetuning subset")
    return idx


def finetune_fusion(
    dataset: ArrayDataset,
    encoder: HapticEncoder,
    fusion: FusionParams,
    priors: Mapping[str, VisionPrior],
    fraction: float,
    epochs: int = 30,
    lr: float = 1e-4,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[list[EpochStats], np.ndarray]:
    """Jointly adapt encoder and fusion head on a subset of shifted data.

    Class weights are recomputed from the subset. Returns the history
    and the subset indices used.
    """
    idx = select_finetune_subset(dataset, fraction, seed=seed)
    sub = dataset.subset(idx)
    v_sub, s_sub = _prior_arrays(sub.object_ids, priors,
                                 fusion.config.n_classes)
    weights = compute_class_weights(sub.y, fusion.config.n_classes)
    opt = Adam(encoder.params() + fusion.params(), lr=lr)
    shuffle = np.random.default_rng(np.random.SeedSequence((seed, 0xF753)))
    history: list[EpochStats] = []
    for epoch in range(epochs):
        order = shuffle.permutation(sub.n)
        total, seen = 0.0, 0
        for start in range(0, sub.n, batch_size):
            b = order[start : start + batch_size]
            h_logits = encoder.forward(sub.x[b], train=True)
            logits = fusion.forward_logits(h_logits, s_sub[b], train=True)
            loss, dlogits = composite_loss_batch(
                logits, sub.y[b], v_sub[b], weights, fusion.lambda_kl
            )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite finetune loss at epoch {epoch}, batch {start}"
                )
            opt.zero_grad()
            dhaptic, _ = fusion.backward(dlogits)
            encoder.backward(dhaptic)
            opt.step()
            total += loss * b.size
            seen += b.size
        history.append(EpochStats(epoch, total / seen, 0.0, 0.0))
    return history, idx


def fused_predictions(
    encoder: HapticEncoder,
    fusion: FusionParams,
    dataset: ArrayDataset,
    priors: Mapping[str, VisionPrior],
) -> np.ndarray:
    """Fused probability matrix for a dataset (eval mode)."""
    h = predict_logits(encoder, dataset.x)
    _, s = _prior_arrays(dataset.object_ids, priors, fusion.config.n_classes)
    logits = fusion.forward_logits(h, s, train=False)
    return softmax(logits.astype(np.float64))


# --------------------------------------------------------------------------
# Uncertainty filter


@dataclass(frozen=True)
class UncertaintyThresholds:
    p1: float
    p2: float

    def __post_init__(self) -> None:
        if not (0 <= self.p1 <= 1 and 0 <= self.p2 <= 1):
            raise ValueError("thresholds must lie in [0, 1]")


UNCERTAINTY_PRESETS: dict[str, UncertaintyThresholds] = {
    "eval": UncertaintyThresholds(0.45, 0.25),
    "sorting": UncertaintyThresholds(0.18, 0.04),
}


@dataclass(frozen=True)
class Decision:
    accepted: bool
    label: int | None
    max_prob: float
    margin: float


def uncertainty_filter(
    probs: np.ndarray, thresholds: UncertaintyThresholds
) -> Decision:
    """Accept the argmax iff max >= p1 and top-2 margin >= p2."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2 or p.min() < 0 or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probs must be a distribution over >= 2 classes")
    top = int(p.argmax())
    top2 = np.partition(p, -2)[-2]
    margin = float(p[top] - top2)
    accepted = p[top] >= thresholds.p1 and margin >= thresholds.p2
    return Decision(
        accepted=accepted,
        label=top if accepted else None,
        max_prob=float(p[top]),
        margin=margin,
    )
