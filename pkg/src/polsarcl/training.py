"""Pretraining, fine-tuning and inference for the dual-branch model.

Pretraining draws batches from an unlabeled pixel pool, feeds coherency
patches to the online branch and filtered feature vectors to the target
branch, and minimizes the grouped contrastive loss with SGD under a cosine
learning-rate schedule.  All stochastic stages derive their generators from
the master seed, so runs are bit-reproducible and checkpoints resume
exactly.

Fine-tuning drops the projection head, attaches a linear class head to the
representation encoder and trains with cross-entropy on a small stratified
label subset; a frozen-encoder mode trains the head only.

Run configuration files are flat ``key = value`` text; the recognized keys
are listed in :data:`CONFIG_FILE_KEYS` and unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .contrastive import SAMPLING_MODES, BatchSampler, superpixel_info_nce
from .decomposition import FeatureCube
from .feature_filter import stratified_label_subset
from .networks import (
    OnlineNetwork,
    PatchClassifier,
    TargetNetwork,
    build_online_network,
    build_target_network,
)
from .nn import SGD, Checkpoint, Linear, cosine_lr
from .sar import PatchExtractor, PolSARImage
from .superpixel import SuperpixelMap

__all__ = [
    "TrainConfig",
    "CONFIG_FILE_KEYS",
    "parse_config_text",
    "apply_config_values",
    "config_to_text",
    "PretrainResult",
    "FinetuneResult",
    "pretrain",
    "finetune",
    "predict_map",
    "classifier_from_checkpoint",
    "online_network_from_checkpoint",
    "cross_entropy",
]

logger = logging.getLogger("polsarcl.training")

ARCHITECTURES = ("heterogeneous", "siamese")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the whole pipeline (defaults follow the recipe)."""

    tau: float = 0.07
    batch_size: int = 4096
    epochs: int = 30
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    patch_size: int = 15
    theta: int = 8
    beam: tuple[int, ...] = (2, 2, 2)
    sampling_mode: str = "superpixel"
    architecture: str = "heterogeneous"
    seed: int = 0
    unlabeled_fraction: float = 0.10
    label_fraction: float = 0.001
    # engine settings, not part of the config-file surface
    finetune_lr: float = 0.001
    finetune_epochs: int = 50
    finetune_batch_size: int = 64
    frozen_encoder: bool = False
    target_frozen: bool = False
    allow_unfiltered: bool = False
    online_widths: tuple[int, int] = (32, 64)
    target_widths: tuple[int, int] = (16, 32)
    m: int = 128
    d: int = 64
    encoder_relu: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if not 0.0 < self.unlabeled_fraction <= 1.0:
            raise ValueError("unlabeled_fraction must be in (0, 1]")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must be in (0, 1]")
        if self.patch_size % 2 == 0 or self.patch_size < 1:
            raise ValueError("patch_size must be odd and positive")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")


_CONFIG_PARSERS = {
    "tau": float,
    "batch_size": int,
    "epochs": int,
    "lr0": float,
    "momentum": float,
    "weight_decay": float,
    "patch_size": int,
    "theta": int,
    "beam": lambda s: tuple(int(tok) for tok in s.split(",") if tok.strip()),
    "sampling_mode": str,
    "architecture": str,
    "seed": int,
    "unlabeled_fraction": float,
    "label_fraction": float,
}

CONFIG_FILE_KEYS = tuple(_CONFIG_PARSERS)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; unknown keys raise, naming the key."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_PARSERS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_PARSERS[key](value)
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: bad value {value!r}") from exc
    return values


def apply_config_values(base: TrainConfig, values: dict) -> TrainConfig:
    return dataclasses.replace(base, **values)


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for key in CONFIG_FILE_KEYS:
        value = getattr(config, key)
        if key == "beam":
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# -- seed derivation -----------------------------------------------------------

# fixed stream tags so every stochastic stage gets an independent generator
_STREAM_INIT = 1
_STREAM_POOL = 2
_STREAM_SAMPLER = 3
_STREAM_FINETUNE_LABELS = 4
_STREAM_FINETUNE_INIT = 5
_STREAM_FINETUNE_ORDER = 6


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


# -- pretraining ---------------------------------------------------------------


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]
    online: OnlineNetwork
    target: TargetNetwork | OnlineNetwork


def _collect_state(online, target, siamese: bool) -> dict[str, np.ndarray]:
    state = online.state_arrays("online/")
    if not siamese:
        state.update(target.state_arrays("target/"))
    return state


def _named_trainables(online, target, siamese: bool, target_frozen: bool):
    named = list(online.named_parameters("online/"))
    if not siamese and not target_frozen:
        named += list(target.named_parameters("target/"))
    return named


def _meta_arrays(config: TrainConfig, theta_n: int) -> dict[str, np.ndarray]:
    return {
        "meta/patch_size": np.array([config.patch_size], dtype=np.float32),
        "meta/m": np.array([config.m], dtype=np.float32),
        "meta/d": np.array([config.d], dtype=np.float32),
        "meta/theta_n": np.array([theta_n], dtype=np.float32),
        "meta/arch": np.array(
            [0.0 if config.architecture == "heterogeneous" else 1.0], dtype=np.float32
        ),
        "meta/online_widths": np.array(config.online_widths, dtype=np.float32),
        "meta/target_widths": np.array(config.target_widths, dtype=np.float32),
        "meta/relu": np.array([1.0 if config.encoder_relu else 0.0], dtype=np.float32),
    }


def pretrain(
    img: PolSARImage,
    cube: FeatureCube,
    spmap: SuperpixelMap,
    config: TrainConfig,
    resume: Checkpoint | None = None,
) -> PretrainResult:
    """Contrastive pretraining over an unlabeled pixel pool.

    The feature cube must already be masked to the filter's selection
    unless ``config.allow_unfiltered`` is set.  One epoch is
    ``ceil(pool / B)`` steps with ``B = min(config.batch_size, capacity)``.
    Passing a checkpoint as ``resume`` continues bit-exactly from its epoch
    up to ``config.epochs``.
    """
    if (cube.height, cube.width) != (img.height, img.width):
        raise ValueError("feature cube does not match image dimensions")
    if (spmap.height, spmap.width) != (img.height, img.width):
        raise ValueError("superpixel map does not match image dimensions")
    if bool(cube.active.all()) and not config.allow_unfiltered:
        raise ValueError(
            "feature cube is unfiltered (all features active); run the feature "
            "filter first or set allow_unfiltered"
        )

    siamese = config.architecture == "siamese"
    theta_n = int(cube.active.sum())

    n_pixels = img.height * img.width
    pool_rng = _rng(config.seed, _STREAM_POOL)
    n_pool = max(2, int(round(config.unlabeled_fraction * n_pixels)))
    pool = np.zeros(n_pixels, dtype=bool)
    pool[pool_rng.choice(n_pixels, size=min(n_pool, n_pixels), replace=False)] = True

    sampler = BatchSampler(spmap, config.sampling_mode, pool=pool, labels=img.labels)
    b = min(config.batch_size, sampler.capacity)
    if b < 2:
        raise ValueError("pool too small: fewer than 2 eligible batch slots")
    steps_per_epoch = -(-int(pool.sum()) // b)

    init_rng = _rng(config.seed, _STREAM_INIT)
    online = build_online_network(init_rng, config.patch_size, config.online_widths,
                                  config.m, config.d, relu=config.encoder_relu)
    target = online if siamese else build_target_network(
        init_rng, theta_n, config.target_widths, config.d, relu=config.encoder_relu
    )
    if not siamese:
        online_ids = {id(p) for p in online.parameters()}
        if online_ids & {id(p) for p in target.parameters()}:
            raise AssertionError("heterogeneous branches must not share parameters")

    named = _named_trainables(online, target, siamese, config.target_frozen)
    opt = SGD([p for _, p in named], lr=config.lr0, momentum=config.momentum,
              weight_decay=config.weight_decay)

    sampler_rng = _rng(config.seed, _STREAM_SAMPLER)
    start_epoch = 0
    if resume is not None:
        state = dict(resume.params)
        online.load_state_arrays(state, "online/")
        if not siamese:
            target.load_state_arrays(state, "target/")
        for (name, _), vel in zip(named, opt.velocities):
            vel[...] = resume.momenta[name]
        if resume.rng_state is not None:
            sampler_rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
        if start_epoch > config.epochs:
            raise ValueError("checkpoint is already past the requested epochs")

    patches = PatchExtractor(img, config.patch_size)
    feats = cube.active_vectors().astype(np.float32)

    online.train()
    if not siamese:
        target.train()
    epoch_losses: list[float] = []
    for epoch in range(start_epoch, config.epochs):
        opt.lr = cosine_lr(epoch, config.epochs, config.lr0)
        losses = []
        for _ in range(steps_per_epoch):
            batch = sampler.sample(b, sampler_rng)
            x2d = Tensor(patches.batch(batch.rows, batch.cols))
            q = online(x2d)
            if siamese:
                k = q
            else:
                flat = batch.rows * img.width + batch.cols
                x1d = Tensor(feats[flat][:, None, :])
                k = target(x1d)
            loss = superpixel_info_nce(q, k, batch.ids, config.tau)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        logger.info("pretrain epoch %d/%d: loss %.6f (lr %.5f)",
                    epoch + 1, config.epochs, epoch_losses[-1], opt.lr)

    params = _collect_state(online, target, siamese)
    params.update(_meta_arrays(config, theta_n))
    momenta = {name: vel for (name, _), vel in zip(named, opt.velocities)}
    ckpt = Checkpoint(params=params, momenta=momenta,
                      rng_state=sampler_rng.bit_generator.state, epoch=config.epochs)
    return PretrainResult(checkpoint=ckpt, epoch_losses=epoch_losses,
                          online=online, target=target)


def online_network_from_checkpoint(ckpt: Checkpoint) -> OnlineNetwork:
    """Rebuild the online branch (encoder + projector) from a checkpoint."""
    meta = ckpt.params
    patch_size = int(meta["meta/patch_size"][0])
    m = int(meta["meta/m"][0])
    d = int(meta["meta/d"][0])
    widths = tuple(int(v) for v in meta["meta/online_widths"])
    relu = bool(meta.get("meta/relu", np.array([1.0]))[0])
    online = build_online_network(np.random.default_rng(0), patch_size, widths, m, d,
                                  relu=relu)
    online.load_state_arrays(dict(ckpt.params), "online/")
    return online


# -- fine-tuning ----------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer targets under raw class scores."""
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = z.exp().sum(axis=1, keepdims=True).log()
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(targets)), targets] = 1.0
    picked = (z * Tensor(onehot)).sum(axis=1, keepdims=True)
    return (lse - picked).mean()


def _batch_chunks(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split into batches; a trailing singleton joins the previous batch."""
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


@dataclass
class FinetuneResult:
    model: PatchClassifier
    train_labels: np.ndarray
    epoch_losses: list[float] = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        params = self.model.state_arrays("model/")
        params["meta/classes"] = self.model.classes.astype(np.float32)
        params["meta/patch_size"] = np.array([self.model.patch_size], dtype=np.float32)
        params["meta/m"] = np.array([self.model.m], dtype=np.float32)
        conv_layers = [l for l in self.model.encoder.layers if hasattr(l, "weight")
                       and l.weight.data.ndim == 4]
        params["meta/online_widths"] = np.array(
            [conv_layers[0].weight.shape[0], conv_layers[1].weight.shape[0]],
            dtype=np.float32,
        )
        has_relu = any(type(l).__name__ == "ReLU" for l in self.model.encoder.layers)
        params["meta/relu"] = np.array([1.0 if has_relu else 0.0], dtype=np.float32)
        params["meta/train_labels"] = self.train_labels.astype(np.float32).ravel()
        params["meta/label_shape"] = np.array(self.train_labels.shape, dtype=np.float32)
        return Checkpoint(params=params, momenta={}, rng_state=None, epoch=0)


def classifier_from_checkpoint(ckpt: Checkpoint) -> tuple[PatchClassifier, np.ndarray]:
    """Rebuild a fine-tuned classifier and its train-pixel label map."""
    meta = ckpt.params
    patch_size = int(meta["meta/patch_size"][0])
    m = int(meta["meta/m"][0])
    widths = tuple(int(v) for v in meta["meta/online_widths"])
    relu = bool(meta.get("meta/relu", np.array([1.0]))[0])
    classes = meta["meta/classes"].astype(np.int32)
    rng = np.random.default_rng(0)
    online = build_online_network(rng, patch_size, widths, m, d=max(2, m // 2),
                                  relu=relu)
    head = Linear(m, len(classes), rng, dtype=np.float32)
    model = PatchClassifier(online.encoder, head, classes, patch_size, m)
    model.load_state_arrays(dict(ckpt.params), "model/")
    shape = tuple(int(v) for v in meta["meta/label_shape"])
    train_labels = meta["meta/train_labels"].astype(np.int32).reshape(shape)
    model.eval()
    return model, train_labels


def finetune(
    checkpoint: Checkpoint | None,
    img: PolSARImage,
    labels: np.ndarray,
    config: TrainConfig,
) -> FinetuneResult:
    """Train a classifier on a stratified ``label_fraction`` of the labels.

    With a pretraining checkpoint the online encoder starts from its
    pretrained weights (the projection head is discarded); with ``None``
    the encoder is randomly initialized, which is the supervised baseline.
    ``config.frozen_encoder`` trains only the linear head.
    """
    labels = np.asarray(labels)
    if labels.shape != (img.height, img.width):
        raise ValueError("label map does not match image dimensions")
    classes = np.unique(labels[labels > 0])
    if len(classes) < 2:
        raise ValueError("need at least 2 labeled classes to fine-tune")

    label_rng = _rng(config.seed, _STREAM_FINETUNE_LABELS)
    subset = stratified_label_subset(labels, config.label_fraction, label_rng)
    flat = subset.ravel()
    train_idx = np.flatnonzero(flat > 0)
    for cls in classes:
        if not np.any(flat[train_idx] == cls):
            raise ValueError(f"class {cls} has no labeled pixels after subsetting")

    init_rng = _rng(config.seed, _STREAM_FINETUNE_INIT)
    if checkpoint is not None:
        online = online_network_from_checkpoint(checkpoint)
        patch_size = online.patch_size
        m = online.m
    else:
        online = build_online_network(init_rng, config.patch_size,
                                      config.online_widths, config.m, config.d,
                                      relu=config.encoder_relu)
        patch_size = config.patch_size
        m = config.m
    head = Linear(m, len(classes), init_rng, dtype=np.float32)
    model = PatchClassifier(online.encoder, head, classes, patch_size, m)

    class_pos = {c: i for i, c in enumerate(classes)}
    y = np.array([class_pos[c] for c in flat[train_idx]])
    patches = PatchExtractor(img, patch_size)
    rows, cols = np.unravel_index(train_idx, (img.height, img.width))
    x_all = patches.batch(rows, cols)

    if config.frozen_encoder:
        trainables = list(model.head.named_parameters("head/"))
        model.encoder.eval()
        model.head.train()
    else:
        trainables = list(model.named_parameters("model/"))
        model.train()
    opt = SGD([p for _, p in trainables], lr=config.finetune_lr,
              momentum=config.momentum, weight_decay=config.weight_decay)

    order_rng = _rng(config.seed, _STREAM_FINETUNE_ORDER)
    n = len(train_idx)
    bs = min(config.finetune_batch_size, n)
    epoch_losses = []
    for epoch in range(config.finetune_epochs):
        opt.lr = cosine_lr(epoch, config.finetune_epochs, config.finetune_lr)
        order = order_rng.permutation(n)
        losses = []
        for chunk in _batch_chunks(order, bs):
            if len(chunk) < 2 and not config.frozen_encoder:
                continue
            x = Tensor(x_all[chunk])
            logits = model.logits_frozen(x) if config.frozen_encoder else model(x)
            loss = cross_entropy(logits, y[chunk])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        logger.info("finetune epoch %d/%d: loss %.6f",
                    epoch + 1, config.finetune_epochs, epoch_losses[-1])
    model.eval()
    return FinetuneResult(model=model, train_labels=subset, epoch_losses=epoch_losses)


def predict_map(model: PatchClassifier, img: PolSARImage,
                batch_size: int = 512) -> np.ndarray:
    """Per-pixel argmax class over the whole raster (eval-mode inference)."""
    model.eval()
    patches = PatchExtractor(img, model.patch_size)
    n = img.height * img.width
    out = np.zeros(n, dtype=np.int32)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        rows, cols = np.unravel_index(idx, (img.height, img.width))
        logits = model(Tensor(patches.batch(rows, cols)))
        out[idx] = model.classes[logits.data.argmax(axis=1)]
    return out.reshape(img.height, img.width)
