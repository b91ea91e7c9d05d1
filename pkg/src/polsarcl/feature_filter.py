"""Beam-search backward elimination over feature groups.

A small 1-D convolutional classifier is trained once on the full feature
vector with a sum-of-squares loss against one-hot targets.  Candidate group
subsets are then scored by zeroing the removed features (keeping the input
dimension fixed) and measuring accuracy on a held-out stratified validation
split.  The beam keeps the ``k`` best candidates per round, removing exactly
one group per round until ``theta`` groups remain.

Ties break deterministically: higher score first, then smaller largest
removed-group id, then lexicographically smaller removed set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .decomposition import FeatureCube
from .nn import SGD, LayerSpec, build_network, cosine_lr

__all__ = [
    "FilterConfig",
    "BeamState",
    "FilterResult",
    "FilterClassifier",
    "stratified_label_subset",
    "train_filter_classifier",
    "evaluate_mask",
    "beam_search",
    "format_report",
    "parse_report_group_ids",
]


@dataclass(frozen=True)
class FilterConfig:
    """Search and classifier-training settings.

    ``beam_schedule`` lists k for the leading rounds; later rounds use 1.
    """

    theta: int = 8
    beam_schedule: tuple[int, ...] = (2, 2, 2)
    val_fraction: float = 0.25
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def beam_width(self, round_index: int) -> int:
        if round_index < len(self.beam_schedule):
            return int(self.beam_schedule[round_index])
        return 1

    def __post_init__(self):
        if self.theta < 1:
            raise ValueError("theta must be >= 1")
        if any(k < 1 for k in self.beam_schedule):
            raise ValueError("beam widths must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass(frozen=True)
class BeamState:
    """One candidate subset: removed group ids, feature mask, val accuracy."""

    removed: frozenset[int]
    mask: np.ndarray
    score: float

    def sort_key(self):
        removed = sorted(self.removed)
        return (-self.score, max(removed) if removed else -1, removed)


@dataclass
class FilterResult:
    selected_groups: list[int]
    group_names: list[str]
    mask: np.ndarray
    n_selected_features: int
    score: float
    rounds: list[list[BeamState]] = field(default_factory=list)


def stratified_label_subset(
    labels: np.ndarray, fraction: float, rng: np.random.Generator
) -> np.ndarray:
    """Keep a per-class fraction of labeled pixels (at least one each).

    Returns a label map of the same shape with unselected pixels zeroed.
    ``fraction`` is relative to each class's labeled count; every class
    present in ``labels`` keeps at least one pixel.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    labels = np.asarray(labels)
    out = np.zeros_like(labels)
    flat = labels.ravel()
    for cls in np.unique(flat):
        if cls == 0:
            continue
        idx = np.flatnonzero(flat == cls)
        n_keep = max(1, int(round(fraction * len(idx))))
        keep = rng.choice(idx, size=min(n_keep, len(idx)), replace=False)
        out.ravel()[keep] = cls
    return out


class FilterClassifier:
    """1-D conv classifier over the full standardized feature vector."""

    def __init__(self, net, classes, train_idx, val_idx, y_train, y_val, n_features):
        self.net = net
        self.classes = classes
        self.train_idx = train_idx
        self.val_idx = val_idx
        self.y_train = y_train
        self.y_val = y_val
        self.n_features = n_features

    def _inputs(self, cube: FeatureCube, idx: np.ndarray, mask: np.ndarray) -> Tensor:
        x = cube.standardized(apply_mask=False)[idx]
        x = x * mask[None, :]
        return Tensor(x[:, None, :].astype(np.float32))

    def evaluate_mask(self, cube: FeatureCube, mask: np.ndarray) -> float:
        """Validation accuracy with masked features zeroed."""
        mask = np.asarray(mask)
        if mask.shape != (self.n_features,):
            raise ValueError(
                f"mask length {mask.shape} does not match {self.n_features} features"
            )
        self.net.eval()
        scores = self.net(self._inputs(cube, self.val_idx, mask.astype(np.float64)))
        pred = scores.data.argmax(axis=1)
        return float((pred == self.y_val).mean())


def _classifier_specs(n_features: int, n_classes: int) -> list[LayerSpec]:
    l1 = (n_features + 2 * 2 - 3 + 1) // 2
    l2 = (l1 + 2 * 2 - 3 + 1) // 2
    return [
        LayerSpec("conv1d", dict(in_channels=1, out_channels=16, kernel_size=3, padding=2)),
        LayerSpec("batchnorm", dict(num_channels=16)),
        LayerSpec("maxpool", {}),
        LayerSpec("conv1d", dict(in_channels=16, out_channels=32, kernel_size=3, padding=2)),
        LayerSpec("batchnorm", dict(num_channels=32)),
        LayerSpec("maxpool", {}),
        LayerSpec("linear", dict(in_features=32 * l2, out_features=n_classes)),
    ]


def train_filter_classifier(
    cube: FeatureCube,
    labels: np.ndarray,
    seed: int,
    config: FilterConfig | None = None,
) -> FilterClassifier:
    """Fit the scoring classifier on all features of the labeled pixels.

    ``labels`` is an (H, W) map with 0 meaning unlabeled; a stratified
    ``val_fraction`` of each class is held out for mask scoring.  Training
    is deterministic for a fixed seed.
    """
    config = config or FilterConfig()
    labels = np.asarray(labels)
    if labels.shape != (cube.height, cube.width):
        raise ValueError("label map does not match cube dimensions")
    flat = labels.ravel()
    labeled = np.flatnonzero(flat > 0)
    if labeled.size == 0:
        raise ValueError("no labeled pixels")
    classes = np.unique(flat[labeled])
    if len(classes) < 2:
        raise ValueError("need at least 2 classes to train the filter classifier")

    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for cls in classes:
        idx = labeled[flat[labeled] == cls]
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(config.val_fraction * len(idx)))
        n_val = min(max(n_val, 1 if len(idx) > 1 else 0), len(idx) - 1)
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))

    class_pos = {c: i for i, c in enumerate(classes)}
    y_train = np.array([class_pos[c] for c in flat[train_idx]])
    y_val = np.array([class_pos[c] for c in flat[val_idx]])

    net = build_network(
        _classifier_specs(cube.n_features, len(classes)),
        (1, cube.n_features),
        rng,
        dtype=np.float32,
    )

    x_all = cube.standardized(apply_mask=False)[train_idx]
    onehot = np.zeros((len(y_train), len(classes)), dtype=np.float32)
    onehot[np.arange(len(y_train)), y_train] = 1.0

    opt = SGD(net.parameters(), lr=config.lr, momentum=config.momentum,
              weight_decay=config.weight_decay)
    n = len(train_idx)
    bs = min(config.batch_size, n)
    steps_per_epoch = -(-n // bs)
    net.train()
    for epoch in range(config.epochs):
        opt.lr = cosine_lr(epoch, config.epochs, config.lr)
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            batch = order[s * bs : (s + 1) * bs]
            if len(batch) < 2:
                continue  # batchnorm needs >= 2 rows
            x = Tensor(x_all[batch][:, None, :].astype(np.float32))
            target = Tensor(onehot[batch])
            scores = net(x)
            diff = scores - target
            loss = (diff * diff).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    return FilterClassifier(net, classes, train_idx, val_idx, y_train, y_val,
                            cube.n_features)


def evaluate_mask(classifier, cube: FeatureCube, mask: np.ndarray) -> float:
    """Score a feature mask on the classifier's validation split."""
    return classifier.evaluate_mask(cube, mask)


def beam_search(classifier, cube: FeatureCube, config: FilterConfig) -> FilterResult:
    """Remove groups one per round, keeping the best ``k`` candidates.

    ``classifier`` needs an ``evaluate_mask(cube, mask)`` method.  Stops
    when exactly ``theta`` groups remain and returns the best final state.
    """
    n_groups = cube.n_groups
    if config.theta >= n_groups:
        raise ValueError(f"theta={config.theta} must be below the group count {n_groups}")
    all_groups = frozenset(range(n_groups))

    cache: dict[frozenset[int], float] = {}

    def score_of(removed: frozenset[int]) -> tuple[float, np.ndarray]:
        mask = cube.mask_for_groups(sorted(all_groups - removed))
        if removed not in cache:
            cache[removed] = float(classifier.evaluate_mask(cube, mask))
        return cache[removed], mask

    start_score, start_mask = score_of(frozenset())
    beam = [BeamState(frozenset(), start_mask, start_score)]
    rounds: list[list[BeamState]] = []
    n_rounds = n_groups - config.theta
    for r in range(n_rounds):
        k = config.beam_width(r)
        seen: set[frozenset[int]] = set()
        candidates: list[BeamState] = []
        for state in beam:
            for g in sorted(all_groups - state.removed):
                removed = state.removed | {g}
                if removed in seen:
                    continue
                seen.add(removed)
                score, mask = score_of(removed)
                candidates.append(BeamState(removed, mask, score))
        candidates.sort(key=BeamState.sort_key)
        beam = candidates[:k]
        rounds.append(beam)

    best = min(beam, key=BeamState.sort_key)
    selected = sorted(all_groups - best.removed)
    return FilterResult(
        selected_groups=selected,
        group_names=[cube.group_names[g] for g in selected],
        mask=best.mask,
        n_selected_features=int(best.mask.sum()),
        score=best.score,
        rounds=rounds,
    )


# -- selection report ---------------------------------------------------------


def format_report(result: FilterResult, cube: FeatureCube, config: FilterConfig) -> str:
    """Human-readable report; the final lines are machine-parseable."""
    lines = [
        "feature filter report",
        f"n_groups: {cube.n_groups}",
        f"n_features: {cube.n_features}",
        f"theta: {config.theta}",
        "",
    ]
    for r, beam in enumerate(result.rounds):
        lines.append(f"round {r + 1} (k={config.beam_width(r)}):")
        for state in beam:
            removed = ",".join(str(g) for g in sorted(state.removed))
            lines.append(f"  score={state.score:.6f} removed=[{removed}]")
    lines += [
        "",
        f"selected_group_ids: {','.join(str(g) for g in result.selected_groups)}",
        f"selected_groups: {','.join(result.group_names)}",
        f"n_selected_features: {result.n_selected_features}",
        f"selection_score: {result.score:.6f}",
        "",
    ]
    return "\n".join(lines)


def parse_report_group_ids(text: str) -> list[int]:
    """Recover the selected group ids from a report."""
    for line in text.splitlines():
        if line.startswith("selected_group_ids:"):
            payload = line.split(":", 1)[1].strip()
            if not payload:
                return []
            return [int(tok) for tok in payload.split(",")]
    raise ValueError("report has no selected_group_ids line")
