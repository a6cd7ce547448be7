"""Quantification metrics, subject-level folds, evaluation reports and the
cross-validation harness."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import INDEX_NAMES, CardiacSequence, WindowSet, denormalize
from .errors import ConfigError, UndefinedCorrelationError
from .model import ModelConfig, Network, Prediction
from .train import TrainConfig, fit


class IndexKind(enum.IntEnum):
    AreaCav = 0
    AreaMyo = 1
    Dim1 = 2
    Dim2 = 3
    Dim3 = 4
    RwtIS = 5
    RwtI = 6
    RwtIL = 7
    RwtAL = 8
    RwtA = 9
    RwtAS = 10

    @property
    def label(self) -> str:
        return INDEX_NAMES[self.value]

    @property
    def unit(self) -> str:
        return "mm2" if self.value < 2 else "mm"


GROUPS = {
    "areas": (IndexKind.AreaCav, IndexKind.AreaMyo),
    "dims": (IndexKind.Dim1, IndexKind.Dim2, IndexKind.Dim3),
    "rwt": tuple(IndexKind)[5:],
}

# reference values reported for the full challenge data (kappa = 5), printed for context only
REFERENCE_PHASE_ER = {1: 28.45, 5: 3.85}


def _series(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {gt.size}")
    if pred.size == 0:
        raise ValueError("empty series")
    return pred, gt


def pcc(pred, gt) -> float:
    """Pearson correlation; raises if either series is constant."""
    x, y = _series(pred, gt)
    if x.size < 2:
        raise ValueError("correlation needs at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    nx, ny = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if nx == 0.0 or ny == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant series")
    return float(np.clip((dx @ dy) / (nx * ny), -1.0, 1.0))


def mae(pred, gt) -> float:
    x, y = _series(pred, gt)
    return float(np.mean(np.abs(x - y)))


def error_rate(pred_phase, gt_phase) -> float:
    """Percentage of mismatched phase labels."""
    x, y = _series(pred_phase, gt_phase)
    return 100.0 * float(np.count_nonzero(x != y)) / x.size


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[int, ...], ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(f) for f in self.folds)

    def train_ids(self, index: int) -> tuple[int, ...]:
        return tuple(i for j, f in enumerate(self.folds) if j != index for i in f)


def make_folds(subject_ids: Sequence[int], k: int, seed: int = 0) -> FoldSplit:
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("subject ids must be unique")
    if k < 1 or k > len(ids):
        raise ConfigError(f"cannot split {len(ids)} subjects into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    base, extra = divmod(len(ids), k)
    folds, start = [], 0
    for j in range(k):
        size = base + (1 if j < extra else 0)
        folds.append(tuple(shuffled[start:start + size]))
        start += size
    return FoldSplit(tuple(folds))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    mae: dict[IndexKind, float]
    pcc: dict[IndexKind, float]  # NaN where undefined (constant series)
    phase_er: float
    samples: int
    notes: list[str] = field(default_factory=list)

    def group_mae(self) -> dict[str, float]:
        return {g: float(np.mean([self.mae[i] for i in idx])) for g, idx in GROUPS.items()}

    def group_pcc(self) -> dict[str, float]:
        return {g: float(np.mean([self.pcc[i] for i in idx])) for g, idx in GROUPS.items()}

    def has_undefined(self) -> bool:
        values = [*self.mae.values(), *self.pcc.values(), self.phase_er]
        return any(not math.isfinite(v) for v in values)

    def as_dict(self) -> dict[str, float]:
        out = {}
        for i in IndexKind:
            out[f"mae.{i.label}"] = self.mae[i]
        for i in IndexKind:
            out[f"pcc.{i.label}"] = self.pcc[i]
        out["er.phase"] = self.phase_er
        for g, v in self.group_mae().items():
            out[f"mae_avg.{g}"] = v
        for g, v in self.group_pcc().items():
            out[f"pcc_avg.{g}"] = v
        out["samples"] = self.samples
        return out

    def to_text(self, title: str = "report") -> str:
        lines = [f"# {title} (N={self.samples})", f"{'index':<10} {'MAE':>12} {'PCC':>8}"]
        for g, idx in GROUPS.items():
            for i in idx:
                lines.append(f"{i.label:<10} {self.mae[i]:>12.4f} {self.pcc[i]:>8.4f}  {i.unit}")
            lines.append(f"{'avg ' + g:<10} {self.group_mae()[g]:>12.4f} {self.group_pcc()[g]:>8.4f}")
        lines.append(f"{'phase ER':<10} {self.phase_er:>12.4f} %")
        lines.extend(f"note: {n}" for n in self.notes)
        lines.append("")
        lines.extend(f"{k}={_fmt(v)}" for k, v in self.as_dict().items())
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def report_from_arrays(pred_norm: np.ndarray, gt_norm: np.ndarray, spacing: np.ndarray,
                       pred_phase: np.ndarray, gt_phase: np.ndarray) -> MetricsReport:
    """Metrics from normalized predictions/labels; spacing is per sample."""
    pred_mm = denormalize(pred_norm, spacing)
    gt_mm = denormalize(gt_norm, spacing)
    maes, pccs, notes = {}, {}, []
    for i in IndexKind:
        maes[i] = mae(pred_mm[:, i], gt_mm[:, i])
        try:
            pccs[i] = pcc(pred_mm[:, i], gt_mm[:, i])
        except UndefinedCorrelationError:
            pccs[i] = float("nan")
            notes.append(f"PCC undefined for {i.label}: constant series")
    return MetricsReport(maes, pccs, error_rate(pred_phase, gt_phase), len(gt_norm), notes)


def evaluate(net: Network, sequences: Sequence[CardiacSequence], kappa: int | None = None,
             batch_size: int = 50) -> MetricsReport:
    kappa = net.config.kappa if kappa is None else kappa
    if kappa != net.config.kappa:
        raise ConfigError(f"kappa {kappa} does not match the network's kappa {net.config.kappa}")
    windows = WindowSet(sequences, kappa)
    if len(windows) == 0:
        raise ConfigError("nothing to evaluate")
    pred = predict_windows(net, windows, batch_size)
    return report_from_arrays(pred.regression, windows.labels, windows.window_spacing,
                              pred.phase, windows.phase)


def predict_windows(net: Network, windows: WindowSet, batch_size: int = 50) -> Prediction:
    regs, logits = [], []
    for start in range(0, len(windows), batch_size):
        rows = np.arange(start, min(start + batch_size, len(windows)))
        p, _ = net.forward(windows.inputs(rows), training=False)
        regs.append(p.regression)
        logits.append(p.phase_logits)
    return Prediction(np.concatenate(regs), np.concatenate(logits))


def mean_baseline_report(train: Sequence[CardiacSequence], test: Sequence[CardiacSequence]) -> MetricsReport:
    """Predict the training-set mean label for every test window (majority phase)."""
    train_labels = np.concatenate([s.labels for s in train]).astype(np.float64)
    train_phase = np.concatenate([s.phase for s in train])
    majority = int(np.count_nonzero(train_phase == 1) > len(train_phase) / 2)
    gt = np.concatenate([s.labels for s in test]).astype(np.float64)
    spacing = np.repeat([s.pixel_spacing for s in test], len(test[0].labels))
    pred = np.broadcast_to(train_labels.mean(axis=0), gt.shape)
    gt_phase = np.concatenate([s.phase for s in test])
    return report_from_arrays(pred, gt, spacing, np.full_like(gt_phase, majority), gt_phase)


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------

Trainer = Callable[[Sequence[CardiacSequence], ModelConfig, TrainConfig], Network]


def default_trainer(train: Sequence[CardiacSequence], model_config: ModelConfig,
                    train_config: TrainConfig) -> Network:
    net = Network(model_config)
    fit(WindowSet(train, model_config.kappa), net, train_config)
    return net


@dataclass
class CrossValidationResult:
    split: FoldSplit
    reports: list[MetricsReport]

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Mean and (population) standard deviation of every metric across folds."""
        keys = self.reports[0].as_dict().keys()
        out = {}
        for k in keys:
            if k == "samples":
                continue
            vals = np.array([r.as_dict()[k] for r in self.reports], dtype=np.float64)
            out[k] = (float(vals.mean()), float(vals.std()))
        return out

    def to_text(self) -> str:
        parts = [f"# folds={len(self.reports)} sizes={','.join(map(str, self.split.sizes))}"]
        for j, r in enumerate(self.reports):
            parts.append(r.to_text(f"fold {j}"))
        parts.append("# aggregate (mean +- std across folds)")
        parts.extend(f"{k}={m!r} +- {s!r}" for k, (m, s) in self.aggregate().items())
        return "\n".join(parts) + "\n"


def cross_validate(sequences: Sequence[CardiacSequence], model_config: ModelConfig,
                   train_config: TrainConfig, k: int, split_seed: int = 0,
                   trainer: Trainer = default_trainer,
                   on_fold: Callable[[int, MetricsReport], None] | None = None) -> CrossValidationResult:
    by_id = {s.subject_id: s for s in sequences}
    if len(by_id) != len(sequences):
        raise ConfigError("duplicate subject ids")
    split = make_folds(list(by_id), k, split_seed)
    reports = []
    for j, fold in enumerate(split.folds):
        train = [by_id[i] for i in split.train_ids(j)]
        test = [by_id[i] for i in fold]
        net = trainer(train, model_config, train_config)
        report = evaluate(net, test, model_config.kappa)
        reports.append(report)
        if on_fold is not None:
            on_fold(j, report)
    return CrossValidationResult(split, reports)
