"""Natural / adversarial training on raw or foreground-masked images, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import diffnet
from .adversary import AttackConfig, pgd_attack, pgd_perturb
from .datasetkit import DatasetManifest, load_arrays

log = logging.getLogger(__name__)

MODES = ("natural", "adversarial")
INPUT_MODES = ("raw", "masked")
DEFAULT_EPOCHS = {"natural": 30, "adversarial": 60}


@dataclass(frozen=True)
class TrainConfig:
    epochs: Optional[int] = None  # None -> 30 natural / 60 adversarial
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    mode: str = "natural"
    input_mode: str = "raw"
    attack: AttackConfig = AttackConfig(random_start=True)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @property
    def n_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.mode] if self.epochs is None else self.epochs


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class Dataset:
    """In-memory batch-ready view of a manifest: x (N, C, H, W), masks (N, H, W), labels."""

    x: np.ndarray
    labels: np.ndarray
    n_classes: int
    masks: Optional[np.ndarray] = None

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, need_masks: bool = False) -> "Dataset":
        x, masks, y = load_arrays(manifest, need_masks=need_masks)
        return cls(x, y, len(manifest.label_names), masks)

    def __len__(self):
        return len(self.labels)

    def inputs(self, input_mode: str) -> np.ndarray:
        """The tensor the model sees: raw pixels, or pixels zeroed off the foreground mask."""
        if input_mode == "raw":
            return self.x
        if self.masks is None:
            raise ValueError("masked input mode requires a mask for every record")
        return np.where(self.masks[:, None], self.x, 0.0)


def _as_dataset(data, input_mode) -> Dataset:
    if isinstance(data, Dataset):
        ds = data
    else:
        ds = Dataset.from_manifest(data, need_masks=input_mode == "masked")
    if not len(ds):
        raise ValueError("dataset is empty")
    if input_mode == "masked" and ds.masks is None:
        raise ValueError("masked input mode requires a mask for every record")
    return ds


def _check_off_mask(x, masks):
    if masks is not None and np.any(np.where(masks[:, None], 0.0, x)):
        raise RuntimeError("masked-mode tensor has non-zero background pixels")


def train(data, cfg: TrainConfig = TrainConfig(), model: Optional[diffnet.Model] = None):
    """Minibatch SGD with momentum; adversarial mode trains on PGD batches only.

    ``data`` is a DatasetManifest or a :class:`Dataset`. Without ``model`` a
    SmallVGG is initialised from ``cfg.seed``. Returns ``(model, epoch_logs)``.
    """
    ds = _as_dataset(data, cfg.input_mode)
    masked = cfg.input_mode == "masked"
    x_all = ds.inputs(cfg.input_mode)
    if model is None:
        model = diffnet.small_vgg(ds.x.shape[1:], ds.n_classes, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    state = diffnet.MomentumState()
    history: List[EpochLog] = []
    n = len(ds)
    for epoch in range(cfg.n_epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_all[idx], ds.labels[idx]
            mb = ds.masks[idx] if masked else None
            if cfg.mode == "adversarial":
                attack = replace(cfg.attack, seed=int(rng.integers(2 ** 31)))
                xb = pgd_perturb(model, xb, yb, attack, mb)
            if masked:
                _check_off_mask(xb, mb)
            bp = diffnet.backprop(model, xb, yb)
            model, state = diffnet.sgd_step(model, bp.grads, cfg.lr, cfg.momentum, state)
            loss_sum += float(bp.losses.sum())
            correct += int((bp.logits.argmax(axis=1) == yb).sum())
        entry = EpochLog(epoch + 1, loss_sum / n, correct / n)
        history.append(entry)
        log.info("epoch %d/%d loss=%.4f acc=%.4f", entry.epoch, cfg.n_epochs, entry.loss, entry.accuracy)
    return model, history


@dataclass
class EvalReport:
    natural_acc: float
    pgd_acc: float
    samples: int
    config: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.natural_acc, self.pgd_acc):
            if not 0 <= v <= 1:
                raise ValueError(f"accuracy {v} outside [0, 1]")


def evaluate(model: diffnet.Model, data, attack: Optional[AttackConfig] = None,
             input_mode: str = "raw", batch_size: int = 100) -> EvalReport:
    """Clean accuracy and, with ``attack``, PGD accuracy; masked mode restricts the attack."""
    if input_mode not in INPUT_MODES:
        raise ValueError(f"input_mode must be one of {INPUT_MODES}")
    ds = _as_dataset(data, input_mode)
    x_all = ds.inputs(input_mode)
    masked = input_mode == "masked"
    clean, robust = 0, 0
    for start in range(0, len(ds), batch_size):
        xb = x_all[start:start + batch_size]
        yb = ds.labels[start:start + batch_size]
        mb = ds.masks[start:start + batch_size] if masked else None
        if masked:
            _check_off_mask(xb, mb)
        if attack is None:
            hits = int((diffnet.forward(model, xb).argmax(axis=1) == yb).sum())
            clean += hits
            robust += hits
            continue
        res = pgd_attack(model, xb, yb, attack, mb)
        if masked:
            _check_off_mask(res.x_adv, mb)
        clean += int((res.clean_pred == yb).sum())
        robust += int((res.adv_pred == yb).sum())
    n = len(ds)
    config = {"input": input_mode}
    if attack is not None:
        config.update(epsilon=repr(attack.epsilon), step_size=repr(attack.step_size),
                      steps=str(attack.steps), random_start=str(attack.random_start).lower(),
                      attack_seed=str(attack.seed))
    return EvalReport(clean / n, robust / n, n, config)


# --------------------------------------------------------------------------
# Report files and the comparison table
# --------------------------------------------------------------------------

def format_report(report: EvalReport) -> str:
    lines = [f"natural_acc={report.natural_acc!r}", f"pgd_acc={report.pgd_acc!r}",
             f"samples={report.samples}"]
    lines += [f"{k}={v}" for k, v in report.config.items()]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(format_report(report), encoding="utf-8")


def read_report(path) -> EvalReport:
    values = {}
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{no}: expected key=value")
        values[key.strip()] = value.strip()
    try:
        nat, pgd, n = float(values.pop("natural_acc")), float(values.pop("pgd_acc")), int(values.pop("samples"))
    except KeyError as exc:
        raise ValueError(f"{path}: missing key {exc}") from None
    return EvalReport(nat, pgd, n, values)


def _hundredths(acc: float) -> int:
    """Accuracy as an integer count of hundredths of a percent."""
    return int(round(acc * 10000))


def _pct(h: int) -> str:
    sign = "-" if h < 0 else ""
    h = abs(h)
    return f"{sign}{h // 100}.{h % 100:02d}"


def _delta(h: int) -> str:
    return ("+" if h > 0 else "") + _pct(h)


ROWS = (("X", "N"), ("X_FG", "N"), ("X", "A"), ("X_FG", "A"))


def compare_table(reports: Mapping[Tuple[str, str], EvalReport]) -> str:
    """Four-row comparison with deltas (X_FG minus X) on the X_FG rows.

    ``reports`` maps ``(data, training)`` with data in {X, X_FG} and training
    in {N, A} to an EvalReport.
    """
    missing = [key for key in ROWS if key not in reports]
    if missing:
        raise ValueError(f"missing reports for {missing}")
    header = f"{'data':<6}{'training':<10}{'natural':>9}{'pgd':>9}{'d_natural':>11}{'d_pgd':>9}"
    lines = [header]
    for data, training in ROWS:
        r = reports[(data, training)]
        nat, pgd = _hundredths(r.natural_acc), _hundredths(r.pgd_acc)
        row = f"{data:<6}{training:<10}{_pct(nat):>9}{_pct(pgd):>9}"
        if data == "X_FG":
            base = reports[("X", training)]
            row += f"{_delta(nat - _hundredths(base.natural_acc)):>11}"
            row += f"{_delta(pgd - _hundredths(base.pgd_acc)):>9}"
        lines.append(row.rstrip())
    return "\n".join(lines) + "\n"


def table_deltas(reports: Mapping[Tuple[str, str], EvalReport]) -> Dict[str, Tuple[str, str]]:
    """``{training: (natural delta, pgd delta)}`` as rendered in :func:`compare_table`."""
    out = {}
    for training in ("N", "A"):
        fg, base = reports[("X_FG", training)], reports[("X", training)]
        out[training] = (_delta(_hundredths(fg.natural_acc) - _hundredths(base.natural_acc)),
                         _delta(_hundredths(fg.pgd_acc) - _hundredths(base.pgd_acc)))
    return out
