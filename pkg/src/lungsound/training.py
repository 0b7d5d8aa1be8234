"""Cross-validation training harness for the five experiment setups.

Windows are cut from each recording after the canonical preprocessing
chain, featurized once into cached log-mel spectrograms, standardized with
statistics fitted on the fold's training windows only, and packed into
token tensors for the transformer. Metrics are computed per window with
'abnormal' as the positive class.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import signals
from .datasets import (FoldSplit, Manifest, SETUP_NAMES, binarize, compose_setup,
                       resolve_audio_path)
from .errors import ConfigError, InvalidInput, NumericalError
from .features import (FeatureConfig, Spectrogram, Standardization,
                       dataset_standardize, log_mel_spectrogram, patchify)
from .metrics import FoldMetrics, MetricsReport, compute_metrics, confusion
from .model import (LABEL_CODES, ModelConfig, SpectrogramTransformer,
                    encode_domains, encode_labels)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_epochs: int = 5
    val_fraction: float = 0.1
    window_s: float = 3.0
    hop_s: float = 3.0
    class_weighting: bool = False
    cpu_only: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 <= self.val_fraction < 0.5:
            raise ConfigError(f"val_fraction must be in [0, 0.5), got {self.val_fraction}")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs]")


# Epoch budgets for the reference runs on the default synthetic corpus.  The
# smartphone-only pool is small (240 train clips per fold), so setup 1 needs a
# long schedule to converge; the combined pools saturate much earlier, and the
# stethoscope pool (1600 train clips) earlier still.  Setups 4 and 5 share one
# budget because setup 5 reuses the setup-4 checkpoints.
_REFERENCE_EPOCHS = {1: (40, 4), 2: (16, 2), 3: (16, 2), 4: (8, 2), 5: (8, 2)}


def reference_train_config(setup: int, **overrides) -> TrainConfig:
    """Training settings used for the reference synthetic-corpus experiments."""
    if setup not in _REFERENCE_EPOCHS:
        raise ConfigError(f"unknown setup {setup}")
    epochs, warmup = _REFERENCE_EPOCHS[setup]
    base = dict(epochs=epochs, warmup_epochs=warmup, batch_size=64,
                learning_rate=3e-4, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup to the base rate, then cosine decay to zero.

    epoch is 0-based; with warmup_epochs=w the rate ramps (1/w, 2/w, ..., 1)
    over the first w epochs and follows a half-cosine afterwards.
    """
    if epoch < 0 or epoch >= cfg.epochs:
        raise InvalidInput(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.warmup_epochs and epoch < cfg.warmup_epochs:
        return cfg.learning_rate * (epoch + 1) / cfg.warmup_epochs
    span = max(1, cfg.epochs - cfg.warmup_epochs)
    progress = (epoch - cfg.warmup_epochs) / span
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Window:
    """One fixed-length training example: featurized audio plus labels."""

    spectrogram: Spectrogram
    label: str          # binary
    domain: str
    source_path: str


SpectrogramCache = dict


def featurize_entries(entries, manifest_path, fcfg: FeatureConfig,
                      tcfg: TrainConfig, cache: SpectrogramCache | None = None) -> list[Window]:
    """Load, preprocess, window, and featurize manifest entries.

    The cache maps absolute audio paths to lists of (spectrogram, n_windows)
    so repeated folds and setups never re-read or re-featurize a file.
    """
    windows: list[Window] = []
    for entry in entries:
        path = str(resolve_audio_path(manifest_path, entry))
        if cache is not None and path in cache:
            specs = cache[path]
        else:
            rec = signals.load_wav(path, device_domain=entry.device_domain,
                                   site=entry.site, raw_label=entry.raw_label,
                                   patient_id=entry.patient_id)
            rec = signals.preprocess(rec)
            segs = signals.segment(rec, window_s=tcfg.window_s, hop_s=tcfg.hop_s)
            specs = [log_mel_spectrogram(s, fcfg) for s in segs]
            if cache is not None:
                cache[path] = specs
        label = binarize(entry.raw_label)
        for spec in specs:
            windows.append(Window(spectrogram=spec, label=label,
                                  domain=entry.device_domain, source_path=path))
    return windows


@dataclass
class Pack:
    """Batched token tensors for a set of windows."""

    tokens: torch.Tensor        # (B, N, patch_dim) float32
    labels: torch.Tensor        # (B,) int64
    domains: torch.Tensor       # (B,) int64
    grid_shape: tuple[int, int]
    label_names: tuple[str, ...]

    def __len__(self) -> int:
        return self.tokens.shape[0]


def pack_windows(windows: list[Window], std: Standardization,
                 fcfg: FeatureConfig) -> Pack:
    if not windows:
        raise InvalidInput("cannot pack zero windows")
    grids = [patchify(std.apply(w.spectrogram), fcfg) for w in windows]
    shape = grids[0].grid_shape
    for g in grids[1:]:
        if g.grid_shape != shape:
            raise InvalidInput(f"mixed patch grids {shape} vs {g.grid_shape}")
    tokens = torch.stack([torch.from_numpy(g.patches) for g in grids])
    labels = [w.label for w in windows]
    return Pack(tokens=tokens,
                labels=encode_labels(labels),
                domains=encode_domains([w.domain for w in windows]),
                grid_shape=shape, label_names=tuple(labels))


def split_validation(windows: list[Window], fraction: float,
                     seed: int) -> tuple[list[Window], list[Window]]:
    """Carve a stratified validation subset out of the training windows."""
    if fraction <= 0.0:
        return list(windows), []
    rng = np.random.default_rng(seed)
    train: list[Window] = []
    val: list[Window] = []
    for cls in ("normal", "abnormal"):
        ids = [i for i, w in enumerate(windows) if w.label == cls]
        ids = [ids[j] for j in rng.permutation(len(ids))]
        n_val = int(round(fraction * len(ids)))
        if len(ids) - n_val < 1:
            n_val = max(0, len(ids) - 1)
        val.extend(ids[:n_val])
        train.extend(ids[n_val:])
    return [windows[i] for i in sorted(train)], [windows[i] for i in sorted(val)]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_sensitivity: float
    val_specificity: float
    val_score: float
    learning_rate: float


@dataclass
class FoldResult:
    model: SpectrogramTransformer
    standardization: Standardization
    history: list[EpochStats]
    best_epoch: int
    metrics: FoldMetrics
    y_true: list[str]
    y_pred: list[str]


def _class_weights(labels: torch.Tensor) -> torch.Tensor:
    counts = torch.bincount(labels, minlength=2).clamp(min=1).float()
    weights = labels.numel() / (2.0 * counts)
    return weights


def evaluate(model: SpectrogramTransformer, pack: Pack,
             batch_size: int = 64) -> tuple[list[str], list[str], np.ndarray]:
    """Predict a pack in eval mode; returns true labels, predictions, probs."""
    inv = {v: k for k, v in LABEL_CODES.items()}
    model.eval()
    y_pred: list[str] = []
    probs: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(pack), batch_size):
            sl = slice(start, start + batch_size)
            feats = model.embed(pack.tokens[sl], pack.labels[sl], pack.domains[sl],
                                pack.grid_shape)
            feats = model.encode(feats, training=False)
            p, preds = model.classify(feats)
            y_pred.extend(preds)
            probs.append(p.numpy())
    y_true = [inv[int(v)] for v in pack.labels]
    return y_true, y_pred, np.concatenate(probs, axis=0)


def train_fold(mcfg: ModelConfig, tcfg: TrainConfig, train_windows: list[Window],
               test_windows: list[Window], fcfg: FeatureConfig,
               progress: Callable[[str], None] | None = None) -> FoldResult:
    """Train one fold and evaluate on its test windows.

    Standardization is fitted on the training windows only, the model is
    checkpointed at the epoch with the best validation score (ties keep the
    earlier epoch), and the restored checkpoint is what gets evaluated.
    """
    fit_windows, val_windows = split_validation(train_windows, tcfg.val_fraction, tcfg.seed)
    std = dataset_standardize([w.spectrogram for w in fit_windows])
    train_pack = pack_windows(fit_windows, std, fcfg)
    val_pack = pack_windows(val_windows, std, fcfg) if val_windows else None
    test_pack = pack_windows(test_windows, std, fcfg)

    torch.manual_seed(tcfg.seed)
    model = SpectrogramTransformer(mcfg)
    opt = torch.optim.AdamW(model.parameters(), lr=tcfg.learning_rate,
                            betas=tcfg.betas, weight_decay=tcfg.weight_decay)
    weight = _class_weights(train_pack.labels) if tcfg.class_weighting else None
    loss_fn = torch.nn.CrossEntropyLoss(weight=weight)
    shuffle_rng = torch.Generator().manual_seed(tcfg.seed)
    mix_rng = np.random.default_rng(tcfg.seed + 1)

    history: list[EpochStats] = []
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_score, best_epoch = -1.0, 0
    n = len(train_pack)
    for epoch in range(tcfg.epochs):
        lr = lr_at_epoch(tcfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        model.set_epoch(epoch)
        order = torch.randperm(n, generator=shuffle_rng)
        total_loss, total_items = 0.0, 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            if idx.numel() < 2:
                continue  # a singleton batch has no mixing partner candidates
            logits = model(train_pack.tokens[idx], train_pack.labels[idx],
                           train_pack.domains[idx], train_pack.grid_shape,
                           training=True, rng=mix_rng)
            loss = loss_fn(logits, train_pack.labels[idx])
            if not torch.isfinite(loss):
                raise NumericalError(
                    "non-finite training loss",
                    diagnostics={"epoch": epoch, "batch_start": start,
                                 "learning_rate": lr, "loss": float(loss)})
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * idx.numel()
            total_items += idx.numel()

        if val_pack is not None:
            vt, vp, _ = evaluate(model, val_pack, batch_size=tcfg.batch_size)
            val_metrics = compute_metrics(confusion(vt, vp))
            val_se, val_sp, val_score = (val_metrics.sensitivity,
                                         val_metrics.specificity, val_metrics.score)
        else:
            val_se = val_sp = val_score = 0.0
        history.append(EpochStats(epoch=epoch, train_loss=total_loss / max(1, total_items),
                                  val_sensitivity=val_se, val_specificity=val_sp,
                                  val_score=val_score, learning_rate=lr))
        if val_score > best_score:
            best_score, best_epoch = val_score, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if progress:
            progress(f"    epoch {epoch + 1}/{tcfg.epochs} "
                     f"loss {history[-1].train_loss:.4f} val {val_score:.2f}")

    if val_pack is not None:
        model.load_state_dict(best_state)
    y_true, y_pred, _ = evaluate(model, test_pack, batch_size=tcfg.batch_size)
    fold_metrics = compute_metrics(confusion(y_true, y_pred))
    return FoldResult(model=model, standardization=std, history=history,
                      best_epoch=best_epoch, metrics=fold_metrics,
                      y_true=y_true, y_pred=y_pred)


@dataclass
class ExperimentResult:
    report: MetricsReport
    fold_results: dict = field(default_factory=dict)  # (setup, fold) -> FoldResult
    wall_s: float = 0.0


def _model_for_setup(mcfg: ModelConfig, setup: int) -> ModelConfig:
    """MixStyle participates only in Setup 3; elsewhere it is disabled."""
    if setup == 3:
        return mcfg
    return replace(mcfg, mixstyle=replace(mcfg.mixstyle, p=0.0))


def run_experiment(setups: list[int], manifests: dict[str, Manifest],
                   splits: dict[str, FoldSplit], manifest_paths: dict[str, str],
                   fcfg: FeatureConfig, mcfg: ModelConfig, tcfg: TrainConfig,
                   cache: SpectrogramCache | None = None,
                   progress: Callable[[str], None] | None = None) -> ExperimentResult:
    """Run cross-validation for the requested setups.

    Setup 5 evaluates the stethoscope-trained models on the smartphone test
    folds; when Setup 4 runs in the same invocation its per-fold checkpoints
    (and their frozen standardization statistics) are reused directly.
    """
    started = time.monotonic()
    cache = {} if cache is None else cache
    echo = {"feature_config": vars(fcfg).copy(),
            "model_config": {k: v for k, v in vars(mcfg).items() if k != "mixstyle"},
            "mixstyle_config": vars(mcfg.mixstyle).copy(),
            "train_config": vars(tcfg).copy()}
    result = ExperimentResult(report=MetricsReport(config_echo=echo))
    setup4_folds: dict[int, FoldResult] = {}

    order = sorted(set(setups))
    for setup in order:
        if setup not in SETUP_NAMES:
            raise ConfigError(f"unknown setup {setup}")
        composed = compose_setup(setup, manifests, splits)
        fold_metrics: list[FoldMetrics] = []
        for f, fold in enumerate(composed):
            if progress:
                progress(f"setup {setup} ({SETUP_NAMES[setup]}), fold {f + 1}/{len(composed)}")
            test_windows = featurize_entries(
                fold.test, manifest_paths[fold.test[0].device_domain], fcfg, tcfg, cache)
            if setup == 5 and f in setup4_folds:
                prior = setup4_folds[f]
                test_pack = pack_windows(test_windows, prior.standardization, fcfg)
                y_true, y_pred, _ = evaluate(prior.model, test_pack, tcfg.batch_size)
                fr = FoldResult(model=prior.model, standardization=prior.standardization,
                                history=prior.history, best_epoch=prior.best_epoch,
                                metrics=compute_metrics(confusion(y_true, y_pred)),
                                y_true=y_true, y_pred=y_pred)
            else:
                train_windows = []
                for domain in ("stethoscope", "smartphone"):
                    subset = [e for e in fold.train if e.device_domain == domain]
                    if subset:
                        train_windows += featurize_entries(
                            subset, manifest_paths[domain], fcfg, tcfg, cache)
                fr = train_fold(_model_for_setup(mcfg, setup), tcfg,
                                train_windows, test_windows, fcfg, progress=progress)
            result.fold_results[(setup, f)] = fr
            fold_metrics.append(fr.metrics)
            if setup == 4:
                setup4_folds[f] = fr
            if progress:
                m = fr.metrics
                progress(f"  fold {f + 1}: Se {m.sensitivity:.2f} Sp {m.specificity:.2f} "
                         f"Score {m.score:.2f} F1 {m.f1:.3f}")
        result.report.add(setup, SETUP_NAMES[setup], fold_metrics)
    result.wall_s = time.monotonic() - started
    return result


def save_checkpoint(path, model: SpectrogramTransformer, std: Standardization,
                    fcfg: FeatureConfig) -> None:
    torch.save({"state_dict": model.state_dict(), "model_config": model.cfg,
                "standardization": std, "feature_config": fcfg}, path)


def load_checkpoint(path) -> tuple[SpectrogramTransformer, Standardization, FeatureConfig]:
    payload = torch.load(path, weights_only=False)
    model = SpectrogramTransformer(payload["model_config"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["standardization"], payload["feature_config"]
