"""Optimisation loop (Adam + reduce-on-plateau), metrics, and the
leave-one-subject-out protocol driver.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import EegSegment, loso_splits
from .model import DualStreamModel
from .pipeline import FeaturePipeline, FoldStats, ModelInputs


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    epochs: int = 200
    beta: float = 0.4
    scheduler_factor: float = 0.1
    scheduler_patience: int = 10
    scheduler_threshold: float = 1e-4
    seed: int = 0
    attention: bool = True
    streams: tuple[str, ...] = ("raw", "topo")
    pair_mean: bool = False
    macro_f1: bool = False
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.batch_size < 2 or self.lr <= 0 or self.epochs < 1:
            raise ValueError("batch_size >= 2, lr > 0 and epochs >= 1 required")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0 < self.scheduler_factor < 1 or self.scheduler_patience < 1:
            raise ValueError("scheduler needs 0 < factor < 1 and patience >= 1")


class NumericalFailure(RuntimeError):
    """A training step produced non-finite values."""


class Adam:
    """Bias-corrected Adam over the model's registered parameters."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0
        self.skipped_nan_steps = 0

    def step(self, lr: float) -> None:
        grads = [p.grad for p in self.params]
        for g in grads:
            if g is not None and not np.all(np.isfinite(g)):
                self.skipped_nan_steps += 1
                warnings.warn("Adam: non-finite gradient, step skipped", RuntimeWarning)
                return
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class PlateauScheduler:
    """Multiply lr by `factor` after `patience` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 10, threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = np.inf
        self.wait = 0
        self.decays = 0

    def step(self, monitored_loss: float) -> float:
        if not np.isfinite(monitored_loss):
            raise NumericalFailure(f"monitored loss is not finite: {monitored_loss}")
        if monitored_loss < self.best * (1.0 - self.threshold):
            self.best = monitored_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.decays += 1
                self.wait = 0
        return self.lr


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    macro_f1: float | None = None

    @classmethod
    def from_predictions(
        cls, y_true: np.ndarray, y_pred: np.ndarray, macro: bool = False
    ) -> "Metrics":
        y_true = np.asarray(y_true)
        y_pred = np.asarray(y_pred)
        tp = int(np.sum((y_pred == 1) & (y_true == 1)))
        fp = int(np.sum((y_pred == 1) & (y_true == 0)))
        tn = int(np.sum((y_pred == 0) & (y_true == 0)))
        fn = int(np.sum((y_pred == 0) & (y_true == 1)))
        total = tp + fp + tn + fn
        acc = (tp + tn) / total if total else 0.0
        f1_hi = _f1(tp, fp, fn)
        macro_f1 = None
        if macro:
            f1_lo = _f1(tn, fn, fp)  # LOW as positive class
            macro_f1 = 0.5 * (f1_hi + f1_lo)
        return cls(accuracy=acc, f1=f1_hi, tp=tp, fp=fp, tn=tn, fn=fn, macro_f1=macro_f1)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@dataclass
class EvalResult:
    metrics: Metrics
    scores: np.ndarray  # (N,) P(High)
    fused: np.ndarray | None  # (N, M)
    gates: np.ndarray | None  # (N, M)
    labels: np.ndarray


@dataclass
class FoldOutcome:
    test_subject: str
    metrics: Metrics | None
    epoch_log: list[dict] = field(default_factory=list)
    error: str | None = None
    eval_result: EvalResult | None = None
    stats: FoldStats | None = None
    checkpoint: list[tuple[str, np.ndarray]] | None = None


def build_model(config: TrainConfig) -> DualStreamModel:
    return DualStreamModel(
        seed=config.seed, attention=config.attention, streams=config.streams
    )


def _batch_iter(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size < 2:
            continue  # pairwise loss needs at least 2 samples
        yield idx


def train_fold(
    inputs: ModelInputs, config: TrainConfig, model: DualStreamModel | None = None
) -> tuple[DualStreamModel, list[dict]]:
    """Train one fold; returns the model and a per-epoch log."""
    labels = inputs.labels
    if len(np.unique(labels)) < 2:
        raise ValueError("training fold has a single class")
    if model is None:
        model = build_model(config)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params)
    sched = PlateauScheduler(
        config.lr, config.scheduler_factor, config.scheduler_patience,
        config.scheduler_threshold,
    )
    n = labels.shape[0]
    log: list[dict] = []
    use_raw = "raw" in config.streams
    use_topo = "topo" in config.streams
    for epoch in range(config.epochs):
        ce_sum = oc_sum = total_sum = 0.0
        batches = 0
        for idx in _batch_iter(n, config.batch_size, rng):
            raw_b = inputs.raw[idx] if use_raw else None
            topo_b = inputs.topo[idx] if use_topo else None
            result = model.forward(raw_b, topo_b, train=True, rng=rng)
            loss, terms = model.loss(
                result, labels[idx], beta=config.beta, pair_mean=config.pair_mean
            )
            if not np.isfinite(terms.l_total):
                raise NumericalFailure(f"non-finite loss at epoch {epoch}")
            model.zero_grad()
            loss.backward()
            opt.step(sched.lr)
            ce_sum += terms.l_ce
            oc_sum += terms.l_oc
            total_sum += terms.l_total
            batches += 1
        mean_total = total_sum / batches
        lr_now = sched.lr
        sched.step(mean_total)
        log.append(
            {
                "epoch": epoch,
                "l_ce": ce_sum / batches,
                "l_oc": oc_sum / batches,
                "l_total": mean_total,
                "lr": lr_now,
            }
        )
    return model, log


def evaluate(
    model: DualStreamModel,
    inputs: ModelInputs,
    batch_size: int = 32,
    macro_f1: bool = False,
) -> EvalResult:
    """Eval-mode metrics with per-sample scores, fused embeddings and gates."""
    labels = inputs.labels
    n = labels.shape[0]
    if n == 0:
        raise ValueError("empty evaluation set")
    scores = np.empty(n)
    fused_rows: list[np.ndarray] = []
    gate_rows: list[np.ndarray] = []
    use_raw = "raw" in model.streams
    use_topo = "topo" in model.streams
    with ad.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            result = model.forward(
                inputs.raw[sl] if use_raw else None,
                inputs.topo[sl] if use_topo else None,
                train=False,
            )
            scores[sl] = ad.softmax(result.logits.data)[:, 1]
            fused_rows.append(np.asarray(result.fused.data, dtype=np.float64))
            if result.gate is not None:
                gate_rows.append(np.asarray(result.gate.data, dtype=np.float64))
    preds = (scores >= 0.5).astype(np.int64)
    metrics = Metrics.from_predictions(labels, preds, macro=macro_f1)
    return EvalResult(
        metrics=metrics,
        scores=scores,
        fused=np.concatenate(fused_rows) if fused_rows else None,
        gates=np.concatenate(gate_rows) if gate_rows else None,
        labels=labels.copy(),
    )


@dataclass
class LosoResult:
    folds: list[FoldOutcome]
    summary: dict

    def fold(self, subject: str) -> FoldOutcome:
        for f in self.folds:
            if f.test_subject == subject:
                return f
        raise KeyError(subject)


def format_mean_std(values) -> str:
    """Percent-scale `mean(std)` with population std, e.g. 75.40(7.15)."""
    v = np.asarray(list(values), dtype=np.float64) * 100.0
    return f"{v.mean():.2f}({v.std():.2f})"


def summarize(folds: list[FoldOutcome]) -> dict:
    ok = [f for f in folds if f.metrics is not None]
    summary: dict = {
        "n_folds": len(folds),
        "n_failed": len(folds) - len(ok),
        "failed_subjects": sorted(f.test_subject for f in folds if f.metrics is None),
    }
    if ok:
        accs = [f.metrics.accuracy for f in ok]
        f1s = [f.metrics.f1 for f in ok]
        summary.update(
            accuracy_mean=float(np.mean(accs)),
            accuracy_std=float(np.std(accs)),
            f1_mean=float(np.mean(f1s)),
            f1_std=float(np.std(f1s)),
            accuracy=format_mean_std(accs),
            f1=format_mean_std(f1s),
        )
    return summary


def run_fold(
    prepared_by_subject: dict,
    test_subject: str,
    config: TrainConfig,
    pipe: FeaturePipeline,
) -> FoldOutcome:
    """Train + evaluate one LOSO fold end to end."""
    try:
        train_prep = [
            p
            for s, plist in sorted(prepared_by_subject.items())
            if s != test_subject
            for p in plist
        ]
        test_prep = list(prepared_by_subject[test_subject])
        stats = pipe.fit_stats(train_prep, test_subject)
        train_inputs = pipe.model_inputs(train_prep, stats)
        test_inputs = pipe.model_inputs(test_prep, stats)
        model, log = train_fold(train_inputs, config)
        result = evaluate(
            model, test_inputs, batch_size=config.batch_size, macro_f1=config.macro_f1
        )
        return FoldOutcome(
            test_subject=test_subject,
            metrics=result.metrics,
            epoch_log=log,
            eval_result=result,
            stats=stats,
            checkpoint=[(name, np.array(arr, copy=True)) for name, arr in model.checkpoint_entries()],
        )
    except (ValueError, NumericalFailure) as exc:
        return FoldOutcome(test_subject=test_subject, metrics=None, error=str(exc))


def _fold_worker(args) -> FoldOutcome:
    """Process-pool entry: single-threaded math libraries, then one fold."""
    prepared_by_subject, test_subject, config, pipe = args
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except Exception:
        pass
    try:
        import numba

        numba.set_num_threads(1)
    except Exception:
        pass
    ad.set_fft_workers(1)
    return run_fold(prepared_by_subject, test_subject, config, pipe)


def run_loso(
    segments: list[EegSegment],
    config: TrainConfig,
    pipe: FeaturePipeline | None = None,
) -> LosoResult:
    """One train/evaluate per subject; failed folds are marked, not fatal."""
    if pipe is None:
        pipe = FeaturePipeline()
    by_subject: dict[str, list[EegSegment]] = {}
    for seg in segments:
        by_subject.setdefault(seg.subject_id, []).append(seg)
    splits = loso_splits(by_subject.keys())
    prepared = {s: pipe.prepare_many(segs) for s, segs in sorted(by_subject.items())}

    if config.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            folds = list(
                pool.map(
                    _fold_worker,
                    [(prepared, sp.test_subject, config, pipe) for sp in splits],
                )
            )
    else:
        folds = [run_fold(prepared, sp.test_subject, config, pipe) for sp in splits]
    return LosoResult(folds=folds, summary=summarize(folds))
