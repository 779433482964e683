"""Training: cross-entropy loss, adaptive optimization, single- and
multi-task loops with early stopping, and from-scratch evaluation metrics.

Single-task runs feed the controller a constant query; multi-task runs use
a one-hot task indicator, so one parameter set serves every task and the
query alone routes the prediction. Batches are gradient-accumulated one
example at a time (graphs are small and variable-sized; no padding).
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nm
from .model import ModelConfig, ModelParams, PreparedGraph, forward, prepare_graph
from .molgraph import DatasetError, LabeledExample
from .numerics import Tensor

MODES = ("single", "multi")


class ConfigError(ValueError):
    """An experiment configuration value is missing, unknown, or invalid."""


class NumericError(RuntimeError):
    """Training hit a non-finite value; the message names the culprit."""


@dataclass
class ExperimentConfig:
    """Everything a run needs beyond the data itself."""

    hops: int = 10
    memory_size: int = 32
    controller_size: int = 32
    dropout: float = 0.1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    tasks: tuple[str, ...] = ()
    mode: str = "single"
    neighbor_mode: str = "uniform"
    raw_embedding: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.hops < 1:
            raise ConfigError(f"hops must be >= 1, got {self.hops}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


# -- loss and optimizer -------------------------------------------------------


def cross_entropy(prob: Tensor, label: int) -> Tensor:
    """Binary cross-entropy of a predicted probability against a 0/1 label.

    The probability is clamped to [1e-12, 1 - 1e-12] first, so the loss is
    finite for any input. Batch losses are means of these.
    """
    p = nm.clip(prob, 1e-12, 1.0 - 1e-12)
    return -nm.log(p) if label == 1 else -nm.log(1.0 - p)


@dataclass
class AdamState:
    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            first={name: np.zeros_like(a) for name, a in arrays.items()},
            second={name: np.zeros_like(a) for name, a in arrays.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, config) -> None:
    """One bias-corrected adaptive update, in place.

    A parameter missing from ``grads`` is treated as having zero gradient.
    Any non-finite gradient aborts with the parameter's name.
    """
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correct1 = 1.0 - b1 ** state.step
    correct2 = 1.0 - b2 ** state.step
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {state.step}")
        m = state.first[name]
        v = state.second[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        value -= config.learning_rate * (m / correct1) / (np.sqrt(v / correct2) + config.epsilon)


# -- metrics ------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-task and pooled scores; AUC entries are None for one-class tasks
    and those tasks are excluded from the average."""

    per_task_f1: dict[int, float]
    micro_f1: float
    macro_f1: float
    per_task_auc: dict[int, float | None]
    average_auc: float | None

    def to_dict(self) -> dict:
        return {
            "per_task": {
                str(tid): {"f1": self.per_task_f1[tid], "auc": self.per_task_auc[tid]}
                for tid in sorted(self.per_task_f1)
            },
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "average_auc": self.average_auc,
        }


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Probability a random positive outranks a random negative, ties 0.5.

    Computed from average ranks; None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n = scores.size
    n_pos = int((labels == 1).sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_metrics(scores, labels, task_ids) -> MetricsReport:
    """Micro/macro F1 at threshold 0.5 (positive = probability >= 0.5) and
    per-task rank AUC. Zero-division conventions: a vanished denominator
    makes precision, recall, and F1 zero."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    task_ids = np.asarray(task_ids, dtype=np.int64)
    if scores.size == 0:
        raise ValueError("no examples to score")
    if not (scores.shape == labels.shape == task_ids.shape):
        raise ValueError(f"mismatched shapes {scores.shape}, {labels.shape}, {task_ids.shape}")

    predictions = scores >= 0.5
    per_task_f1: dict[int, float] = {}
    per_task_auc: dict[int, float | None] = {}
    pooled_tp = pooled_fp = pooled_fn = 0
    for tid in sorted(set(int(t) for t in task_ids)):
        mask = task_ids == tid
        pred = predictions[mask]
        truth = labels[mask] == 1
        tp = int(np.sum(pred & truth))
        fp = int(np.sum(pred & ~truth))
        fn = int(np.sum(~pred & truth))
        pooled_tp += tp
        pooled_fp += fp
        pooled_fn += fn
        per_task_f1[tid] = _f1_from_counts(tp, fp, fn)
        auc = rank_auc(scores[mask], labels[mask])
        if auc is None:
            warnings.warn(f"task {tid} has a single class; AUC undefined and excluded from the average")
        per_task_auc[tid] = auc

    defined = [a for a in per_task_auc.values() if a is not None]
    return MetricsReport(
        per_task_f1=per_task_f1,
        micro_f1=_f1_from_counts(pooled_tp, pooled_fp, pooled_fn),
        macro_f1=float(np.mean(list(per_task_f1.values()))),
        per_task_auc=per_task_auc,
        average_auc=float(np.mean(defined)) if defined else None,
    )


# -- data plumbing ------------------------------------------------------------


@dataclass(eq=False)
class TaskSplit:
    train: list[LabeledExample]
    val: list[LabeledExample]
    test: list[LabeledExample]


def split_dataset(examples: Sequence[LabeledExample], seed: int) -> TaskSplit:
    """Seeded shuffle into 80/10/10 train/validation/test."""
    order = np.random.default_rng(seed).permutation(len(examples))
    shuffled = [examples[i] for i in order]
    n = len(shuffled)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    return TaskSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )


def build_queries(mode: str, n_tasks: int) -> list[np.ndarray]:
    """Per-task query vectors: a constant scalar query in single mode, a
    one-hot task indicator in multi mode."""
    if mode == "single":
        return [np.ones(1) for _ in range(n_tasks)]
    queries = []
    for k in range(n_tasks):
        q = np.zeros(n_tasks)
        q[k] = 1.0
        queries.append(q)
    return queries


@dataclass(eq=False)
class PreparedExample:
    prepared: PreparedGraph
    query: np.ndarray
    label: int
    task_id: int
    example_id: str


def derive_model_config(examples: Iterable[LabeledExample], config: ExperimentConfig,
                        n_tasks: int) -> ModelConfig:
    """Infer tensor shapes from the featurized data plus the run settings."""
    node_dims: set[int] = set()
    link_dims: set[int] = set()
    n_relations = 0
    for ex in examples:
        g = ex.graph
        if g.node_features is None:
            raise DatasetError("examples must be featurized before training")
        if g.n_nodes == 0:
            raise DatasetError(f"example {ex.example_id!r} has no atoms")
        node_dims.add(g.node_features.shape[1])
        n_relations = max(n_relations, g.n_relations)
        for e in g.edges:
            link_dims.add(e.link_features.shape[0])
    if len(node_dims) != 1:
        raise DatasetError(f"inconsistent node feature widths {sorted(node_dims)}")
    if not link_dims:
        link_dims = {n_relations + 1}
    if len(link_dims) != 1:
        raise DatasetError(f"inconsistent link feature widths {sorted(link_dims)}")
    return ModelConfig(
        node_feat_dim=node_dims.pop(),
        link_feat_dim=link_dims.pop(),
        n_relations=n_relations,
        query_dim=1 if config.mode == "single" else n_tasks,
        memory_size=config.memory_size,
        controller_size=config.controller_size,
        neighbor_mode=config.neighbor_mode,
        raw_embedding=config.raw_embedding,
    )


def prepare_examples(
    examples: Sequence[LabeledExample],
    model_config: ModelConfig,
    queries: Sequence[np.ndarray],
    cache: dict[int, PreparedGraph] | None = None,
) -> list[PreparedExample]:
    """Attach per-graph constants and the task query to each example.
    ``cache`` lets identical graph objects share one preparation."""
    cache = {} if cache is None else cache
    out = []
    for ex in examples:
        key = id(ex.graph)
        prepared = cache.get(key)
        if prepared is None:
            prepared = prepare_graph(ex.graph, model_config)
            cache[key] = prepared
        out.append(PreparedExample(prepared, queries[ex.task_id], ex.label, ex.task_id, ex.example_id))
    return out


def predict_scores(params: ModelParams, examples: Sequence[PreparedExample], hops: int,
                   workers: int = 1) -> np.ndarray:
    """Inference probabilities for a prepared example list (dropout off)."""

    def one(ex: PreparedExample) -> float:
        return forward(ex.prepared, ex.query, params, hops).probability.item()

    if workers > 1 and len(examples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return np.fromiter(pool.map(one, examples), dtype=np.float64, count=len(examples))
    return np.fromiter((one(ex) for ex in examples), dtype=np.float64, count=len(examples))


# -- the training loop ---------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_micro_f1: float
    val_macro_f1: float
    val_average_auc: float | None

    def format_line(self) -> str:
        auc = "n/a" if self.val_average_auc is None else f"{self.val_average_auc:.4f}"
        return (
            f"epoch {self.epoch:4d}  train_loss {self.train_loss:.6f}  "
            f"val_micro_f1 {self.val_micro_f1:.4f}  val_macro_f1 {self.val_macro_f1:.4f}  "
            f"val_avg_auc {auc}"
        )


@dataclass(eq=False)
class TrainResult:
    params: ModelParams
    model_config: ModelConfig
    task_names: list[str]
    metrics: MetricsReport
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_metric: float = float("-inf")


def _early_stop_metric(report: MetricsReport) -> float:
    # one-class validation slices leave AUC undefined; fall back to micro F1
    return report.micro_f1 if report.average_auc is None else report.average_auc


def train(
    tasks: dict[str, TaskSplit],
    config: ExperimentConfig,
    log_fn: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Fit the memory network on one or many tasks.

    Examples from every task are pooled and reshuffled each epoch (so each
    task contributes exactly its dataset, without replacement), gradients
    are accumulated per batch, and early stopping tracks validation average
    AUC with the configured patience. The returned parameters are the best
    validation checkpoint; metrics are computed on the test split with it.
    """
    if not tasks:
        raise DatasetError("no tasks to train on")
    task_names = list(tasks)
    for name, split in tasks.items():
        for part_name, part in (("train", split.train), ("val", split.val), ("test", split.test)):
            if not part:
                raise DatasetError(f"task {name!r} has an empty {part_name} split")

    all_examples = [ex for s in tasks.values() for part in (s.train, s.val, s.test) for ex in part]
    model_config = derive_model_config(all_examples, config, len(task_names))
    queries = build_queries(config.mode, len(task_names))
    for name, split in tasks.items():
        for ex in split.train + split.val + split.test:
            if not (0 <= ex.task_id < len(task_names)):
                raise DatasetError(f"example {ex.example_id!r} has task id {ex.task_id} outside the roster")

    cache: dict[int, PreparedGraph] = {}
    train_pool = prepare_examples([ex for s in tasks.values() for ex in s.train], model_config, queries, cache)
    val_pool = prepare_examples([ex for s in tasks.values() for ex in s.val], model_config, queries, cache)
    test_pool = prepare_examples([ex for s in tasks.values() for ex in s.test], model_config, queries, cache)

    params = ModelParams.initialize(model_config, config.seed)
    adam = AdamState.for_params(params.arrays())
    result = TrainResult(params=params, model_config=model_config, task_names=task_names,
                         metrics=None)  # type: ignore[arg-type]
    best_arrays = params.copy_arrays()
    stall = 0

    def run_example(ex: PreparedExample, example_rng: np.random.Generator) -> Tensor:
        out = forward(ex.prepared, ex.query, params, config.hops,
                      dropout_rate=config.dropout, rng=example_rng, training=True)
        return cross_entropy(out.probability, ex.label)

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = np.random.default_rng((config.seed, 7919, epoch)).permutation(len(train_pool))
            loss_sum = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                params.zero_grads()
                jobs = [
                    (train_pool[idx], np.random.default_rng((config.seed, epoch, int(idx))))
                    for idx in batch
                ]
                if pool is not None and len(jobs) > 1:
                    losses = list(pool.map(lambda job: run_example(*job), jobs))
                else:
                    losses = [run_example(ex, rng) for ex, rng in jobs]
                # accumulation in list order keeps runs bit-identical at any worker count
                for loss in losses:
                    value = loss.item()
                    if not np.isfinite(value):
                        raise NumericError(f"non-finite training loss {value!r}")
                    loss_sum += value
                    loss.backward(seed=1.0 / len(batch))
                adam_step(params.arrays(), params.grads(), adam, config)

            val_scores = predict_scores(params, val_pool, config.hops, config.workers)
            val_report = compute_metrics(val_scores, [ex.label for ex in val_pool],
                                         [ex.task_id for ex in val_pool])
            record = EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / len(train_pool),
                val_micro_f1=val_report.micro_f1,
                val_macro_f1=val_report.macro_f1,
                val_average_auc=val_report.average_auc,
            )
            result.history.append(record)
            if log_fn is not None:
                log_fn(record)

            metric = _early_stop_metric(val_report)
            if metric > result.best_val_metric:
                result.best_val_metric = metric
                result.best_epoch = epoch
                best_arrays = params.copy_arrays()
                stall = 0
            else:
                stall += 1
                if stall >= config.patience:
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    params.load_arrays(best_arrays)
    test_scores = predict_scores(params, test_pool, config.hops, config.workers)
    result.metrics = compute_metrics(test_scores, [ex.label for ex in test_pool],
                                     [ex.task_id for ex in test_pool])
    return result
