"""DP finetuning of a linear head: initialization, the training loop, sweeps.

Each step selects a batch, sums per-example gradients clipped to ``C``, adds
Gaussian noise of scale ``sigma * C``, averages, and hands the result to the
optimizer. The noise multiplier is calibrated up front from the planned
number of steps and the selector's sampling rate.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import accountant
from .data_io import BatchSelector, ConfigError, FeatureDataset
from .grad_engine import (
    CHUNK_SIZE,
    LinearHead,
    clipped_gradient_sum,
    forward_logits,
    noisy_gradient,
    standard_normal,
)
from .optim import OptimizerConfig, Schedule, dp_step, init_state, schedule_rate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "constant"
    warmup_epochs: float = 0.0


@dataclass(frozen=True)
class BatchConfig:
    mode: str = "full"
    size: int | None = None
    q: float | None = None


@dataclass(frozen=True)
class PrivacyConfig:
    enabled: bool = True
    epsilon: float = 10.0
    delta: float = 1e-6
    noise_multiplier: float | None = None


@dataclass(frozen=True)
class InitConfig:
    kind: str = "zero"
    stddev: float = 0.0
    bias: float = -10.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 1
    steps: int | None = None
    single_step: bool = False
    clip_norm: float | None = 1.0
    seed: int = 0
    grad_workers: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    init: InitConfig = field(default_factory=InitConfig)

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.privacy.enabled and self.clip_norm is None:
            raise ConfigError("private training needs a clip norm")
        if self.init.kind not in ("zero", "gaussian"):
            raise ConfigError(f"unknown init {self.init.kind!r}")
        if self.init.stddev < 0:
            raise ConfigError("init.stddev must be nonnegative")
        if self.grad_workers < 1:
            raise ConfigError("grad_workers must be at least 1")


# ---------------------------------------------------------------- config keys


def _hints(cls):
    return typing.get_type_hints(cls)


def config_items(config, prefix: str = "") -> dict[str, object]:
    """Flatten a (nested) config into dotted ``key -> value`` pairs."""
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(config_items(value, key + "."))
        else:
            out[key] = value
    return out


def config_keys() -> list[str]:
    return list(config_items(TrainConfig()))


def _coerce(text, hint):
    if not isinstance(text, str):
        return text
    args = typing.get_args(hint)
    if type(None) in args:
        if text.strip().lower() in ("none", "null", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    s = text.strip()
    if hint is bool:
        low = s.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if hint is int:
        v = float(s)
        if v != int(v):
            raise ConfigError(f"not an integer: {text!r}")
        return int(v)
    if hint is float:
        return float(s)
    return s


def with_overrides(config, overrides: dict[str, object]):
    """Return a copy of ``config`` with dotted keys replaced.

    String values are converted to the field's declared type.
    """
    grouped: dict[str, dict[str, object]] = {}
    changes = {}
    hints = _hints(type(config))
    names = {f.name for f in dataclasses.fields(config)}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}")
        sub = getattr(config, head)
        if rest:
            if not dataclasses.is_dataclass(sub):
                raise ConfigError(f"unknown config key {key!r}")
            grouped.setdefault(head, {})[rest] = value
        else:
            if dataclasses.is_dataclass(sub):
                raise ConfigError(f"config key {key!r} names a section")
            try:
                changes[head] = _coerce(value, hints[head])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
    for head, sub_overrides in grouped.items():
        changes[head] = with_overrides(getattr(config, head), sub_overrides)
    try:
        return dataclasses.replace(config, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_key_values(text: str, source: str = "config") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source} line {lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def format_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config_items(config).items():
        lines.append(f"{key}={'none' if value is None else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- training


@dataclass
class MetricsRow:
    step: int
    lr: float
    loss: float
    grad_norm: float
    clipped_fraction: float
    batch_size: int
    eval_accuracy: float | None = None
    wall_time: float = 0.0

    def to_json(self, include_time: bool = False) -> str:
        d = dataclasses.asdict(self)
        if not include_time:
            del d["wall_time"]
        return json.dumps(d, allow_nan=True)


@dataclass
class TrainResult:
    head: LinearHead
    metrics: list[MetricsRow]
    report: accountant.PrivacyReport | None
    sigma: float
    steps: int
    sampling_rate: float
    final_accuracy: float | None


class TrainingAborted(RuntimeError):
    """A non-finite loss or parameter stopped training.

    ``metrics`` holds the rows up to and including the diagnostic row.
    """

    def __init__(self, message, metrics):
        super().__init__(message)
        self.metrics = metrics


def init_head(d: int, k: int, init: str = "zero", stddev: float = 0.0,
              bias: float = -10.0, seed: int = 0) -> LinearHead:
    if stddev < 0:
        raise ValueError("stddev must be nonnegative")
    if init == "zero" or stddev == 0.0:
        W = np.zeros((k, d))
    elif init == "gaussian":
        W = stddev * standard_normal(np.random.default_rng(seed), (k, d))
    else:
        raise ValueError(f"unknown init {init!r}")
    return LinearHead(W, np.full(k, float(bias)))


def evaluate(head: LinearHead, dataset: FeatureDataset) -> float:
    """Top-1 accuracy; ties go to the smallest class index."""
    correct = 0
    for lo in range(0, dataset.n, CHUNK_SIZE):
        z = forward_logits(head, dataset.features[lo:lo + CHUNK_SIZE])
        correct += int(np.sum(np.argmax(z, axis=1) == dataset.labels[lo:lo + CHUNK_SIZE]))
    return correct / dataset.n


def random_chance(k: int) -> float:
    return 1.0 / k


def _seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def make_selector(config: TrainConfig, n: int, seed: int) -> BatchSelector:
    if config.single_step:
        return BatchSelector("full", n, seed=seed)
    b = config.batch
    return BatchSelector(b.mode, n, q=b.q, batch_size=b.size, seed=seed)


def planned_steps(config: TrainConfig, selector: BatchSelector) -> int:
    if config.single_step:
        return 1
    if config.steps is not None:
        return config.steps
    return config.epochs * selector.steps_per_epoch


def resolve_privacy(config: TrainConfig, selector: BatchSelector, steps: int,
                    n: int) -> accountant.PrivacySpec | None:
    p = config.privacy
    if not p.enabled:
        return None
    if selector.mode == "shuffle":
        log.warning(
            "shuffled fixed-size batches are accounted as Poisson sampling with q=%.6g",
            selector.sampling_rate,
        )
    spec = accountant.PrivacySpec(
        epsilon=p.epsilon, delta=p.delta, sampling_rate=selector.sampling_rate,
        steps=steps, clip_norm=config.clip_norm, noise_multiplier=p.noise_multiplier, n=n,
    )
    return spec if spec.resolved else spec.resolve()


def train(config: TrainConfig, dataset: FeatureDataset,
          eval_dataset: FeatureDataset | None = None,
          progress: typing.Callable[[MetricsRow], None] | None = None) -> TrainResult:
    """Run DP (or non-private) finetuning of a linear head.

    Evaluation runs at the end of every epoch and after the last step, on
    ``eval_dataset`` when given and on the training set otherwise.
    """
    config.validate()
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    init_seed, batch_seed, noise_seed = _seeds(config.seed, 3)
    selector = make_selector(config, dataset.n, batch_seed)
    T = planned_steps(config, selector)
    spec = resolve_privacy(config, selector, T, dataset.n)
    sigma = spec.noise_multiplier if spec is not None else 0.0
    clip = config.clip_norm

    head = init_head(dataset.d, dataset.k, config.init.kind, config.init.stddev,
                     config.init.bias, init_seed)
    state = init_state(config.optimizer, head)
    per_epoch = selector.steps_per_epoch
    warmup = min(T, round(config.schedule.warmup_epochs * per_epoch))
    sched = Schedule(config.schedule.kind, config.lr, T, warmup)
    noise_rng = np.random.default_rng(noise_seed)
    denominator = selector.expected_batch_size if selector.mode == "poisson" else None

    metrics: list[MetricsRow] = []
    start = time.perf_counter()
    accuracy = None
    for t in range(T):
        idx = selector.next_batch()
        rate = schedule_rate(sched, t)
        packet = clipped_gradient_sum(head, dataset.features[idx], dataset.labels[idx],
                                      clip, config.grad_workers)
        count = packet.count
        loss = packet.loss_sum / count if count else 0.0
        row = MetricsRow(
            step=t + 1, lr=rate, loss=loss, grad_norm=packet.norm(),
            clipped_fraction=packet.num_clipped / count if count else 0.0,
            batch_size=count,
        )
        if not (math.isfinite(loss) and math.isfinite(row.grad_norm)):
            row.wall_time = time.perf_counter() - start
            metrics.append(row)
            raise TrainingAborted(f"non-finite loss or gradient at step {t + 1}", metrics)
        grad = noisy_gradient(packet, sigma, clip if clip is not None else 1.0,
                              noise_rng, denominator)
        head, state = dp_step(head, state, grad, rate)
        if not head.is_finite():
            row.loss = math.nan
            row.wall_time = time.perf_counter() - start
            metrics.append(row)
            raise TrainingAborted(f"non-finite parameters after step {t + 1}", metrics)
        if (t + 1) % per_epoch == 0 or t == T - 1:
            accuracy = evaluate(head, eval_dataset)
            row.eval_accuracy = accuracy
        row.wall_time = time.perf_counter() - start
        metrics.append(row)
        if progress is not None:
            progress(row)

    report = accountant.privacy_report(spec) if spec is not None else None
    return TrainResult(head, metrics, report, sigma, T, selector.sampling_rate, accuracy)


def metrics_jsonl(metrics: list[MetricsRow], include_time: bool = False) -> str:
    return "".join(row.to_json(include_time) + "\n" for row in metrics)


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepGrid:
    axes: list[tuple[str, list]]
    repeats: int = 1

    def __post_init__(self):
        if not self.axes:
            raise ConfigError("sweep grid has no axes")
        for name, values in self.axes:
            if not values:
                raise ConfigError(f"axis {name!r} has no values")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.axes]

    def cells(self) -> list[dict]:
        return [dict(zip(self.names, combo))
                for combo in itertools.product(*(v for _, v in self.axes))]

    def __len__(self):
        return len(self.cells()) * self.repeats

    @classmethod
    def parse(cls, text: str) -> "SweepGrid":
        """``axis = v1, v2, ...`` per line, plus an optional ``repeats = N``."""
        pairs = parse_key_values(text, "grid")
        repeats = int(pairs.pop("repeats", "1"))
        known = set(config_keys())
        axes = []
        for name, values in pairs.items():
            if name not in known:
                raise ConfigError(f"unknown grid axis {name!r}")
            axes.append((name, [v.strip() for v in values.split(",") if v.strip()]))
        return cls(axes, repeats)


@dataclass
class SweepRow:
    run_id: str
    cell: int
    repeat: int
    axis_values: dict
    seed: int
    status: str
    final_accuracy: float | None = None
    epsilon_achieved: float | None = None
    sigma: float | None = None
    steps: int | None = None
    error: str = ""


@dataclass
class SweepResult:
    grid: SweepGrid
    rows: list[SweepRow]

    def cell_summary(self) -> list[dict]:
        """Mean and standard deviation of final accuracy per grid cell."""
        out = []
        for c, cell in enumerate(self.grid.cells()):
            acc = [r.final_accuracy for r in self.rows if r.cell == c and r.status == "ok"]
            sig = [r.sigma for r in self.rows if r.cell == c and r.status == "ok"]
            out.append({
                **cell,
                "runs": len(acc),
                "mean_accuracy": float(np.mean(acc)) if acc else None,
                "std_accuracy": float(np.std(acc)) if acc else None,
                "sigma": sig[0] if sig else None,
            })
        return out

    def to_csv(self) -> str:
        return results_csv(self.rows, self.grid.names)


def sweep_seed(base_seed: int, cell: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base_seed, cell, repeat]).generate_state(1)[0])


def _run_cell(base_config, dataset, eval_dataset, cell_idx, repeat, cell) -> SweepRow:
    seed = sweep_seed(base_config.seed, cell_idx, repeat)
    row = SweepRow(f"c{cell_idx:03d}r{repeat:02d}", cell_idx, repeat, dict(cell), seed, "ok")
    try:
        config = with_overrides(base_config, {**cell, "seed": seed})
        result = train(config, dataset, eval_dataset)
    except Exception as exc:  # noqa: BLE001 - failed cells are recorded, sweep continues
        row.status = "failed"
        row.error = f"{type(exc).__name__}: {exc}"
        return row
    row.final_accuracy = result.final_accuracy
    row.epsilon_achieved = result.report.epsilon if result.report else None
    row.sigma = result.sigma
    row.steps = result.steps
    return row


def run_sweep(grid: SweepGrid, base_config: TrainConfig, dataset: FeatureDataset,
              eval_dataset: FeatureDataset | None = None, workers: int = 1) -> SweepResult:
    """Train every grid cell ``grid.repeats`` times.

    Run seeds derive from (base seed, cell index, repeat). Rows come back in
    (cell, repeat) order whatever the worker count.
    """
    jobs = [(c, r, cell) for c, cell in enumerate(grid.cells()) for r in range(grid.repeats)]

    def work(job):
        return _run_cell(base_config, dataset, eval_dataset, *job)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(work, jobs))
    else:
        rows = [work(j) for j in jobs]
    return SweepResult(grid, rows)


def results_csv(rows: list[SweepRow], axis_names: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run_id", *axis_names, "final_accuracy", "epsilon_achieved",
                     "sigma", "steps", "seed", "status", "error"])
    for r in rows:
        writer.writerow([
            r.run_id, *(r.axis_values.get(a, "") for a in axis_names),
            _fmt(r.final_accuracy), _fmt(r.epsilon_achieved), _fmt(r.sigma),
            "" if r.steps is None else r.steps, r.seed, r.status, r.error,
        ])
    return buf.getvalue()


def _fmt(x):
    return "" if x is None else repr(float(x))
