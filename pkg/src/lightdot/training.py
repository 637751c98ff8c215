"""Pre-training with one uniformly sampled task per update, and CMR finetuning.

Randomness is split into independent streams derived from the seed: task
draws, batch draws, masking draws. Given (config, corpus, initial params) a
run is fully deterministic.

Training log format: a header line ``# step task loss lr`` followed by one
whitespace-separated record per update; ``loss`` and ``lr`` are written with
``repr`` so a round trip is exact.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .encoders import DualEncoder, RegionBatch, TokenBatch, image_hidden, no_decay_names, text_hidden
from .objectives import loss_cmr, loss_mlm, loss_mrc_kl, loss_mrfr, loss_vmlm, plan_region_mask, plan_text_mask
from .optim import AdamState, AdamWHyper, NonFiniteGradientError, adamw_step, lr_schedule

TASKS = ("cmr", "vmlm", "smrm", "mlm", "mrm")
SMRM_VARIANTS = ("both", "mrfr", "mrc")
LOG_HEADER = "# step task loss lr"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, task: str, detail: str = "non-finite loss"):
        self.step = step
        self.task = task
        super().__init__(f"{detail} at step {step} (task {task})")


@dataclass(frozen=True)
class TrainConfig:
    tasks: tuple[str, ...] = ("cmr",)
    steps: int = 500
    batch_size: int = 96
    lr: float = 4e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    warmup_frac: float = 0.1
    seed: int = 0
    eval_every: int = 50
    mask_rate: float = 0.15
    smrm_variant: str = "both"
    grad_accum: int = 1

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ValueError("at least one task must be enabled")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad or len(set(self.tasks)) != len(self.tasks):
            raise ValueError(f"tasks must be distinct members of {TASKS}, got {self.tasks}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in (0, 1)")
        if self.steps < 1 or self.batch_size < 1 or self.grad_accum < 1 or self.eval_every < 0:
            raise ValueError("steps, batch_size, grad_accum must be >= 1 and eval_every >= 0")
        if self.smrm_variant not in SMRM_VARIANTS:
            raise ValueError(f"smrm_variant must be one of {SMRM_VARIANTS}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must be in [0, 1]")

    def hyper(self, lr: float) -> AdamWHyper:
        return AdamWHyper(lr=lr, beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d


@dataclass(frozen=True)
class LogRecord:
    step: int
    task: str
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: DualEncoder
    log: list[LogRecord]
    best_step: int = 0
    val_ar: float = math.nan
    val_history: list[tuple[int, float]] = field(default_factory=list)


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    task_ss, batch_ss, mask_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(task_ss), np.random.default_rng(batch_ss), np.random.default_rng(mask_ss)


def task_stream(tasks: Sequence[str], seed: int) -> Callable[[], str]:
    """The task sampler a run with this seed uses: one uniform draw per update."""
    rng = _streams(seed)[0]
    tasks = tuple(tasks)
    return lambda: tasks[int(rng.integers(len(tasks)))]


def sample_tasks(tasks: Sequence[str], steps: int, seed: int) -> list[str]:
    draw = task_stream(tasks, seed)
    return [draw() for _ in range(steps)]


def task_loss(P, model: DualEncoder, task: str, regions, texts, rng: np.random.Generator, config: TrainConfig):
    """Scalar loss tensor of ``task`` on one batch of positive pairs."""
    cfg = model.config
    if task == "cmr":
        z0 = text_hidden(P, cfg, TokenBatch.from_sequences(texts))[:, 0]
        h0 = image_hidden(P, cfg, RegionBatch.from_sequences(regions))[:, 0]
        return loss_cmr(z0, h0)
    if task in ("mlm", "vmlm"):
        plans = [plan_text_mask(t, config.mask_rate, rng, cfg.vocab) for t in texts]
        if task == "mlm":
            return loss_mlm(P, cfg, texts, plans)
        return loss_vmlm(P, cfg, texts, regions, plans)
    if task in ("mrm", "smrm"):
        variant = config.smrm_variant
        if variant == "both":
            variant = "mrfr" if rng.random() < 0.5 else "mrc"
        plans = [plan_region_mask(r, config.mask_rate, rng) for r in regions]
        fuse = texts if task == "smrm" else None
        fn = loss_mrfr if variant == "mrfr" else loss_mrc_kl
        return fn(P, cfg, regions, plans, tokens=fuse)
    raise ValueError(f"unknown task {task!r}")


def _train(config: TrainConfig, corpus, model: DualEncoder, tasks: Sequence[str],
           on_eval: Callable[[int, DualEncoder], None] | None = None) -> list[LogRecord]:
    ids = np.asarray(corpus.ids("train"))
    if ids.size == 0:
        raise ValueError("training split is empty")
    n = min(config.batch_size, ids.size)
    draw_task = task_stream(tasks, config.seed)
    _, batch_rng, mask_rng = _streams(config.seed)
    state, skip = AdamState(), no_decay_names(model.params)
    log: list[LogRecord] = []
    for step in range(1, config.steps + 1):
        task = draw_task()
        # distinct pair ids give distinct images and captions, so off-diagonal pairs are negatives
        picked = batch_rng.choice(ids, size=n, replace=False)
        grads_total: dict[str, np.ndarray] = {}
        value = 0.0
        # accumulation splits the batch, so CMR negatives come from each part only
        for part in np.array_split(picked, min(config.grad_accum, n)):
            g = Graph()
            P = g.bind(model.params)
            loss = task_loss(P, model, task, corpus.regions(part), corpus.texts(part), mask_rng, config)
            v, grads = ad.value_and_grad(g, loss)
            if not math.isfinite(v):
                raise TrainingDivergedError(step, task)
            value += v / config.grad_accum
            for k, gr in grads.items():
                acc = grads_total.get(k)
                grads_total[k] = gr / config.grad_accum if acc is None else acc + gr / config.grad_accum
        lr = lr_schedule(step, config.steps, config.lr, config.warmup_frac)
        try:
            adamw_step(model.params, grads_total, state, config.hyper(lr), skip)
        except NonFiniteGradientError as exc:
            raise TrainingDivergedError(step, task, f"non-finite gradient for {exc.name}") from exc
        log.append(LogRecord(step, task, value, lr))
        if on_eval is not None and config.eval_every and step % config.eval_every == 0:
            on_eval(step, model)
    return log


def pretrain(config: TrainConfig, corpus, model: DualEncoder) -> TrainResult:
    """Train on the enabled tasks, one uniform task draw per update; returns a new model."""
    model = model.copy()
    log = _train(config, corpus, model, config.tasks)
    return TrainResult(model, log, best_step=config.steps)


def finetune(config: TrainConfig, corpus, model: DualEncoder, select: bool = True) -> TrainResult:
    """CMR-only training; keeps the parameters with the best validation AR.

    Validation runs every ``eval_every`` steps and after the last step. Ties
    keep the earlier checkpoint.
    """
    from .evaluation import validation_ar

    model = model.copy()
    best = {"ar": -math.inf, "step": 0, "params": None}
    history: list[tuple[int, float]] = []

    def on_eval(step: int, current: DualEncoder) -> None:
        ar = validation_ar(current, corpus)
        history.append((step, ar))
        if not math.isnan(ar) and ar > best["ar"]:
            best.update(ar=ar, step=step, params={k: v.copy() for k, v in current.params.items()})

    log = _train(replace(config, tasks=("cmr",)), corpus, model, ("cmr",), on_eval if select else None)
    if not select:
        return TrainResult(model, log, best_step=config.steps)
    if not history or history[-1][0] != config.steps:
        on_eval(config.steps, model)
    if best["params"] is not None:
        model = DualEncoder(model.config, best["params"])
    return TrainResult(model, log, best_step=best["step"], val_ar=best["ar"] if best["params"] else math.nan,
                       val_history=history)


def write_log(log: Sequence[LogRecord], path) -> None:
    lines = [LOG_HEADER] + [f"{r.step} {r.task} {r.loss!r} {r.lr!r}" for r in log]
    Path(path).write_text("\n".join(lines) + "\n")


def read_log(path) -> list[LogRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        out.append(LogRecord(int(parts[0]), parts[1], float(parts[2]), float(parts[3])))
    return out
