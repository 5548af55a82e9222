"""Online adaptation loop shared by CodeMerge and the baselines.

Per batch ``t`` (checkpoint ids: ``0`` is the source head, batch ``t`` yields
checkpoint ``t + 1``):

1. fingerprint the batch through the frozen source extractor;
2. build the model to deploy from the stored checkpoints (method specific);
3. evaluate the latest and the merged model on the batch's clean targets;
4. run gradient descent from the merged model on the batch labels;
5. append ``(fingerprint, new checkpoint)`` to the codebook.

The codebook is seeded with ``(fingerprint of batch 0, source head)`` at
step 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from ..codebook import Codebook, fingerprint_matrix
from ..errors import ConfigError, ParameterError, StorageError
from ..fingerprint import (
    Fingerprint,
    compute_fingerprint,
    make_projection,
    pool_features,
)
from ..merging import (
    SignPolicy,
    ema_update,
    sign_consistent_merge,
    weighted_average_merge,
)
from ..scoring import (
    ScoringConfig,
    ema_weights,
    make_merge_plan,
    mos_weights,
    ridge_leverage_scores,
)
from ..tensor_store import Checkpoint
from .model import (
    ToyModel,
    adapt_step,
    closed_form_ridge,
    head_checkpoint,
    make_extractor,
    mse,
    predict,
)
from .stream import Shift, StreamConfig, generate_stream, source_sample

METHODS = ("codemerge", "no_adapt", "ema", "mos", "naive_sequential")
BASELINES = METHODS[1:]

TRACE_FORMAT = "codemerge-trace"
TRACE_VERSION = 1
TRACE_FIELDS = ("step", "pre_merge_loss", "post_merge_loss", "selected_steps", "weights", "fingerprint")


def default_schedule() -> tuple[Shift, ...]:
    return (
        Shift(10, "mean_shift", 0.5),
        Shift(20, "mean_shift", 1.0),
        Shift(30, "mean_shift", 1.5),
    )


@dataclass(frozen=True)
class SimConfig:
    stream: StreamConfig = field(
        default_factory=lambda: StreamConfig(
            batch_size=64, label_noise_sigma=0.3, shift_schedule=default_schedule()
        )
    )
    d: int = 64
    d_prime: int = 16
    model_seed: int = 0
    projection_seed: int = 0
    head_lambda: float = 1e-3
    lr: float = 0.06
    n_grad_steps: int = 1
    source_samples: int = 2000
    label_mode: Literal["noisy_truth", "pseudo_label"] = "noisy_truth"
    pseudo_label_sigma: float = 0.1
    evaluate: Literal["merged", "latest"] = "merged"
    anchor_latest: bool = True

    def __post_init__(self):
        if self.d < 1 or not 1 <= self.d_prime <= self.d:
            raise ConfigError("need 1 <= d_prime <= d")
        if self.label_mode not in ("noisy_truth", "pseudo_label"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")
        if self.evaluate not in ("merged", "latest"):
            raise ConfigError(f"unknown evaluate mode {self.evaluate!r}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError("lr must be positive")
        if self.n_grad_steps < 0 or self.source_samples < 1:
            raise ConfigError("n_grad_steps >= 0 and source_samples >= 1 required")

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(
            self,
            stream=replace(self.stream, seed=seed),
            model_seed=seed,
            projection_seed=seed,
        )


@dataclass(frozen=True, eq=False)
class StepRecord:
    step: int
    pre_merge_loss: float
    post_merge_loss: float
    selected_steps: tuple[int, ...]
    weights: tuple[float, ...]
    fingerprint: np.ndarray
    merged: Checkpoint

    def row(self) -> dict:
        return {
            "step": self.step,
            "pre_merge_loss": self.pre_merge_loss,
            "post_merge_loss": self.post_merge_loss,
            "selected_steps": list(self.selected_steps),
            "weights": list(self.weights),
            "fingerprint": [float(v) for v in self.fingerprint],
        }

    def __eq__(self, other):
        if not isinstance(other, StepRecord):
            return NotImplemented
        return self.row() == other.row() and self.merged == other.merged


@dataclass(eq=False)
class AdaptationTrace:
    method: str
    records: list[StepRecord]
    codebook: Codebook
    first_shift: int | None = None

    def losses(self, which: str = "post_merge_loss") -> np.ndarray:
        return np.array([getattr(r, which) for r in self.records])

    def mean_post_shift_loss(self) -> float:
        start = self.first_shift or 0
        return float(np.mean([r.post_merge_loss for r in self.records if r.step >= start]))

    def same_records(self, other: "AdaptationTrace") -> bool:
        return len(self.records) == len(other.records) and all(
            a == b for a, b in zip(self.records, other.records)
        )

    def to_lines(self) -> list[str]:
        header = {
            "format": TRACE_FORMAT,
            "version": TRACE_VERSION,
            "method": self.method,
            "fields": list(TRACE_FIELDS),
        }
        lines = [json.dumps(header)]
        lines += [json.dumps(r.row()) for r in self.records]
        return lines

    def write(self, path) -> None:
        try:
            Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write trace ({exc.strerror})", path) from exc


def read_trace(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return json.loads(lines[0]), [json.loads(line) for line in lines[1:]]


# ---------------------------------------------------------------------------
# merge rules: (entries, batch features, t) -> (merged, selected steps, weights)


def _resolve(entries, steps: Sequence[int]) -> list[Checkpoint]:
    by_step = {e.step: e for e in entries}
    return [by_step[s].resolve() for s in steps]


class _CodeMergeRule:
    def __init__(self, scoring: ScoringConfig, policy: SignPolicy, anchor_latest: bool):
        self.scoring, self.policy, self.anchor_latest = scoring, policy, anchor_latest

    def __call__(self, entries, F, t):
        Z = fingerprint_matrix(entries)
        scores = ridge_leverage_scores(Z, self.scoring)
        steps = [e.step for e in entries]
        forced = [steps[-1]] if self.anchor_latest else []
        plan = make_merge_plan(scores, steps, self.scoring.top_k, must_include=forced)
        ckpts = _resolve(entries, plan.selected_steps)
        merged = sign_consistent_merge(ckpts, plan.weights, self.policy)
        return merged, plan.selected_steps, plan.weights


class _EmaRule:
    """Recursive teacher; equals the closed-form EMA weights over steps 0..t."""

    def __init__(self, beta: float):
        self.beta = beta
        self.teacher: Checkpoint | None = None

    def __call__(self, entries, F, t):
        latest = entries[-1].resolve()
        if self.teacher is None:
            self.teacher = latest
        else:
            self.teacher = ema_update(self.teacher, latest, self.beta)
        steps = tuple(e.step for e in entries)
        return self.teacher, steps, tuple(float(w) for w in ema_weights(len(steps) - 1, self.beta))


class _MosRule:
    """Kernel synergy over the ``top_k`` most recent checkpoints.

    Every buffered model is run on the batch (K forward passes).  The frozen
    extractor makes all feature similarities 1, so the kernel reduces to the
    output similarity.
    """

    def __init__(self, scoring: ScoringConfig):
        self.scoring = scoring

    def __call__(self, entries, F, t):
        buf = entries[-self.scoring.top_k :]
        ckpts = [e.resolve() for e in buf]
        steps = tuple(e.step for e in buf)
        if len(ckpts) == 1:
            return ckpts[0], steps, (1.0,)
        outputs = [predict(c, F) for c in ckpts]
        feats = [pool_features(F) for _ in ckpts]
        w = mos_weights(outputs, feats, self.scoring.kernel_jitter, self.scoring.clamp_negative_mos)
        return weighted_average_merge(ckpts, w), steps, tuple(float(x) for x in w)


def _latest_rule(entries, F, t):
    return entries[-1].resolve(), (entries[-1].step,), (1.0,)


def _source_rule(entries, F, t):
    return entries[0].resolve(), (entries[0].step,), (1.0,)


def build_source_model(cfg: SimConfig) -> ToyModel:
    extractor = make_extractor(cfg.stream.d_raw, cfg.d, cfg.model_seed)
    xs, ys = source_sample(cfg.stream, cfg.source_samples)
    w, b = closed_form_ridge(extractor(xs), ys, cfg.head_lambda)
    return ToyModel(extractor, head_checkpoint(w, b, 0))


def _run(cfg: SimConfig, method: str, rule: Callable, adapt: bool) -> AdaptationTrace:
    source = build_source_model(cfg)
    proj = make_projection(cfg.d, cfg.d_prime, cfg.projection_seed)
    batches = generate_stream(cfg.stream)
    cb = Codebook(cfg.d_prime)
    label_rng = np.random.default_rng([cfg.stream.seed, 0x1B])
    records = []
    for batch in batches:
        t = batch.step
        F = source.features(batch.x)
        fp = compute_fingerprint(pool_features(F), proj, t + 1)
        if t == 0:
            cb.append(Fingerprint(0, fp.values), source.head)
        entries = cb.snapshot()
        latest = entries[-1].resolve()
        merged, selected, weights = rule(entries, F, t)
        deployed = merged if cfg.evaluate == "merged" else latest
        pre = mse(latest, F, batch.y_clean)
        post = mse(deployed, F, batch.y_clean)
        if cfg.label_mode == "pseudo_label":
            labels = predict(merged, F) + cfg.pseudo_label_sigma * label_rng.normal(size=F.shape[0])
        else:
            labels = batch.y
        if adapt:
            new = adapt_step(source.with_head(merged), batch.x, labels, cfg.n_grad_steps,
                             cfg.lr, cfg.head_lambda, step=t + 1)
        else:
            new = source.head.with_step(t + 1)
        cb.append(fp, new)
        records.append(StepRecord(t, pre, post, tuple(selected), tuple(weights), fp.values, merged))
    return AdaptationTrace(method, records, cb, cfg.stream.first_shift_step())


def run_codemerge(
    cfg: SimConfig, scoring: ScoringConfig | None = None, policy: SignPolicy | None = None
) -> AdaptationTrace:
    rule = _CodeMergeRule(scoring or ScoringConfig(), policy or SignPolicy(), cfg.anchor_latest)
    return _run(cfg, "codemerge", rule, adapt=True)


def run_baseline(cfg: SimConfig, method: str, scoring: ScoringConfig | None = None) -> AdaptationTrace:
    scoring = scoring or ScoringConfig()
    if method == "no_adapt":
        return _run(cfg, method, _source_rule, adapt=False)
    if method == "naive_sequential":
        return _run(cfg, method, _latest_rule, adapt=True)
    if method == "ema":
        return _run(cfg, method, _EmaRule(scoring.ema_beta), adapt=True)
    if method == "mos":
        return _run(cfg, method, _MosRule(scoring), adapt=True)
    raise ParameterError(f"unknown baseline {method!r}; choose from {BASELINES}")


def run_method(cfg: SimConfig, method: str, scoring: ScoringConfig | None = None,
               policy: SignPolicy | None = None) -> AdaptationTrace:
    if method == "codemerge":
        return run_codemerge(cfg, scoring, policy)
    return run_baseline(cfg, method, scoring)
