"""Optimization: Adam, one-cycle learning rate, and the training loop.

The loop runs batch -> forward -> margin-softmax loss -> backward -> Adam,
evaluates the validation trials every ``eval_every`` steps, keeps the
checkpoint with the best validation EER (earlier step wins ties), and
reports test metrics with that checkpoint, including EER* at the
validation threshold.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics, objectives
from .checkpoint import read_checkpoint, write_checkpoint
from .data import FeatureCache, crop_batch
from .model import BackendModel


@dataclass
class TrainConfig:
    total_steps: int = 2000
    max_lr: float = 0.003
    warmup_frac: float = 0.10
    batch_size: int = 128
    crop_frames: int = 150
    seed: int = 0
    eval_every: int = 250
    checkpoint_dir: str = "run"
    aam_scale: float = 30.0
    aam_margin: float = 0.2

    def validate(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in (0, 1)")
        if self.batch_size < 1 or self.crop_frames < 1 or self.eval_every < 1:
            raise ValueError("batch_size, crop_frames, eval_every must be >= 1")
        return self


def one_cycle_lr(step, total_steps, max_lr=0.003, warmup_frac=0.10):
    """Linear ramp 0 -> max_lr over the warmup, cosine decay to 0 after."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_frac * total_steps
    if warmup <= 0:
        return max_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    if step <= warmup:
        return max_lr * step / warmup
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup)
                                          / (total_steps - warmup)))


class Adam:
    """Bias-corrected Adam over a ParamStore."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise FloatingPointError(
                    f"non-finite gradient for {name}; aborting step")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    best_step: int
    best_val_eer: float
    untrained_val_eer: float
    val_threshold: float
    report: object            # MetricReport or None when no test trials
    checkpoint_path: str
    log_path: str
    steps_run: int
    diverged: bool


def score_trials(model, rows, cache=None):
    """Cosine scores for (label, enroll_path, test_path) rows."""
    if cache is None:
        cache = FeatureCache()
    emb = {}
    for _, a, b in rows:
        for path in (a, b):
            if path not in emb:
                emb[path] = model.embed(cache.get(path))
    scores = np.array([objectives.cosine_score(emb[a], emb[b])
                       for _, a, b in rows])
    labels = np.array([lab for lab, _, _ in rows])
    return scores, labels


def train(model_cfg, train_cfg, train_entries, val_rows, test_rows=None,
          log_cb=None):
    """Run the full recipe; returns a TrainResult.

    train_entries: manifest entries for the training split.
    val_rows/test_rows: trial rows (label, enroll_path, test_path).
    """
    train_cfg.validate()
    os.makedirs(train_cfg.checkpoint_dir, exist_ok=True)
    ckpt_path = os.path.join(train_cfg.checkpoint_dir, "best.upsv")
    log_path = os.path.join(train_cfg.checkpoint_dir, "train_log.csv")

    model = BackendModel(model_cfg, seed=train_cfg.seed, dtype=np.float32)
    sids = sorted({e.speaker_id for e in train_entries})
    n_classes = len(sids)
    clf_rng = np.random.default_rng(train_cfg.seed + 1)
    limit = math.sqrt(6.0 / model_cfg.embed_dim)
    classifier = ad.parameter(clf_rng.uniform(
        -limit, limit, size=(n_classes, model_cfg.embed_dim)).astype(np.float32))

    trainables = ad.ParamStore()
    for name, t in model.params.items():
        trainables.register(name, t)
    trainables.register("classifier.weight", classifier)
    opt = Adam(trainables)

    batch_rng = np.random.default_rng(train_cfg.seed)
    cache = FeatureCache()
    eval_cache = FeatureCache()

    def evaluate_val():
        scores, labels = score_trials(model, val_rows, eval_cache)
        return metrics.eer(scores, labels)

    log_fh = open(log_path, "w")

    def log_row(text):
        log_fh.write(text + "\n")
        log_fh.flush()

    log_row("step,lr,loss,val_eer")
    untrained_eer, _ = evaluate_val()
    write_checkpoint(ckpt_path, model.state_arrays())
    best = (untrained_eer, 0)
    log_row(f"0,{one_cycle_lr(0, max(train_cfg.total_steps, 1)):.10g},"
            f",{untrained_eer:.10g}")

    diverged = False
    steps_run = 0
    for step in range(1, train_cfg.total_steps + 1):
        batch, labels = crop_batch(train_entries, train_cfg.batch_size,
                                   train_cfg.crop_frames, batch_rng, cache)
        lr = one_cycle_lr(step, train_cfg.total_steps, train_cfg.max_lr,
                          train_cfg.warmup_frac)
        trainables.zero_grad()
        emb = model.forward(ad.Tensor(batch), training=True)
        loss = objectives.aam_softmax_loss(emb, labels, classifier,
                                           scale=train_cfg.aam_scale,
                                           margin=train_cfg.aam_margin)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            diverged = True
            log_row(f"{step},{lr:.10g},nan,")
            break
        loss.backward()
        try:
            opt.step(lr)
        except FloatingPointError:
            diverged = True
            log_row(f"{step},{lr:.10g},{loss_val:.10g},")
            break
        steps_run = step

        if step % train_cfg.eval_every == 0 or step == train_cfg.total_steps:
            val_eer, _ = evaluate_val()
            log_row(f"{step},{lr:.10g},{loss_val:.10g},{val_eer:.10g}")
            if val_eer < best[0]:
                best = (val_eer, step)
                write_checkpoint(ckpt_path, model.state_arrays())
        else:
            log_row(f"{step},{lr:.10g},{loss_val:.10g},")
        if log_cb is not None:
            log_cb(step, lr, loss_val)

    log_fh.close()

    # restore the best checkpoint and produce the final report
    model.load_state_arrays(read_checkpoint(ckpt_path))
    val_scores, val_labels = score_trials(model, val_rows, eval_cache)
    best_val_eer, val_thr = metrics.eer(val_scores, val_labels)
    report = None
    if test_rows:
        test_scores, test_labels = score_trials(model, test_rows, eval_cache)
        report = metrics.compute_report(val_scores, val_labels,
                                        test_scores, test_labels)
    return TrainResult(best_step=best[1], best_val_eer=best_val_eer,
                       untrained_val_eer=untrained_eer,
                       val_threshold=val_thr, report=report,
                       checkpoint_path=ckpt_path, log_path=log_path,
                       steps_run=steps_run, diverged=diverged)
