"""Deterministic single-core training loop for the stereo model.

One optimizer step = one random batch (with replacement) from a stacked
in-memory dataset, a forward refinement pass, the assembled loss, and an
optional edge-supervision term:

* during pre-training the edge estimator (when given) is trained jointly
  against binary disparity edges, on the detached final prediction, with
  its own optimizer; because the model converges (and may stop early) long
  before the estimator does, the estimator's step budget is independent —
  once the model loop ends, the remaining estimator steps continue against
  the converged model's cached predictions, which is also much cheaper than
  re-running the model forward pass per step;
* during fine-tuning a cached background pseudo-label set (when given)
  adds a soft-edge consistency term.  The term is skipped structurally —
  never even computed — when its weight is zero or a batch has no valid
  pseudo pixels, so disabling it reproduces the plain run bit-exactly.

Everything is float64, single-threaded, and driven by explicit seeds; a
rerun with the same inputs produces byte-identical logs and checkpoints.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractViolation
from .fieldops import masked_mean
from .losses import LossConfig, assemble_loss
from .metrics import region_split_eval
from .model.edges import edge_gt_extract, edge_loss, soft_edge_of_disparity
from .model.network import clip_saturation_fraction

TRAIN_LOG_COLUMNS = (
    "step",
    "loss_init",
    "loss_delta",
    "loss_full",
    "loss_total",
    "epe_train",
    "clip_saturation",
)

WARMUP_FRACTION = 0.1
LR_DIV_FACTOR = 25.0
ADAM_BETAS = (0.9, 0.999)


def one_cycle_lr(step, total_steps, peak_lr, warmup_frac=WARMUP_FRACTION,
                 div_factor=LR_DIV_FACTOR):
    """Learning rate for ``step`` (0-based): linear warmup to the peak over
    the first ``warmup_frac`` of steps, then cosine decay to peak/div_factor."""
    if total_steps < 1:
        raise ContractViolation("schedule needs at least one step")
    if not 0 <= step < total_steps:
        raise ContractViolation(f"step {step} outside schedule of {total_steps}")
    low = peak_lr / div_factor
    warmup = max(1, math.ceil(warmup_frac * total_steps))
    if step < warmup:
        return low + (peak_lr - low) * (step + 1) / warmup
    progress = (step + 1 - warmup) / (total_steps - warmup)
    return low + 0.5 * (peak_lr - low) * (1.0 + math.cos(math.pi * progress))


def make_optimizer(parameters, peak_lr, weight_decay=1e-5):
    return torch.optim.AdamW(
        parameters, lr=peak_lr, betas=ADAM_BETAS, weight_decay=weight_decay
    )


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------

@dataclass
class StackedSamples:
    """Same-size samples stacked into batch-ready float64 tensors."""

    left: torch.Tensor  # (N, 3, H, W)
    right: torch.Tensor  # (N, 3, H, W)
    gt: torch.Tensor  # (N, 1, H, W) dense disparity values
    valid: torch.Tensor  # (N, 1, H, W) bool supervision mask
    samples: list  # the original LoadedSample objects

    def __len__(self):
        return self.left.shape[0]

    def batch(self, indices):
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return (
            self.left[idx],
            self.right[idx],
            self.gt[idx],
            self.valid[idx],
            idx,
        )


def _image_tensor(img):
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def stack_samples(samples, valid_override=None):
    """Stack loaded samples (all the same size) into a :class:`StackedSamples`.

    ``valid_override`` optionally replaces each sample's validity mask —
    used for fine-tuning against sparsified ground truth while keeping the
    dense values for targets and evaluation.
    """
    if not samples:
        raise ContractViolation("cannot stack an empty sample list")
    sizes = {s.left.shape for s in samples}
    if len(sizes) != 1:
        raise ContractViolation(f"samples must share one size, got {sorted(sizes)}")
    masks = (
        [s.disparity.valid for s in samples]
        if valid_override is None
        else list(valid_override)
    )
    if len(masks) != len(samples):
        raise ContractViolation("need one validity mask per sample")
    return StackedSamples(
        left=torch.stack([_image_tensor(s.left) for s in samples]),
        right=torch.stack([_image_tensor(s.right) for s in samples]),
        gt=torch.stack(
            [torch.from_numpy(s.disparity.values.copy())[None] for s in samples]
        ),
        valid=torch.stack(
            [torch.from_numpy(np.asarray(m, dtype=bool))[None] for m in masks]
        ),
        samples=list(samples),
    )


def stack_pseudo_labels(labels):
    """Stack per-sample pseudo-labels into (N, 1, H, W) value/valid tensors."""
    values = torch.stack(
        [torch.as_tensor(lab.values, dtype=torch.float64).reshape(1, *lab.values.shape[-2:])
         for lab in labels]
    )
    valid = torch.stack(
        [torch.as_tensor(lab.valid, dtype=torch.bool).reshape(1, *lab.valid.shape[-2:])
         for lab in labels]
    )
    return values, valid


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def predict(model, stacked, chunk=8):
    """Final full-resolution disparity for every sample, (N, 1, H, W)."""
    outputs = []
    with torch.no_grad():
        for start in range(0, len(stacked), chunk):
            trace = model(
                stacked.left[start : start + chunk],
                stacked.right[start : start + chunk],
            )
            outputs.append(trace.final_full)
    return torch.cat(outputs, dim=0)


def holdout_epe(model, stacked, chunk=8):
    """Mean per-sample end-point error over a stacked holdout set."""
    pred = predict(model, stacked, chunk)
    diff = (pred - stacked.gt).abs()
    values = [
        float(masked_mean(diff[i], stacked.valid[i])) for i in range(len(stacked))
    ]
    return float(np.mean(values))


def evaluate_reports(model, stacked, chunk=8):
    """Full region-split report per sample (edge/non-edge, noc/occ)."""
    pred = predict(model, stacked, chunk)
    reports = []
    for i, sample in enumerate(stacked.samples):
        gt = sample.disparity.values
        edge = edge_gt_extract(gt).numpy()
        reports.append(
            region_split_eval(
                pred[i, 0].numpy(),
                gt,
                stacked.valid[i, 0].numpy(),
                edge,
                sample.occlusion,
            )
        )
    return reports


def evaluate_edge_f1(model, estimator, stacked, chunk=8):
    """Pooled F1 of the estimator's edges (threshold 0.5) on model output."""
    from .metrics import edge_f1

    pred = predict(model, stacked, chunk)
    with torch.no_grad():
        edge_pred = torch.cat(
            [
                estimator(pred[s : s + chunk], stacked.left[s : s + chunk])
                for s in range(0, len(stacked), chunk)
            ]
        )
    edge_gt = torch.cat(
        [
            edge_gt_extract(torch.from_numpy(s.disparity.values.copy()))[None, None]
            for s in stacked.samples
        ]
    )
    return edge_f1(edge_pred.numpy(), edge_gt.numpy())


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    log_rows: list
    holdout_history: list = field(default_factory=list)  # (step, epe) pairs

    @property
    def best_holdout_epe(self):
        return min((e for _, e in self.holdout_history), default=None)


def write_train_log(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRAIN_LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def train(
    model,
    train_set,
    *,
    steps,
    batch_size=4,
    peak_lr=2e-3,
    weight_decay=1e-5,
    clip_norm=1.0,
    seed=0,
    loss_config=None,
    holdout_set=None,
    eval_every=0,
    stop_epe=0.0,
    edge_estimator=None,
    edge_peak_lr=1e-3,
    edge_steps=None,
    pseudo_labels=None,
    edge_loss_weight=1.0,
    log_path=None,
    progress=None,
    edge_progress=None,
):
    """Optimize ``model`` (and optionally ``edge_estimator``) in place.

    ``train_set`` is a :class:`StackedSamples`; ``pseudo_labels`` an optional
    per-sample list of cached background labels (fine-tuning).  ``stop_epe``
    > 0 ends training early once the holdout EPE drops below it (evaluated
    every ``eval_every`` steps).  ``edge_steps`` is the estimator's own step
    budget (default: ``steps``); steps beyond the model loop run against the
    trained model's cached predictions.  Returns a :class:`TrainResult`; the
    CSV log has exactly the columns in ``TRAIN_LOG_COLUMNS``.
    """
    torch.set_num_threads(1)
    if steps < 1:
        raise ContractViolation("training needs at least one step")
    if batch_size < 1:
        raise ContractViolation("batch size must be positive")
    if edge_steps is None:
        edge_steps = steps
    if edge_steps < 0:
        raise ContractViolation("edge estimator step budget must be >= 0")
    cfg = loss_config if loss_config is not None else LossConfig()
    cfg.validate()

    optimizer = make_optimizer(model.parameters(), peak_lr, weight_decay)
    edge_optimizer = None
    if edge_estimator is not None:
        edge_optimizer = make_optimizer(
            edge_estimator.parameters(), edge_peak_lr, weight_decay
        )
    pseudo_values = pseudo_valid = None
    if pseudo_labels is not None:
        if len(pseudo_labels) != len(train_set):
            raise ContractViolation("need one pseudo-label map per training sample")
        pseudo_values, pseudo_valid = stack_pseudo_labels(pseudo_labels)

    rng = np.random.default_rng(seed)
    result = TrainResult(log_rows=[])
    edge_step = 0
    for step in range(steps):
        left, right, gt, valid, idx = train_set.batch(
            rng.integers(0, len(train_set), size=batch_size)
        )
        lr = one_cycle_lr(step, steps, peak_lr)
        for group in optimizer.param_groups:
            group["lr"] = lr

        trace = model(left, right)
        breakdown = assemble_loss(trace, gt, valid, cfg)
        total = breakdown.total
        if pseudo_values is not None and edge_loss_weight > 0.0:
            batch_valid = pseudo_valid[idx]
            if int(batch_valid.sum()) > 0:
                soft = soft_edge_of_disparity(trace.final_full)
                term, _ = edge_loss(soft, pseudo_values[idx], batch_valid)
                total = total + edge_loss_weight * term

        optimizer.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
        optimizer.step()

        if edge_estimator is not None and edge_step < edge_steps:
            _edge_update(
                edge_estimator,
                edge_optimizer,
                trace.final_full.detach(),
                left,
                edge_gt_extract(gt),
                one_cycle_lr(edge_step, edge_steps, edge_peak_lr),
                clip_norm,
            )
            edge_step += 1

        with torch.no_grad():
            epe_train = float(masked_mean((trace.final_full - gt).abs(), valid))
        result.log_rows.append(
            {
                "step": step,
                "loss_init": repr(float(breakdown.loss_init.detach())),
                "loss_delta": repr(float(breakdown.loss_delta.detach())),
                "loss_full": repr(float(breakdown.loss_full.detach())),
                "loss_total": repr(float(total.detach())),
                "epe_train": repr(epe_train),
                "clip_saturation": repr(clip_saturation_fraction(trace)),
            }
        )

        if (
            holdout_set is not None
            and eval_every > 0
            and (step + 1) % eval_every == 0
        ):
            epe_val = holdout_epe(model, holdout_set)
            result.holdout_history.append((step + 1, epe_val))
            if progress is not None:
                progress(step + 1, epe_train, epe_val)
            if stop_epe > 0.0 and epe_val < stop_epe:
                break
        elif progress is not None and (step + 1) % max(1, eval_every or 100) == 0:
            progress(step + 1, epe_train, None)

    if edge_estimator is not None and edge_step < edge_steps:
        cached = predict(model, train_set)
        targets = edge_gt_extract(train_set.gt)
        while edge_step < edge_steps:
            idx = torch.as_tensor(rng.integers(0, len(train_set), size=batch_size))
            e_loss = _edge_update(
                edge_estimator,
                edge_optimizer,
                cached[idx],
                train_set.left[idx],
                targets[idx],
                one_cycle_lr(edge_step, edge_steps, edge_peak_lr),
                clip_norm,
            )
            edge_step += 1
            if edge_progress is not None and edge_step % 500 == 0:
                edge_progress(edge_step, e_loss)

    if log_path is not None:
        write_train_log(log_path, result.log_rows)
    return result


def _edge_update(estimator, optimizer, d_pred, left, target, lr, clip_norm):
    for group in optimizer.param_groups:
        group["lr"] = lr
    e_loss, _ = edge_loss(estimator(d_pred, left), target)
    optimizer.zero_grad()
    e_loss.backward()
    torch.nn.utils.clip_grad_norm_(estimator.parameters(), clip_norm)
    optimizer.step()
    return float(e_loss.detach())
