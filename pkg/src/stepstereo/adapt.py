"""Target-domain fine-tuning with cached background pseudo-labels.

The pipeline has two stages, deliberately separated:

1. **Generation** — run the pre-trained model and edge estimator over the
   target samples once; keep every pixel whose predicted edge probability
   is below the threshold ``t`` as a background pseudo-label.  The maps are
   cached to disk (PFM values + PGM validity per sample, plus a text
   sidecar recording ``t`` and the hash of the generating checkpoint) and
   never regenerated from the evolving model.
2. **Fine-tuning** — continue training on the target samples' sparse
   ground truth, plus a soft-edge consistency term against the cached
   labels.  A paired control run with the same seed but no edge term gives
   the A/B comparison; with no valid labels (or weight zero) the two runs
   are bit-identical.
"""

import os
from dataclasses import dataclass

import numpy as np
import torch

from . import fileio
from .errors import ContractViolation
from .losses import LossConfig
from .model.edges import PseudoLabel, edge_gt_extract, pseudo_label_select
from .model.network import StereoModel
from .scenes import DisparityMap, derive_seed, sparsify_gt
from .train import evaluate_reports, predict, stack_samples, train

PSEUDO_SIDECAR = "pseudo_meta.txt"


def clone_model(model):
    """Independent copy of a stereo model (same hyperparameters + weights)."""
    twin = StereoModel.from_meta(model.to_meta())
    twin.load_state_dict({k: v.clone() for k, v in model.state_dict().items()})
    return twin


# ---------------------------------------------------------------------------
# stage 1: pseudo-label generation and cache
# ---------------------------------------------------------------------------

def compute_edge_maps(model, estimator, stacked, chunk=8):
    """Edge probability maps from the pre-trained pair, one (H, W) array each."""
    pred = predict(model, stacked, chunk)
    maps = []
    with torch.no_grad():
        for start in range(0, len(stacked), chunk):
            edges = estimator(
                pred[start : start + chunk], stacked.left[start : start + chunk]
            )
            maps.extend(edges[i, 0].numpy().copy() for i in range(edges.shape[0]))
    return maps


def select_pseudo_labels(edge_maps, t):
    return [pseudo_label_select(torch.from_numpy(m), t) for m in edge_maps]


def write_pseudo_cache(cache_dir, edge_maps, t, checkpoint_sha):
    """Persist per-sample label files plus the provenance sidecar."""
    os.makedirs(cache_dir, exist_ok=True)
    labels = select_pseudo_labels(edge_maps, t)
    for i, label in enumerate(labels):
        stem = os.path.join(cache_dir, f"pseudo_{i:04d}")
        fileio.write_pfm(stem + "_values.pfm", label.values.numpy().astype(np.float32))
        fileio.write_mask_pgm(stem + "_valid.pgm", label.valid.numpy())
    with open(os.path.join(cache_dir, PSEUDO_SIDECAR), "w") as f:
        f.write(f"t={t!r}\n")
        f.write(f"checkpoint_sha256={checkpoint_sha}\n")
        f.write(f"count={len(labels)}\n")
    return labels


def load_pseudo_cache(cache_dir):
    """Read a cache back; returns ``(labels, t, checkpoint_sha)``."""
    sidecar = os.path.join(cache_dir, PSEUDO_SIDECAR)
    if not os.path.exists(sidecar):
        raise ContractViolation(f"missing pseudo-label cache at {cache_dir}")
    meta = {}
    with open(sidecar) as f:
        for line in f:
            key, _, value = line.strip().partition("=")
            meta[key] = value
    t = float(meta["t"])
    count = int(meta["count"])
    labels = []
    for i in range(count):
        stem = os.path.join(cache_dir, f"pseudo_{i:04d}")
        values, _ = fileio.read_pfm(stem + "_values.pfm")
        valid = fileio.read_mask_pgm(stem + "_valid.pgm")
        labels.append(
            PseudoLabel(
                values=torch.from_numpy(values.astype(np.float64)),
                valid=torch.from_numpy(valid),
                t=t,
            )
        )
    return labels, t, meta["checkpoint_sha256"]


# ---------------------------------------------------------------------------
# stage 2: fine-tuning and the paired comparison
# ---------------------------------------------------------------------------

def sparsify_samples(samples, drop_prob, seed):
    """Lidar-style supervision masks: erase edge regions, drop half the rest.

    Returns per-sample sparse validity masks; values stay dense (targets and
    evaluation still need them).
    """
    masks = []
    for i, sample in enumerate(samples):
        edge = edge_gt_extract(sample.disparity.values).numpy()
        sparse = sparsify_gt(
            DisparityMap(
                values=sample.disparity.values, valid=sample.disparity.valid
            ),
            edge,
            drop_prob,
            derive_seed(seed, i),
        )
        masks.append(sparse.valid)
    return masks


def finetune(
    model,
    samples,
    sparse_masks,
    *,
    steps,
    peak_lr,
    seed,
    loss_config=None,
    pseudo_labels=None,
    edge_loss_weight=1.0,
    batch_size=4,
    log_path=None,
):
    """Fine-tune ``model`` in place on sparse gt (+ optional edge term)."""
    stacked = stack_samples(samples, valid_override=sparse_masks)
    return train(
        model,
        stacked,
        steps=steps,
        batch_size=batch_size,
        peak_lr=peak_lr,
        seed=seed,
        loss_config=loss_config,
        pseudo_labels=pseudo_labels,
        edge_loss_weight=edge_loss_weight,
        log_path=log_path,
    )


@dataclass
class AbResult:
    """Paired fine-tuning outcome for one pseudo-label threshold."""

    t: float
    edge_model: StereoModel
    plain_model: StereoModel
    edge_reports: list
    plain_reports: list

    def mean(self, reports, split=None):
        values = []
        for r in reports:
            r = r.splits.get(split, None) if split else r
            if r is not None:
                values.append(r.epe)
        return float(np.mean(values)) if values else float("nan")

    def summary(self):
        return {
            "t": self.t,
            "edge_epe_all": self.mean(self.edge_reports),
            "plain_epe_all": self.mean(self.plain_reports),
            "edge_epe_edge_region": self.mean(self.edge_reports, "edge"),
            "plain_epe_edge_region": self.mean(self.plain_reports, "edge"),
        }


def run_ab(
    pretrained,
    edge_maps_or_labels,
    train_samples,
    sparse_masks,
    eval_samples,
    *,
    t,
    steps,
    peak_lr,
    seed,
    loss_config=None,
    edge_loss_weight=1.0,
    batch_size=4,
    plain_baseline=None,
):
    """One paired A/B: fine-tune with and without the edge term, same seed.

    ``edge_maps_or_labels`` is either raw edge maps (thresholded here at
    ``t``) or ready :class:`PseudoLabel` objects.  ``plain_baseline`` lets a
    threshold sweep reuse one control run: pass ``(model, reports)``.
    Returns an :class:`AbResult` evaluated on ``eval_samples``' dense gt.
    """
    if edge_maps_or_labels and isinstance(edge_maps_or_labels[0], PseudoLabel):
        labels = edge_maps_or_labels
    else:
        labels = select_pseudo_labels(edge_maps_or_labels, t)

    eval_stacked = stack_samples(eval_samples)

    edge_model = clone_model(pretrained)
    finetune(
        edge_model,
        train_samples,
        sparse_masks,
        steps=steps,
        peak_lr=peak_lr,
        seed=seed,
        loss_config=loss_config,
        pseudo_labels=labels,
        edge_loss_weight=edge_loss_weight,
        batch_size=batch_size,
    )
    edge_reports = evaluate_reports(edge_model, eval_stacked)

    if plain_baseline is None:
        plain_model = clone_model(pretrained)
        finetune(
            plain_model,
            train_samples,
            sparse_masks,
            steps=steps,
            peak_lr=peak_lr,
            seed=seed,
            loss_config=loss_config,
            pseudo_labels=None,
            batch_size=batch_size,
        )
        plain_reports = evaluate_reports(plain_model, eval_stacked)
    else:
        plain_model, plain_reports = plain_baseline

    return AbResult(
        t=t,
        edge_model=edge_model,
        plain_model=plain_model,
        edge_reports=edge_reports,
        plain_reports=plain_reports,
    )


AB_COLUMNS = (
    "t",
    "variant",
    "split",
    "n_valid",
    "gt_density",
    "epe",
    "bad1",
    "bad2",
    "bad3",
    "d1",
)


def ab_rows(result):
    """Aggregate comparison rows (one per variant and region split)."""
    from .metrics import aggregate_reports

    rows = []
    for variant, reports in (
        ("edge", result.edge_reports),
        ("plain", result.plain_reports),
    ):
        for row in aggregate_reports(reports, label=variant):
            rows.append(
                {
                    "t": repr(result.t),
                    "variant": variant,
                    "split": row["split"],
                    "n_valid": row["n_valid"],
                    "gt_density": row["gt_density"],
                    "epe": row["epe"],
                    "bad1": row["bad1"],
                    "bad2": row["bad2"],
                    "bad3": row["bad3"],
                    "d1": row["d1"],
                }
            )
    return rows


def write_ab_csv(path, rows):
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=AB_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
