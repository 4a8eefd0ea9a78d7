"""Command-line entry point.

Subcommands: ``gen-scenes``, ``train``, ``eval``, ``dape``, ``gradcheck``.
Exit codes: 0 success, 1 usage error, 2 contract violation (bad config,
missing files, invalid values), 3 acceptance failure (a quality gate such
as the gradient check did not hold).

Output paths are resolved against the ``STEPSTEREO_OUT`` environment
variable when set (absolute paths are used as given); every run archives
its fully resolved configuration next to its outputs.
"""

import argparse
import os
import sys

import numpy as np
import torch

from . import adapt, config as config_mod, fileio, metrics, train as train_mod
from .checkpoint import checkpoint_hash, load_module_state, save_module
from .errors import AcceptanceFailure, ContractViolation
from .gradcheck import run_all
from .losses import LossConfig
from .model.edges import EdgeEstimator
from .model.network import StereoModel
from .scenes import SceneSpec, derive_seed, load_dataset, write_dataset

OUT_ROOT_ENV = "STEPSTEREO_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_out(path):
    root = os.environ.get(OUT_ROOT_ENV, "")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _manifest_path(data):
    path = resolve_out(data)
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    if not os.path.exists(path):
        raise ContractViolation(f"dataset manifest not found: {path}")
    return path


def _require_file(path, what):
    path = resolve_out(path)
    if not os.path.exists(path):
        raise ContractViolation(f"{what} not found: {path}")
    return path


def _prepare_out(args):
    out = resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    return out


def _loss_config(cfg, n_steps):
    return LossConfig(
        gamma=cfg["loss"]["gamma"],
        h=cfg["loss"]["h"],
        supervise_clips=cfg["loss"]["supervise_clips"],
        n_steps=n_steps,
    )


def _build_model(cfg):
    section = cfg["model"]
    return StereoModel(
        feat_channels=section["feat_channels"],
        hidden_channels=section["hidden_channels"],
        d_levels=section["d_levels"],
        temperature=section["temperature"],
        num_gru=section["num_gru"],
        num_sru=section["num_sru"],
        m=section["m"],
        upsample_mode=section["upsample_mode"],
        seed=section["seed"],
    )


def _split_holdout(samples, holdout):
    if holdout < 0 or holdout >= len(samples):
        raise ContractViolation(
            f"holdout of {holdout} impossible with {len(samples)} samples"
        )
    if holdout == 0:
        return samples, []
    return samples[:-holdout], samples[-holdout:]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_scenes(args):
    cfg = config_mod.load_config(args.config, args.set or ())
    out = _prepare_out(args)
    section = cfg["scenes"]
    specs = [
        SceneSpec(
            seed=derive_seed(cfg["run"]["seed"], i),
            height=section["height"],
            width=section["width"],
            num_layers=section["num_layers"],
            disparity_range=(section["d_min"], section["d_max"]),
            sensor_noise_sigma=section["noise_sigma"],
        )
        for i in range(section["count"])
    ]
    manifest = write_dataset(
        out, specs, domains=[args.domain] * len(specs), force=args.force
    )
    config_mod.write_config(os.path.join(out, "config.ini"), cfg)
    print(f"wrote {len(specs)} scenes to {manifest}")
    return 0


def cmd_train(args):
    cfg = config_mod.load_config(args.config, args.set or ())
    out = _prepare_out(args)
    samples = load_dataset(_manifest_path(args.data))
    train_samples, holdout_samples = _split_holdout(samples, cfg["train"]["holdout"])
    train_set = train_mod.stack_samples(train_samples)
    holdout_set = (
        train_mod.stack_samples(holdout_samples) if holdout_samples else None
    )

    model = _build_model(cfg)
    estimator = None
    if cfg["train"]["train_edges"]:
        estimator = EdgeEstimator()
        estimator.init_parameters(
            torch.Generator().manual_seed(cfg["model"]["seed"] + 101)
        )

    def progress(step, epe_train, epe_holdout):
        line = f"step {step}: train EPE {epe_train:.4f}"
        if epe_holdout is not None:
            line += f", holdout EPE {epe_holdout:.4f}"
        print(line)

    result = train_mod.train(
        model,
        train_set,
        steps=cfg["train"]["steps"],
        batch_size=cfg["train"]["batch_size"],
        peak_lr=cfg["optim"]["peak_lr"],
        weight_decay=cfg["optim"]["weight_decay"],
        clip_norm=cfg["optim"]["clip_norm"],
        seed=cfg["run"]["seed"],
        loss_config=_loss_config(cfg, cfg["model"]["num_gru"] + cfg["model"]["num_sru"]),
        holdout_set=holdout_set,
        eval_every=cfg["train"]["eval_every"],
        stop_epe=cfg["train"]["stop_epe"],
        edge_estimator=estimator,
        edge_peak_lr=cfg["optim"]["edge_peak_lr"],
        edge_steps=cfg["train"]["edge_steps"],
        log_path=os.path.join(out, "train_log.csv"),
        progress=progress,
        edge_progress=lambda step, loss: print(f"edge step {step}: loss {loss:.5f}"),
    )

    meta = dict(model.to_meta())
    meta["train.seed"] = cfg["run"]["seed"]
    meta["train.steps"] = len(result.log_rows)
    save_module(os.path.join(out, "model.ckpt"), model, meta)
    if estimator is not None:
        save_module(os.path.join(out, "edge.ckpt"), estimator, estimator.to_meta())

    if holdout_set is not None:
        reports = train_mod.evaluate_reports(model, holdout_set)
        rows = []
        for i, report in enumerate(reports):
            rows.extend(metrics.report_rows(f"holdout_{i:04d}", report))
        rows.extend(metrics.aggregate_reports(reports))
        metrics.write_report_csv(os.path.join(out, "holdout_eval.csv"), rows)
        final = train_mod.holdout_epe(model, holdout_set)
        print(f"final holdout EPE: {final:.4f}")
        if estimator is not None:
            f1, empty = train_mod.evaluate_edge_f1(model, estimator, holdout_set)
            if not empty:
                print(f"holdout edge F1: {f1:.4f}")
    config_mod.write_config(os.path.join(out, "config.ini"), cfg)
    return 0


def _dataset_label(manifest_path, used):
    label = os.path.basename(os.path.dirname(os.path.abspath(manifest_path)))
    base, n = label, 2
    while label in used:
        label = f"{base}_{n}"
        n += 1
    used.add(label)
    return label


def _dump_eval_images(out_dir, stacked, pred):
    os.makedirs(out_dir, exist_ok=True)
    for i, sample in enumerate(stacked.samples):
        gt = sample.disparity.values
        valid = stacked.valid[i, 0].numpy()
        p = pred[i, 0].numpy()
        vmax = max(1.0, float(gt.max()))
        fileio.write_ppm(
            os.path.join(out_dir, f"sample_{i:04d}_disp.ppm"),
            fileio.colorize(p, vmax),
        )
        err = np.abs(p - gt) * valid
        fileio.write_ppm(
            os.path.join(out_dir, f"sample_{i:04d}_err.ppm"),
            fileio.colorize(err, 3.0),
        )


def cmd_eval(args):
    cfg = config_mod.load_config(args.config, args.set or ())
    out = _prepare_out(args)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    probe_meta = load_checkpoint_meta(ckpt)
    model = StereoModel.from_meta(probe_meta)
    load_module_state(ckpt, model)

    aggregate_rows = []
    used_labels = set()
    for data in args.data:
        manifest = _manifest_path(data)
        label = _dataset_label(manifest, used_labels)
        stacked = train_mod.stack_samples(load_dataset(manifest))
        pred = train_mod.predict(model, stacked)
        reports = train_mod.evaluate_reports(model, stacked)
        rows = []
        for i, report in enumerate(reports):
            rows.extend(metrics.report_rows(f"sample_{i:04d}", report))
        agg = metrics.aggregate_reports(reports, label=label)
        rows.extend(agg)
        metrics.write_report_csv(os.path.join(out, f"eval_{label}.csv"), rows)
        aggregate_rows.extend(r for r in agg if r["split"] == "all")
        if cfg["eval"]["dump_images"]:
            _dump_eval_images(os.path.join(out, f"images_{label}"), stacked, pred)
        epe_row = next(r for r in agg if r["split"] == "all")
        print(f"{label}: EPE {float(epe_row['epe']):.4f} over {len(reports)} samples")

    metrics.write_report_csv(os.path.join(out, "eval_aggregate.csv"), aggregate_rows)
    config_mod.write_config(os.path.join(out, "config.ini"), cfg)
    return 0


def load_checkpoint_meta(path):
    from .checkpoint import load_checkpoint

    _, meta = load_checkpoint(path)
    return meta


def cmd_dape(args):
    cfg = config_mod.load_config(args.config, args.set or ())
    out = _prepare_out(args)
    model_path = _require_file(args.model, "model checkpoint")
    edge_path = _require_file(args.edge, "edge checkpoint")

    model = StereoModel.from_meta(load_checkpoint_meta(model_path))
    load_module_state(model_path, model)
    estimator = EdgeEstimator.from_meta(load_checkpoint_meta(edge_path))
    load_module_state(edge_path, estimator)

    samples = load_dataset(_manifest_path(args.data))
    train_samples, eval_samples = _split_holdout(samples, cfg["dape"]["holdout"])
    if not eval_samples:
        raise ContractViolation("the paired comparison needs held-out samples")
    sparse_masks = adapt.sparsify_samples(
        train_samples, cfg["dape"]["drop_prob"], cfg["run"]["seed"]
    )

    stacked = train_mod.stack_samples(train_samples)
    edge_maps = adapt.compute_edge_maps(model, estimator, stacked)
    ckpt_sha = checkpoint_hash(model_path)

    thresholds = config_mod.sweep_thresholds(cfg)
    rows = []
    baseline = None
    primary = None
    for t in thresholds:
        labels = adapt.write_pseudo_cache(
            os.path.join(out, "pseudo", f"t_{t:g}"), edge_maps, t, ckpt_sha
        )
        result = adapt.run_ab(
            model,
            labels,
            train_samples,
            sparse_masks,
            eval_samples,
            t=t,
            steps=cfg["dape"]["steps"],
            peak_lr=cfg["dape"]["peak_lr"],
            seed=cfg["run"]["seed"],
            loss_config=_loss_config(
                cfg, cfg["model"]["num_gru"] + cfg["model"]["num_sru"]
            ),
            edge_loss_weight=cfg["dape"]["edge_loss_weight"],
            batch_size=cfg["dape"]["batch_size"],
            plain_baseline=baseline,
        )
        if baseline is None:
            baseline = (result.plain_model, result.plain_reports)
        if primary is None:
            primary = result
        rows.extend(adapt.ab_rows(result))
        summary = result.summary()
        print(
            f"t={t:g}: edge-region EPE {summary['edge_epe_edge_region']:.4f} (with) "
            f"vs {summary['plain_epe_edge_region']:.4f} (plain); "
            f"overall {summary['edge_epe_all']:.4f} vs {summary['plain_epe_all']:.4f}"
        )

    adapt.write_ab_csv(os.path.join(out, "ab_report.csv"), rows)
    save_module(
        os.path.join(out, "dape_model.ckpt"),
        primary.edge_model,
        dict(primary.edge_model.to_meta(), **{"dape.t": thresholds[0]}),
    )
    save_module(
        os.path.join(out, "plain_model.ckpt"),
        primary.plain_model,
        primary.plain_model.to_meta(),
    )
    config_mod.write_config(os.path.join(out, "config.ini"), cfg)
    return 0


def cmd_gradcheck(args):
    results = run_all(instances=args.instances, seed=args.seed)
    width = max(len(r.name) for r in results)
    failed = []
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  instances={r.instances}  "
              f"max_rel_err={r.max_rel_err:.3e}  {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        raise AcceptanceFailure(f"gradient check failed for: {', '.join(failed)}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="stepstereo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add_config(p):
        p.add_argument("--config", default=None, help="INI configuration file")
        p.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override one configuration value",
        )

    p = sub.add_parser("gen-scenes", help="render a synthetic stereo dataset")
    add_config(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--domain", default="default", help="domain label for the samples")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train", help="train the stereo model (and edge estimator)")
    add_config(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="output run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one or more datasets")
    add_config(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument(
        "--data",
        required=True,
        action="append",
        help="dataset directory or manifest (repeatable for cross-domain runs)",
    )
    p.add_argument("--out", required=True, help="output report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dape", help="pseudo-label fine-tuning with a paired control")
    add_config(p)
    p.add_argument("--model", required=True, help="pre-trained model checkpoint")
    p.add_argument("--edge", required=True, help="pre-trained edge estimator checkpoint")
    p.add_argument("--data", required=True, help="target-domain dataset")
    p.add_argument("--out", required=True, help="output run directory")
    p.set_defaults(func=cmd_dape)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--instances", type=int, default=20, help="instances per operation")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.error("a command is required")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 2
    except AcceptanceFailure as exc:
        print(f"acceptance failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
