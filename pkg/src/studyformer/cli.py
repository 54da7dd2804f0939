"""Command-line entry point.

Subcommands map 1:1 onto the pipeline stages:

    synth-data   generate the synthetic multi-view benchmark
    train        staged training of studyformer / mvcnn / single-view models
    eval         ROC-AUC comparison table over checkpoints
    predict      per-study probabilities from one checkpoint
    attn-map     attention rollout heatmap + overlay export

Options come from an optional ``key=value`` config file (# comments allowed)
overlaid by command-line flags; unknown keys are rejected. Every run echoes
its full effective configuration to ``<out>/run.cfg`` so it can be replayed
exactly. No subcommand writes outside its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import datetime
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import DESK_BACKBONE, PAPER_BACKBONE
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticSpec, generate_synthetic_dataset, load_manifest, split_by_study
from .errors import ConfigError, StudyformerError, ValidationError
from .eval import evaluate_models, export_attention_map, write_report
from .train import TrainConfig, init_model_bundle, predict_study, train_staged
from .vit import ViTConfig, desk_vit_config, paper_vit_config

_DEFAULTS = {
    "synth-data": {
        "seed": "0",
        "n_train": "60",
        "n_val": "20",
        "n_test": "20",
        "image_size": "64",
        "noise": "0.05",
        "shape_prob": "0.3",
        "decoy_fraction": "0.15",
        "split_fraction": "0.15",
    },
    "train": {
        "seed": "0",
        "data": "",
        "model": "studyformer",
        "scale": "desk",
        "stage1_epochs": "8",
        "stage2_epochs": "2",
        "batch_size": "16",
        "lr_stage1": "3e-3",
        "lr_stage2": "3e-4",
        "loss": "bce",
        "focal_alpha": "1.0",
        "focal_gamma": "2.0",
        "cutoff": "2022-04-01",
        "val_fraction": "0.5",
        "labels": "",
        "backbone_from": "",
        "embed_dim": "0",
        "depth": "0",
        "heads": "0",
        "mlp_dim": "0",
        "head_hidden": "32",
    },
    "eval": {"seed": "0", "data": "", "cutoff": "2022-04-01", "val_fraction": "0.5", "split": "test"},
    "predict": {"seed": "0", "data": "", "cutoff": "2022-04-01", "val_fraction": "0.5", "split": "all"},
    "attn-map": {
        "seed": "0",
        "data": "",
        "cutoff": "2022-04-01",
        "val_fraction": "0.5",
        "split": "test",
        "study": "",
        "count": "1",
    },
}


def _read_config_file(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for raw in p.read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line (need key=value): {raw!r}")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def _effective_config(command, args):
    cfg = dict(_DEFAULTS[command])
    if args.config:
        for k, v in _read_config_file(args.config).items():
            if k not in cfg:
                raise ConfigError(f"unknown config key {k!r} for {command}")
            cfg[k] = v
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    if getattr(args, "labels", None):
        cfg["labels"] = args.labels
    if getattr(args, "scale", None):
        cfg["scale"] = args.scale
    return cfg


def _require(cfg, key):
    if not cfg.get(key):
        raise ConfigError(f"missing required config key {key!r}")
    return cfg[key]


def _int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError as e:
        raise ConfigError(f"config key {key!r} must be an integer, got {cfg[key]!r}") from e


def _float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError as e:
        raise ConfigError(f"config key {key!r} must be a number, got {cfg[key]!r}") from e


def _date(cfg, key):
    try:
        return datetime.date.fromisoformat(cfg[key])
    except ValueError as e:
        raise ConfigError(f"config key {key!r} must be an ISO date, got {cfg[key]!r}") from e


def _write_run_log(command, cfg, out_dir, extra=()):
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}", f"version={__version__}"]
    lines += [f"{k}={cfg[k]}" for k in sorted(cfg)]
    lines += [f"{k}={v}" for k, v in extra]
    (out_dir / "run.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_split(cfg, which):
    manifest = load_manifest(_require(cfg, "data"))
    if which == "all":
        return manifest
    train, val, test = split_by_study(manifest, _date(cfg, "cutoff"), _float(cfg, "val_fraction"))
    return {"train": train, "val": val, "test": test}[which]


def _cmd_synth_data(args):
    cfg = _effective_config("synth-data", args)
    out = Path(args.out)
    _write_run_log("synth-data", cfg, out)
    spec = SyntheticSpec(
        n_train=_int(cfg, "n_train"),
        n_val=_int(cfg, "n_val"),
        n_test=_int(cfg, "n_test"),
        image_size=_int(cfg, "image_size"),
        noise=_float(cfg, "noise"),
        shape_prob=_float(cfg, "shape_prob"),
        decoy_fraction=_float(cfg, "decoy_fraction"),
        split_fraction=_float(cfg, "split_fraction"),
        seed=_int(cfg, "seed"),
    )
    manifest = generate_synthetic_dataset(spec, out)
    print(f"wrote {len(manifest.studies)} studies ({sum(s.n_views for s in manifest.studies)} views) to {out}")
    return 0


def _scale_configs(cfg, n_outputs):
    scale = cfg["scale"]
    if scale not in ("desk", "paper"):
        raise ConfigError(f"config key 'scale' must be desk or paper, got {scale!r}")
    if scale == "paper":
        backbone, vit = PAPER_BACKBONE, paper_vit_config(n_outputs)
    else:
        backbone, vit = DESK_BACKBONE, desk_vit_config(n_outputs)
    overrides = {}
    for key in ("embed_dim", "depth", "heads", "mlp_dim"):
        v = _int(cfg, key)
        if v:
            overrides[key] = v
    if overrides:
        vit = ViTConfig(
            depth=overrides.get("depth", vit.depth),
            heads=overrides.get("heads", vit.heads),
            mlp_dim=overrides.get("mlp_dim", vit.mlp_dim),
            embed_dim=overrides.get("embed_dim", vit.embed_dim),
            n_labels=n_outputs,
        )
    return backbone, vit


def _label_subset(cfg, label_names):
    if not cfg["labels"]:
        return None
    subset = []
    for name in cfg["labels"].split(","):
        name = name.strip()
        if name not in label_names:
            raise ConfigError(f"config key 'labels' names unknown label {name!r}")
        subset.append(label_names.index(name))
    return tuple(subset)


def _cmd_train(args):
    cfg = _effective_config("train", args)
    out = Path(args.out)
    manifest = load_manifest(_require(cfg, "data"))
    train_m, val_m, _ = split_by_study(manifest, _date(cfg, "cutoff"), _float(cfg, "val_fraction"))
    seed = _int(cfg, "seed")

    if args.checkpoint:
        bundle = load_checkpoint(args.checkpoint[0])
    else:
        subset = _label_subset(cfg, manifest.label_names)
        n_out = len(subset) if subset else manifest.n_labels
        backbone_cfg, vit_cfg = _scale_configs(cfg, n_out)
        backbone_params = None
        if cfg["backbone_from"]:
            donor = load_checkpoint(cfg["backbone_from"])
            if donor.backbone.config != backbone_cfg:
                raise ConfigError("backbone_from checkpoint has a different backbone configuration")
            backbone_params = donor.backbone
        bundle = init_model_bundle(
            cfg["model"],
            backbone_cfg,
            manifest.label_names,
            seed=seed,
            label_subset=subset,
            vit_config=vit_cfg if cfg["model"] == "studyformer" else None,
            head_hidden=_int(cfg, "head_hidden"),
            backbone_params=backbone_params,
        )

    train_cfg = TrainConfig(
        stage1_epochs=_int(cfg, "stage1_epochs"),
        stage2_epochs=_int(cfg, "stage2_epochs"),
        batch_size=_int(cfg, "batch_size"),
        lr_stage1=_float(cfg, "lr_stage1"),
        lr_stage2=_float(cfg, "lr_stage2"),
        loss=cfg["loss"],
        focal_alpha=_float(cfg, "focal_alpha"),
        focal_gamma=_float(cfg, "focal_gamma"),
        seed=seed,
    )
    _write_run_log("train", cfg, out, extra=[("resume", str(bool(args.checkpoint)))])
    bundle, log = train_staged(bundle, train_m, val_m, train_cfg)
    ckpt = out / "checkpoint.sfck"
    save_checkpoint(bundle, ckpt)
    lines = ["stage\tepoch\ttrain_loss\tval_loss"]
    for stage in (1, 2):
        for e, (tr, va) in enumerate(zip(log[f"stage{stage}_train"], log[f"stage{stage}_val"])):
            lines.append(f"{stage}\t{e}\t{tr:.6f}\t{va:.6f}")
    (out / "losses.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"trained {bundle.model_type} ({bundle.meta['stage1_done']}+{bundle.meta['stage2_done']} epochs) -> {ckpt}")
    return 0


def _cmd_eval(args):
    cfg = _effective_config("eval", args)
    out = Path(args.out)
    dataset = _load_split(cfg, cfg["split"] if cfg["split"] in ("train", "val", "test", "all") else "test")
    if cfg["split"] not in ("train", "val", "test", "all"):
        raise ConfigError(f"config key 'split' must be train/val/test/all, got {cfg['split']!r}")
    _write_run_log("eval", cfg, out, extra=[("checkpoints", ";".join(args.checkpoint))])
    report, table = evaluate_models(list(args.checkpoint), dataset, seed=_int(cfg, "seed"))
    write_report(report, out)
    print(table)
    return 0


def _cmd_predict(args):
    cfg = _effective_config("predict", args)
    out = Path(args.out)
    dataset = _load_split(cfg, cfg["split"])
    bundle = load_checkpoint(args.checkpoint[0])
    _write_run_log("predict", cfg, out, extra=[("checkpoint", args.checkpoint[0])])
    from .data import load_image
    from .train import augment_seed_for

    seed = _int(cfg, "seed")
    names = bundle.effective_labels
    lines = ["study_id\t" + "\t".join(names)]
    for study in dataset.studies:
        images = [load_image(dataset.view_path(study, k)) for k in range(study.n_views)]
        probs = predict_study(bundle, images, augment_seed=augment_seed_for(seed, study.study_id))
        lines.append(study.study_id + "\t" + "\t".join(f"{p:.6f}" for p in probs))
    (out / "predictions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote predictions for {len(dataset.studies)} studies to {out / 'predictions.tsv'}")
    return 0


def _cmd_attn_map(args):
    cfg = _effective_config("attn-map", args)
    out = Path(args.out)
    dataset = _load_split(cfg, cfg["split"])
    bundle = load_checkpoint(args.checkpoint[0])
    _write_run_log("attn-map", cfg, out, extra=[("checkpoint", args.checkpoint[0])])
    if cfg["study"]:
        studies = [s for s in dataset.studies if s.study_id == cfg["study"]]
        if not studies:
            raise ValidationError(f"study {cfg['study']!r} not found in the dataset")
    else:
        studies = dataset.studies[: _int(cfg, "count")]
    seed = _int(cfg, "seed")
    for study in studies:
        _, paths = export_attention_map(bundle, dataset, study, out / f"{study.study_id}.pgm", seed=seed)
        print(f"{study.study_id}: {paths['heatmap']} {paths['overlay']}")
    return 0


_HANDLERS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "attn-map": _cmd_attn_map,
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="studyformer", description="Multi-view X-ray study classification.")
    parser.add_argument("--version", action="version", version=f"studyformer {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, help_text in [
        ("synth-data", "generate the synthetic multi-view benchmark"),
        ("train", "train a model with the two-stage procedure"),
        ("eval", "compare checkpoints by per-label ROC-AUC"),
        ("predict", "write per-study probabilities"),
        ("attn-map", "export attention rollout heatmaps"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed for all sub-streams")
        p.add_argument("--out", required=True, help="output directory (all writes go here)")
        if name in ("train", "eval", "predict", "attn-map"):
            required = name != "train"
            p.add_argument(
                "--checkpoint", action="append", default=None if name != "train" else [], required=required,
                help="checkpoint path" + (" (repeatable)" if name == "eval" else ""),
            )
        if name == "train":
            p.add_argument("--labels", default=None, help="comma-separated label subset (lung-specific mode)")
            scale = p.add_mutually_exclusive_group()
            scale.add_argument("--desk", dest="scale", action="store_const", const="desk")
            scale.add_argument("--paper", dest="scale", action="store_const", const="paper")
    return parser


def dispatch(argv) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    return _HANDLERS[args.command](args)


def main(argv=None) -> int:
    try:
        return dispatch(sys.argv[1:] if argv is None else argv)
    except (ConfigError, ValidationError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 3
    except StudyformerError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
