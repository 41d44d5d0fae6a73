"""Command-line entry point.

    platediff synth-gen     --out runs/demo
    platediff train-stage1  --out runs/demo
    platediff train-stage2  --out runs/demo
    platediff eval-diff     --out runs/demo

Every command reads the same key tree (defaults < --config file < --set
overrides), echoes the effective config into its output folder and writes an
``artifacts.json`` listing each emitted file with its sha256.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training failure,
5 provider/backend failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import data as data_mod
from .domain import Stage, queries_for
from .encoders import CachedEncoder, make_encoder
from .errors import (
    AllSamplesFailed,
    BackendUnavailable,
    CheckpointMismatch,
    ConfigError,
    DataError,
    EmptyInput,
    MissingAfterState,
    ParseError,
    ProviderError,
    SpecError,
    ValidationError,
)
from .losses import LossWeights
from .metrics import evaluate_predictions, mean_predictor_baseline, save_report
from .model import Checkpoint, FusionConfig
from .train import FeatureBank, TrainConfig, predict, train_stage1, train_stage2

log = logging.getLogger("platediff")

COMMANDS = ("synth-gen", "train-stage1", "train-stage2", "eval", "eval-diff", "heatmap", "vlm-bench")

DEFAULTS = {
    "data": {"manifest": None, "train_fraction": 0.8, "split_seed": 0},
    "synthetic": {
        "count": 300,
        "image_size": 336,
        "items_min": 1,
        "items_max": 3,
        "consumed_min": 0.0,
        "consumed_max": 1.0,
        "seed": 0,
    },
    "encoder": {
        "backend": "stub",
        "model_name": "openai/clip-vit-large-patch14-336",
        "stub_dim": 64,
        "cache_dir": None,
    },
    "model": {
        "d_k": 64,
        "ffn_hidden": 256,
        "heads": 1,
        "ablation": "image_and_text",
        "init_seed": 0,
        "pre_norm": True,
    },
    "train": {
        "stage1_epochs": 60,
        "stage2_epochs": 60,
        "batch_size": 32,
        "base_lr": 1e-3,
        "weight_decay": 1e-2,
        "lambda_reg": 1.0,
        "lambda_cont": 0.2,
        "temperature": 0.07,
        "seed": 0,
        "grad_clip": None,
        "reset_head": False,
        "init_from": None,
    },
    "eval": {"checkpoint": None, "plots": True},
    "heatmap": {"checkpoint": None, "sample_id": None, "item": None},
    "vlm": {
        "provider": "replay",
        "strategy": "predicted_difference",
        "model": "",
        "base_url": "",
        "api_key_env": "VLM_API_KEY",
        "max_tokens": 512,
        "greedy": True,
        "max_in_flight": 4,
        "replay_store": None,
        "split": "test",
    },
}

CACHE_ENV = "PLATEDIFF_CACHE_DIR"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_PROVIDER = 0, 2, 3, 4, 5


class TrainingFailure(RuntimeError):
    pass


# ----------------------------------------------------------------------- config

def _merge(base, update, prefix=""):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def _set(cfg, dotted, raw):
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        if i == len(parts) - 1:
            if isinstance(node[part], dict):
                raise ConfigError(f"config key {dotted!r} is a section, not a value")
            node[part] = yaml.safe_load(raw) if raw != "" else None
        else:
            node = node[part]


def build_config(args):
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        _merge(cfg, loaded)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set(cfg, key.strip(), raw.strip())
    if args.seed is not None:
        cfg["train"]["seed"] = cfg["model"]["init_seed"] = cfg["synthetic"]["seed"] = args.seed
    if args.backend is not None:
        cfg["encoder"]["backend"] = args.backend
    if args.ablation is not None:
        cfg["model"]["ablation"] = args.ablation
    return cfg


# -------------------------------------------------------------------- artifacts

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_artifacts(folder, files):
    folder = Path(folder)
    entries = sorted(
        ({"path": Path(f).resolve().relative_to(folder.resolve()).as_posix(), "sha256": _sha256(f)} for f in files),
        key=lambda e: e["path"],
    )
    out = folder / "artifacts.json"
    out.write_text(json.dumps({"files": entries}, indent=2) + "\n", encoding="utf-8")
    return out


def _dump_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------- helpers

def _synthetic_spec(cfg):
    s = cfg["synthetic"]
    return data_mod.SyntheticSpec(
        image_size=int(s["image_size"]),
        items_per_image=(int(s["items_min"]), int(s["items_max"])),
        consumed_fraction_range=(float(s["consumed_min"]), float(s["consumed_max"])),
        seed=int(s["seed"]),
    )


def _encoder(cfg):
    e = cfg["encoder"]
    if e["backend"] == "stub":
        enc = make_encoder("stub", dim=int(e["stub_dim"]), image_size=int(cfg["synthetic"]["image_size"]))
    elif e["backend"] == "pretrained":
        enc = make_encoder("pretrained", model_name=e["model_name"])
    else:
        raise ConfigError(f"encoder.backend must be 'stub' or 'pretrained', got {e['backend']!r}")
    cache_dir = e["cache_dir"] or os.environ.get(CACHE_ENV)
    if cache_dir:
        enc = CachedEncoder(enc, cache_dir)
    return enc


def _manifest_path(cfg, out):
    m = cfg["data"]["manifest"]
    path = Path(m) if m else out / "synthetic" / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    return path


def _splits(cfg, out):
    samples = data_mod.load_manifest(_manifest_path(cfg, out))
    return data_mod.split(samples, float(cfg["data"]["train_fraction"]), int(cfg["data"]["split_seed"]))


def _model_config(cfg, encoder):
    m = cfg["model"]
    try:
        return FusionConfig(
            image_dim=encoder.info.D_I,
            text_dim=encoder.info.D_T,
            d_k=int(m["d_k"]),
            ffn_hidden=int(m["ffn_hidden"]),
            heads=int(m["heads"]),
            ablation=m["ablation"],
            init_seed=int(m["init_seed"]),
            pre_norm=bool(m["pre_norm"]),
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def _train_config(cfg, stage, epochs, init_from, folder):
    t = cfg["train"]
    try:
        return TrainConfig(
            stage=stage,
            base_lr=float(t["base_lr"]),
            weight_decay=float(t["weight_decay"]),
            epochs=int(epochs),
            batch_size=int(t["batch_size"]),
            loss_weights=LossWeights(float(t["lambda_reg"]), float(t["lambda_cont"]), float(t["temperature"])),
            seed=int(t["seed"]),
            init_from=init_from,
            reset_head=bool(t["reset_head"]),
            grad_clip=None if t["grad_clip"] is None else float(t["grad_clip"]),
            checkpoint_path=folder / "checkpoint.pt",
            log_path=folder / "train_log.jsonl",
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def _fmt(pmae):
    return "undefined" if pmae is None else f"{pmae:.2f}%"


def _checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


# -------------------------------------------------------------------- commands

def cmd_synth_gen(cfg, out):
    folder = out / "synthetic"
    spec = _synthetic_spec(cfg).validate()
    count = int(cfg["synthetic"]["count"])
    if count < 2:
        raise ConfigError("synthetic.count must be at least 2")
    samples = data_mod.generate_synthetic(spec, count)
    saved = data_mod.write_synthetic(samples, folder)
    files = [folder / "manifest.jsonl"]
    for s in saved:
        files.append(Path(s.before_image))
        files.append(Path(s.after_image))
    return folder, files


def _run_training(cfg, out, stage):
    encoder = _encoder(cfg)
    train, _ = _splits(cfg, out)
    folder = out / ("stage1" if stage is Stage.ABSOLUTE else "stage2")
    folder.mkdir(parents=True, exist_ok=True)
    queries = queries_for(train, stage)
    mcfg = _model_config(cfg, encoder)
    init_from = cfg["train"]["init_from"]
    if stage is Stage.DIFFERENCE and init_from is None:
        init_from = out / "stage1" / "checkpoint.pt"
    if init_from is not None:
        init_from = Path(init_from)
        if not init_from.exists():
            raise DataError(f"init_from checkpoint not found: {init_from}")
    epochs = cfg["train"]["stage1_epochs" if stage is Stage.ABSOLUTE else "stage2_epochs"]
    tcfg = _train_config(cfg, stage, epochs, init_from, folder)
    fn = train_stage1 if stage is Stage.ABSOLUTE else train_stage2
    try:
        ckpt, report = fn(queries, tcfg, encoder, mcfg)
    except (DataError, CheckpointMismatch, ValidationError, MissingAfterState):
        raise
    except (RuntimeError, FloatingPointError) as exc:
        raise TrainingFailure(str(exc)) from exc
    if not all(math.isfinite(s["total"]) for s in report.steps):
        raise TrainingFailure("non-finite loss during training")
    log.info("%s finished in %.1fs (%d steps)", folder.name, report.wall_seconds, report.total_steps)
    summary = {
        "stage": report.stage,
        "epochs": report.epochs,
        "total_steps": report.total_steps,
        "final_lr": report.final_lr,
        "encoder_digest_before": report.encoder_digest_before,
        "encoder_digest_after": report.encoder_digest_after,
        "checkpoint_digest": ckpt.digest(),
        "n_queries": len(queries),
    }
    files = [folder / "checkpoint.pt", folder / "train_log.jsonl", _dump_json(folder / "train_report.json", summary)]
    return folder, files


def cmd_eval(cfg, out, stage):
    encoder = _encoder(cfg)
    train, test = _splits(cfg, out)
    name = "eval" if stage is Stage.ABSOLUTE else "eval-diff"
    default_ckpt = out / ("stage1" if stage is Stage.ABSOLUTE else "stage2") / "checkpoint.pt"
    ckpt_path = Path(cfg["eval"]["checkpoint"] or default_ckpt)
    ckpt = _checkpoint(ckpt_path)
    folder = out / name
    folder.mkdir(parents=True, exist_ok=True)
    test_q = queries_for(test, stage)
    train_q = queries_for(train, stage)
    model = ckpt.build_model()
    preds = predict(model, test_q, bank=FeatureBank(encoder))
    ev = evaluate_predictions(test_q, preds)
    baseline = mean_predictor_baseline([q.target for q in train_q], ev.targets, "item", stage)
    baseline = baseline.__class__(**{**baseline.to_dict(), "stratum": "mean_predictor_baseline"})
    report_path = save_report(
        folder / "report.json",
        ev.reports() + [baseline],
        checkpoint_digest=ckpt.digest(),
        dataset_tag=sorted({s.dataset_tag for s in test}),
        seed=ckpt.seed,
        stage=stage.value,
    )
    pred_path = folder / "predictions.jsonl"
    with open(pred_path, "w", encoding="utf-8") as fh:
        for q, p in zip(test_q, preds):
            fh.write(json.dumps({"sample_id": q.sample_id, "item": q.item.name, "structure": q.item.structure.value,
                                 "target": q.target, "prediction": float(p)}) + "\n")
    files = [report_path, pred_path]
    if cfg["eval"]["plots"]:
        from .viz import cmd_plots

        summary = cmd_plots(preds, ev.targets, ev.tags, folder, stage)
        files += [Path(summary["histogram"]), Path(summary["joint_density"])]
    print(f"{name}: item MAE {ev.item.mae:.2f} g, PMAE {_fmt(ev.item.pmae)}; "
          f"dish MAE {ev.dish.mae:.2f} g; mean-predictor PMAE {_fmt(baseline.pmae)}")
    return folder, files


def cmd_heatmap_cli(cfg, out):
    from .viz import cmd_heatmap

    encoder = _encoder(cfg)
    h = cfg["heatmap"]
    _, test = _splits(cfg, out)
    ckpt_path = h["checkpoint"] or out / "stage1" / "checkpoint.pt"
    ckpt = _checkpoint(ckpt_path)
    if h["sample_id"]:
        matches = [s for s in test if s.sample_id == h["sample_id"]]
        if not matches:
            raise DataError(f"sample {h['sample_id']!r} not in the test split")
        sample = matches[0]
    else:
        sample = test[0]
    item = h["item"] or sample.items[0].name
    folder = out / "heatmap"
    paths = cmd_heatmap(ckpt, sample, item, encoder, folder)
    return folder, list(paths.values())


def cmd_vlm(cfg, out):
    from .vlm import ClientConfig, Strategy, make_client, run_benchmark

    v = cfg["vlm"]
    train, test = _splits(cfg, out)
    samples = test if v["split"] == "test" else train + test
    try:
        strategy = Strategy(v["strategy"])
        ccfg = ClientConfig(
            provider=v["provider"],
            model=v["model"],
            base_url=v["base_url"],
            max_tokens=int(v["max_tokens"]),
            greedy=bool(v["greedy"]),
            max_in_flight=int(v["max_in_flight"]),
            api_key_env=v["api_key_env"],
        )
    except ValueError as exc:
        raise ConfigError(f"vlm: {exc}") from None
    if ccfg.provider == "replay" and not v["replay_store"]:
        raise ConfigError("vlm.replay_store is required for provider=replay")
    folder = out / "vlm"
    folder.mkdir(parents=True, exist_ok=True)
    try:
        client = make_client(ccfg, samples=samples, replay_store=v["replay_store"])
    except ValueError as exc:
        raise ConfigError(f"vlm: {exc}") from None
    except OSError as exc:
        raise DataError(f"vlm replay store: {exc}") from None
    audit = None if ccfg.provider == "replay" else folder / "responses.jsonl"
    result = run_benchmark(samples, strategy, client, ccfg, audit_path=audit)
    report_path = save_report(folder / "report.json", [result.report], strategy=strategy.value,
                              provider=ccfg.provider, missing=result.missing)
    print(f"vlm-bench ({strategy.value}): dish MAE {result.report.mae:.2f} g, PMAE {_fmt(result.report.pmae)}")
    return folder, [report_path] + ([audit] if audit else [])


def cmd_pipeline(cfg, command, out):
    out.mkdir(parents=True, exist_ok=True)
    if command == "synth-gen":
        folder, files = cmd_synth_gen(cfg, out)
    elif command == "train-stage1":
        folder, files = _run_training(cfg, out, Stage.ABSOLUTE)
    elif command == "train-stage2":
        folder, files = _run_training(cfg, out, Stage.DIFFERENCE)
    elif command == "eval":
        folder, files = cmd_eval(cfg, out, Stage.ABSOLUTE)
    elif command == "eval-diff":
        folder, files = cmd_eval(cfg, out, Stage.DIFFERENCE)
    elif command == "heatmap":
        folder, files = cmd_heatmap_cli(cfg, out)
    elif command == "vlm-bench":
        folder, files = cmd_vlm(cfg, out)
    else:
        raise ConfigError(f"unknown command {command!r}")
    folder.mkdir(parents=True, exist_ok=True)
    cfg_path = folder / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
    write_artifacts(folder, list(files) + [cfg_path])
    return folder


def build_parser():
    p = argparse.ArgumentParser(prog="platediff", description="Text-guided food weight regression toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML file with config overrides")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value (repeatable)")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=("pretrained", "stub"))
    p.add_argument("--ablation", choices=("image_and_text", "image_only", "text_only"))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        t0 = time.perf_counter()
        folder = cmd_pipeline(cfg, args.command, Path(args.out))
        print(f"{args.command}: wrote {folder} in {time.perf_counter() - t0:.1f}s")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, ValidationError, MissingAfterState, CheckpointMismatch, EmptyInput, SpecError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingFailure as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (ProviderError, AllSamplesFailed, BackendUnavailable) as exc:
        print(f"provider failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER


if __name__ == "__main__":
    sys.exit(main())
