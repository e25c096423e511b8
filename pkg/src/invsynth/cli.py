"""Command-line entry point.

    invsynth train-teacher --config cfg.yaml
    invsynth invert --config cfg.yaml --mode natural --batches 2 --epochs 100
    invsynth evaluate --config cfg.yaml --fake runs/invert-xxxx
    invsynth apps --config cfg.yaml --synth runs/invert-xxxx --prune-sweep
    invsynth loss-compare --config cfg.yaml --epochs 200

Every command merges built-in defaults, the YAML config and flag overrides
(flags win), writes the resolved config next to its artifacts and finishes
with a ``manifest.json`` holding the config digest and a sha256 per file.
The output directory defaults to ``$INVSYNTH_OUT_ROOT/<command>-<digest>``.

Exit codes: 0 success, 2 configuration or input error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import _io
from .classifier_zoo import ClassifierSpec, build_classifier, load_checkpoint, save_checkpoint, train_classifier
from .compression import (DistillConfig, PruneConfig, append_ledger, count_parameters, distill,
                          finetune_pruned, l1_prune, synth_dataset, train_from_scratch)
from .data import LabeledImages, channel_stats, denormalize, load_corpus, make_shapes, normalize
from .engine import (MODES, TRACE_FIELDS, InversionConfig, NonFiniteLossError, ablation_toggles,
                     load_synth_dir, save_synth_batch, synthesize, trace_csv)
from .metrics import evaluate_sets

log = logging.getLogger("invsynth")

OUT_ROOT_ENV = "INVSYNTH_OUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "data": None,
    "teacher": {"path": None, "family": "resnet-like", "stage_channels": [8, 16, 32, 64],
                "blocks_per_stage": 1, "seed": 7},
    "training": {"epochs": 30, "lr": 0.05, "batch_size": 128, "weight_decay": 5e-4, "seed": 0},
    "inversion": InversionConfig().to_dict(),
    "synth": None,
    "distill": DistillConfig().to_dict(),
    "prune": {**PruneConfig().to_dict(), "ratios": [0.5, 0.6, 0.7, 0.8, 0.9]},
    "scratch": {"epochs": 30, "lr": 0.05, "batch_size": 128, "weight_decay": 5e-4, "seed": 0,
                "spec": None},
    "evaluate": {"real": "data", "fake": None, "embedders": None, "layer": "penultimate",
                 "k": 3, "splits": 1},
    "loss_compare": {"one_to_many_refresh": "epoch"},
}

DEFAULT_DATA = {"kind": "shapes", "num_classes": 10, "resolution": 32, "n_train": 2000,
                "n_test": 500, "noise": 0.1, "seed": 11}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config plumbing

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k != "weights":
            out[k] = _merge(out[k], v, f"{where}{k}.")
        elif isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def _plain(obj):
    """Tuples to lists etc., so YAML and JSON dumps are stable."""
    return json.loads(_io.canonical_json(obj))


def load_config(path: str | None) -> dict:
    user = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        with open(p) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping")
    return _merge(DEFAULTS, user)


def _out_dir(args, command: str, resolved: dict) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / f"{command}-{_io.digest_obj(resolved)[:8]}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _finish(out: Path, command: str, resolved: dict, extra: dict | None = None) -> Path:
    """Write the resolved config and a manifest hashing every artifact in ``out``."""
    _io.atomic_write_text(out / "resolved_config.yaml",
                          yaml.safe_dump(_plain(resolved), sort_keys=True, default_flow_style=False))
    files = {p.relative_to(out).as_posix(): _sha256(p) for p in sorted(out.rglob("*"))
             if p.is_file() and p.name != "manifest.json" and not p.name.startswith(".")}
    manifest = {"command": command, "config_digest": _io.digest_obj(resolved), "files": files,
                "rerun": f"invsynth {command} --config resolved_config.yaml", **(extra or {})}
    return _io.write_json(out / "manifest.json", manifest)


# ---------------------------------------------------------------- data and teachers

def _data_cfg(cfg: dict, sidecar: dict | None = None) -> dict:
    if cfg["data"] is not None:
        return {**DEFAULT_DATA, **cfg["data"]} if cfg["data"].get("kind", "shapes") == "shapes" else cfg["data"]
    if sidecar is not None and sidecar.get("extra", {}).get("data"):
        return sidecar["extra"]["data"]
    return dict(DEFAULT_DATA)


def real_splits(data_cfg: dict) -> tuple[LabeledImages, LabeledImages]:
    """Real train/test images in [0, 1] pixel space."""
    kind = data_cfg.get("kind", "shapes")
    if kind == "shapes":
        d = {**DEFAULT_DATA, **data_cfg}
        train = make_shapes(d["n_train"], d["num_classes"], d["resolution"], d["seed"], d["noise"])
        test = make_shapes(d["n_test"], d["num_classes"], d["resolution"], d["seed"] + 1, d["noise"])
        return train, test
    if kind == "files":
        for key in ("train", "test"):
            if not data_cfg.get(key) or not Path(data_cfg[key]).exists():
                raise ConfigError(f"dataset file for {key!r} not found: {data_cfg.get(key)}")
        return load_corpus(data_cfg["train"]), load_corpus(data_cfg["test"])
    raise ConfigError(f"unknown data kind {kind!r}")


def _normalized(data: LabeledImages, normalization: dict) -> LabeledImages:
    out = data.subset(slice(None))
    out.images = normalize(data.images, normalization["mean"], normalization["std"])
    return out


def _load_teacher(cfg: dict):
    path = cfg["teacher"].get("path")
    if not path:
        raise ConfigError("no teacher checkpoint given (teacher.path or --teacher)")
    try:
        return load_checkpoint(path)
    except FileNotFoundError as err:
        raise ConfigError(str(err)) from err


# ---------------------------------------------------------------- commands

def cmd_train_teacher(args, cfg: dict) -> int:
    data_cfg = _data_cfg(cfg)
    cfg["data"] = data_cfg
    train, test = real_splits(data_cfg)
    mean, std = channel_stats(train.images)
    norm = {"mean": mean, "std": std}
    t = cfg["teacher"]
    spec = ClassifierSpec(t["family"], tuple(t["stage_channels"]), int(train.labels.max()) + 1,
                          train.images.shape[-1], norm, t.get("blocks_per_stage", 1))
    tr = cfg["training"]
    handle, report = train_classifier(build_classifier(spec, t["seed"]), _normalized(train, norm),
                                      tr["epochs"], tr["lr"], tr["seed"], _normalized(test, norm),
                                      tr["batch_size"], tr["weight_decay"])
    resolved = _plain(cfg)
    resolved["teacher"]["path"] = None
    out = _out_dir(args, "train-teacher", resolved)
    sidecar = save_checkpoint(handle, out / "teacher", extra={"data": data_cfg, "training": tr})
    print(f"{'split':<8}{'accuracy':>10}{'loss':>10}")
    for split in ("train", "test"):
        print(f"{split:<8}{report[f'{split}_accuracy']:>10.4f}{report[f'{split}_loss']:>10.4f}")
    print(f"checkpoint: {sidecar}")
    _finish(out, "train-teacher", resolved, {"params_digest": handle.digest()})
    return EXIT_OK


def _inversion_config(args, cfg: dict) -> InversionConfig:
    inv = dict(cfg["inversion"])
    for flag, key in (("mode", "mode"), ("epochs", "epochs"), ("batches", "num_batches"),
                      ("batch_size", "batch_size"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            inv[key] = v
    try:
        config = InversionConfig.from_dict(inv)
    except TypeError as err:
        raise ConfigError(str(err)) from err
    toggles = dict(ftp=config.use_ftp and not getattr(args, "no_ftp", False),
                   acs=config.use_acs and not getattr(args, "no_acs", False),
                   o2o=config.mode != "one-to-many" and not getattr(args, "no_o2o", False))
    config = ablation_toggles(config, **toggles)
    return config.validate()


def _write_failure(out: Path, err: NonFiniteLossError) -> None:
    _io.atomic_write_text(out / "failure_trace.csv", trace_csv(err.trace))
    print(f"numerical failure: {err}; trace in {out / 'failure_trace.csv'}", file=sys.stderr)


def cmd_invert(args, cfg: dict) -> int:
    teacher, sidecar = _load_teacher(cfg)
    config = _inversion_config(args, cfg)
    cfg["inversion"] = config.to_dict()
    resolved = _plain(cfg)
    out = _out_dir(args, "invert", resolved)
    try:
        batches = synthesize(teacher, config)
    except NonFiniteLossError as err:
        _write_failure(out, err)
        return EXIT_NUMERIC
    digest = config.digest()
    for i, b in enumerate(batches):
        save_synth_batch(b, out, i, digest, teacher.spec.normalization)
    finals = [b.trace[-1] for b in batches if b.trace]
    if finals:
        print(f"{len(batches)} batches, mode {config.mode}, mean final loss "
              f"{np.mean([f['total'] for f in finals]):.4f}")
    else:
        print(f"{len(batches)} batches, mode {config.mode}, no optimization steps")
    _finish(out, "invert", resolved, {"teacher_digest": sidecar["params_digest"],
                                      "normalization": teacher.spec.normalization,
                                      "num_batches": len(batches)})
    return EXIT_OK


def _pixel_images(source: str, cfg: dict, sidecar: dict) -> torch.Tensor:
    """Images of a named set in [0, 1] pixel space (raw-pixel sets may leave that range)."""
    if source in ("data", "data:test", "data:train"):
        train, test = real_splits(_data_cfg(cfg, sidecar))
        return (train if source == "data:train" else test).images
    p = Path(source)
    if p.is_dir():
        batches = load_synth_dir(p)
        images = torch.cat([b.images for b in batches])
        manifest = p / "manifest.json"
        norm = _io.read_json(manifest).get("normalization") if manifest.exists() else None
        return denormalize(images, norm["mean"], norm["std"]) if norm else images
    if p.suffix == ".npz" and p.exists():
        return load_corpus(p).images
    raise ConfigError(f"image set not found: {source}")


def cmd_evaluate(args, cfg: dict) -> int:
    ev = cfg["evaluate"]
    if args.fake:
        ev["fake"] = args.fake
    if args.real:
        ev["real"] = args.real
    if args.embedder:
        ev["embedders"] = args.embedder
    if not ev["fake"]:
        raise ConfigError("no synthesized set given (evaluate.fake or --fake)")
    embedders = ev["embedders"] or [cfg["teacher"]["path"]]
    if not embedders or not embedders[0]:
        raise ConfigError("no embedder checkpoint given")
    resolved = _plain(cfg)
    out = _out_dir(args, "evaluate", resolved)
    rows = []
    for path in embedders:
        try:
            handle, sidecar = load_checkpoint(path)
        except FileNotFoundError as err:
            raise ConfigError(str(err)) from err
        norm = handle.spec.normalization
        real = normalize(_pixel_images(ev["real"], cfg, sidecar), norm["mean"], norm["std"])
        fake = normalize(_pixel_images(ev["fake"], cfg, sidecar), norm["mean"], norm["std"])
        report = evaluate_sets(handle, real, fake, ev["layer"], ev["k"], ev["splits"])
        row = {"embedder_path": str(path), "embedder_family": handle.spec.family, **report.to_dict()}
        rows.append(row)
        print(f"{handle.spec.family:<12} fd={report.fd:.4f} is={report.is_mean:.3f} "
              f"p={report.precision:.3f} r={report.recall:.3f}")
    _io.write_json(out / "metrics.json", {"rows": rows})
    _finish(out, "evaluate", resolved)
    return EXIT_OK


def _dir_digest(path: Path) -> str:
    return _io.digest_obj({p.name: _sha256(p) for p in sorted(path.glob("batch_*"))})


def cmd_apps(args, cfg: dict) -> int:
    teacher, sidecar = _load_teacher(cfg)
    synth_dir = args.synth or cfg["synth"]
    if not synth_dir or not Path(synth_dir).is_dir():
        raise ConfigError(f"synthesized image directory not found: {synth_dir}")
    cfg["synth"] = str(synth_dir)
    if args.student == "copy":
        # plumbing smoke test: identical logits under a pure soft loss start at zero
        cfg["distill"]["copy_teacher_weights"] = True
        cfg["distill"]["soft_weight"] = 1.0
    selected = [name for name in ("prune_sweep", "distill", "scratch") if getattr(args, name)]
    selected = selected or ["prune_sweep", "distill", "scratch"]
    resolved = _plain(cfg)
    resolved["apps"] = selected
    out = _out_dir(args, "apps", resolved)
    ledger = out / "ledger.jsonl"
    if ledger.exists():
        ledger.unlink()
    synth = synth_dataset(load_synth_dir(synth_dir))
    train, test = real_splits(_data_cfg(cfg, sidecar))
    norm = teacher.spec.normalization
    train, test = _normalized(train, norm), _normalized(test, norm)
    base = {"teacher_digest": sidecar["params_digest"], "synth_digest": _dir_digest(Path(synth_dir))}

    if "prune_sweep" in selected:
        p = dict(cfg["prune"])
        ratios = p.pop("ratios")
        for ratio in ratios:
            pc = PruneConfig(**{**p, "ratio": ratio}).validate()
            pruned, _ = l1_prune(teacher, ratio)
            _, rep = finetune_pruned(pruned, synth, test, pc.finetune_epochs, pc.lr, pc.seed, pc.momentum,
                                     pc.weight_decay, pc.batch_size, pc.label_source, teacher)
            metrics = {k: rep[k] for k in ("accuracy_before", "accuracy_after", "loss_before", "loss_after")}
            metrics["parameters"] = count_parameters(pruned)
            append_ledger(ledger, f"prune-{round(ratio * 100)}", {**base, **pc.to_dict()}, metrics)
            print(f"prune {ratio:.0%}: {metrics['accuracy_before']:.4f} -> {metrics['accuracy_after']:.4f}")

    if "distill" in selected:
        dc = DistillConfig(**cfg["distill"]).validate()
        _, rep = distill(teacher, dc, synth, test)
        metrics = {k: rep[k] for k in ("initial_loss", "final_loss", "test_accuracy", "teacher_test_accuracy")}
        append_ledger(ledger, "distill", {**base, **dc.to_dict()}, metrics)
        print(f"distill: initial loss {metrics['initial_loss']:.6f}, test accuracy {metrics['test_accuracy']:.4f}")

    if "scratch" in selected:
        s = dict(cfg["scratch"])
        spec = ClassifierSpec.from_dict(s["spec"]) if s["spec"] else teacher.spec
        _, rep = train_from_scratch(spec, synth, s["epochs"], s["lr"], s["batch_size"], s["seed"],
                                    train, test, weight_decay=s["weight_decay"])
        metrics = {k: rep[k] for k in ("train_accuracy", "train_loss", "test_accuracy", "test_loss")}
        append_ledger(ledger, "scratch", {**base, **s}, metrics)
        print(f"scratch: real train accuracy {metrics['train_accuracy']:.4f}")

    _finish(out, "apps", resolved)
    return EXIT_OK


def cmd_loss_compare(args, cfg: dict) -> int:
    teacher, sidecar = _load_teacher(cfg)
    config = _inversion_config(args, cfg)
    cfg["inversion"] = config.to_dict()
    refresh = cfg["loss_compare"]["one_to_many_refresh"]
    resolved = _plain(cfg)
    out = _out_dir(args, "loss-compare", resolved)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("mode",) + TRACE_FIELDS)
    summary = {}
    for mode in MODES:
        mc = InversionConfig.from_dict({**config.to_dict(), "mode": mode,
                                        "latent_refresh": refresh if mode == "one-to-many" else "batch"})
        try:
            batches = synthesize(teacher, mc)
        except NonFiniteLossError as err:
            _write_failure(out, err)
            return EXIT_NUMERIC
        for e in range(mc.epochs):
            rows = [b.trace[e] for b in batches]
            w.writerow([mode, e] + [repr(float(np.mean([r[k] for r in rows]))) for k in TRACE_FIELDS[1:]])
        if mc.epochs:
            summary[mode] = {k: float(np.mean([b.trace[-1][k] for b in batches])) for k in TRACE_FIELDS[1:]}
    _io.atomic_write_text(out / "loss_curves.csv", buf.getvalue())
    _io.write_json(out / "summary.json", summary)
    for mode, s in summary.items():
        print(f"{mode:<12} total={s['total']:.4f} ce={s['ce']:.4f} r_bn={s['r_bn']:.4f}")
    _finish(out, "loss-compare", resolved, {"teacher_digest": sidecar["params_digest"]})
    return EXIT_OK


COMMANDS = {"train-teacher": cmd_train_teacher, "invert": cmd_invert, "evaluate": cmd_evaluate,
            "apps": cmd_apps, "loss-compare": cmd_loss_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invsynth", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config; flags override its values")
        p.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/<command>-<digest>)")
        p.add_argument("--teacher", help="teacher checkpoint (.json sidecar or stem)")
        return p

    common(sub.add_parser("train-teacher", help="train a classifier on the real corpus"))

    def inversion_flags(p):
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batches", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--no-ftp", action="store_true", help="drop the feature pyramid")
        p.add_argument("--no-acs", action="store_true", help="freeze channel scales at 1")
        p.add_argument("--no-o2o", action="store_true", help="one persistent generator for all batches")
        return p

    inversion_flags(common(sub.add_parser("invert", help="synthesize images from a teacher")))
    inversion_flags(common(sub.add_parser("loss-compare", help="matched-budget loss curves of all modes")))

    ev = common(sub.add_parser("evaluate", help="FD / IS / precision-recall of an image set"))
    ev.add_argument("--fake", help="synthesized set: invert output dir or .npz")
    ev.add_argument("--real", help="reference set: 'data', 'data:train', invert dir or .npz")
    ev.add_argument("--embedder", action="append", help="embedder checkpoint; repeat for a sweep")

    ap = common(sub.add_parser("apps", help="pruning sweep, distillation, scratch training"))
    ap.add_argument("--synth", help="invert output directory")
    ap.add_argument("--prune-sweep", action="store_true")
    ap.add_argument("--distill", action="store_true")
    ap.add_argument("--scratch", action="store_true")
    ap.add_argument("--student", choices=["copy", "spec"],
                    help="'copy' starts from the teacher's weights with a pure soft loss (smoke test)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.teacher:
            cfg["teacher"]["path"] = args.teacher
        return COMMANDS[args.command](args, cfg)
    except NonFiniteLossError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError, yaml.YAMLError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
