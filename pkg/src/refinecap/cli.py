"""Command-line entry point: ``refinecap <subcommand> [options]``.

Subcommands
    gen-data      write a toy dataset directory
    tag-pretrain  concept-layer pretraining only
    pretrain      (optional tag phase, then) teacher-forced MLE
    rl-train      REINFORCE fine-tuning from a checkpoint
    eval          beam-search a split and write a metric report
    caption       print one caption per scene of a features file
    ablate        matched runs with and without refinement / tag pretraining

Configuration resolves as defaults < ``--preset`` < ``--config`` file <
``--set key=value`` < dedicated flags.  Every output directory receives
``config.json`` (the resolved flat config, reusable with ``--config``) and
``run.json`` (seed, tool version, command line).
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, resolve_config
from .decoding import beam_search
from .metrics import METRIC_NAMES, evaluate
from .model import Captioner
from .tensor import ContractError
from .toyworld import Dataset, VocabPair, generate_dataset, load_dataset, load_features, make_dataset
from .training import TrainingError, fit, make_batch

log = logging.getLogger("refinecap")

DEFAULT_TAG_EPOCHS = 10


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing


def _parse_set(item: str) -> tuple[str, object]:
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--preset", default="toy", help="base preset: toy (default) or full")
    common.add_argument("--seed", type=int, help="run seed (non-negative)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--dry-run", action="store_true", help="resolve and echo the config, then stop")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="refinecap", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"refinecap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a toy dataset")
    p.add_argument("--n-scenes", type=int)

    for name, needs_ckpt in (("tag-pretrain", False), ("pretrain", False), ("rl-train", True)):
        p = sub.add_parser(name, parents=[common], help=f"{name} phase")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--ckpt", required=needs_ckpt, help="starting checkpoint")
        p.add_argument("--no-refinement", action="store_true")
        p.add_argument("--tag-pretrain-epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="metric report over a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--beam", type=int)

    p = sub.add_parser("caption", parents=[common], help="caption every scene in a features file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", help="features.jsonl (defaults to <data>/features.jsonl)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--beam", type=int)

    p = sub.add_parser("ablate", parents=[common], help="refinement and tag-pretraining ablation")
    p.add_argument("--data", help="dataset directory (default: generate one per seed)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds shared by every arm")
    p.add_argument("--beam", type=int)
    p.add_argument("--tag-pretrain-epochs", type=int)
    p.add_argument("--arms", default="refinement,no_refinement,tag_pretrain")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    overrides = dict(_parse_set(s) for s in args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "no_refinement", False):
        overrides["model.refinement_enabled"] = False
    if getattr(args, "tag_pretrain_epochs", None) is not None and args.command != "ablate":
        overrides["train.tag_pretrain_epochs"] = args.tag_pretrain_epochs
    if getattr(args, "beam", None) is not None:
        overrides["decode.beam"] = args.beam
    if getattr(args, "n_scenes", None) is not None:
        overrides["data.n_scenes"] = args.n_scenes
    return resolve_config(args.preset, args.config, overrides)


# --------------------------------------------------------------------------
# helpers


class OutputDir:
    """Tracks what a command adds to ``--out`` so a failure can remove it."""

    def __init__(self, path: str | None, required: bool = True):
        if path is None and required:
            raise CliError("--out is required for this command")
        self.path = Path(path) if path is not None else None
        self.existed = self.path is not None and self.path.exists()
        if self.path is not None and self.existed and not self.path.is_dir():
            raise CliError(f"--out {self.path} exists and is not a directory")
        self.before = set(self.path.iterdir()) if self.existed else set()

    def create(self) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        return self.path

    def cleanup(self) -> None:
        if self.path is None or not self.path.exists():
            return
        if not self.existed:
            shutil.rmtree(self.path, ignore_errors=True)
            return
        for entry in set(self.path.iterdir()) - self.before:
            if entry.is_dir():
                shutil.rmtree(entry, ignore_errors=True)
            else:
                entry.unlink(missing_ok=True)


def echo_run(out: Path, cfg: RunConfig, argv: Sequence[str]) -> None:
    cfg.save(out / "config.json")
    run = {"seed": cfg.seed, "version": __version__, "argv": list(argv)}
    (out / "run.json").write_text(json.dumps(run, indent=2) + "\n")


def _dtype(cfg: RunConfig):
    dtype = np.dtype(cfg.train.dtype)
    T.set_default_dtype(dtype)
    return dtype


def _require_dir(path: str) -> Path:
    p = Path(path)
    if not (p / "vocab.json").is_file():
        raise CliError(f"{p} is not a dataset directory (no vocab.json)")
    return p


def _check_width(records, cfg_model) -> None:
    for rec in records:
        if rec.features.shape[1] != cfg_model.D_raw:
            raise ConfigError(
                f"features have width {rec.features.shape[1]} but model.D_raw={cfg_model.D_raw}"
            )
        break


def load_model(path: str, dtype) -> tuple[Captioner, dict]:
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    if not Path(path + ".json").is_file():
        raise CliError(f"checkpoint sidecar not found: {path}.json")
    return Captioner.load(path, dtype=dtype)


def new_model(cfg: RunConfig, vocab: VocabPair, dtype) -> Captioner:
    return Captioner(cfg.model, len(vocab), vocab.scatter_index, seed=cfg.seed, dtype=dtype)


def decode_records(model: Captioner, records, vocab: VocabPair, beam: int, batch: int = 64) -> list[list[str]]:
    model.eval()
    out = []
    for start in range(0, len(records), batch):
        chunk = records[start : start + batch]
        b = make_batch(chunk, [[] for _ in chunk], vocab)
        out.extend(vocab.decode(s) for s in beam_search(model, b.X, b.mask, beam, model.cfg.T_max))
    return out


def report_for(model: Captioner, ds: Dataset, split: str, beam: int) -> dict:
    records = ds.split(split)
    if not records:
        raise CliError(f"split {split!r} is empty")
    caps = decode_records(model, records, ds.vocab, beam)
    return evaluate(caps, [r.references for r in records], ids=[r.scene_id for r in records]).to_json()


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg, out: OutputDir, argv) -> int:
    d = out.create()
    ds = generate_dataset(cfg.seed, cfg.data.n_scenes, cfg.data, cfg.model, d)
    echo_run(d, cfg, argv)
    sizes = {k: len(v) for k, v in ds.splits.items()}
    print(f"wrote {len(ds.records)} scenes to {d} (splits {sizes}, vocab {len(ds.vocab)}, K={ds.vocab.K})")
    return 0


def _train(args, cfg, out: OutputDir, argv, phases) -> int:
    dtype = _dtype(cfg)
    ds = load_dataset(_require_dir(args.data), cfg.model.M)
    if args.ckpt:
        model, meta = load_model(args.ckpt, dtype)
        # architecture comes from the checkpoint; dropout from this run
        model.cfg.dropout_rate = cfg.model.dropout_rate
        cfg.model = model.cfg
        if meta.get("vocab") and meta["vocab"] != ds.vocab.to_json():
            raise CliError("checkpoint vocabulary differs from the dataset's")
    else:
        model = new_model(cfg, ds.vocab, dtype)
    _check_width(ds.records.values(), model.cfg)
    d = out.create()
    echo_run(d, cfg, argv)
    res = fit(
        model,
        ds,
        cfg,
        d,
        phases=phases,
        checkpoint_meta={"vocab": ds.vocab.to_json(), "seed": cfg.seed, "version": __version__},
    )
    for ph in res.phases:
        print(f"{ph.phase}: {ph.epochs_run} epochs, best val CIDEr-D {ph.best_cider:.4f} -> {ph.checkpoint}")
    return 0


def cmd_eval(args, cfg, out: OutputDir, argv) -> int:
    dtype = _dtype(cfg)
    model, _ = load_model(args.ckpt, dtype)
    ds = load_dataset(_require_dir(args.data), model.cfg.M)
    _check_width(ds.records.values(), model.cfg)
    report = report_for(model, ds, args.split, cfg.decode.beam)
    d = out.create()
    echo_run(d, cfg, argv)
    (d / "eval.json").write_text(json.dumps(report, indent=1) + "\n")
    print(" ".join(f"{k}={report['corpus'][k]:.4f}" for k in METRIC_NAMES))
    return 0


def cmd_caption(args, cfg, out: OutputDir, argv) -> int:
    dtype = _dtype(cfg)
    model, meta = load_model(args.ckpt, dtype)
    if "vocab" in meta:
        vocab = VocabPair.from_json(meta["vocab"])
    elif args.data:
        vocab = load_dataset(_require_dir(args.data), model.cfg.M).vocab
    else:
        raise CliError("checkpoint carries no vocabulary; pass --data")
    if args.features:
        feats_path = Path(args.features)
    elif args.data:
        feats_path = Path(args.data) / "features.jsonl"
    else:
        raise CliError("pass --features or --data")
    if not feats_path.is_file():
        raise CliError(f"features file not found: {feats_path}")
    rows = load_features(feats_path, model.cfg.M)
    if rows and rows[0][1].shape[1] != model.cfg.D_raw:
        raise ConfigError(f"features have width {rows[0][1].shape[1]} but model.D_raw={model.cfg.D_raw}")
    model.eval()
    lines = []
    for start in range(0, len(rows), 64):
        chunk = rows[start : start + 64]
        X = np.stack([r[1] for r in chunk])
        mask = np.zeros(X.shape[:2], dtype=bool)
        for i, r in enumerate(chunk):
            mask[i, : r[2]] = True
        for (sid, _, _), seq in zip(chunk, beam_search(model, X, mask, cfg.decode.beam, model.cfg.T_max)):
            lines.append(f"{sid}\t{' '.join(vocab.decode(seq))}")
    sys.stdout.write("".join(line + "\n" for line in lines))
    if out.path is not None:
        d = out.create()
        echo_run(d, cfg, argv)
        (d / "captions.tsv").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return 0


ARMS = {
    "refinement": {"model.refinement_enabled": True, "train.tag_pretrain_epochs": 0},
    "no_refinement": {"model.refinement_enabled": False, "train.tag_pretrain_epochs": 0},
    "tag_pretrain": {"model.refinement_enabled": True, "train.tag_pretrain_epochs": DEFAULT_TAG_EPOCHS},
}


def run_arm(cfg: RunConfig, arm: dict, seed: int, ds: Dataset | None, out_dir: Path | None) -> dict:
    """Train one ablation arm at one seed; returns its scores."""
    run = resolve_config(overrides={**cfg.to_flat(), **arm, "seed": seed})
    dtype = _dtype(run)
    if ds is None:
        ds = make_dataset(seed, run.data.n_scenes, run.data, run.model)
    model = new_model(run, ds.vocab, dtype)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        run.save(out_dir / "config.json")
    res = fit(model, ds, run, out_dir, checkpoint_meta={"vocab": ds.vocab.to_json(), "seed": seed})
    test = report_for(model, ds, "test", run.decode.beam)["corpus"] if ds.splits["test"] else {}
    return {
        "seed": seed,
        "val_cider": res.best_cider,
        "test_bleu4": test.get("bleu4"),
        "test_cider": test.get("cider_d"),
    }


def format_table(rows: list[dict]) -> str:
    head = ("arm", "seed", "val_cider", "test_bleu4", "test_cider")
    lines = ["\t".join(head)]
    for r in rows:
        lines.append("\t".join(str(r[h]) if isinstance(r[h], (str, int)) else f"{r[h]:.4f}" for h in head))
    return "\n".join(lines) + "\n"


def cmd_ablate(args, cfg, out: OutputDir, argv) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise CliError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds or min(seeds) < 0:
        raise CliError("--seeds needs at least one non-negative seed")
    names = [a.strip() for a in args.arms.split(",") if a.strip()]
    unknown = [a for a in names if a not in ARMS]
    if unknown:
        raise CliError(f"unknown arms {unknown}; choose from {sorted(ARMS)}")
    arms = {n: dict(ARMS[n]) for n in names}
    if args.tag_pretrain_epochs is not None and "tag_pretrain" in arms:
        arms["tag_pretrain"]["train.tag_pretrain_epochs"] = args.tag_pretrain_epochs
    ds = load_dataset(_require_dir(args.data), cfg.model.M) if args.data else None
    d = out.create()
    echo_run(d, cfg, argv)
    rows = []
    for name, arm in arms.items():
        for seed in seeds:
            row = {"arm": name, **run_arm(cfg, arm, seed, ds, d / name / f"seed{seed}")}
            rows.append(row)
            log.info("%s seed %d: val CIDEr-D %.4f", name, seed, row["val_cider"])
    means = []
    for name in arms:
        sel = [r for r in rows if r["arm"] == name]
        mean = {"arm": name, "seed": "mean"}
        for k in ("val_cider", "test_bleu4", "test_cider"):
            vals = [r[k] for r in sel if r[k] is not None]
            mean[k] = float(np.mean(vals)) if vals else float("nan")
        means.append(mean)
    table = format_table(rows + means)
    (d / "ablation.tsv").write_text(table)
    (d / "ablation.json").write_text(json.dumps({"seeds": seeds, "arms": arms, "rows": rows, "means": means}, indent=1) + "\n")
    sys.stdout.write(table)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "tag-pretrain": lambda a, c, o, v: _train(a, c, o, v, ("tag",)),
    "pretrain": lambda a, c, o, v: _train(a, c, o, v, ("tag", "mle")),
    "rl-train": lambda a, c, o, v: _train(a, c, o, v, ("rl",)),
    "eval": cmd_eval,
    "caption": cmd_caption,
    "ablate": cmd_ablate,
}

KNOWN_ERRORS = (CliError, ConfigError, ContractError, CheckpointError, TrainingError, OSError, ValueError, KeyError)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out: OutputDir | None = None
    saved_dtype = T.get_default_dtype()
    try:
        cfg = resolve(args)
        out = OutputDir(args.out, required=args.command != "caption")
        if args.dry_run:
            if out.path is not None:
                echo_run(out.create(), cfg, argv)
            print(json.dumps(cfg.to_flat(), indent=2, sort_keys=True))
            return 0
        return HANDLERS[args.command](args, cfg, out, argv)
    except KNOWN_ERRORS as exc:
        if out is not None:
            out.cleanup()
        print(f"refinecap {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        if out is not None:
            out.cleanup()
        print(f"refinecap {args.command}: interrupted", file=sys.stderr)
        return 130
    finally:
        T.set_default_dtype(saved_dtype)


if __name__ == "__main__":
    sys.exit(main())
