"""Command-line driver: ``mae-lab {synth,pretrain,finetune,ablate,report}``.

A run is described by one JSON file (see ``RunConfig``) whose sections map
onto the library's config objects; flags override individual values. The
resolved config is written to ``<out>/resolved_config.json`` by every command
except ``report``, which only reads.
Failures print a single JSON line to stderr and exit with a code from
``EXIT_CODES``.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import classifier, harness, mae, metrics, synth
from .classifier import FinetuneHyper
from .mae import MaeConfig
from .synth import SynthConfig
from .tensorgrad import NumericOverflowError, save_checkpoint
from .tensorgrad.checkpoint import CheckpointFormatError

EXIT_CODES = {"ok": 0, "internal": 1, "usage": 2, "config": 3, "missing_input": 4, "numeric": 5}

ABLATION_KEYS = ("seeds", "pretrain_epochs", "pretrain_seed", "cells", "baselines", "workers")


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    mae: MaeConfig = field(default_factory=MaeConfig)
    finetune: FinetuneHyper = field(default_factory=FinetuneHyper)
    ablation: dict = field(default_factory=dict)
    out: str = "runs/default"
    seed: int = 0
    manifest: str = None
    encoder: str = None

    def to_dict(self):
        d = asdict(self)
        d["ablation"] = dict(self.ablation)
        return d

    def ablation_spec(self):
        return harness.AblationSpec(synth=self.synth, mae=self.mae, finetune=self.finetune,
                                    master_seed=self.seed, **self.ablation)


def _build(cls, section, values):
    if not isinstance(values, dict):
        raise CliError("config", f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError("config", f"unknown keys in {section!r}: {', '.join(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**vals)
    except (TypeError, ValueError) as err:
        raise CliError("config", f"invalid {section!r}: {err}") from err


def load_run_config(path=None):
    raw = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError("missing_input", f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise CliError("config", f"config is not valid JSON: {err}") from err
        if not isinstance(raw, dict):
            raise CliError("config", "config root must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise CliError("config", f"unknown top-level keys: {', '.join(unknown)}")
    cfg = RunConfig(
        synth=_build(SynthConfig, "synth", raw.get("synth", {})),
        mae=_build(MaeConfig, "mae", raw.get("mae", {})),
        finetune=_build(FinetuneHyper, "finetune", raw.get("finetune", {})),
        ablation=dict(raw.get("ablation", {})),
        out=raw.get("out", RunConfig.out),
        seed=raw.get("seed", 0),
        manifest=raw.get("manifest"),
        encoder=raw.get("encoder"),
    )
    bad = sorted(set(cfg.ablation) - set(ABLATION_KEYS))
    if bad:
        raise CliError("config", f"unknown keys in 'ablation': {', '.join(bad)}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise CliError("config", "seed must be a non-negative integer")
    return cfg


def apply_overrides(cfg, args):
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise CliError("config", "--seed must fit in an unsigned 64-bit integer")
        cfg.seed = args.seed
        cfg.synth = replace(cfg.synth, seed=args.seed)
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "freeze_encoder", False):
        cfg.finetune = replace(cfg.finetune, freeze_encoder=True)
    if getattr(args, "manifest", None):
        cfg.manifest = args.manifest
    if getattr(args, "encoder", None):
        cfg.encoder = args.encoder
    if getattr(args, "cells", None):
        cfg.ablation["cells"] = [c.strip() for c in args.cells.split(",") if c.strip()]
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise CliError("config", "--seeds must be >= 1")
        cfg.ablation["seeds"] = list(range(args.seeds))
    if getattr(args, "epochs", None) is not None:
        cfg.ablation["pretrain_epochs"] = args.epochs
    try:
        cfg.synth.validate()
        cfg.ablation_spec()
    except (TypeError, ValueError) as err:
        raise CliError("config", str(err)) from err
    return cfg


def echo_config(cfg, command):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **cfg.to_dict()}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=list) + "\n")


def _need_file(path, what):
    if not path:
        raise CliError("missing_input", f"{what} not given")
    if not Path(path).exists():
        raise CliError("missing_input", f"{what} not found: {path}")
    return Path(path)


# --------------------------------------------------------------- commands

def cmd_synth(cfg, args):
    records, profiles = synth.generate_corpus(cfg.synth, cfg.out)
    print(f"wrote {len(records)} records from {len(profiles)} participants to {cfg.out}")


def cmd_pretrain(cfg, args):
    manifest = _need_file(cfg.manifest, "manifest")
    spec = cfg.ablation_spec()
    data = harness.load_dataset(manifest, cfg.mae)
    out = Path(cfg.out)
    model = mae.MaeModel.init(cfg.mae)
    with open(out / "pretrain_log.jsonl", "w", encoding="utf-8") as log_fh, \
            open(out / "mask_plans.jsonl", "w", encoding="utf-8") as plan_fh:
        model, history = mae.pretrain(model, data.corpus, cfg.mae, spec.pretrain_epochs,
                                      spec.pretrain_seed, log_fh, plan_fh)
    model.save(out / "encoder.tgck", prefix="enc.")
    model.save(out / "decoder.tgck", prefix="dec.")
    print(f"pretrained {spec.pretrain_epochs} epochs; final loss {history[-1]:.6f}" if history
          else "pretrained 0 epochs")


def _save_head(path, fitted):
    arrays = {k: v.data for k, v in fitted.head.params.items()}
    arrays["std.mean"] = fitted.standardizer.mean
    arrays["std.std"] = fitted.standardizer.std
    save_checkpoint(path, arrays)


def cmd_finetune(cfg, args):
    manifest = _need_file(cfg.manifest, "manifest")
    if args.random_init:
        encoder = mae.MaeModel.init(cfg.mae)
    else:
        encoder = mae.MaeModel.load(_need_file(cfg.encoder, "encoder checkpoint"), cfg.mae, encoder_only=True)
    data = harness.load_dataset(manifest, cfg.mae)
    if args.random_init:
        encoder.input_mean, encoder.input_std = mae.corpus_stats(data.corpus)
    split = harness.fixed_split(data.records, cfg.seed)
    pick = lambda recs: data.data.subset(data.indices_for(harness._participants(recs)))  # noqa: E731
    tr, va, te = pick(split.train), pick(split.val), pick(split.test)
    out = Path(cfg.out)
    with open(out / "finetune_history.jsonl", "w", encoding="utf-8") as fh:
        enc, head, hist, std = classifier.finetune(
            encoder, classifier.AttentionFfnn.init(classifier.head_input_dim(encoder, cfg.finetune), seed=cfg.seed),
            tr, va, cfg.finetune, cfg.seed, fh)
    fitted = classifier.FittedClassifier(enc, head, std, cfg.finetune, hist)
    report = fitted.evaluate(te, "finetuned")
    _save_head(out / "head.tgck", fitted)
    if not cfg.finetune.freeze_encoder:
        enc.save(out / "encoder_finetuned.tgck", prefix="enc.")
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics.COLUMNS)
        w.writerow(report.to_csv_row())
    (out / "metrics.json").write_text(json.dumps({**report.to_dict(), "split_hash": split.hash}, indent=1))
    print(f"test macro_f1 {report.macro_f1:.4f} macro_auc {report.macro_auc:.4f}")


def cmd_ablate(cfg, args):
    spec = cfg.ablation_spec()
    text = harness.run_ablation(spec, cfg.out, cfg.manifest)
    sys.stdout.write(text)


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def loss_curves(run_dir):
    """``[(series, epoch, loss)]`` from every pre-training log under ``run_dir``."""
    run = Path(run_dir)
    rows = []
    logs = sorted(run.glob("pretrain_log.jsonl")) + sorted(run.glob("cells/*/pretrain_log.jsonl"))
    for p in logs:
        series = p.parent.name if p.parent != run else "pretrain"
        rows += [(series, int(r["epoch"]), float(r["loss"])) for r in _read_jsonl(p)]
    hist = run / "finetune_history.jsonl"
    if hist.exists():
        rows += [("finetune", int(r["epoch"]), float(r["train_loss"])) for r in _read_jsonl(hist)]
    return rows


def cmd_report(cfg, args):
    run = Path(args.run or cfg.out)
    if not run.is_dir():
        raise CliError("missing_input", f"run directory not found: {run}")
    rows = loss_curves(run)
    table = run / "ablation.csv"
    met = run / "metrics.csv"
    if not rows and not table.exists() and not met.exists():
        raise CliError("missing_input", f"no run logs in {run}")
    with open(run / "loss_curve.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("series", "epoch", "loss"))
        for series, epoch, loss in rows:
            w.writerow((series, epoch, f"{loss:.6f}"))
    for path in (table, met):
        if path.exists():
            print(format_table(list(csv.reader(path.open(encoding="utf-8")))))
    if rows:
        last = {}
        for series, epoch, loss in rows:
            last[series] = (epoch, loss)
        for series, (epoch, loss) in last.items():
            print(f"{series}: epoch {epoch} loss {loss:.4f}")
    print(f"loss curve data: {run / 'loss_curve.csv'}")


def format_table(rows):
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "ablate": cmd_ablate, "report": cmd_report}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="master seed (also the corpus seed)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="mae-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    sp = sub.add_parser("pretrain", parents=[common], help="masked-reconstruction pre-training")
    sp.add_argument("--manifest")
    sp.add_argument("--epochs", type=int)
    sp = sub.add_parser("finetune", parents=[common], help="fine-tune encoder + classifier head")
    sp.add_argument("--manifest")
    sp.add_argument("--encoder", help="encoder TGCK checkpoint")
    sp.add_argument("--random-init", action="store_true", help="use an untrained encoder")
    sp.add_argument("--freeze-encoder", action="store_true")
    sp = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    sp.add_argument("--manifest")
    sp.add_argument("--cells", help="comma-separated cell names")
    sp.add_argument("--seeds", type=int, help="number of fine-tuning seeds")
    sp.add_argument("--epochs", type=int, help="pre-training epochs per cell")
    sp.add_argument("--freeze-encoder", action="store_true")
    sp = sub.add_parser("report", parents=[common], help="summarize a run directory")
    sp.add_argument("run", nargs="?", help="run directory (default: --out)")
    return p


def _fail(kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    return EXIT_CODES[kind]


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = apply_overrides(load_run_config(args.config), args)
        if args.command != "report":
            echo_config(cfg, args.command)
        COMMANDS[args.command](cfg, args)
    except CliError as err:
        return _fail(err.kind, err)
    except NumericOverflowError as err:
        return _fail("numeric", err)
    except (FileNotFoundError, CheckpointFormatError) as err:
        return _fail("missing_input", err)
    except Exception as err:  # noqa: BLE001 - last-resort one-line report
        return _fail("internal", f"{type(err).__name__}: {err}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
