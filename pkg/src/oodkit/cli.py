"""Command-line experiment runner.

Subcommands: ``generate``, ``pretrain``, ``adapt``, ``evaluate``, plus
``report`` (tables and figures from existing metrics) and ``run`` (the whole
ablation chain).  Everything lives under one ``--out`` directory::

    data/<split>/            exported PNGs + manifest.jsonl
    data/aux/                task-unrelated backgrounds and distractors
    checkpoints/<variant>.npz
    ttt/<member>/            adapted A/B checkpoints, epoch log, pseudo-labels
    metrics/<row>.json       structured metrics (byte-stable)
    report/                  ablation table (.txt/.tsv), summary, figures

Failures exit nonzero after printing one JSON error record to stderr.
"""
import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import __version__
from . import config as cfgmod
from .augment.copypaste import BankEntry, ObjectBank
from .augment.pipeline import Resources
from .errors import ConfigError, ContaminationError, ContractViolation
from .imaging import load_png, save_png
from .infer import (SPLIT_ORDER, MetricsReport, adaptive_ensemble, evaluate, format_table,
                    predict_single, predict_tencrop)
from .synthbench import export, generate, import_images, import_set
from .train import ArchConfig, accuracy, load_checkpoint, pretrain, save_checkpoint
from .ttt import assign_noisy_labels, run_ttt

log = logging.getLogger("oodkit")

MODES = ("single", "tencrop", "ensemble")
EVAL_VARIANTS = cfgmod.VARIANTS + ("ttt",)
# ablation rows: (label, variant, mode)
CHAIN = (
    ("PLAIN", "plain", "single"),
    ("AUTO_CUTMIX", "auto_cutmix", "single"),
    ("STRONG", "strong", "single"),
    ("STRONG+TTT", "ttt", "single"),
    ("STRONG+TTT+TENCROP", "ttt", "tencrop"),
    ("ENSEMBLE", "ttt", "ensemble"),
)
EXIT_CONFIG, EXIT_INPUT, EXIT_CONTRACT, EXIT_OTHER = 2, 3, 4, 1


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT, field=None):
        super().__init__(message)
        self.code = code
        self.field = field


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, EXIT_CONFIG, field="argv")


# -- paths and small io helpers ---------------------------------------------------

def _p(out, *parts):
    return os.path.join(out, *parts)


def _write_json(path, doc):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise CliError(f"missing input {path}") from None


def _require(path, what):
    if not os.path.exists(path):
        raise CliError(f"{what} not found at {path}; run the earlier step first")
    return path


def member_name(seed_index, p):
    return f"s{seed_index}_p{int(round(p * 100)):03d}"


def _update_manifest(out, config, command, artifacts, seconds):
    path = _p(out, "run_manifest.json")
    doc = {"tool": "oodkit", "version": __version__, "artifacts": {}, "timings": {}}
    if os.path.exists(path):
        doc = _read_json(path)
    doc["config"] = config.to_doc()
    for key, rel in artifacts.items():
        if not os.path.exists(_p(out, rel)):
            raise ContractViolation(f"artifact {rel} missing at manifest write time")
        doc["artifacts"][key] = rel
    doc["timings"][command] = round(seconds, 3)
    _write_json(path, doc)


# -- generate -------------------------------------------------------------------

def cmd_generate(config, out):
    bench = generate(config.bench_spec())
    data = _p(out, "data")
    arts = {}
    splits = {"train": bench.train, "val": bench.val, **bench.test_splits()}
    for name, ds in splits.items():
        export(ds, _p(data, name))
        arts[f"data/{name}"] = f"data/{name}/manifest.jsonl"
    bg_dir = _p(data, "aux", "backgrounds")
    os.makedirs(bg_dir, exist_ok=True)
    names = []
    for i, bg in enumerate(bench.backgrounds):
        names.append(f"bg_{i:05d}.png")
        save_png(_p(bg_dir, names[-1]), bg)
    with open(_p(bg_dir, "index.json"), "w") as f:
        json.dump({"images": names}, f, indent=1)
    ObjectBank(tuple(bench.distractors), config.benchmark.num_classes).save(_p(data, "aux", "distractors"))
    arts["data/aux/backgrounds"] = "data/aux/backgrounds/index.json"
    arts["data/aux/distractors"] = "data/aux/distractors/index.json"
    return arts


def load_resources(out):
    bg_dir = _require(_p(out, "data", "aux", "backgrounds"), "background pool")
    with open(_p(bg_dir, "index.json")) as f:
        backgrounds = tuple(load_png(_p(bg_dir, n)) for n in json.load(f)["images"])
    bank = ObjectBank.load(_require(_p(out, "data", "aux", "distractors"), "distractor bank"))
    distractors = tuple(BankEntry(e.image, e.mask, None) for e in bank.unrelated)
    return Resources(backgrounds, distractors)


def _load_split(out, name):
    return import_set(_require(_p(out, "data", name), f"split {name!r}"))


# -- pretrain -------------------------------------------------------------------

def cmd_pretrain(config, out, variant):
    if variant not in cfgmod.VARIANTS:
        raise CliError(f"--variant must be one of {cfgmod.VARIANTS} for pretrain", EXIT_CONFIG, "--variant")
    train, val = _load_split(out, "train"), _load_split(out, "val")
    pipeline = config.augment[variant]
    resources = load_resources(out) if pipeline.needs_resources else Resources()
    rng = np.random.default_rng(config.seed_for("pretrain"))
    model, hist = pretrain(train, val, pipeline, config.train, rng, resources)
    ckpt = _p(out, "checkpoints", f"{variant}.npz")
    os.makedirs(os.path.dirname(ckpt), exist_ok=True)
    save_checkpoint(ckpt, model, epoch=hist.best_epoch,
                    extra={"variant": variant, "best_val": hist.best_val, "pipeline": pipeline.to_doc()})
    logp = _p(out, "logs", f"pretrain_{variant}.jsonl")
    os.makedirs(os.path.dirname(logp), exist_ok=True)
    with open(logp, "w") as f:
        for rec in hist.epochs:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return {f"checkpoint/{variant}": f"checkpoints/{variant}.npz", f"log/pretrain_{variant}": f"logs/pretrain_{variant}.jsonl"}


# -- adapt ----------------------------------------------------------------------

def load_test_images(out):
    """Concatenated test pixels in table order; label fields are never read."""
    return np.concatenate([import_images(_require(_p(out, "data", s), f"split {s!r}")) for s in SPLIT_ORDER])


def cmd_adapt(config, out, variant="strong"):
    if variant not in cfgmod.VARIANTS:
        raise CliError(f"--variant must name a pre-trained checkpoint {cfgmod.VARIANTS}", EXIT_CONFIG, "--variant")
    model, _, _ = load_checkpoint(_require(_p(out, "checkpoints", f"{variant}.npz"), f"{variant} checkpoint"))
    images = load_test_images(out)
    initial = assign_noisy_labels(model, images)
    arts = {}
    for seed_index, p in config.ensemble.members:
        name = member_name(seed_index, p)
        mdir = _p(out, "ttt", name)
        os.makedirs(mdir, exist_ok=True)
        tcfg = dataclasses.replace(config.ttt, p=p, p_b=None)
        traces = []

        def on_epoch(state, rec, traces=traces):
            traces.append(state.noisy_labels.copy())

        with open(_p(mdir, "ttt_log.jsonl"), "w") as logf:
            res = run_ttt(model, images, tcfg, config.seed_for("ttt-A", seed_index),
                          config.seed_for("ttt-B", seed_index), on_epoch=on_epoch, log_file=logf)
        np.save(_p(mdir, "pseudo_labels.npy"), np.stack([initial] + traces + [res.noisy_labels]))
        save_checkpoint(_p(mdir, "model_a.npz"), res.model_a, extra={"member": name, "source": variant})
        save_checkpoint(_p(mdir, "model_b.npz"), res.model_b, extra={"member": name, "source": variant})
        arts[f"ttt/{name}"] = f"ttt/{name}/ttt_log.jsonl"
    return arts


def load_member(out, name):
    mdir = _require(_p(out, "ttt", name), f"adapted member {name}")
    return [load_checkpoint(_p(mdir, f"model_{k}.npz"))[0] for k in ("a", "b")]


# -- evaluate -------------------------------------------------------------------

def _predict(models, images, mode):
    return predict_tencrop(models, images) if mode == "tencrop" else predict_single(models, images)


def cmd_evaluate(config, out, variant, mode):
    if variant not in EVAL_VARIANTS:
        raise CliError(f"--variant must be one of {EVAL_VARIANTS}", EXIT_CONFIG, "--variant")
    if mode not in MODES:
        raise CliError(f"--mode must be one of {MODES}", EXIT_CONFIG, "--mode")
    splits = {s: _load_split(out, s) for s in SPLIT_ORDER}
    truth = {s: ds.labels for s, ds in splits.items()}
    extra = {}
    members = [member_name(s, p) for s, p in config.ensemble.members]
    if mode == "ensemble":
        if variant != "ttt":
            raise CliError("ensemble mode combines adapted members; use --variant ttt", EXIT_CONFIG, "--variant")
        if len(members) < 2:
            raise CliError("ensemble mode needs >= 2 adapted members", EXIT_CONFIG, "ensemble.p_values")
        ens = config.ensemble
        models = [load_member(out, m) for m in members]
        preds, member_acc, routed = {}, {m: {} for m in members}, {}
        for s, ds in splits.items():
            probs = [predict_tencrop(mm, ds.images) for mm in models]
            res = adaptive_ensemble(probs, ens.anchor_index, ens.entropy_factor)
            preds[s] = res.labels
            routed[s] = res.ensemble_fraction
            for m, pr in zip(members, probs):
                member_acc[m][s] = float((pr.argmax(axis=1) == ds.labels).mean())
        report = evaluate(preds, truth, config.benchmark.num_classes)
        member_ood = {m: float(np.mean([a[s] for s in SPLIT_ORDER[1:]])) for m, a in member_acc.items()}
        extra = {"members": member_acc, "member_ood_avg": member_ood, "anchor": members[ens.anchor_index],
                 "ensemble_fraction": routed}
    else:
        if variant == "ttt":
            models = load_member(out, members[0])
            extra["member"] = members[0]
        else:
            models = load_checkpoint(_require(_p(out, "checkpoints", f"{variant}.npz"), f"{variant} checkpoint"))[0]
        preds = {s: _predict(models, ds.images, mode).argmax(axis=1) for s, ds in splits.items()}
        report = evaluate(preds, truth, config.benchmark.num_classes)
        if variant == "ttt":
            extra["pseudo_label_accuracy"] = pseudo_label_trace(out, members[0], truth)
    report.extra = extra
    rel = f"metrics/{variant}_{mode}.json"
    _write_json(_p(out, rel), report.to_doc())
    with open(_p(out, f"metrics/{variant}_{mode}.txt"), "w") as f:
        f.write(format_table([(f"{variant}/{mode}", report)]))
    return {f"metrics/{variant}_{mode}": rel}


def pseudo_label_trace(out, member, truth):
    path = _p(out, "ttt", member, "pseudo_labels.npy")
    if not os.path.exists(path):
        return []
    gt = np.concatenate([truth[s] for s in SPLIT_ORDER])
    return [round(float((row == gt).mean()), 6) for row in np.load(path)]


# -- report ---------------------------------------------------------------------

def _load_report(out, variant, mode):
    doc = _read_json(_p(out, "metrics", f"{variant}_{mode}.json"))
    return MetricsReport(doc["accuracy"], doc["confusion"], doc["counts"], doc.get("extra", {}))


def cmd_report(config, out):
    from . import plotting

    rows = [(label, _load_report(out, v, m)) for label, v, m in CHAIN
            if os.path.exists(_p(out, "metrics", f"{v}_{m}.json"))]
    if not rows:
        raise CliError("no metrics found; run evaluate first")
    rdir = _p(out, "report")
    fdir = _p(rdir, "figures")
    os.makedirs(fdir, exist_ok=True)
    table = format_table(rows)
    with open(_p(rdir, "ablation.txt"), "w") as f:
        f.write(table)
    with open(_p(rdir, "ablation.tsv"), "w") as f:
        f.write("\t".join(["method", *SPLIT_ORDER, "ood_avg"]) + "\n")
        for label, rep in rows:
            f.write("\t".join([label] + [f"{v:.6f}" for v in rep.row()]) + "\n")
    by = dict(rows)
    summary = {"rows": {label: {"accuracy": rep.accuracy, "ood_avg": rep.ood_avg} for label, rep in rows}}
    if "STRONG" in by and "STRONG+TTT" in by:
        before, after = by["STRONG"].accuracy["iid"], by["STRONG+TTT"].accuracy["iid"]
        delta = after - before
        sign = "degraded" if delta < 0 else ("improved" if delta > 0 else "unchanged")
        summary["iid_ttt"] = {"before": before, "after": after, "delta": delta, "sign": sign}
        log.info("IID accuracy %s after TTT: %.4f -> %.4f (%+.4f)", sign, before, after, delta)
    if "ENSEMBLE" in by:
        ex = by["ENSEMBLE"].extra
        summary["ensemble"] = {"ood_avg": by["ENSEMBLE"].ood_avg, "member_ood_avg": ex.get("member_ood_avg", {}),
                               "anchor": ex.get("anchor")}
    chain = [label for label, _, _ in CHAIN[:5] if label in by]
    summary["chain"] = chain
    summary["chain_ood"] = [by[label].ood_avg for label in chain]
    _write_json(_p(rdir, "summary.json"), summary)
    plotting.ablation_bars([(label, rep.accuracy, rep.ood_avg) for label, rep in rows], _p(fdir, "ablation.png"))
    plotting.ood_chain(chain, summary["chain_ood"], _p(fdir, "ood_chain.png"))
    histories = {}
    for v in cfgmod.VARIANTS:
        lp = _p(out, "logs", f"pretrain_{v}.jsonl")
        if os.path.exists(lp):
            with open(lp) as f:
                histories[v] = [json.loads(line) for line in f]
    if histories:
        plotting.pretrain_curves(histories, _p(fdir, "pretrain_val.png"))
    members = [member_name(s, p) for s, p in config.ensemble.members]
    tlog = _p(out, "ttt", members[0], "ttt_log.jsonl")
    if os.path.exists(tlog) and "STRONG+TTT" in by:
        with open(tlog) as f:
            hist = [json.loads(line) for line in f]
        plotting.ttt_traces(hist, by["STRONG+TTT"].extra.get("pseudo_label_accuracy", []), _p(fdir, "ttt_trace.png"))
    sys.stdout.write(table)
    if "iid_ttt" in summary:
        t = summary["iid_ttt"]
        sys.stdout.write(f"IID before/after TTT: {100 * t['before']:.2f} -> {100 * t['after']:.2f} ({t['sign']})\n")
    return {"report/ablation": "report/ablation.txt", "report/summary": "report/summary.json"}


# -- run (whole chain) ----------------------------------------------------------

def cmd_run(config, out):
    arts = {}
    arts.update(_timed(config, out, "generate", cmd_generate, config, out))
    for v in cfgmod.VARIANTS:
        arts.update(_timed(config, out, f"pretrain:{v}", cmd_pretrain, config, out, v))
    arts.update(_timed(config, out, "adapt", cmd_adapt, config, out, "strong"))
    seen = set()
    for _, v, m in CHAIN:
        if (v, m) not in seen:
            seen.add((v, m))
            arts.update(_timed(config, out, f"evaluate:{v}:{m}", cmd_evaluate, config, out, v, m))
    arts.update(_timed(config, out, "report", cmd_report, config, out))
    return arts


def _timed(config, out, name, fn, *args):
    t0 = time.perf_counter()
    arts = fn(*args)
    _update_manifest(out, config, name, arts, time.perf_counter() - t0)
    return arts


# -- entry point ----------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="oodkit", description="Desk-scale OOD pre-training and test-time adaptation.")
    parser.add_argument("--version", action="version", version=f"oodkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("generate", "render and export the synthetic benchmark"),
                        ("pretrain", "pre-train one variant"),
                        ("adapt", "test-time training of every ensemble member"),
                        ("evaluate", "metrics for one variant and inference mode"),
                        ("report", "ablation table, summary and figures"),
                        ("run", "the whole chain end to end")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None, help="JSON config (defaults if omitted)")
        sp.add_argument("--out", required=True, help="experiment directory")
        sp.add_argument("--seed", type=int, default=None, help="root seed override")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("pretrain", "adapt"):
            sp.add_argument("--variant", default="strong", choices=cfgmod.VARIANTS)
        if name == "evaluate":
            sp.add_argument("--variant", default="ttt", choices=EVAL_VARIANTS)
            sp.add_argument("--mode", default="single", choices=MODES)
    return parser


def _error_record(exc, command, code):
    rec = {"status": "error", "command": command, "type": type(exc).__name__, "message": str(exc),
           "exit_code": code}
    field = getattr(exc, "field", None)
    if field is not None:
        rec["field"] = field
    return json.dumps(rec, sort_keys=True)


def main(argv=None):
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = cfgmod.load(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative", field="--seed")
            config = cfgmod.with_seed(config, args.seed)
        os.makedirs(args.out, exist_ok=True)
        _write_json(_p(args.out, "config.json"), config.to_doc())
        if command == "run":
            cmd_run(config, args.out)
            return 0
        fn = {"generate": lambda: cmd_generate(config, args.out),
              "pretrain": lambda: cmd_pretrain(config, args.out, args.variant),
              "adapt": lambda: cmd_adapt(config, args.out, args.variant),
              "evaluate": lambda: cmd_evaluate(config, args.out, args.variant, args.mode),
              "report": lambda: cmd_report(config, args.out)}[command]
        label = command
        if command == "evaluate":
            label = f"evaluate:{args.variant}:{args.mode}"
        elif command == "pretrain":
            label = f"pretrain:{args.variant}"
        _timed(config, args.out, label, lambda: fn())
        return 0
    except SystemExit as exc:  # --help / --version
        return exc.code or 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error record
        code = _exit_code(exc)
        sys.stderr.write(_error_record(exc, command, code) + "\n")
        return code


def _exit_code(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (ContractViolation, ContaminationError)):
        return EXIT_CONTRACT
    if isinstance(exc, OSError):
        return EXIT_INPUT
    return EXIT_OTHER

if __name__ == "__main__":
    sys.exit(main())
