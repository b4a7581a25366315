"""Command-line experiment harness.

Commands: gen-data, train, eval, ablate, sweep, diagnose. Configuration
is flat INI; every key can be overridden from the command line, and every
run writes the fully resolved config to its output directory so the run
can be reproduced from that snapshot alone.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .data import (
    SyntheticSpec,
    load_checkpoint,
    save_checkpoint,
    save_dataset,
)
from .diagnostics import confidence_report, disentanglement_report, evaluate
from .objectives import PseudoLabelConfig, PseudoRefresh
from .prompts import PromptBank, PromptConfig, PromptMode
from .tasks import Task, build_mlp_task, build_oracle_task
from .trainer import TrainConfig, train

DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "kind": "oracle",
        "k": "4",
        "ns": "400",
        "nu": "400",
        "input_dim": "16",
        "class_separation": "4.0",
        "noise_std": "0.5",
        "rotation_deg": "30.0",
        "translation": "",
        "shift_noise_std": "0.0",
        "anchor": "class_token",
    },
    "encoders": {
        "embed_dim": "16",
    },
    "prompt": {
        "mode": "UNIFIED_DSC",
        "m1": "16",
        "m2": "16",
        "init_std": "0.02",
    },
    "head": {
        "temperature": "0.1",
    },
    "pseudo": {
        "tau": "0.6",
        "refresh": "once",
    },
    "train": {
        "epochs": "30",
        "batch_size": "32",
        "lr0": "0.003",
        "seed": "0",
        "eval_mode": "target_only",
    },
}

# command-line override -> (section, key)
FLAG_MAP = {
    "seed": ("train", "seed"),
    "tau": ("pseudo", "tau"),
    "m1": ("prompt", "m1"),
    "m2": ("prompt", "m2"),
    "mode": ("prompt", "mode"),
    "temp": ("head", "temperature"),
    "epochs": ("train", "epochs"),
    "lr0": ("train", "lr0"),
}


class CliError(Exception):
    pass


def load_config(path: str | None, overrides: dict[str, str], sets: list[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path is not None:
        if not Path(path).exists():
            raise CliError(f"config file not found: {path}")
        cp.read(path)
    for flag, value in overrides.items():
        sec, key = FLAG_MAP[flag]
        cp.set(sec, key, value)
    for item in sets:
        try:
            dotted, value = item.split("=", 1)
            sec, key = dotted.split(".", 1)
        except ValueError as e:
            raise CliError(f"bad --set {item!r}; expected section.key=value") from e
        if not cp.has_section(sec):
            raise CliError(f"unknown config section {sec!r}")
        cp.set(sec, key, value)
    return cp


def write_resolved(cp: configparser.ConfigParser, out: Path) -> None:
    with open(out / "resolved.ini", "w") as f:
        cp.write(f)


def build_task(cp: configparser.ConfigParser, seed: int | None = None) -> Task:
    d = cp["data"]
    translation = None
    if d.get("translation", "").strip():
        vals = [float(v) for v in d["translation"].split(",")]
        translation = tuple(vals)
    spec = SyntheticSpec(
        k=d.getint("k"),
        ns=d.getint("ns"),
        nu=d.getint("nu"),
        input_dim=d.getint("input_dim"),
        class_separation=d.getfloat("class_separation"),
        noise_std=d.getfloat("noise_std"),
        rotation_deg=d.getfloat("rotation_deg"),
        translation=translation,
        shift_noise_std=d.getfloat("shift_noise_std"),
        seed=cp["train"].getint("seed") if seed is None else seed,
    )
    embed_dim = cp["encoders"].getint("embed_dim")
    if d["kind"] == "oracle":
        return build_oracle_task(spec, embed_dim=embed_dim, anchor=d["anchor"])
    if d["kind"] == "mlp":
        return build_mlp_task(spec, embed_dim=embed_dim)
    raise CliError(f"unknown data kind {d['kind']!r}")


def build_train_config(cp: configparser.ConfigParser, mode: str | None = None,
                       m1: int | None = None, m2: int | None = None,
                       seed: int | None = None, tau: float | None = None) -> TrainConfig:
    p, t, h, ps = cp["prompt"], cp["train"], cp["head"], cp["pseudo"]
    pmode = PromptMode(mode if mode is not None else p["mode"])
    cm1 = m1 if m1 is not None else p.getint("m1")
    cm2 = m2 if m2 is not None else p.getint("m2")
    if pmode is PromptMode.MANUAL:
        cm1 = cm2 = 0
    elif pmode in (PromptMode.UNIFIED, PromptMode.CLASS_SPECIFIC):
        cm2 = 0
    prompt_cfg = PromptConfig(
        mode=pmode,
        m1=cm1,
        m2=cm2,
        k=cp["data"].getint("k"),
        embed_dim=cp["encoders"].getint("embed_dim"),
        init_std=p.getfloat("init_std"),
    )
    return TrainConfig(
        epochs=t.getint("epochs"),
        batch_size=t.getint("batch_size"),
        lr0=t.getfloat("lr0"),
        seed=t.getint("seed") if seed is None else seed,
        temperature=h.getfloat("temperature"),
        prompt_cfg=prompt_cfg,
        pseudo_cfg=PseudoLabelConfig(
            tau=ps.getfloat("tau") if tau is None else tau,
            refresh=PseudoRefresh(ps["refresh"]),
        ),
        eval_mode=t["eval_mode"],
    )


def run_single(cp: configparser.ConfigParser, mode: str | None = None,
               m1: int | None = None, m2: int | None = None,
               seed: int | None = None, tau: float | None = None):
    """Train one variant; returns (task, train config, result or bank, accuracy)."""
    tcfg = build_train_config(cp, mode=mode, m1=m1, m2=m2, seed=seed, tau=tau)
    task = build_task(cp, seed=tcfg.seed)
    tgt_feats = task.image_enc.encode(task.target.inputs_tensor())
    tgt_labels = torch.from_numpy(task.target.hidden_labels).to(torch.long)
    if tcfg.prompt_cfg.mode is PromptMode.MANUAL:
        bank = PromptBank.from_table(
            tcfg.prompt_cfg, task.table, task.source.class_names, tcfg.seed
        )
        result = None
    else:
        result = train(
            tcfg, task.source, task.target, task.image_enc, task.text_enc,
            task.table, eval_target=task.target,
        )
        bank = result.bank
    ev = evaluate(bank, task.text_enc, tgt_feats, tgt_labels,
                  tcfg.temperature, mode=tcfg.eval_mode)
    return task, tcfg, result, bank, ev


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_metrics(result, out: Path) -> None:
    with open(out / "metrics.jsonl", "w") as f:
        for m in result.metrics:
            f.write(json.dumps({
                "epoch": m.epoch, "ls": repr(m.ls), "lu": repr(m.lu),
                "target_accuracy": repr(m.target_accuracy), "lr": repr(m.lr),
            }) + "\n")


def cmd_gen_data(args, cp) -> int:
    out = _outdir(args)
    write_resolved(cp, out)
    task = build_task(cp)
    save_dataset(task.source, out / "source.txt")
    save_dataset(task.target, out / "target.txt")
    print(f"wrote {out / 'source.txt'} ({len(task.source)} samples)")
    print(f"wrote {out / 'target.txt'} ({len(task.target)} samples)")
    return 0


def cmd_train(args, cp) -> int:
    out = _outdir(args)
    write_resolved(cp, out)
    task, tcfg, result, bank, ev = run_single(cp)
    if result is not None:
        _write_metrics(result, out)
        with open(out / "pseudo_labels.txt", "w") as f:
            f.write(result.pseudo.to_text())
    save_checkpoint(bank, out / "checkpoint.txt")
    summary = {
        "mode": tcfg.prompt_cfg.mode.value,
        "seed": tcfg.seed,
        "target_accuracy_micro": repr(ev.micro),
        "target_accuracy_macro": repr(ev.macro),
        "per_class": [repr(a) for a in ev.per_class],
        "diverged": bool(result.diverged) if result is not None else False,
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    print(f"{tcfg.prompt_cfg.mode.value} seed {tcfg.seed}: "
          f"target accuracy {ev.micro * 100:.2f}%")
    return 0


def cmd_eval(args, cp) -> int:
    out = _outdir(args)
    write_resolved(cp, out)
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    bank, _ = load_checkpoint(args.checkpoint)
    tcfg = build_train_config(cp)
    task = build_task(cp, seed=tcfg.seed)
    tgt_feats = task.image_enc.encode(task.target.inputs_tensor())
    tgt_labels = torch.from_numpy(task.target.hidden_labels).to(torch.long)
    ev = evaluate(bank, task.text_enc, tgt_feats, tgt_labels,
                  tcfg.temperature, mode=tcfg.eval_mode)
    payload = {
        "target_accuracy_micro": repr(ev.micro),
        "target_accuracy_macro": repr(ev.macro),
        "per_class": [repr(a) for a in ev.per_class],
    }
    with open(out / "eval.json", "w") as f:
        json.dump(payload, f, indent=2)
    print(f"target accuracy {ev.micro * 100:.2f}% (macro {ev.macro * 100:.2f}%)")
    return 0


ABLATION_VARIANTS = [
    ("Manual", "MANUAL"),
    ("Unified", "UNIFIED"),
    ("Class-specific", "CLASS_SPECIFIC"),
    ("Unified+DSC", "UNIFIED_DSC"),
    ("Class-specific+DSC", "CLASS_SPECIFIC_DSC"),
]


def cmd_ablate(args, cp) -> int:
    out = _outdir(args)
    write_resolved(cp, out)
    seeds = _seed_list(args, cp)
    rows = []
    baseline = None
    for name, mode in ABLATION_VARIANTS:
        accs, failed = [], False
        for s in seeds:
            try:
                *_, ev = run_single(cp, mode=mode, seed=s)
                accs.append(ev.micro)
            except FloatingPointError:
                failed = True
        mean = float(np.mean(accs)) if accs else float("nan")
        if name == "Manual":
            baseline = mean
        rows.append({
            "variant": name,
            "mode": mode,
            "mean_accuracy": repr(mean),
            "per_seed": [repr(a) for a in accs],
            "delta_vs_manual": repr(mean - baseline),
            "failed": failed,
        })
    _emit_table(out, "ablation", rows,
                cols=("variant", "mean_accuracy", "delta_vs_manual", "failed"))
    return 0


def cmd_sweep(args, cp) -> int:
    out = _outdir(args)
    write_resolved(cp, out)
    seeds = _seed_list(args, cp)
    rows = []
    if args.kind == "tokens":
        pairs = [tuple(int(v) for v in p.split(",")) for p in args.pairs.split(";")]
        for m1, m2 in pairs:
            accs = [run_single(cp, m1=m1, m2=m2, seed=s)[-1].micro for s in seeds]
            rows.append({
                "m1": m1, "m2": m2,
                "mean_accuracy": repr(float(np.mean(accs))),
                "per_seed": [repr(a) for a in accs],
            })
        _emit_table(out, "sweep_tokens", rows, cols=("m1", "m2", "mean_accuracy"))
    elif args.kind == "threshold":
        taus = [float(v) for v in args.taus.split(",")]
        for tau in taus:
            accs, counts = [], []
            for s in seeds:
                task, tcfg, result, bank, ev = run_single(cp, seed=s, tau=tau)
                accs.append(ev.micro)
                counts.append(result.pseudo.accepted_count if result else 0)
            rows.append({
                "tau": repr(tau),
                "mean_accuracy": repr(float(np.mean(accs))),
                "mean_accepted": repr(float(np.mean(counts))),
                "per_seed": [repr(a) for a in accs],
            })
        _emit_table(out, "sweep_threshold", rows,
                    cols=("tau", "mean_accuracy", "mean_accepted"))
    else:
        raise CliError(f"unknown sweep kind {args.kind!r}")
    return 0


def cmd_diagnose(args, cp) -> int:
    out = _outdir(args)
    write_resolved(cp, out)
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    bank, bank_cfg = load_checkpoint(args.checkpoint)
    tcfg = build_train_config(cp)
    task = build_task(cp, seed=tcfg.seed)
    # held-out probes: same prototypes, fresh noise
    probe_spec = replace(task.spec, seed=task.spec.seed + 1000,
                         ns=max(task.spec.k * 25, 100), nu=max(task.spec.k * 25, 100))
    from .data import generate_synthetic_task, _gram_schmidt
    from .tasks import _anchors
    anchors = _anchors(cp["data"]["anchor"], task.table, task.text_enc,
                       task.source.class_names) if cp["data"]["kind"] == "oracle" else None
    ps, pt = generate_synthetic_task(probe_spec, anchors=anchors)
    feats = torch.cat([
        task.image_enc.encode(ps.inputs_tensor()),
        task.image_enc.encode(pt.inputs_tensor()),
    ])
    doms = torch.cat([
        torch.zeros(len(ps), dtype=torch.long),
        torch.ones(len(pt), dtype=torch.long),
    ])
    cls = torch.cat([
        torch.from_numpy(ps.labels),
        torch.from_numpy(pt.hidden_labels),
    ])
    rep = disentanglement_report(bank, task.text_enc, feats, doms, cls)
    manual_cfg = PromptConfig(PromptMode.MANUAL, 0, 0, bank_cfg.k, bank_cfg.embed_dim)
    manual_bank = PromptBank.from_table(manual_cfg, task.table,
                                        task.source.class_names, tcfg.seed)
    conf = confidence_report(
        {"manual": manual_bank, "checkpoint": bank},
        task.text_enc, feats, cls, tcfg.temperature,
    )
    payload = {
        "dominance_fraction": repr(rep.dominance_fraction),
        "mean_positive_margin": repr(float(rep.positive_margins.mean())),
        "mean_confidence": {k: repr(v) for k, v in conf.mean_confidence().items()},
    }
    with open(out / "diagnostics.json", "w") as f:
        json.dump(payload, f, indent=2)
    print(f"positive-pair dominance: {rep.dominance_fraction * 100:.1f}%")
    for name, v in conf.mean_confidence().items():
        print(f"mean ground-truth confidence [{name}]: {v:.4f}")
    if args.plots:
        _maybe_plot_confidence(conf, out)
    return 0


def _maybe_plot_confidence(conf, out: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("plotting backend unavailable; skipping plots", file=sys.stderr)
        return
    n = min(conf.confidences.shape[1], 10)
    x = np.arange(n)
    width = 0.8 / len(conf.variant_names)
    fig, ax = plt.subplots(figsize=(8, 3))
    for i, name in enumerate(conf.variant_names):
        ax.bar(x + i * width, conf.confidences[i, :n].numpy(), width, label=name)
    ax.set_xlabel("image")
    ax.set_ylabel("ground-truth confidence")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "confidence.png", dpi=120)
    plt.close(fig)


def _seed_list(args, cp) -> list[int]:
    base = cp["train"].getint("seed")
    n = getattr(args, "seeds", 1) or 1
    return list(range(base, base + n))


def _emit_table(out: Path, name: str, rows: list[dict], cols: tuple[str, ...]) -> None:
    with open(out / f"{name}.json", "w") as f:
        json.dump(rows, f, indent=2)
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    text = "\n".join(lines)
    with open(out / f"{name}.txt", "w") as f:
        f.write(text + "\n")
    print(text)


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("DAPLKIT_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))

    parser = argparse.ArgumentParser(prog="daplkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--set", action="append", default=[],
                       help="override any key: section.key=value")
        for flag in FLAG_MAP:
            p.add_argument(f"--{flag}")
        p.add_argument("--plots", action="store_true")

    for name in ("gen-data", "train", "eval", "ablate", "sweep", "diagnose"):
        p = sub.add_parser(name)
        common(p)
        if name in ("ablate", "sweep"):
            p.add_argument("--seeds", type=int, default=5)
        if name == "sweep":
            p.add_argument("--kind", choices=("tokens", "threshold"), required=True)
            p.add_argument("--pairs", default="4,28;8,24;16,16;24,8;28,4")
            p.add_argument("--taus", default="0.0,0.4,0.5,0.6,0.7,1.0")
        if name in ("eval", "diagnose"):
            p.add_argument("--checkpoint", default=None)

    args = parser.parse_args(argv)
    overrides = {f: getattr(args, f) for f in FLAG_MAP if getattr(args, f) is not None}
    try:
        cp = load_config(args.config, overrides, args.set)
        handler = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "ablate": cmd_ablate,
            "sweep": cmd_sweep,
            "diagnose": cmd_diagnose,
        }[args.command]
        return handler(args, cp)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
