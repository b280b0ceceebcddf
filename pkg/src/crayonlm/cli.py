"""``crayonlm`` command line: synth, pretrain, cpt, cit, probe, correlate, quantinspect.

Exit codes: 0 success, 2 configuration error, 3 training abort, 4 artifact error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .errors import ArgumentError, ArtifactError, ConfigError, TrainingAbort
from .evalkit import (
    LMAnswerer,
    category_stats,
    correlate,
    emit_report,
    probe_b2c,
    probe_c2b,
    probe_count,
    task_accuracy,
)
from .model import MultimodalLM
from .panoptic.vocab import class_id, class_name
from .scenes import load_split, save_split, synth_split
from .seeding import derive_seed, rng_for
from .train import pretrain_base, run_cit, run_cpt

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_ARTIFACT = 0, 2, 3, 4
_ABLATE = {"sem": "sem_query", "num": "num_query", "dual": "dual_qlora"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 already; keep the message format ours
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config file)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--ckpt", type=Path, help="input checkpoint")
    common.add_argument("--classes", help="comma-separated class names to report")
    common.add_argument("--ablate", action="append", choices=sorted(_ABLATE), default=[],
                        help="switch off a component (repeatable)")

    p = _Parser(prog="crayonlm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (
        ("synth", "generate the synthetic dataset tree"),
        ("pretrain", "warm up and quantize the stand-in base model"),
        ("cpt", "crayon prompt tuning (codebooks and connector only)"),
        ("cit", "instruction tuning with routed adapters (needs --ckpt)"),
        ("probe", "C2B/B2C probes and per-class report"),
        ("correlate", "probes plus regression of task accuracy on probe accuracy"),
        ("quantinspect", "per-layer NF4 statistics of a checkpoint"),
    ):
        sub.add_parser(name, parents=[common], help=helptext)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    over = {_ABLATE[a]: False for a in args.ablate}
    if args.seed is not None:
        over["seed"] = args.seed
    return cfg.with_overrides(**over) if over else cfg


def _classes(args, cfg: RunConfig) -> list[int]:
    if not args.classes:
        return list(cfg.thing_pool)
    try:
        return [class_id(n.strip()) for n in args.classes.split(",") if n.strip()]
    except KeyError as exc:
        raise ConfigError(f"unknown class name {exc}") from None


def _data_root(cfg: RunConfig) -> Path:
    return Path(cfg.data_dir)


def _log_to(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="ascii", newline="\n")


def _meta(cfg: RunConfig, stage: str) -> dict:
    return {"stage": stage, "run_config": cfg.dumps()}


# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    root = args.out
    scene = cfg.scene_config()
    for split, n in (("train", cfg.n_train), ("eval", cfg.n_eval)):
        save_split(synth_split(cfg.seed, split, n, scene), root, split)
    (root / "config.txt").write_text(cfg.dumps(), encoding="utf-8", newline="\n")
    print(f"wrote {cfg.n_train} train and {cfg.n_eval} eval scenes to {root}")
    return EXIT_OK


def _base_model(cfg: RunConfig, train) -> MultimodalLM:
    model = MultimodalLM(cfg.model_config(), rng_for(cfg.seed, "model-init"))
    pretrain_base(model, train, cfg.warmup_config())
    return model


def cmd_pretrain(cfg: RunConfig, args) -> int:
    train = load_split(_data_root(cfg), "train")
    model = _base_model(cfg, train)
    save_checkpoint(model, args.out / "base.cryn", _meta(cfg, "base"))
    print(f"wrote {args.out / 'base.cryn'}")
    return EXIT_OK


def cmd_cpt(cfg: RunConfig, args) -> int:
    train = load_split(_data_root(cfg), "train")
    if args.ckpt is not None:
        model = load_checkpoint(args.ckpt)
        if not model.is_quantized:
            raise ConfigError(f"{args.ckpt} is not a quantized base checkpoint")
    else:
        model = _base_model(cfg, train)
    with _log_to(args.out / "cpt_log.txt") as fh:
        run_cpt(model, train, cfg.cpt_config(), log_fh=fh)
    save_checkpoint(model, args.out / "cpt.cryn", _meta(cfg, "CPT"))
    print(f"wrote {args.out / 'cpt.cryn'}")
    return EXIT_OK


def cmd_cit(cfg: RunConfig, args) -> int:
    if args.ckpt is None:
        raise ConfigError("cit needs a CPT checkpoint: pass --ckpt PATH")
    model = load_checkpoint(args.ckpt)
    train = load_split(_data_root(cfg), "train")
    with _log_to(args.out / "cit_log.txt") as fh:
        run_cit(model, train, cfg.cit_config(), log_fh=fh)
    save_checkpoint(model, args.out / "cit.cryn", _meta(cfg, "CIT"))
    print(f"wrote {args.out / 'cit.cryn'}")
    return EXIT_OK


def _run_probes(cfg: RunConfig, args):
    if args.ckpt is None:
        raise ConfigError("probing needs a checkpoint: pass --ckpt PATH")
    model = load_checkpoint(args.ckpt)
    scenes = load_split(_data_root(cfg), cfg.probe_split)
    classes = _classes(args, cfg)
    ans = LMAnswerer(model)
    results = probe_c2b(ans, scenes, classes, seed=derive_seed(cfg.seed, "c2b-probes")) + probe_b2c(ans, scenes, classes)
    stats = category_stats(results, [class_name(c) for c in classes])
    tasks = task_accuracy(probe_count(ans, scenes, classes))
    return stats, tasks, results


def _print_means(stats) -> None:
    c2b = float(np.mean(list(stats.c2b.values()))) if stats.c2b else float("nan")
    b2c = float(np.mean(list(stats.b2c.values()))) if stats.b2c else float("nan")
    print(f"C2B mean: {c2b!r}")
    print(f"B2C mean: {b2c!r}")


def _write_results(results, path: Path) -> None:
    lines = [json.dumps(r.__dict__, sort_keys=True) for r in results]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def cmd_probe(cfg: RunConfig, args) -> int:
    stats, tasks, results = _run_probes(cfg, args)
    emit_report(stats, None, args.out, tasks)
    _write_results(results, args.out / "probes.jsonl")
    _print_means(stats)
    return EXIT_OK


def cmd_correlate(cfg: RunConfig, args) -> int:
    stats, tasks, results = _run_probes(cfg, args)
    reg = correlate(stats, tasks)
    emit_report(stats, reg, args.out, tasks)
    _write_results(results, args.out / "probes.jsonl")
    _print_means(stats)
    print(f"slope {reg.slope!r} intercept {reg.intercept!r} r {reg.r!r} n {reg.n}")
    return EXIT_OK


def cmd_quantinspect(cfg: RunConfig, args) -> int:
    if args.ckpt is None:
        raise ConfigError("quantinspect needs --ckpt PATH")
    contents = read_checkpoint(args.ckpt)
    if not contents.quantized:
        raise ArtifactError(f"{args.ckpt} has no quantized sections")
    stats = {e["name"]: e.get("stats") or {} for e in contents.manifest["quantized"]}
    print("layer shape numel blocks absmax_min absmax_mean absmax_max max_error bound")
    for name, q in contents.quantized.items():
        a = q.absmax()
        st = stats[name]
        print(f"{name} {'x'.join(map(str, q.shape))} {q.numel} {q.n_blocks} "
              f"{a.min():.6g} {a.mean():.6g} {a.max():.6g} "
              f"{st.get('max_error', float('nan')):.6g} {st.get('bound', float('nan')):.6g}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "cpt": cmd_cpt, "cit": cmd_cit,
    "probe": cmd_probe, "correlate": cmd_correlate, "quantinspect": cmd_quantinspect,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
