"""Command-line entry point: gen-data, sft, train, eval, align-debug, sweep.

Exit codes: 0 success, 2 usage or config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import torch

from . import policy_model as pm
from .alignment import align, render_diff, truncate
from .task_env import TOKEN_NAMES, gen_coldstart, parse_tokens, read_jsonl, write_jsonl
from .trainer import (TrainConfig, Trainer, bootstrap_ci, config_hash, evaluate, pretrain_base, repair_probe,
                      stage1_sft, warm_start)

log = logging.getLogger("iopgspo")

EXIT_OK, EXIT_USAGE, EXIT_NAN = 0, 2, 3


class UsageError(Exception):
    pass


# -- config ------------------------------------------------------------------

def _parse_K(text: str) -> float:
    if text.lower() in ("inf", "infinity", "full"):
        return math.inf
    v = float(text)
    if v < 1:
        raise argparse.ArgumentTypeError("K must be >= 1 or 'inf'")
    return v


def add_config_flags(p: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field; unset flags do not override the config file."""
    p.add_argument("--config", help="JSON file with flat TrainConfig keys")
    g = p.add_argument_group("training config (flag > file > default)")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "K":
            g.add_argument("--K", type=_parse_K, default=argparse.SUPPRESS, help="truncation window (or 'inf')")
        elif f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, action="store_true", default=argparse.SUPPRESS)
        elif f.name == "method":
            g.add_argument(flag, choices=("iop", "gspo"), default=argparse.SUPPRESS)
        else:
            typ = {"int": int, "float": float, "str": str}.get(str(f.type), str)
            g.add_argument(flag, dest=f.name, type=typ, default=argparse.SUPPRESS)


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    values: dict = {}
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    values.update({k: v for k, v in vars(args).items() if k in names})
    try:
        return TrainConfig.from_dict(values)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def write_manifest(out_dir: Path, cfg: TrainConfig, started: float, paths: dict) -> dict:
    d = cfg.to_dict()
    manifest = {"config": d, "config_hash": config_hash(d), "paths": paths,
                "seeds": {"seed": cfg.seed, "base_seed": cfg.base_seed, "coldstart_seed": cfg.coldstart_seed,
                          "eval_seed": cfg.eval_seed},
                "started": started, "finished": time.time()}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _cache_dir(args) -> Path | None:
    return Path(args.cache_dir) if getattr(args, "cache_dir", None) else None


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {path}: {exc}") from None


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    data = gen_coldstart(args.seed, args.n, args.min_len, args.max_len, args.hack_fraction)
    try:
        n = write_jsonl(data, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {n} examples to {args.out}")
    return EXIT_OK


def cmd_sft(args) -> int:
    cfg = resolve_config(args)
    try:
        data = read_jsonl(args.data)
    except FileNotFoundError:
        raise UsageError(f"data file not found: {args.data}") from None
    if args.base:
        if not Path(args.base).exists():
            raise UsageError(f"checkpoint not found: {args.base}")
        model, _, _ = pm.load_checkpoint(args.base)
    else:
        model = pretrain_base(cfg)
    model, losses = stage1_sft(cfg, data, model, seed=cfg.coldstart_seed)
    out = Path(args.out)
    _ensure_dir(out.parent)
    pm.save_checkpoint(out, model, extra={"sft_first": losses[0], "sft_last": losses[-1]})
    rs = repair_probe(model, cfg.repair_probe_n, cfg.G_rep, cfg.eval_seed, max_len=cfg.max_len)
    print(f"sft loss {losses[0]:.4f} -> {losses[-1]:.4f}; held-out repair success {rs:.3f}; saved {out}")
    return EXIT_OK


def _run_train(cfg: TrainConfig, out_dir: Path, cache_dir: Path | None, init: str | None = None,
               resume: str | None = None, quiet: bool = False, skip_sft: bool = False) -> dict:
    started = time.time()
    _ensure_dir(out_dir)
    if resume:
        # the stored config wins so a resumed run matches the uninterrupted one
        tr = Trainer.resume(resume, out_dir)
        cfg = tr.cfg
    else:
        if init:
            model, _, _ = pm.load_checkpoint(init)
            if not skip_sft:
                data = gen_coldstart(cfg.coldstart_seed, cfg.coldstart_n, cfg.min_chain, cfg.max_chain,
                                     cfg.hack_fraction)
                model, _ = stage1_sft(cfg, data, model, seed=cfg.coldstart_seed)
        else:
            model = warm_start(cfg, cache_dir)
        tr = Trainer(cfg, model, pm.snapshot(model), out_dir)
        metrics = out_dir / "metrics.jsonl"
        if metrics.exists():
            metrics.unlink()

    def report(rec):
        if not quiet and rec.accuracy is not None:
            rs = "" if rec.repair_success is None else f" repair {rec.repair_success:.3f}"
            print(f"step {rec.step:4d} tokens {rec.tokens:9d} acc {rec.accuracy:.4f}{rs}", flush=True)

    tr.run(report)
    final = tr.evaluate(cfg.final_eval_samples)
    tr.save(out_dir / "final.ckpt")
    result = {"final_accuracy": final, "steps": tr.step, "tokens": tr.tokens}
    if cfg.method == "iop":
        result["repair_success"] = tr.probe_repair()
    (out_dir / "final.json").write_text(json.dumps(result, sort_keys=True) + "\n")
    write_manifest(out_dir, cfg, started, {"out_dir": str(out_dir), "metrics": str(out_dir / "metrics.jsonl"),
                                           "summary": str(out_dir / "summary.csv"),
                                           "checkpoint": str(out_dir / "final.ckpt")})
    return result


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.skip_sft and not args.init:
        raise UsageError("--skip-sft needs --init CHECKPOINT")
    for p in (args.init, args.resume):
        if p and not Path(p).exists():
            raise UsageError(f"checkpoint not found: {p}")
    res = _run_train(cfg, Path(args.out), _cache_dir(args), args.init, args.resume, skip_sft=args.skip_sft)
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.ckpt).exists():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    if args.n < 1 or args.k < 1:
        raise UsageError("--n and --k must be >= 1")
    model, _, _ = pm.load_checkpoint(args.ckpt)
    acc, per = evaluate(model, args.n, args.k, args.seed, args.temperature, args.max_len, args.min_len,
                        args.max_chain_len, per_problem=True)
    lo, hi = bootstrap_ci(per, seed=args.seed)
    print(f"avg@{args.k} {acc:.4f} 95% CI [{lo:.4f}, {hi:.4f}] over {args.n} problems")
    return EXIT_OK


def _read_seq(inline: str | None, path: str | None) -> list[int]:
    if path:
        try:
            inline = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc}") from None
    if inline is None:
        raise UsageError("need a sequence (inline or --*-file)")
    try:
        return parse_tokens(inline)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_align_debug(args) -> int:
    y = _read_seq(args.y, args.y_file)
    r = _read_seq(args.repair, args.repair_file)
    al = align(y, r)
    print(render_diff(y, r, al, TOKEN_NAMES))
    if al.distance == 0:
        print("0 edits")
        return EXIT_OK
    print(f"{al.distance} edits, normalized distance {al.normalized:.4f}")
    print("path: " + " ".join(f"{op.kind}({op.i},{op.j})" for op in al.ops))
    print("mask   m : " + "".join(str(int(v)) for v in al.mask))
    print("mask   m': " + "".join(str(int(v)) for v in al.mask_repair))
    gate = truncate(al, args.K)
    k = "inf" if math.isinf(args.K) else int(args.K)
    print(f"K={k} m : " + "".join(str(int(v)) for v in gate.mask))
    print(f"K={k} m': " + "".join(str(int(v)) for v in gate.mask_repair))
    return EXIT_OK


def _sweep_cell(job):
    cfg_dict, out_dir, cache_dir = job
    torch.set_num_threads(1)
    cfg = TrainConfig.from_dict(cfg_dict)
    return _run_train(cfg, Path(out_dir), Path(cache_dir) if cache_dir else None, quiet=True)


def _coerce(text: str, like):
    try:
        if isinstance(like, bool):
            return {"true": True, "1": True, "false": False, "0": False}[text.lower()]
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return math.inf if text.lower() == "inf" else float(text)
    except (KeyError, ValueError):
        raise UsageError(f"cannot read {text!r} as {type(like).__name__}") from None
    return text


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    if args.param not in names:
        raise UsageError(f"unknown sweep parameter: {args.param}")
    raw = [v.strip() for v in args.values.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    if not raw or not seeds:
        raise UsageError("need at least one value and one seed")
    root = Path(args.out)
    jobs, cells = [], []
    for v in raw:
        d = base.to_dict()
        d[args.param] = _coerce(v, getattr(base, args.param))
        for s in seeds:
            cell_dir = root / f"{args.param}={v}" / f"seed={s}"
            if cell_dir in {c[2] for c in cells} or (cell_dir / "metrics.jsonl").exists():
                raise UsageError(f"overlapping output directory {cell_dir}")
            d = {**d, "seed": s}
            try:
                TrainConfig.from_dict(d)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid value {v!r} for {args.param}: {exc}") from None
            cells.append((v, s, cell_dir))
            jobs.append((d, str(cell_dir), args.cache_dir))
    if args.parallel > 1:
        # warm start once up front so workers only read the cache
        warm_start(base, _cache_dir(args))
        with ProcessPoolExecutor(args.parallel) as ex:
            results = list(ex.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(j) for j in jobs]
    _ensure_dir(root)
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.param, "seed", "final_accuracy", "repair_success", "steps", "tokens"])
        for (v, s, _), res in zip(cells, results):
            rs = res.get("repair_success")
            w.writerow([v, s, f"{res['final_accuracy']:.6f}", "" if rs is None else f"{rs:.6f}",
                        res["steps"], res["tokens"]])
    print((root / "sweep.csv").read_text(), end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iopgspo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a cold-start repair JSONL file")
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--min-len", type=int, default=4)
    g.add_argument("--max-len", type=int, default=8)
    g.add_argument("--hack-fraction", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("sft", help="stage 1: fine-tune repair mode on a cold-start file")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--base", help="start from this checkpoint instead of pretraining a base")
    add_config_flags(s)
    s.set_defaults(func=cmd_sft)

    t = sub.add_parser("train", help="stage 2: IOP-GSPO or the GSPO baseline")
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="checkpoint to start from (stage 1 runs on top unless --skip-sft)")
    t.add_argument("--skip-sft", action="store_true", help="use --init as the stage-1 model")
    t.add_argument("--resume", help="trainer checkpoint to continue from")
    t.add_argument("--cache-dir")
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="avg@k accuracy with a bootstrap CI")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--n", type=int, default=200)
    e.add_argument("--k", type=int, default=32)
    e.add_argument("--seed", type=int, default=12345)
    e.add_argument("--temperature", type=float, default=1.0)
    e.add_argument("--max-len", type=int, default=24)
    e.add_argument("--min-len", type=int, default=4)
    e.add_argument("--max-chain-len", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("align-debug", help="show the edit path, masks and truncated gates")
    a.add_argument("y", nargs="?")
    a.add_argument("repair", nargs="?")
    a.add_argument("--y-file")
    a.add_argument("--repair-file")
    a.add_argument("--K", type=_parse_K, default=4.0)
    a.set_defaults(func=cmd_align_debug)

    w = sub.add_parser("sweep", help="run a grid over one config field")
    w.add_argument("--param", required=True)
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--seeds", default="0")
    w.add_argument("--out", required=True)
    w.add_argument("--parallel", type=int, default=1)
    w.add_argument("--cache-dir")
    add_config_flags(w)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get("IOPGSPO_THREADS", "1")))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pm.NonFiniteError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN


if __name__ == "__main__":
    sys.exit(main())
