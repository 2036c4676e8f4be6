"""Command line entry point: ``hybridssm <command> ...`` (or ``python3 -m hybridssm``)."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

log = logging.getLogger("hybridssm")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _csv_out(path):
    return sys.stdout if path in (None, "-") else open(path, "w", newline="")


# -- train ---------------------------------------------------------------------------------------
def cmd_train(args) -> int:
    from .data import build_synthetic_corpus, load_corpus
    from .train import TrainConfig, Trainer, TrainingAborted

    cfg = TrainConfig.from_dict(_read_json(args.config)) if args.config else TrainConfig()
    if args.corpus:
        cfg.corpus_dir = args.corpus
    if args.out:
        cfg.out_dir = args.out
    if args.steps is not None:
        cfg.steps = args.steps
    if args.seed is not None:
        cfg.model = replace(cfg.model, seed=args.seed)
    if cfg.corpus_dir is None:
        raise SystemExit("no corpus: pass --corpus or set corpus_dir (build one with `hybridssm pack`)")
    if args.synthetic and not Path(cfg.corpus_dir).exists():
        build_synthetic_corpus(cfg.corpus_dir, args.synthetic, seed=cfg.model.seed)
    sources = load_corpus(cfg.corpus_dir)
    if args.resume:
        tr = Trainer.resume(args.resume, sources, cfg)
        steps = max(0, cfg.steps - tr.step)
    else:
        tr = Trainer(cfg, sources)
        steps = cfg.steps
    show = lambda r: log.info("step %d  tokens %d  loss %.4f  eta %.3g  b %d%s", r["step"], r["tokens"], r["loss"],
                              r["eta"], r["batch"], "  (skipped)" if r["skipped"] else "")
    try:
        tr.run(steps, log=show)
    except TrainingAborted as e:
        log.error("%s", e)
        return 2
    if cfg.out_dir:
        tr.save(Path(cfg.out_dir) / "final")
    return 0


# -- verify --------------------------------------------------------------------------------------
def cmd_verify(args) -> int:
    from .verify import ALL_CHECKS

    names = args.only or [n for n in ALL_CHECKS if n != "training" or not args.skip_training]
    unknown = set(names) - set(ALL_CHECKS)
    if unknown:
        raise SystemExit(f"unknown checks {sorted(unknown)}; choose from {sorted(ALL_CHECKS)}")
    failed = 0
    for n in names:
        r = ALL_CHECKS[n]()
        print(r.line(), flush=True)
        failed += not r.passed
    print(f"{len(names) - failed}/{len(names)} checks passed")
    return 1 if failed else 0


# -- sweep ---------------------------------------------------------------------------------------
def _mults_sidecar(stage: Path) -> Path:
    return stage.with_suffix(".mults.json")


def cmd_sweep(args) -> int:
    """Run one tuner stage: read the previous stage (if any), write records and the moved multiplier set."""
    from .mup import MuPMultiplierSet, SweepRecord, apply_records, tune_stage, tuning_schedule
    from .train import TrainConfig, Trainer
    from .data import load_corpus

    stage_idx = 0
    if args.stage:
        side = _read_json(_mults_sidecar(Path(args.stage)))
        current = MuPMultiplierSet.from_dict(side["mults"])
        stage_idx = side["stage"] + 1
        records = [SweepRecord.from_json(l) for l in Path(args.stage).read_text().splitlines() if l.strip()]
        if side.get("applied") is False:
            current = apply_records(current, records)
    elif args.mults:
        current = MuPMultiplierSet.from_dict(_read_json(args.mults))
    else:
        current = MuPMultiplierSet.table13()
    p = args.p or tuning_schedule(stage_idx + 1, args.coarse_stages)[stage_idx]
    coords = [tuple(c.split(":", 1)) for c in args.coords.split(",")] if args.coords else None

    if args.oracle == "bowl":
        from .verify import bowl_oracle
        centers = {k: float(v) for k, v in (c.split("=") for c in args.centers.split(","))}
        oracle = bowl_oracle(centers)
        coords = coords or [("forward", k) for k in centers]
    else:
        cfg = TrainConfig.from_dict(_read_json(args.config)) if args.config else TrainConfig()
        if args.corpus:
            cfg.corpus_dir = args.corpus
        sources = load_corpus(cfg.corpus_dir)

        def oracle(m):
            tr = Trainer(replace(cfg, mults=m, out_dir=None), sources)
            hist = tr.run(args.steps)
            tail = [h["loss"] for h in hist[-max(1, args.steps // 10):]]
            return float(np.mean(tail))

    nxt, records = tune_stage(current, p, oracle, coords, args.tol)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(r.to_json() + "\n" for r in records))
    _mults_sidecar(out).write_text(json.dumps({"stage": stage_idx, "p": p, "applied": True,
                                               "mults": nxt.to_dict()}, indent=1, sort_keys=True))
    moved = sum(1 for r in records if r.step)
    log.info("stage %d (p=%.4g): %d coordinates, %d moved -> %s", stage_idx, p, len(records), moved, out)
    return 0


# -- stability -----------------------------------------------------------------------------------
def cmd_stability(args) -> int:
    from . import stability as st

    obj = st.WriteForgetObjective(span=args.span, a_target=args.a_target)
    etas = np.linspace(args.eta_min, args.eta_max, args.n_eta)
    alphas = [float(a) for a in args.alphas.split(",")]
    H = obj.hessian()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    radius = st.eigen_scan(H, etas, alphas)
    with open(out / "eigen_scan.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["eta", *[f"alpha={a:g}" for a in alphas]])
        for e, row in zip(etas, radius):
            w.writerow([f"{e:.6g}", *[f"{r:.10g}" for r in row]])
    eta_star = st.critical_eta(H, etas)
    eta = args.eta if args.eta is not None else eta_star
    summary = {"hessian": H.tolist(), "eta_star": eta_star, "eta": eta}
    if eta is None:
        raise SystemExit("no instability on the eta grid; widen --eta-max or pass --eta")
    summary["alpha_critical"] = st.critical_alpha(obj, eta)
    with open(out / "trajectory.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["alpha", "step", "dt_raw", "A_log", "loss"])
        ratios = {}
        for a in alphas:
            tr = st.simulate_write_forget(replace(obj, alpha=a), args.steps, eta, noise=args.noise, seed=args.seed)
            ratios[f"{a:g}"] = tr.amplitude_ratio
            for k in range(len(tr.loss)):
                w.writerow([f"{a:g}", k, f"{tr.dt_raw[k]:.10g}", f"{tr.A_log[k]:.10g}", f"{tr.loss[k]:.10g}"])
    summary["amplitude_ratio"] = ratios
    print(json.dumps(summary, indent=1))
    return 0


# -- toy -----------------------------------------------------------------------------------------
def cmd_toy(args) -> int:
    from .dynamics import ToyModelSpec, toy_simulate, toy_stationary_moments

    spec = ToyModelSpec(h=args.h, x_star=args.x_star, sigma=args.sigma, eta=args.eta, lam=args.lam,
                        T=args.steps, seed=args.seed)
    exact = toy_stationary_moments(spec)
    sims = [toy_simulate(replace(spec, seed=args.seed + i)) for i in range(args.seeds)]
    m1 = np.array([s.mean for s in sims])
    m2 = np.array([s.second_moment for s in sims])
    res = {"spec": asdict(spec), "exact": exact._asdict(),
           "simulated": {"mean": float(m1.mean()), "second_moment": float(m2.mean())}}
    if args.seeds > 1:
        res["simulated"]["mean_se"] = float(m1.std(ddof=1) / math.sqrt(args.seeds))
        res["simulated"]["second_moment_se"] = float(m2.std(ddof=1) / math.sqrt(args.seeds))
    print(json.dumps(res, indent=1))
    return 0


# -- schedule ------------------------------------------------------------------------------------
def cmd_schedule(args) -> int:
    from .dynamics import ScheduleSpec, elr_ewd, schedule_at

    spec = ScheduleSpec.from_dict(_read_json(args.spec))
    f = _csv_out(args.out)
    try:
        w = csv.writer(f)
        w.writerow(["tokens", "η", "λ", "b", "η_eff", "λ_eff"])
        for t in np.linspace(0.0, args.until, args.points):
            eta, lam, b = schedule_at(float(t), spec)
            e_eff, l_eff = elr_ewd(eta, lam) if eta > 0 else (0.0, math.inf)
            w.writerow([f"{t:.0f}", f"{eta:.10g}", f"{lam:.10g}", f"{b:.10g}", f"{e_eff:.10g}", f"{l_eff:.10g}"])
    finally:
        if f is not sys.stdout:
            f.close()
    return 0


# -- throughput ----------------------------------------------------------------------------------
def cmd_throughput(args) -> int:
    from .dynamics import dp_throughput

    rows = []
    for n in [int(x) for x in args.n_dp.split(",")]:
        t_sync = args.sync_base + args.sync_per_replica * n
        try:
            rows.append({"N_dp": n, "throughput": dp_throughput(args.global_batch, n, args.micro_batch, args.t_micro, t_sync)})
        except ValueError as e:
            rows.append({"N_dp": n, "error": str(e)})
    print(json.dumps(rows, indent=1))
    return 0


# -- pack ----------------------------------------------------------------------------------------
def cmd_pack(args) -> int:
    """Build a corpus directory (synthetic or from text files) and optionally dump packed-batch digests."""
    from .data import (ByteTokenizer, MixtureSpec, build_corpus_from_text, build_synthetic_corpus, initial_cursors,
                       load_corpus, next_batch)

    tok = ByteTokenizer(split_digits=not args.no_split_digits, split_punct=not args.no_split_punct)
    if args.inputs:
        man = build_corpus_from_text(args.corpus, args.name, args.inputs, tok)
        log.info("source %s: %d documents", args.name, man["n_docs"])
    elif args.synthetic:
        build_synthetic_corpus(args.corpus, args.synthetic, seed=args.seed, tokenizer=tok)
    sources = load_corpus(args.corpus)
    for name, s in sorted(sources.items()):
        log.info("%s: %d documents, %d tokens", name, s.n_docs, int(s.lengths.sum()))
    if args.batches:
        mix = MixtureSpec.uniform(sorted(sources))
        cur = initial_cursors(mix)
        f = _csv_out(args.out)
        try:
            for k in range(args.batches):
                b, cur = next_batch(sources, cur, mix, args.batch, args.seq_len)
                b.check_invariants()
                f.write(json.dumps({"batch": k, "digest": b.digest(), "documents": int(b.resets.sum())}) + "\n")
        finally:
            if f is not sys.stdout:
                f.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridssm", description="Hybrid SSM/attention language model toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint prefix to continue from")
    p.add_argument("--synthetic", type=int, default=0, help="build a synthetic corpus of this many tokens if missing")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("verify", help="run the oracle, gradient and property checks")
    p.add_argument("--only", nargs="*")
    p.add_argument("--skip-training", action="store_true")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("sweep", help="run one multiplier-tuning stage")
    p.add_argument("--out", required=True, help="records file for this stage (.jsonl)")
    p.add_argument("--stage", help="records file of the previous stage")
    p.add_argument("--mults", help="starting multiplier set (JSON) when there is no previous stage")
    p.add_argument("--p", type=float)
    p.add_argument("--coarse-stages", type=int, default=3)
    p.add_argument("--coords", help="comma list of kind:key, e.g. forward:m_x,elr:W_in")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--oracle", choices=["train", "bowl"], default="train")
    p.add_argument("--centers", default="m_x=1,m_z=-1,m_B=0.5", help="bowl optimum, log2 units")
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--steps", type=int, default=100)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("stability", help="eigenvalue scan and write/forget trajectories")
    p.add_argument("--out", required=True)
    p.add_argument("--span", type=int, default=8)
    p.add_argument("--a-target", type=float, default=1.5)
    p.add_argument("--alphas", default="1,0.5,0.3")
    p.add_argument("--eta", type=float)
    p.add_argument("--eta-min", type=float, default=1e-3)
    p.add_argument("--eta-max", type=float, default=2.0)
    p.add_argument("--n-eta", type=int, default=4000)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_stability)

    p = sub.add_parser("toy", help="noisy quadratic: simulated vs closed-form stationary moments")
    p.add_argument("--h", type=float, default=0.05)
    p.add_argument("--x-star", type=float, default=2.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=1e-2)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=200_000)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_toy)

    p = sub.add_parser("schedule", help="dump a schedule as CSV")
    p.add_argument("--spec", required=True)
    p.add_argument("--until", type=float, required=True)
    p.add_argument("--points", type=int, default=201)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_schedule)

    p = sub.add_parser("throughput", help="data-parallel throughput for a global batch")
    p.add_argument("--global-batch", type=int, required=True)
    p.add_argument("--micro-batch", type=int, default=1)
    p.add_argument("--t-micro", type=float, required=True)
    p.add_argument("--n-dp", default="1,2,4,8")
    p.add_argument("--sync-base", type=float, default=0.0)
    p.add_argument("--sync-per-replica", type=float, default=0.0)
    p.set_defaults(fn=cmd_throughput)

    p = sub.add_parser("pack", help="build a corpus directory and optionally dump packed-batch digests")
    p.add_argument("--corpus", required=True)
    p.add_argument("--inputs", nargs="*", help="UTF-8 text files, one document each")
    p.add_argument("--name", default="text")
    p.add_argument("--synthetic", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-split-digits", action="store_true")
    p.add_argument("--no-split-punct", action="store_true")
    p.add_argument("--batches", type=int, default=0)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_pack)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    return int(args.fn(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
