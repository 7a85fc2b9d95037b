"""Command-line entry point: ``seqrl <command> [options]``.

Commands
--------
train            fine-tune a policy and write checkpoints plus training metrics
sample           draw a sample log from a checkpoint (or the initial policy)
evaluate         compare two sample logs (pass@k, support partition, diversity...)
make-landscape   write a synthetic variant table as CSV
verify-manifest  re-check every digest listed in a run manifest

Exit codes: 0 success, 2 validation error, 3 training divergence.
"""
from __future__ import annotations

import argparse
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
import hashlib
import json
import logging
from pathlib import Path
import sys

import numpy as np
from pydantic import ValidationError

from . import __version__
from .config import LandscapeSpec, Problem, _format_errors, load_config
from .core import RngStream
from .envs import AnnealSchedule, rollout
from .evaluation import OracleSuccess, SampleLog, evaluate
from .exceptions import DivergedError, InvalidConfig, SeqRLError
from .policy import atomic_write_text, load_policy, save_policy
from .rewards import NKLandscape, landscape_csv_text, make_phoq_like
from .rl.train import train

log = logging.getLogger("seqrl")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
MANIFEST = "manifest.json"
SAMPLE_STREAM = 100
MAX_TABLE_ROWS = 5_000_000


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run_dir, command, cfg, started):
    """Inventory every file in ``run_dir`` (except the manifest) with its digest."""
    run_dir = Path(run_dir)
    files = {
        p.relative_to(run_dir).as_posix(): sha256_file(p)
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name != MANIFEST and not p.name.startswith(".")
    }
    doc = {
        "tool": "seqrl",
        "version": __version__,
        "command": command,
        "config_sha256": cfg.digest() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "started_at": started,
        "finished_at": _now(),
        "files": files,
    }
    atomic_write_text(run_dir / MANIFEST, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def verify_manifest(run_dir):
    """Return a list of problems (empty when every digest matches)."""
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST
    if not path.is_file():
        return [f"{path} not found"]
    doc = json.loads(path.read_text(encoding="utf-8"))
    problems = []
    for name, digest in doc.get("files", {}).items():
        f = run_dir / name
        if not f.is_file():
            problems.append(f"missing: {name}")
        elif sha256_file(f) != digest:
            problems.append(f"digest mismatch: {name}")
    return problems


def _run_dir(args, cfg):
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"{cfg.name}-seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- train ---------------------------------------------------------------------


def cmd_train(args):
    started = _now()
    cfg = load_config(args.config, args.seed)
    problem = Problem(cfg)
    rl_cfg = cfg.rl_config()
    policy = problem.init_policy()
    out = _run_dir(args, cfg)
    init = policy.copy()
    rng = RngStream(cfg.seed, 0)
    if cfg.task == "mutation":
        target, reward = problem.env(), None
    else:
        target, reward = None, problem.reward
    try:
        report = train(policy, cfg.algorithm, target, reward, rl_cfg, cfg.steps, rng,
                       schedule=problem.schedule() if cfg.task == "mutation" else None)
    except DivergedError as exc:
        policy.set_params(exc.last_good[: policy.n_params])
        ckpt = out / "policy_last_good.json"
        save_policy(policy, ckpt)
        print(f"error: {exc}; last good checkpoint: {ckpt}", file=sys.stderr)
        return EXIT_DIVERGED
    atomic_write_text(out / "config.json", cfg.canonical_json())
    save_policy(init, out / "policy_init.json")
    save_policy(policy, out / "policy_final.json")
    atomic_write_text(out / "train_metrics.csv", report.to_csv())
    atomic_write_text(out / "train_metrics.jsonl", report.to_jsonl())
    write_manifest(out, "train", cfg, started)
    print(out)
    return EXIT_OK


# -- sample ----------------------------------------------------------------------


def _sample_context(job):
    """Samples for one context; a module-level function so workers can pickle it."""
    problem, policy, index, n = job
    cfg = problem.cfg
    rng = RngStream(cfg.seed, SAMPLE_STREAM).substream(index)
    temp, top_p = cfg.sampling.temperature, cfg.sampling.top_p
    rows = []
    if cfg.task == "mutation":
        env = problem.eval_env()
        schedule = AnnealSchedule(temp, temp, 0)
        for _ in range(n):
            tr = rollout(env, policy, schedule, 0, rng, start_index=index)
            rows.append((tr.final_state, float(np.sum(tr.log_probs_old)), len(tr)))
    else:
        seqs = policy.sample(n, rng, temp, top_p)
        lps = policy.log_prob_batch(seqs)
        rows = [(s, float(lp), s.size) for s, lp in zip(seqs, lps)]
    return rows


def _context_ids(problem):
    if problem.cfg.task == "mutation":
        n = len(problem.pool())
    else:
        n = problem.cfg.sampling.n_contexts
    width = len(str(max(n - 1, 0)))
    return [f"c{i:0{width}d}" for i in range(n)]


def sample_log(problem, policy, tag, workers=1):
    ids = _context_ids(problem)
    jobs = [(problem, policy, i, problem.cfg.sampling.samples_per_context) for i in range(len(ids))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sample_context, jobs))
    else:
        results = [_sample_context(j) for j in jobs]
    out = SampleLog(tag, k_max=problem.cfg.sampling.k_max)
    for cid, rows in zip(ids, results):
        for tokens, lp, nt in rows:
            out.add(cid, tokens, lp, nt)
    return out


def cmd_sample(args):
    started = _now()
    cfg = load_config(args.config, args.seed)
    problem = Problem(cfg)
    policy = load_policy(args.checkpoint) if args.checkpoint else problem.init_policy()
    problem.check_policy(policy)
    out = _run_dir(args, cfg)
    samples = sample_log(problem, policy, args.tag, args.workers)
    path = out / f"samples_{args.tag}.jsonl"
    atomic_write_text(path, samples.to_jsonl(problem.alphabet))
    write_manifest(out, "sample", cfg, started)
    print(path)
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------------


def cmd_evaluate(args):
    started = _now()
    cfg = load_config(args.config, args.seed)
    problem = Problem(cfg)
    base = SampleLog.from_jsonl(Path(args.base).read_text(encoding="utf-8"), problem.alphabet)
    tuned = SampleLog.from_jsonl(Path(args.tuned).read_text(encoding="utf-8"), problem.alphabet)
    success = OracleSuccess(problem.true_reward, problem.threshold)
    positions = list(np.flatnonzero(problem.mask())) if cfg.task == "mutation" else None
    natives, reference = None, None
    if cfg.task == "mutation":
        pool = problem.pool()
        reference = list(pool)
        natives = dict(zip(_context_ids(problem), pool))
    elif problem.table is not None:
        best = problem.table.sequences_for(problem.table.keys()[np.argmax(problem.table.values())])[0]
        natives = {c: best for c in base.contexts}
    tables, summary = evaluate(base, tuned, success, cfg.sampling.k_max, positions, reference, natives)
    summary["success_threshold"] = problem.threshold
    out = _run_dir(args, cfg)
    for name, text in tables.items():
        atomic_write_text(out / name, text)
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "evaluate", cfg, started)
    print(out)
    return EXIT_OK


# -- make-landscape -------------------------------------------------------------------


def _param(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def landscape_table(kind, seed, params=None):
    """Build the variant table for ``make-landscape``."""
    try:
        spec = LandscapeSpec(kind=kind, seed=seed, **(params or {}))
    except ValidationError as exc:
        raise InvalidConfig(f"invalid landscape parameters: {_format_errors(exc)}") from None
    if kind == "phoq_like":
        wt = spec.wild_type or ("AVST" if spec.n_sites == 4 else "A" * spec.n_sites)
        return make_phoq_like(seed, spec.n_sites, None, spec.high_fraction, spec.labeled_fraction,
                              spec.zero_fraction, spec.epistasis, wt)
    if 20 ** spec.n > MAX_TABLE_ROWS:
        raise InvalidConfig(f"nk table with n={spec.n} has 20^{spec.n} rows; the limit is {MAX_TABLE_ROWS}")
    return NKLandscape(spec.n, spec.k, 20, seed).to_table()


def cmd_make_landscape(args):
    params = dict(args.param or [])
    seed = args.seed if args.seed is not None else 0
    if args.config:
        cfg = load_config(args.config, args.seed)
        seed = cfg.seed if cfg.landscape.seed is None else cfg.landscape.seed
        params = {**{k: v for k, v in cfg.landscape.model_dump(exclude={"kind", "seed", "noise"}).items()
                     if k in ("n", "k", "n_sites", "high_fraction", "labeled_fraction", "zero_fraction",
                              "epistasis", "wild_type")}, **params}
    land = landscape_table(args.kind, seed, params)
    out = Path(args.out or f"{args.kind}-seed{seed}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, landscape_csv_text(land))
    print(out)
    return EXIT_OK


def cmd_verify_manifest(args):
    problems = verify_manifest(args.run_dir)
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        return EXIT_INVALID
    print("ok")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="seqrl", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"seqrl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="worker processes for sampling")
        p.add_argument("--out", default=None, help="output directory (file for make-landscape)")

    p = sub.add_parser("train", help="fine-tune a policy")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="write a sample log")
    common(p)
    p.add_argument("--checkpoint", default=None, help="policy checkpoint; defaults to the initial policy")
    p.add_argument("--tag", default="base", help="model tag recorded in the log")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="compare base and tuned sample logs")
    common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--tuned", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-landscape", help="write a synthetic landscape CSV")
    common(p, config_required=False)
    p.add_argument("--kind", choices=("nk", "phoq_like"), required=True)
    p.add_argument("--param", type=_param, action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_make_landscape)

    p = sub.add_parser("verify-manifest", help="check a run directory against its manifest")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_verify_manifest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SeqRLError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
