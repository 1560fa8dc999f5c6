"""Command-line front end: gen-data, train, infer, eval, ablate, inspect-hk.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import trajectory_rng
from .metrics import evaluate
from .posedist import fit_gmm_em, sample_hk
from .skeleton import DatasetConfig, dumps, gen_dataset, load_dataset, save_dataset, z_histogram
from .trainer import (MODES, TrainConfig, build_context, load_checkpoint, predict, save_checkpoint, train)

log = logging.getLogger("diffkit")

ARTIFACT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed() -> int:
    env = os.environ.get("DIFFKIT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"DIFFKIT_SEED must be an integer, got '{env}'") from None


def _coerce(raw: str, default):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if not isinstance(value, bool):
            raise UsageError(f"expected true/false, got '{raw}'")
        return value
    if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
        raise UsageError(f"expected a number, got '{raw}'")
    if isinstance(default, int) and isinstance(value, float):
        if not value.is_integer():
            raise UsageError(f"expected an integer, got '{raw}'")
        value = int(value)
    if isinstance(default, float):
        value = float(value)
    if isinstance(default, (list, tuple)):
        value = type(default)(value)
    return value


def parse_overrides(pairs, cls) -> dict:
    """``key=value`` strings to a dict typed after the dataclass defaults; unknown keys are usage errors."""
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"override '{pair}' is not of the form key=value")
        key, raw = pair.split("=", 1)
        if key not in defaults:
            raise UsageError(f"unknown config key '{key}' (known: {', '.join(sorted(defaults))})")
        out[key] = _coerce(raw, defaults[key])
    return out


def _meta(config: dict, seed: int, command: str) -> dict:
    return {"tool_version": __version__, "command": command, "config": config, "seed": seed}


def _write(path, obj) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))


def _train_config(args) -> TrainConfig:
    kw = parse_overrides(args.set, TrainConfig)
    for name in ("epochs", "mode"):
        if getattr(args, name, None) is not None:
            kw[name] = getattr(args, name)
    kw["seed"] = args.seed
    try:
        return TrainConfig(**{**asdict(TrainConfig()), **kw})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# --------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    kw = parse_overrides(args.set, DatasetConfig)
    kw.update(n_train=args.train, n_test=args.test, seed=args.seed)
    ds = gen_dataset(DatasetConfig.from_dict({**DatasetConfig().to_dict(), **kw}))
    save_dataset(ds, args.out, full_heatmaps=args.full_heatmaps,
                 meta=_meta(ds.config.to_dict(), args.seed, "gen-data"))
    log.info("wrote %d train / %d test samples to %s", len(ds.train), len(ds.test), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    log_path = Path(args.log or f"{args.out}.log.jsonl")
    log_path.write_text("")

    def on_epoch(entry):
        with log_path.open("a") as fh:
            fh.write(dumps(entry))

    ckpt = train(cfg, ds, on_epoch=on_epoch)
    save_checkpoint(ckpt, args.out)
    if ckpt.status != "ok":
        log.error("training stopped early (%s); saved last finite state to %s", ckpt.status, args.out)
        return EXIT_RUNTIME
    return EXIT_OK


def _infer_options(args) -> dict:
    if args.full:
        return {"sampler": "full", "S": None}
    return {"sampler": "strided", "S": args.strided}


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    opts = _infer_options(args)
    N = args.N if args.N is not None else ckpt.config.N
    t0 = time.perf_counter()
    preds = predict(ckpt, ds, split=args.split, sampler=opts["sampler"], S=opts["S"] or 5, N=N, seed=args.seed)
    log.info("inference on %d samples took %.1fs", len(preds), time.perf_counter() - t0)
    config = {"train": asdict(ckpt.config), "split": args.split, "N": N, **opts}
    _write(args.out, {
        "version": ARTIFACT_VERSION,
        "kind": "predictions",
        "mode": ckpt.config.mode,
        "ids": [s.id for s in ds.split(args.split)],
        "split": args.split,
        "preds": preds.tolist(),
        **_meta(config, args.seed, "infer"),
    })
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = json.loads(Path(args.preds).read_text())
    if doc.get("version") != ARTIFACT_VERSION or doc.get("kind") != "predictions":
        raise ValueError(f"{args.preds} is not a version-{ARTIFACT_VERSION} predictions file")
    ds = load_dataset(args.data)
    by_id = {s.id: s for s in ds.samples}
    missing = [i for i in doc["ids"] if i not in by_id]
    if missing:
        raise ValueError(f"{len(missing)} predicted sample ids are not in {args.data} (first: {missing[0]})")
    gt = np.array([by_id[i].pose3d for i in doc["ids"]])
    report = evaluate(np.array(doc["preds"], dtype=float), gt, rigid_only=args.rigid_only)
    _write(args.out, {"version": ARTIFACT_VERSION, "kind": "eval_report", "mode": doc.get("mode"),
                      "ids": doc["ids"], "report": report.to_dict(),
                      **_meta(doc.get("config", {}), doc.get("seed"), "eval")})
    print(json.dumps({k: getattr(report, k) for k in ("mpjpe", "p_mpjpe", "pck", "auc")}))
    return EXIT_OK


def _parse_ablate_mode(token: str) -> dict:
    if token in MODES:
        return {"mode": token}
    if token.startswith("gmm") and token[3:].isdigit() and int(token[3:]) > 0:
        return {"mode": "diffpose", "M": int(token[3:])}
    raise UsageError(f"unknown ablation mode '{token}' (use {', '.join(MODES)} or gmmM, e.g. gmm5)")


def _int_list(text):
    if text is None:
        return []
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got '{text}'") from None


def cmd_ablate(args) -> int:
    base = _train_config(args)
    runs = [(tok, _parse_ablate_mode(tok)) for tok in (args.modes.split(",") if args.modes else [])]
    k_sweep, n_sweep, s_sweep = _int_list(args.k_sweep), _int_list(args.n_sweep), _int_list(args.s_sweep)
    for K in k_sweep:
        runs.append((f"K{K}", {"mode": "diffpose", "K": K}))
    if (n_sweep or s_sweep) and not any(r[1] == {"mode": "diffpose"} for r in runs):
        runs.append(("diffpose", {"mode": "diffpose"}))
    if not runs:
        raise UsageError("nothing to do: give --modes and/or a sweep")
    ds = load_dataset(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = build_context(ds, base)
    gt = np.array([s.pose3d for s in ds.test])
    rows = []

    def record(name, cfg, ckpt, sampler, S, N, seconds):
        t0 = time.perf_counter()
        preds = predict(ckpt, ds, sampler=sampler, S=S, N=N, ctx=ctx)
        rep = evaluate(preds, gt)
        rows.append({"name": name, "mode": cfg.mode, "K": cfg.K, "M": cfg.M, "N": N,
                     "sampler": sampler, "S": S if sampler == "strided" else None,
                     "mpjpe": rep.mpjpe, "p_mpjpe": rep.p_mpjpe, "pck": rep.pck, "auc": rep.auc,
                     "train_seconds": seconds, "infer_seconds": time.perf_counter() - t0})
        log.info("%s N=%d %s: MPJPE %.2f mm", name, N, sampler, rep.mpjpe)

    for name, kw in runs:
        cfg = base.override(**kw)
        t0 = time.perf_counter()
        ckpt = train(cfg, ds, ctx=ctx)
        seconds = time.perf_counter() - t0
        save_checkpoint(ckpt, out_dir / f"{name}.ckpt.json")
        if ckpt.status != "ok":
            raise FloatingPointError(f"run '{name}' diverged")
        S = min(args.strided, cfg.K)
        record(name, cfg, ckpt, "strided", S, cfg.N, seconds)
        if name == "diffpose" or kw == {"mode": "diffpose"}:
            for N in n_sweep:
                record(name, cfg, ckpt, "strided", S, N, seconds)
            for S2 in s_sweep:
                record(name, cfg, ckpt, "strided" if S2 < cfg.K else "full", S2, cfg.N, seconds)
    # timings vary between runs; keep them out of the canonical report
    timings = [{"name": r["name"], "N": r["N"], "S": r["S"], "train_seconds": r.pop("train_seconds"),
                "infer_seconds": r.pop("infer_seconds")} for r in rows]
    _write(out_dir / "ablation.json", {"version": ARTIFACT_VERSION, "kind": "ablation", "rows": rows,
                                       "columns": ["name", "mode", "K", "M", "N", "sampler", "S",
                                                   "mpjpe", "p_mpjpe", "pck", "auc"],
                                       **_meta(asdict(base), base.seed, "ablate")})
    _write(out_dir / "timings.json", {"version": ARTIFACT_VERSION, "kind": "timings", "rows": timings})
    return EXIT_OK


def cmd_inspect_hk(args) -> int:
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    by_id = {s.id: s for s in ds.samples}
    if args.sample_id not in by_id:
        raise KeyError(f"sample id {args.sample_id} not in {args.data}")
    sample = by_id[args.sample_id]
    from .posedist import make_dist
    dist = make_dist(sample, ds, z_histogram(ds, cfg.z_bins))
    rng = trajectory_rng(args.seed, 0, sample.id)
    draws = sample_hk(dist, rng, args.draws)
    J = draws.shape[1]
    gmm = fit_gmm_em(draws.reshape(args.draws, -1), args.M, tol=cfg.gmm_tol, max_iter=cfg.gmm_max_iter,
                     ridge_scale=cfg.gmm_ridge, diagonal=cfg.gmm_diagonal, rng=rng)
    mm = ds.norm_stats.denormalize(draws)
    summary = {
        "sample_id": sample.id,
        "draws": args.draws,
        "joint_mean": draws.mean(0).tolist(),
        "joint_cov": [np.cov(draws[:, j].T).tolist() for j in range(J)],
        "joint_mean_mm": mm.mean(0).tolist(),
        "joint_var_mm": mm.var(0).tolist(),
        "gmm": gmm.to_dict(),
        "em_trace": list(gmm.history),
        "em_trace_non_decreasing": bool(np.all(np.diff(gmm.history) >= -1e-9)),
    }
    _write(args.out, {"version": ARTIFACT_VERSION, "kind": "hk_summary", "summary": summary,
                      **_meta({"train": asdict(cfg), "M": args.M, "draws": args.draws}, args.seed, "inspect-hk")})
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffkit", description="GMM-anchored diffusion for 3D pose lifting")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"diffkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("-v", "--verbose", action="count", default=0)
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--test", type=int, default=500)
    g.add_argument("--full-heatmaps", action="store_true", help="store dense heatmaps (large files)")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser or baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--log", help="per-epoch JSON lines (default: OUT.log.jsonl)")
    common(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict 3D poses for a split")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    mx = i.add_mutually_exclusive_group()
    mx.add_argument("--strided", type=int, default=5, metavar="S")
    mx.add_argument("--full", action="store_true", help="run all K reverse steps")
    i.add_argument("--N", type=int, default=None, help="H_K samples per pose (default: checkpoint N)")
    i.add_argument("--split", default="test", choices=("train", "test"))
    common(i)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions")
    e.add_argument("--preds", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--rigid-only", action="store_true", help="Procrustes without scale")
    e.add_argument("-v", "--verbose", action="count", default=0)
    e.set_defaults(func=cmd_eval, seed=None)

    a = sub.add_parser("ablate", help="train and compare modes and sweeps")
    a.add_argument("--data", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--modes", help=f"comma list of {', '.join(MODES)}, gmmM")
    a.add_argument("--k-sweep", help="comma list of K values")
    a.add_argument("--n-sweep", help="comma list of N values")
    a.add_argument("--s-sweep", help="comma list of strided step counts")
    a.add_argument("--strided", type=int, default=5, metavar="S")
    a.add_argument("--epochs", type=int)
    common(a)
    a.set_defaults(func=cmd_ablate, mode=None)

    h = sub.add_parser("inspect-hk", help="summarize H_K and its GMM for one sample")
    h.add_argument("--data", required=True)
    h.add_argument("--sample-id", type=int, required=True)
    h.add_argument("--draws", type=int, default=1000)
    h.add_argument("--M", type=int, default=5)
    h.add_argument("--out", required=True)
    common(h)
    h.set_defaults(func=cmd_inspect_hk, epochs=None, mode=None)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is None:
            args.seed = _default_seed()
        logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    except Exception as exc:
        print(f"diffkit: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
