"""Command-line entry point: ``dpsm gen-data | train | eval | theory <sub>``.

Every command writes into ``--out`` using fixed file names and finishes by
writing ``manifest.json`` exactly once. Exit codes: 0 success, 2 invalid
input or configuration, 3 numerical failure during training.

Output files
------------
gen-data   dataset.csv
train      checkpoint.json, trace.csv
eval       metrics.json, metrics.csv, [prediction_sets.csv]
theory     <sub>.csv (pmf, scaling_n, scaling_s, heb, softcurve) and metrics.json

``trace.csv`` columns, in order: epoch, lr, upper_loss, lower_loss, ce_loss,
q, q_ref, q_error, batch_q_error, dm_gap, qr_gap, soft_size, train_acc.

Seeds: the master seed feeds every component through named streams
(``data/*``, ``train/*``, ``eval/*``, ``theory/*``), so the same config and
seed reproduce byte-identical CSV and metrics files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import calibrate, predict_mask, write_prediction_dump
from .core_math import QuantileLevel
from .data import DESK_BENCHMARK, DESK_FRACTIONS, Dataset, Split, gen_gaussian_mixture, load_csv, save_csv, split
from .metrics import avg_soft_size, evaluate_sets
from .model import load_checkpoint, save_checkpoint
from .scores import ScoreSpec, true_label_scores
from .seeding import derive_rng
from .trainer import TRACE_COLUMNS, NumericalError, TrainConfig, train
from . import theory_lab as tl

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
METRIC_KEYS = ("marg_cov", "avg_set_size", "avg_soft_size", "cov_gap", "sscv", "wsc")


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


@dataclass(frozen=True)
class DataConfig:
    k: int = DESK_BENCHMARK["k"]
    d: int = DESK_BENCHMARK["d"]
    n: int = DESK_BENCHMARK["n"]
    class_separation: float = DESK_BENCHMARK["class_separation"]
    within_class_scale: float = DESK_BENCHMARK["within_class_scale"]
    fractions: tuple = DESK_FRACTIONS
    path: str | None = None  # CSV to load instead of generating

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        fr = np.array(self.fractions)
        if fr.shape != (4,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
            raise ConfigError(f"fractions must be four non-negative numbers summing to 1, got {list(self.fractions)}")


@dataclass(frozen=True)
class EvalConfig:
    score: ScoreSpec = ScoreSpec()
    alpha: float = 0.1
    trials: int = 10
    tau_sigmoid: float = 0.1
    wsc_delta: float = 0.1
    wsc_directions: int = 1000

    def __post_init__(self):
        if isinstance(self.score, dict):
            _reject_unknown("eval.score", self.score, [f.name for f in fields(ScoreSpec)])
            object.__setattr__(self, "score", ScoreSpec(**self.score))
        QuantileLevel(self.alpha)
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.wsc_directions < 1:
            raise ConfigError("wsc_directions must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown("config", d, [f.name for f in fields(cls)])
        data = d.get("data", {})
        _reject_unknown("data", data, [f.name for f in fields(DataConfig)])
        tr = dict(d.get("train", {}))
        if "seed" in tr:
            raise ConfigError("train.seed is not allowed; use the top-level seed")
        ev = d.get("eval", {})
        _reject_unknown("eval", ev, [f.name for f in fields(EvalConfig)])
        try:
            return cls(
                seed=int(d.get("seed", 0)),
                data=DataConfig(**data),
                train=TrainConfig.from_dict(tr),
                eval=EvalConfig(**ev),
                out=d.get("out"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        tr = self.train.to_dict()
        tr.pop("seed")
        data = {f.name: getattr(self.data, f.name) for f in fields(DataConfig)}
        data["fractions"] = list(data["fractions"])
        ev = {f.name: getattr(self.eval, f.name) for f in fields(EvalConfig)}
        ev["score"] = self.eval.score.to_dict()
        return {"seed": self.seed, "data": data, "train": tr, "eval": ev, "out": self.out}

    def resolved(self) -> "RunConfig":
        """Copy whose training seed equals the master seed."""
        return replace(self, train=replace(self.train, seed=self.seed))


def config_hash(cfg: RunConfig) -> str:
    body = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(raw)


# --- output helpers -----------------------------------------------------------


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return _jsonable(v.item())
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, header, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Tracks one command invocation and writes its manifest on exit."""

    def __init__(self, command: str, out: Path, cfg: RunConfig, extra: dict | None = None):
        self.command, self.out, self.cfg = command, out, cfg
        self.extra = dict(extra or {})
        self.outputs: list[str] = []
        self.started = datetime.now(timezone.utc).isoformat()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self, status: str = "ok", **info) -> None:
        manifest = {
            "command": self.command,
            "status": status,
            "version": __version__,
            "seed": self.cfg.seed,
            "config_hash": config_hash(self.cfg),
            "config": self.cfg.to_dict(),
            "arguments": self.extra,
            "started_at": self.started,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "outputs": {n: _sha256(self.out / n) for n in self.outputs if (self.out / n).exists()},
            **info,
        }
        write_json(self.out / "manifest.json", manifest)


# --- data -----------------------------------------------------------------------


def build_dataset(cfg: RunConfig) -> Dataset:
    """Load ``data.path`` or generate the Gaussian mixture, then split if needed."""
    dc = cfg.data
    if dc.path:
        ds = load_csv(dc.path)
    else:
        ds = gen_gaussian_mixture(dc.k, dc.d, dc.n, dc.class_separation, dc.within_class_scale, cfg.seed)
    if ds.split_assignment is None:
        ds = split(ds, dc.fractions, cfg.seed)
    return ds


def _config_from_checkpoint(extra: dict, fallback: RunConfig) -> RunConfig:
    if "run_config" in extra:
        return RunConfig.from_dict(extra["run_config"])
    return fallback


# --- evaluation -------------------------------------------------------------


def run_eval_trials(model, dataset: Dataset, ev: EvalConfig, seed: int, dump_path=None):
    """Re-split cal + test at random per trial, keeping the calibration size.

    Returns a list of per-trial :class:`~dpsm.metrics.MetricsReport`.
    """
    cal_idx, test_idx = dataset.indices(Split.CAL), dataset.indices(Split.TEST)
    if cal_idx.size == 0 or test_idx.size == 0:
        raise ValueError("dataset needs non-empty cal and test splits")
    pool = np.sort(np.concatenate([cal_idx, test_idx]))
    m = cal_idx.size
    soft_spec = ev.score.fixed(1.0) if ev.score.randomization == "sampled" else ev.score
    reports = []
    for t in range(ev.trials):
        perm = derive_rng(seed, "eval/trial", t).permutation(pool)
        cal = dataset.batch(idx=perm[:m])
        test = dataset.batch(idx=perm[m:])
        pred = calibrate(model, cal, ev.score, ev.alpha, rng=derive_rng(seed, "eval/u_cal", t))
        mask = predict_mask(pred, test.x, rng=derive_rng(seed, "eval/u_test", t))
        soft = avg_soft_size(model, pred.threshold, test, ev.tau_sigmoid, soft_spec)
        wsc_seed = int(derive_rng(seed, "eval/wsc", t).integers(2**62))
        reports.append(
            evaluate_sets(mask, test.y, test.x, ev.alpha, soft, ev.wsc_delta, ev.wsc_directions, wsc_seed)
        )
        if t == 0 and dump_path is not None:
            write_prediction_dump(dump_path, mask, test.y, perm[m:])
    return reports


def aggregate(reports) -> dict:
    out = {}
    for key in METRIC_KEYS:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out


# --- commands -----------------------------------------------------------------


def _resolve(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=int(args.seed))
    out = args.out or cfg.out
    if not out:
        raise ConfigError("an output directory is required (--out or config 'out')")
    return replace(cfg, out=str(out)).resolved()


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    overrides = {
        k: getattr(args, k)
        for k in ("n", "k", "d", "class_separation", "within_class_scale", "fractions")
        if getattr(args, k, None) is not None
    }
    if overrides:
        cfg = replace(cfg, data=replace(cfg.data, **overrides))
    run = Run("gen-data", Path(cfg.out), cfg)
    ds = build_dataset(cfg)
    save_csv(ds, run.path("dataset.csv"))
    run.finish(rows=ds.n)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    tr_over = {}
    if args.method is not None:
        tr_over["method"] = args.method
    if args.epochs is not None:
        tr_over["epochs"] = args.epochs
    if args.lam is not None:
        tr_over["lam"] = args.lam
    if tr_over:
        cfg = replace(cfg, train=replace(cfg.train, **tr_over))
    if args.data:
        cfg = replace(cfg, data=replace(cfg.data, path=str(args.data)))
    run = Run("train", Path(cfg.out), cfg)
    ds = build_dataset(cfg)
    try:
        model, q, trace = train(cfg.train, ds)
    except NumericalError as exc:
        run.finish("numerical_failure", epoch=exc.epoch, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    trace.to_csv(run.path("trace.csv"))
    save_checkpoint(model, run.path("checkpoint.json"), {"q": q, "run_config": replace(cfg, out=None).to_dict()})
    run.finish(epochs=len(trace), final_q=q)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    model, extra = load_checkpoint(args.checkpoint)
    train_cfg = _config_from_checkpoint(extra, cfg)
    # data comes from the checkpoint's run unless overridden
    cfg = replace(cfg, data=train_cfg.data if not args.data else replace(cfg.data, path=str(args.data)))
    ev_over = {}
    if args.score is not None:
        ev_over["score"] = replace(cfg.eval.score, kind=args.score)
    if args.alpha is not None:
        ev_over["alpha"] = args.alpha
    if args.trials is not None:
        ev_over["trials"] = args.trials
    if args.wsc_directions is not None:
        ev_over["wsc_directions"] = args.wsc_directions
    if ev_over:
        cfg = replace(cfg, eval=EvalConfig(**{**{f.name: getattr(cfg.eval, f.name) for f in fields(EvalConfig)}, **ev_over}))
    run = Run("eval", Path(cfg.out), cfg, {"checkpoint": str(args.checkpoint)})
    data_cfg = replace(cfg, seed=train_cfg.seed) if not args.data else cfg
    ds = build_dataset(data_cfg)
    if ds.d != model.layer_dims[0] or ds.k != model.num_classes:
        raise ValueError(f"checkpoint expects d={model.layer_dims[0]}, K={model.num_classes}; data has d={ds.d}, K={ds.k}")
    dump = run.path("prediction_sets.csv") if args.dump_sets else None
    reports = run_eval_trials(model, ds, cfg.eval, cfg.seed, dump)
    agg = aggregate(reports)
    write_json(
        run.path("metrics.json"),
        {
            "score": cfg.eval.score.to_dict(),
            "alpha": cfg.eval.alpha,
            "calibration_size": int(ds.indices(Split.CAL).size),
            "test_size": int(ds.indices(Split.TEST).size),
            "trials": [r.to_dict() for r in reports],
            "aggregate": agg,
        },
    )
    rows = [[t, *(getattr(r, k) for k in METRIC_KEYS)] for t, r in enumerate(reports)]
    rows.append(["mean", *(agg[k]["mean"] for k in METRIC_KEYS)])
    rows.append(["std", *(agg[k]["std"] for k in METRIC_KEYS)])
    write_table(run.path("metrics.csv"), ["trial", *METRIC_KEYS], rows)
    run.finish()
    return EXIT_OK


def _theory_pmf(args, run):
    exact = tl.batch_quantile_pmf_exact(args.n, args.s, args.alpha)
    try:
        beta = tl.batch_quantile_pmf_beta(args.n, args.s, args.alpha)
        beta_pmf = beta.pmf
    except tl.InfeasibleError:
        beta, beta_pmf = None, np.full(args.n, math.nan)
    support = np.flatnonzero(exact.pmf > 0)
    write_table(run.path("pmf.csv"), ["j", "exact", "beta"], [[j + 1, exact.pmf[j], beta_pmf[j]] for j in support])
    return {
        "n": args.n,
        "s": args.s,
        "alpha": args.alpha,
        "k": exact.k,
        "exact_total": exact.total,
        "beta_total": beta.total if beta else None,
        "tv_beta_exact": tl.tv_distance(exact.pmf, beta.pmf) if beta else None,
        "mode_j": int(np.argmax(exact.pmf)) + 1,
    }


def _theory_scaling(args, run):
    n_grid = [tl.ScalingSetting(n, args.batch, args.trials, args.alpha) for n in args.n_grid]
    rep_n = tl.quantile_error_scaling(n_grid, seed=run.cfg.seed)
    header = ["n", "s", "sa_error", "sa_se", "dpsm_error", "dpsm_se"]
    write_table(
        run.path("scaling_n.csv"), header,
        [[r.n, r.s, r.sa_error, r.sa_se, r.dpsm_error, r.dpsm_se] for r in rep_n.rows],
    )
    s_grid = [tl.ScalingSetting(args.bias_n, s, args.trials, args.alpha, epochs=0) for s in args.s_grid]
    rep_s = tl.quantile_error_scaling(s_grid, seed=run.cfg.seed)
    bias = [tl.expected_batch_quantile_bias(args.bias_n, r.s, args.alpha) for r in rep_s.rows]
    write_table(
        run.path("scaling_s.csv"), ["n", "s", "exact_bias", "sa_error", "sa_se"],
        [[r.n, r.s, b, r.sa_error, r.sa_se] for r, b in zip(rep_s.rows, bias)],
    )
    return {
        "dpsm_slope_vs_n": tl.loglog_slope(rep_n.column("n"), rep_n.column("dpsm_error")),
        "sa_bias_slope_vs_s": tl.loglog_slope(rep_s.column("s"), bias),
        "sa_error_slope_vs_s": tl.loglog_slope(rep_s.column("s"), rep_s.column("sa_error")),
    }


def _theory_heb(args, run):
    rows = []
    for i in range(args.sets):
        rng = derive_rng(run.cfg.seed, "theory/heb", i)
        size = int(np.exp(rng.uniform(np.log(args.min_size), np.log(args.max_size + 1))))
        size = min(max(size, args.min_size), args.max_size)
        rep = tl.heb_verify(rng.random(size), args.alpha)
        rows.append([i, size, args.alpha, rep.c_hat, rep.optimal_set[0], rep.optimal_set[1], rep.violations])
    write_table(run.path("heb.csv"), ["set", "size", "alpha", "c_hat", "u_lo", "u_hi", "violations"], rows)
    c = np.array([r[3] for r in rows])
    return {"sets": args.sets, "all_finite": bool(np.all(np.isfinite(c))), "max_c_hat": float(c.max()),
            "violations": int(sum(r[6] for r in rows))}


def _model_scores(args, run):
    model, extra = load_checkpoint(args.checkpoint)
    train_cfg = _config_from_checkpoint(extra, run.cfg)
    ds = build_dataset(train_cfg if not args.data else replace(run.cfg, data=replace(run.cfg.data, path=str(args.data))))
    return model, ds.batch(Split(args.split)), train_cfg


def _theory_bilipschitz(args, run):
    if args.checkpoint:
        model, batch, train_cfg = _model_scores(args, run)
        from .model import forward

        scores = true_label_scores(forward(model, batch.x), batch.y, train_cfg.train.score.fixed(1.0))
        source = f"checkpoint:{args.split}"
    else:
        scores = derive_rng(run.cfg.seed, "theory/bilipschitz").random(args.size)
        source = "uniform"
    l1, l2 = tl.bilipschitz_diagnostic(scores, args.trim)
    return {"source": source, "n": int(np.size(scores)), "trim": args.trim, "L1_hat": l1, "L2_hat": l2}


def _theory_softcurve(args, run):
    model, batch, train_cfg = _model_scores(args, run)
    rows = tl.soft_size_curve(model, batch, args.tau, None, train_cfg.train.score.fixed(1.0))
    write_table(run.path("softcurve.csv"), ["coverage", "threshold", "soft_size"], rows)
    soft = np.array([r[2] for r in rows])
    return {"rows": len(rows), "strictly_increasing": bool(np.all(np.diff(soft) > 0))}


THEORY = {
    "pmf": _theory_pmf,
    "scaling": _theory_scaling,
    "heb": _theory_heb,
    "bilipschitz": _theory_bilipschitz,
    "softcurve": _theory_softcurve,
}


def cmd_theory(args) -> int:
    cfg = _resolve(args)
    argdict = {k: v for k, v in vars(args).items() if k not in ("func", "config", "out", "seed")}
    run = Run(f"theory {args.sub}", Path(cfg.out), cfg, argdict)
    summary = THEORY[args.sub](args, run)
    write_json(run.path("metrics.json"), summary)
    run.finish()
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _fractions(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"fractions must be comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",")]


def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpsm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic Gaussian-mixture dataset")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--class-separation", type=float)
    p.add_argument("--within-class-scale", type=float)
    p.add_argument("--fractions", type=_fractions, help="train,val,cal,test")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model (CE, ConfTr, CUT or DPSM)")
    _common(p)
    p.add_argument("--data", help="dataset CSV (default: generate from the config)")
    p.add_argument("--method", choices=["CE", "ConfTr", "CUT", "DPSM"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="calibrate and evaluate prediction sets over repeated trials")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset CSV (default: regenerate the checkpoint's data)")
    p.add_argument("--score", choices=["hps", "aps", "raps"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--wsc-directions", type=int)
    p.add_argument("--dump-sets", action="store_true", help="write the first trial's sets")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("theory", help="numerical checks of the theory")
    tsub = p.add_subparsers(dest="sub", required=True)
    t = tsub.add_parser("pmf", help="batch-quantile pmf, exact and Beta form")
    _common(t)
    t.add_argument("--n", type=int, default=200)
    t.add_argument("--s", type=int, default=20)
    t.add_argument("--alpha", type=float, default=0.1)
    t = tsub.add_parser("scaling", help="quantile error vs n and s")
    _common(t)
    t.add_argument("--alpha", type=float, default=0.1)
    t.add_argument("--trials", type=int, default=200)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--n-grid", type=_int_list, default=[1000, 4000, 16000, 64000])
    t.add_argument("--s-grid", type=_int_list, default=[10, 20, 40, 80, 160])
    t.add_argument("--bias-n", type=int, default=10_000)
    t = tsub.add_parser("heb", help="error-bound constant of the pinball loss on random scores")
    _common(t)
    t.add_argument("--alpha", type=float, default=0.1)
    t.add_argument("--sets", type=int, default=100)
    t.add_argument("--min-size", type=int, default=10)
    t.add_argument("--max-size", type=int, default=1000)
    for name, helptext in (("bilipschitz", "score spacing bounds"), ("softcurve", "soft set size vs coverage")):
        t = tsub.add_parser(name, help=helptext)
        _common(t)
        t.add_argument("--checkpoint", required=name == "softcurve")
        t.add_argument("--data")
        t.add_argument("--split", default="cal", choices=[s.value for s in Split])
        if name == "bilipschitz":
            t.add_argument("--size", type=int, default=1000, help="uniform scores when no checkpoint")
            t.add_argument("--trim", type=float, default=0.01)
        else:
            t.add_argument("--tau", type=float, default=0.1)
    for t in tsub.choices.values():
        t.set_defaults(func=cmd_theory)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
