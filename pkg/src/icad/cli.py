"""Command-line entry point.

Subcommands: gen-data, train-vae, train-svdd, calibrate, detect, simulate,
tune, bench. Exit codes: 0 clean, 2 alarm raised (detect), 1 any error
(including usage errors). Every command records its resolved configuration
and seed next to its primary output; identical flags and seed reproduce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

from . import conformal, episodes, models, nonconformity, persistence

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ALARM = 2


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {exc}")


def _write_run_config(target: Path, args: argparse.Namespace, command: str) -> None:
    record = {"command": command}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        record[key] = _fmt(value)
    persistence.save_config(target, record)


def _config_sidecar(out: Path) -> Path:
    return out.with_name(out.name + ".config.txt")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _scene_for_dim(dim: int, seed: int) -> episodes.SceneGenerator:
    side = math.isqrt(dim)
    if side * side != dim or side < 4:
        raise CliError(f"--dim must be a perfect square >= 16, got {dim}")
    return episodes.SceneGenerator(side=side, seed=seed)


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.r_min < 0 or args.r_max < args.r_min:
        raise CliError("need 0 <= r-min <= r-max")
    gen = _scene_for_dim(args.dim, args.seed)
    examples, r_values = episodes.generate_dataset(gen, args.count, (args.r_min, args.r_max))
    persistence.save_dataset(out, examples, r_values)
    _write_run_config(_config_sidecar(out), args, "gen-data")
    print(f"wrote {args.count} examples of dimension {args.dim} to {out}")
    return EXIT_OK


def _parse_hidden(text: str) -> tuple[int, ...]:
    dims = tuple(int(p) for p in text.split(",") if p)
    if not dims or min(dims) < 1:
        raise CliError(f"bad hidden layer spec {text!r}")
    return dims


def _train_config(args) -> models.TrainConfig:
    return models.TrainConfig(
        epochs=(args.epochs, args.epochs2),
        learning_rates=(args.lr, args.lr2),
        batch_size=args.batch,
        seed=args.seed,
    )


def _write_loss_csv(out: Path, curve) -> None:
    _write_csv(
        out.with_name(out.name + ".loss.csv"),
        ["epoch", "loss"],
        [(i + 1, loss) for i, loss in enumerate(curve)],
    )


def _cmd_train_vae(args) -> int:
    out = Path(args.out)
    data, _ = persistence.load_dataset(args.data)
    model = models.VaeModel.build(
        data.shape[1], latent_dim=args.latent, hidden=_parse_hidden(args.hidden), seed=args.seed
    )
    curve = models.train_vae(model, data, _train_config(args))
    persistence.save_model(out, model)
    _write_loss_csv(out, curve)
    _write_run_config(_config_sidecar(out), args, "train-vae")
    print(f"trained VAE for {len(curve)} epochs; final loss {curve[-1]:.6g}; saved to {out}")
    return EXIT_OK


def _cmd_train_svdd(args) -> int:
    out = Path(args.out)
    data, _ = persistence.load_dataset(args.data)
    model = models.SvddModel.build(
        data.shape[1],
        output_dim=args.out_dim,
        hidden=_parse_hidden(args.hidden),
        weight_decay=args.weight_decay,
        seed=args.seed,
    )
    cfg = _train_config(args)
    if args.pretrain:
        pre_cfg = models.TrainConfig(
            epochs=(args.pre_epochs, args.pre_epochs2),
            learning_rates=(args.lr, args.lr2),
            batch_size=args.batch,
            seed=args.seed,
        )
        models.pretrain_with_autoencoder(model, data, pre_cfg)
    else:
        models.svdd_init_center(model, data)
    losses, distances = models.train_svdd(model, data, cfg)
    persistence.save_model(out, model)
    _write_loss_csv(out, losses)
    _write_run_config(_config_sidecar(out), args, "train-svdd")
    print(
        f"trained SVDD for {len(losses)} epochs; mean distance "
        f"{distances[0]:.6g} -> {distances[-1]:.6g}; saved to {out}"
    )
    return EXIT_OK


def _load_typed_model(path: str, expect: str):
    model = persistence.load_model(path)
    actual = "vae" if isinstance(model, models.VaeModel) else "svdd"
    if actual != expect:
        raise CliError(f"{path} holds a {actual} model, expected {expect}")
    return model


def _build_scorer(args):
    kind = args.scorer
    if kind in ("knn", "kde"):
        if not args.train_data:
            raise CliError(f"the {kind} scorer needs --train-data")
        train, _ = persistence.load_dataset(args.train_data)
        if args.split_m is not None:
            if not 0 < args.split_m < train.shape[0]:
                raise CliError(f"--split-m must be in (0, {train.shape[0]})")
            proper, cal_part = train[: args.split_m], train[args.split_m :]
        else:
            proper, cal_part = train, None
        if kind == "knn":
            scorer = nonconformity.KnnScorer(proper, k=args.k)
        else:
            scorer = nonconformity.KdeScorer(proper, bandwidth=args.bandwidth)
        return scorer, cal_part
    if not args.model:
        raise CliError(f"the {kind} scorer needs --model")
    model = _load_typed_model(args.model, kind)
    if kind == "vae":
        return nonconformity.VaeScorer(model), None
    return nonconformity.SvddScorer(model), None


def _cmd_calibrate(args) -> int:
    out = Path(args.out)
    scorer, split_cal = _build_scorer(args)
    if args.cal_data:
        cal_examples, _ = persistence.load_dataset(args.cal_data)
    elif split_cal is not None:
        cal_examples = split_cal
    else:
        raise CliError("need --cal-data (or --train-data with --split-m)")
    cal = conformal.calibration_scores(
        scorer, cal_examples, samples=args.cal_samples, seed=args.seed
    )
    persistence.save_calibration(out, cal)
    _write_run_config(_config_sidecar(out), args, "calibrate")
    print(f"calibrated {len(cal)} scores with the {scorer.kind} scorer; saved to {out}")
    return EXIT_OK


def _default_tau(method: str, tau: float | None) -> float:
    if tau is not None:
        return tau
    return 156.0 if method == "vae" else 14.0


def _make_pipeline(method, model, cal, n, delta, tau, seed):
    if method == "vae":
        return conformal.VaePipeline(model, cal, n_samples=n, delta=delta, tau=tau, seed=seed)
    return conformal.SvddPipeline(model, cal, window=n, tau=tau, seed=seed)


def _cmd_detect(args) -> int:
    out = Path(args.out)
    model = _load_typed_model(args.model, args.method)
    if args.method == "vae":
        scorer = nonconformity.VaeScorer(model)
    else:
        scorer = nonconformity.SvddScorer(model)
    cal = persistence.load_calibration(args.cal, scorer=scorer)
    stream, _ = persistence.load_dataset(args.input)
    tau = _default_tau(args.method, args.tau)
    pipeline = _make_pipeline(args.method, model, cal, args.N, args.delta, tau, args.seed)
    alarmed = False
    rows = []
    if args.method == "vae":
        header = ["step", "score"] + [f"p_{k + 1}" for k in range(args.N)] + ["log_m", "s", "alarm"]
        for t, z in enumerate(stream):
            res = pipeline.step(z)
            alarmed |= res.alarm
            rows.append([t, res.score, *res.p_values, res.m_log, res.s, res.alarm])
    else:
        header = ["step", "score", "p", "log_m", "s", "alarm"]
        for t, z in enumerate(stream):
            res = pipeline.step(z)
            alarmed |= res.alarm
            rows.append([t, res.score, res.p, res.m_log, res.window_log_p_sum, res.alarm])
    _write_csv(out, header, rows)
    _write_run_config(_config_sidecar(out), args, "detect")
    print(f"processed {len(stream)} steps; {'alarm raised' if alarmed else 'no alarm'}")
    return EXIT_ALARM if alarmed else EXIT_OK


def _read_sim_config(path: str) -> dict[str, str]:
    cfg = persistence.load_config(path)
    for key in ("model", "cal"):
        if key not in cfg:
            raise CliError(f"simulation config {path} is missing {key!r}")
    return cfg


def _sim_params(cfg: dict[str, str], method: str, seed_override: int | None):
    n = int(cfg.get("n", 10))
    delta = float(cfg.get("delta", 6.0))
    tau = float(cfg["tau"]) if "tau" in cfg else _default_tau(method, None)
    max_steps = int(cfg.get("max_steps", 150))
    ood_fraction = float(cfg.get("ood_fraction", 0.5))
    ood_margin = float(cfg.get("ood_margin", 5.0))
    seed = seed_override if seed_override is not None else int(cfg.get("seed", 0))
    return n, delta, tau, max_steps, ood_fraction, ood_margin, seed


def _sim_setup(args):
    cfg = _read_sim_config(args.config)
    method = args.method
    model = _load_typed_model(cfg["model"], method)
    scorer = (
        nonconformity.VaeScorer(model) if method == "vae" else nonconformity.SvddScorer(model)
    )
    cal = persistence.load_calibration(cfg["cal"], scorer=scorer)
    n, delta, tau, max_steps, ood_fraction, ood_margin, seed = _sim_params(
        cfg, method, args.seed
    )
    side = math.isqrt(model.input_dim)
    if side * side != model.input_dim:
        raise CliError("model input dimension is not a square image")
    gen = episodes.SceneGenerator(side=side, seed=seed)

    def factory(tau_value=tau):
        return _make_pipeline(method, model, cal, n, delta, tau_value, seed)

    return cfg, model, cal, gen, factory, n, delta, tau, max_steps, ood_fraction, ood_margin, seed


def _cmd_simulate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (cfg, _model, _cal, gen, factory, n, delta, tau, max_steps,
     ood_fraction, ood_margin, seed) = _sim_setup(args)
    schedules = episodes.make_suite_schedules(args.episodes, ood_fraction, seed, ood_margin)
    metrics, diagnostics = episodes.run_suite(
        gen, schedules, factory, max_steps=max_steps, seed=seed + 10000
    )
    _write_csv(
        out_dir / "episodes.csv",
        ["episode", "label", "onset_step", "alarm_step", "verdict", "delay_frames"],
        [
            (i, r.label, r.onset_step, r.alarm_step, r.verdict, r.delay_frames)
            for i, r in enumerate(metrics.results)
        ],
    )
    params = f"{n}, {delta}, {tau}" if args.method == "vae" else f"{n}, {tau}"
    _write_csv(
        out_dir / "summary.csv",
        ["parameters", "false_positive", "false_negative", "avg_delay_frames"],
        [(
            params,
            f"{metrics.false_positives}/{metrics.in_dist_count}",
            f"{metrics.false_negatives}/{metrics.ood_count}",
            metrics.mean_delay,
        )],
    )
    for i, records in enumerate(diagnostics):
        _write_csv(
            out_dir / f"episode_{i:03d}.csv",
            ["step", "r", "score", "p_values", "log_m", "s", "alarm"],
            [
                (rec.step, rec.r, rec.score, ";".join(_fmt(p) for p in rec.p_values),
                 rec.m_log, rec.s, rec.alarm)
                for rec in records
            ],
        )
    _write_run_config(out_dir / "config.txt", args, "simulate")
    delay = "n/a" if metrics.mean_delay is None else f"{metrics.mean_delay:.2f}"
    print(
        f"{args.episodes} episodes: FP {metrics.false_positives}/{metrics.in_dist_count}, "
        f"FN {metrics.false_negatives}/{metrics.ood_count}, mean delay {delay} frames"
    )
    return EXIT_OK


def _parse_grid(text: str, method: str) -> tuple[list[float] | None, list[float]]:
    deltas: list[float] | None = None
    taus: list[float] | None = None
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise CliError(f"bad grid component {part!r}; expected name=v1,v2,...")
        name, values = part.split("=", 1)
        parsed = [float(v) for v in values.split(",") if v]
        if not parsed:
            raise CliError(f"empty grid for {name!r}")
        if name.strip() == "delta":
            deltas = parsed
        elif name.strip() == "tau":
            taus = parsed
        else:
            raise CliError(f"unknown grid dimension {name.strip()!r}")
    if taus is None:
        raise CliError("grid must include tau=...")
    if method == "vae" and deltas is None:
        raise CliError("the vae grid must include delta=...")
    return deltas, taus


def _cmd_tune(args) -> int:
    out = Path(args.out)
    deltas, taus = _parse_grid(args.grid, args.method)
    (cfg, _model, _cal, gen, factory, n, _delta, _tau, max_steps,
     ood_fraction, ood_margin, seed) = _sim_setup(args)
    schedules = episodes.make_suite_schedules(args.episodes, ood_fraction, seed, ood_margin)
    traces = episodes.collect_traces(gen, schedules, factory, max_steps, seed=seed + 10000)
    mode = conformal.STATEFUL_CUSUM if args.method == "vae" else conformal.STATELESS_THRESHOLD
    best, points = episodes.tune_thresholds(traces, mode, taus, deltas)
    _write_csv(
        out,
        ["delta", "tau", "false_positives", "false_negatives", "mean_delay", "objective"],
        [(p.delta, p.tau, p.false_positives, p.false_negatives, p.mean_delay, p.objective)
         for p in points],
    )
    _write_run_config(_config_sidecar(out), args, "tune")
    if best is None:
        print("no grid point achieved zero false positives", file=sys.stderr)
        return EXIT_ERROR
    delta_part = "" if best.delta is None else f"delta={_fmt(best.delta)} "
    delay = "n/a" if best.mean_delay is None else f"{best.mean_delay:.2f}"
    print(
        f"best: {delta_part}tau={_fmt(best.tau)} fp={best.false_positives} "
        f"fn={best.false_negatives} mean_delay={delay}"
    )
    return EXIT_OK


def _cmd_bench(args) -> int:
    out = Path(args.out)
    model = _load_typed_model(args.model, args.method)
    scorer = (
        nonconformity.VaeScorer(model) if args.method == "vae" else nonconformity.SvddScorer(model)
    )
    cal = persistence.load_calibration(args.cal, scorer=scorer)
    side = math.isqrt(model.input_dim)
    if side * side != model.input_dim:
        raise CliError("model input dimension is not a square image")
    gen = episodes.SceneGenerator(side=side, seed=args.seed)
    tau = _default_tau(args.method, args.tau)

    def factory(n: int):
        return _make_pipeline(args.method, model, cal, n, args.delta, tau, args.seed)

    rows = episodes.benchmark_timing(factory, gen, args.N_list, steps=args.steps, seed=args.seed)
    _write_csv(
        out,
        ["method", "n", "min", "q1", "q2", "q3", "max"],
        [(r.method, r.n, r.min_ms, r.q1_ms, r.q2_ms, r.q3_ms, r.max_ms) for r in rows],
    )
    _write_run_config(_config_sidecar(out), args, "bench")
    for r in rows:
        print(f"{r.method} N={r.n}: median {r.q2_ms:.3f} ms/step")
    return EXIT_OK


def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--data", required=True, help="training DatasetFile")
    p.add_argument("--out", required=True, help="output ModelFile")
    p.add_argument("--epochs", type=_positive_int, default=300, help="searching-phase epochs")
    p.add_argument("--epochs2", type=int, default=100, help="fine-tuning-phase epochs")
    p.add_argument("--lr", type=float, default=1e-3, help="searching-phase learning rate")
    p.add_argument("--lr2", type=float, default=1e-4, help="fine-tuning-phase learning rate")
    p.add_argument("--batch", type=_positive_int, default=64)
    p.add_argument("--hidden", default="64,32", help="hidden layer widths, comma-separated")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="icad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--dim", type=int, default=256, help="example dimension (a square)")
    p.add_argument("--r-min", type=float, default=0.0)
    p.add_argument("--r-max", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-vae", help="train the reconstruction model")
    _add_train_flags(p)
    p.add_argument("--latent", type=_positive_int, default=8)
    p.set_defaults(func=_cmd_train_vae)

    p = sub.add_parser("train-svdd", help="train the distance-to-center model")
    _add_train_flags(p)
    p.add_argument("--out-dim", type=_positive_int, default=8)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--pretrain", action="store_true",
                   help="initialize the mapper from a trained autoencoder")
    p.add_argument("--pre-epochs", type=_positive_int, default=60)
    p.add_argument("--pre-epochs2", type=int, default=20)
    p.set_defaults(func=_cmd_train_svdd)

    p = sub.add_parser("calibrate", help="compute sorted calibration scores")
    p.add_argument("--scorer", choices=("knn", "kde", "vae", "svdd"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="ModelFile for the vae/svdd scorers")
    p.add_argument("--train-data", help="proper training DatasetFile for knn/kde")
    p.add_argument("--cal-data", help="calibration DatasetFile")
    p.add_argument("--split-m", type=int, default=None,
                   help="split --train-data: first M proper, rest calibration")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--cal-samples", type=int, default=0,
                   help="vae only: pool this many sampled-reconstruction scores per example")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("detect", help="stream a dataset through a detection pipeline")
    p.add_argument("--method", choices=("vae", "svdd"), required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--cal", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--N", type=_positive_int, default=10,
                   help="reconstruction samples (vae) or window size (svdd)")
    p.add_argument("--delta", type=float, default=6.0)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="per-step diagnostics CSV")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("simulate", help="run drift episodes and report metrics")
    p.add_argument("--episodes", type=_positive_int, required=True)
    p.add_argument("--method", choices=("vae", "svdd"), required=True)
    p.add_argument("--config", required=True, help="key=value run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("tune", help="grid-search detector thresholds on a tuning suite")
    p.add_argument("--method", choices=("vae", "svdd"), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True,
                   help='e.g. "delta=2,4,6;tau=40,80" (vae) or "tau=8,12,16" (svdd)')
    p.add_argument("--episodes", type=_positive_int, default=30)
    p.add_argument("--out", required=True, help="grid results CSV")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_tune)

    p = sub.add_parser("bench", help="per-step execution-time quartiles")
    p.add_argument("--method", choices=("vae", "svdd"), required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--cal", required=True)
    p.add_argument("--N-list", dest="N_list", type=_int_list, default=[5, 10, 20])
    p.add_argument("--steps", type=_positive_int, default=1000)
    p.add_argument("--delta", type=float, default=6.0)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"icad: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (persistence.PersistenceError, conformal.FingerprintMismatchError,
            models.TrainingDivergedError, ValueError, RuntimeError, OSError) as exc:
        print(f"icad: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
