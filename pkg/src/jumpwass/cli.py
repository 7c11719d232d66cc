"""Command-line front end: ``jumpwass {simulate,train,sweep,diagnose,presets}``.

Any ``--section.field VALUE`` flag overrides the matching config field, e.g.
``--train.lr 0.01`` or ``--model_params.y0=0.5``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import (PRESETS, ConfigError, apply_overrides, build_experiment, config_hash,
                     parse_override_args, parse_value, preset, sweep_cells, write_manifest)
from .nn import load_checkpoint, save_checkpoint
from .process import make_model
from .reconstruction import (TrainingAborted, generate_observed, summarize_sweep, sweep, train)
from .simulate import (Ensemble, SimulationBlowup, load_ensemble, save_ensemble,
                       simulate_ensemble)
from .transport import estimate_moment_matrices, gaussian_lower_bound, optimal_assignment, rate_h

log = logging.getLogger("jumpwass")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
DEFAULT_LADDER = (50, 100, 200, 400)


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(args, extra: list[str]) -> dict:
    cfg = preset(args.preset) if args.preset else {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
            cfg = _merge(cfg, json.loads(text))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not cfg:
        raise ConfigError("give --preset and/or --config")
    shortcuts = []
    if getattr(args, "prior", None) is not None:
        shortcuts.append(("train.prior", args.prior))
    if getattr(args, "epochs", None) is not None:
        shortcuts.append(("train.epochs", args.epochs))
    if getattr(args, "seed", None) is not None:
        shortcuts.append(("train.seed", args.seed))
    if getattr(args, "format", None) is not None:
        shortcuts.append(("format", args.format))
    return apply_overrides(cfg, shortcuts + parse_override_args(extra))


def _outdir(args, cfg: dict, command: str) -> Path:
    out = Path(args.out or cfg.get("output") or f"runs/{command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8")
    return path


def _ensemble_name(cfg: dict) -> str:
    return "ensemble.csv" if cfg.get("format", "binary") == "csv" else "ensemble.jde"


# -- commands ---------------------------------------------------------------------

def cmd_simulate(args, cfg: dict) -> int:
    exp = build_experiment(cfg)
    out = _outdir(args, cfg, "simulate")
    t0 = time.perf_counter()
    ens = generate_observed(exp)
    path = out / _ensemble_name(cfg)
    save_ensemble(ens, path)
    write_manifest(out, "simulate", cfg, {"data_seed": exp.data_seed}, [path],
                   time.perf_counter() - t0)
    print(f"wrote {path} ({ens.n_traj} trajectories x {ens.grid.N + 1} points)")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    exp = build_experiment(cfg)
    out = _outdir(args, cfg, "train")
    t0 = time.perf_counter()
    truth = exp.truth()
    observed = load_ensemble(args.ensemble) if args.ensemble else generate_observed(exp)
    nets = optimizer = None
    start = 0
    if args.resume:
        src = Path(args.resume)
        nets, optimizer = load_checkpoint(src / "checkpoint.jdnn")
        prev = json.loads((src / "trace.json").read_text(encoding="utf-8"))
        start = prev["start_epoch"] + prev["epochs_completed"]
    try:
        trace, report = train(exp.train, observed, truth, exp.initial, nets=nets,
                              optimizer=optimizer, start_epoch=start)
    except (TrainingAborted, SimulationBlowup) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    files = [_write_json(out / "trace.json", trace.to_dict()),
             _write_json(out / "report.json", report.to_dict())]
    ck = out / "checkpoint.jdnn"
    save_checkpoint(ck, trace.nets, trace.optimizer)
    files.append(ck)
    write_manifest(out, "train", cfg, {"data_seed": exp.data_seed, "train_seed": exp.train.seed,
                                       "start_epoch": start}, files, time.perf_counter() - t0)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def _write_csv(path: Path, rows: list[dict], lead: list[str]) -> Path:
    keys = lead + [k for r in rows for k in r if k not in lead]
    keys = list(dict.fromkeys(keys))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in keys})
    return path


def cmd_sweep(args, cfg: dict) -> int:
    for axis in args.axis or []:
        path, sep, raw = axis.partition("=")
        if not sep:
            raise ConfigError(f"--axis needs PATH=VALUES, got {axis!r}")
        values = parse_value(raw)
        cfg.setdefault("sweep", {}).setdefault("grid", {})[path] = (
            values if isinstance(values, list) else [values])
    if args.repeats is not None:
        cfg.setdefault("sweep", {})["repeats"] = args.repeats
    cells, repeats = sweep_cells(cfg)
    out = _outdir(args, cfg, "sweep")
    t0 = time.perf_counter()
    rows = sweep(cells, repeats=repeats, workers=max(1, args.threads))
    axes = sorted((cfg.get("sweep") or {}).get("grid") or {})
    files = [_write_csv(out / "sweep.csv", rows, ["cell", *axes, "repeat"]),
             _write_csv(out / "sweep_summary.csv", summarize_sweep(rows), ["cell"])]
    seeds = {"data_seed": cells[0][1].data_seed, "train_seed": cells[0][1].train.seed,
             "repeats": repeats}
    write_manifest(out, "sweep", cfg, seeds, files, time.perf_counter() - t0)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"wrote {len(rows)} rows to {files[0]} ({failed} failed)")
    return EXIT_OK


def slice_w2sq(a: Ensemble, b: Ensemble) -> np.ndarray:
    """Exact W2^2 between matching slices ``0..N`` of two ensembles."""
    if a.grid.N != b.grid.N or not np.isclose(a.grid.T, b.grid.T, rtol=1e-12):
        raise ConfigError("ensembles live on different grids")
    if a.n_traj != b.n_traj or a.d != b.d:
        raise ConfigError("ensembles differ in size or dimension")
    return np.array([optimal_assignment(a.slice(i), b.slice(i)).cost
                     for i in range(a.grid.N + 1)])


def diagnose(ens: Ensemble, ens_hat: Ensemble, ladder=DEFAULT_LADDER, specs=None) -> dict:
    per = slice_w2sq(ens, ens_hat)
    dt = ens.grid.dt
    result = {
        "grid": {"T": ens.grid.T, "N": ens.grid.N, "dt": dt},
        "n_traj": ens.n_traj,
        "per_slice_w2sq": per.tolist(),
        "decoupled_integral": float(dt * per[:-1].sum()),
        "rate_ladder": [{"M": int(M), "h": rate_h(int(M), ens.d)} for M in ladder],
        "gaussian_lower_bound": None,
    }
    if specs is not None:
        mm = estimate_moment_matrices(specs[0], specs[1], (ens, ens_hat), ens.grid, ens.grid.N)
        result["gaussian_lower_bound"] = gaussian_lower_bound(mm, ens.grid)
    return result


def cmd_diagnose(args, cfg: dict) -> int:
    section = cfg.get("diagnose") or {}
    ladder = section.get("ladder", list(DEFAULT_LADDER))
    out = _outdir(args, cfg, "diagnose")
    t0 = time.perf_counter()
    seeds: dict = {}
    if args.ensembles:
        ens, ens_hat = (load_ensemble(p) for p in args.ensembles)
        specs = None
    else:
        base = {k: v for k, v in cfg.items() if k != "diagnose"}
        exp = build_experiment(base)
        cmp = section.get("compare") or {}
        other = build_experiment(_merge(base, cmp))
        truth, wrong = exp.truth(), make_model(other.model, **other.model_params)
        M = int(section.get("n_traj", exp.train.n_traj))
        grid = exp.train.grid
        seed = exp.data_seed
        ens = simulate_ensemble(truth, grid, exp.initial, M, seed=seed)
        ens_hat = simulate_ensemble(wrong, grid, other.initial, M, seed=seed + 1)
        specs = (truth, wrong)
        seeds = {"data_seed": seed, "compare_seed": seed + 1}
    result = diagnose(ens, ens_hat, ladder, specs)
    path = _write_json(out / "diagnostics.json", result)
    write_manifest(out, "diagnose", cfg, seeds, [path], time.perf_counter() - t0)
    print(json.dumps({k: result[k] for k in ("decoupled_integral", "gaussian_lower_bound")}))
    return EXIT_OK


def cmd_presets(args, cfg=None) -> int:
    if args.json:
        print(json.dumps(PRESETS, indent=2, sort_keys=True))
        return EXIT_OK
    head = f"{'preset':<15}{'lr':>7}{'wd':>7}{'epochs':>8}{'M_s':>6}{'dt':>6}{'N':>5}  nets"
    print(head)
    for name, p in PRESETS.items():
        t = p["train"]
        nets = ", ".join(f"{k} {v['hidden_layers']}x{v['width']}" for k, v in t["nets"].items())
        print(f"{name:<15}{t['lr']:>7}{t['weight_decay']:>7}{t['epochs']:>8}{t['n_traj']:>6}"
              f"{t['dt']:>6}{t['N']:>5}  {nets}; init {t['init']}; repeats {p['repeats']}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "sweep": cmd_sweep,
            "diagnose": cmd_diagnose, "presets": cmd_presets}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jumpwass", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train", "sweep", "diagnose"):
        s = sub.add_parser(name)
        s.add_argument("--preset", choices=sorted(PRESETS))
        s.add_argument("--config", help="JSON config file (merged over the preset)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--format", choices=("binary", "csv"))
        s.add_argument("--threads", type=int, default=1, help="cap on worker processes")
        s.add_argument("--prior", help="none | drift | diffusion | jump (or *_given)")
        s.add_argument("--epochs", type=int)
        s.add_argument("--seed", type=int, help="training seed")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            s.add_argument("--ensemble", help="observed ensemble file (else generated)")
            s.add_argument("--resume", help="run directory to continue from")
        if name == "sweep":
            s.add_argument("--axis", action="append", metavar="PATH=VALUES",
                           help="sweep axis, e.g. --axis 'initial.std=[0,0.5]'")
            s.add_argument("--repeats", type=int)
        if name == "diagnose":
            s.add_argument("--ensembles", nargs=2, metavar=("OBSERVED", "OTHER"))
    pr = sub.add_parser("presets")
    pr.add_argument("--json", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "presets":
            if extra:
                raise ConfigError(f"unexpected arguments {extra}")
            return cmd_presets(args)
        cfg = load_config(args, extra)
        log.info("config hash %s", config_hash(cfg))
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
