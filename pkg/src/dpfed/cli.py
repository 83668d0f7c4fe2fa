"""Command-line front end: run experiments, sweep grids, query the accountant.

Subcommands:
  run                train one federated model (private or baseline)
  sweep              grid search over B, E, m, sigma; summary CSV
  accountant         standalone delta table for (q, z) compositions
  inspect-partition  per-client label statistics of the non-IID sharding

Config files are flat ``key = value`` text; schedules are written as
comma-separated ``round:value`` breakpoints (a bare number means a
constant schedule). Flags override file values, and every run echoes
its effective config so it can be reproduced exactly.
"""

import argparse
import itertools
import os
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import data, federation, model, telemetry
from .dp import DpConfig, MomentsAccountant, delta_from_moments

DATA_DIR_ENV = "DPFED_DATA_DIR"


def parse_schedule(text):
    """'0.5' -> constant; '1:30,20:50' -> breakpoints."""
    text = str(text).strip()
    if ":" not in text:
        return [(1, float(text))]
    points = []
    for part in text.split(","):
        r, v = part.split(":")
        points.append((int(r), float(v)))
    return points


def format_schedule(schedule):
    if isinstance(schedule, (int, float)):
        return repr(float(schedule))
    return ",".join(f"{r}:{v:g}" for r, v in schedule)


def read_config_file(path):
    values = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


CONFIG_KEYS = [
    "K", "B", "E", "eta", "max_rounds", "seed", "eval_every", "workers",
    "no_dp", "epsilon", "delta_threshold", "m_schedule", "sigma_schedule",
    "target_accuracy", "data_dir",
]

DEFAULTS = {
    "K": 100, "B": 60, "E": 4, "eta": 0.1, "max_rounds": 100, "seed": 1,
    "eval_every": 1, "workers": 1, "no_dp": False, "epsilon": 8.0,
    "delta_threshold": 1e-3, "m_schedule": "50", "sigma_schedule": "1.2",
    "target_accuracy": None, "data_dir": None,
}


def effective_settings(args):
    """Defaults <- config file <- command-line flags."""
    settings = dict(DEFAULTS)
    if args.config:
        for key, val in read_config_file(args.config).items():
            if key not in settings:
                raise SystemExit(f"unknown config key: {key}")
            settings[key] = val
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            settings[key] = flag
    if settings["data_dir"] in (None, "", "None"):
        settings["data_dir"] = os.environ.get(DATA_DIR_ENV)
    return settings


def build_config(settings) -> federation.FederatedConfig:
    no_dp = str(settings["no_dp"]).lower() in ("1", "true", "yes")
    dp_cfg = None
    if not no_dp:
        dp_cfg = DpConfig(
            epsilon=float(settings["epsilon"]),
            delta_threshold=float(settings["delta_threshold"]),
            sigma_schedule=parse_schedule(settings["sigma_schedule"]),
            m_schedule=parse_schedule(settings["m_schedule"]),
        )
    target = settings["target_accuracy"]
    target = None if target in (None, "", "None") else float(target)
    return federation.FederatedConfig(
        K=int(settings["K"]),
        B=int(settings["B"]),
        E=int(settings["E"]),
        eta=float(settings["eta"]),
        dp=dp_cfg,
        max_rounds=int(settings["max_rounds"]),
        seed=int(settings["seed"]),
        eval_every=int(settings["eval_every"]),
        target_accuracy=target,
        workers=int(settings["workers"]),
    )


def echo_config(settings, path):
    with open(path, "w") as f:
        for key in CONFIG_KEYS:
            val = settings[key]
            if val is None:
                continue
            if key in ("m_schedule", "sigma_schedule"):
                val = format_schedule(parse_schedule(val)) if not isinstance(val, str) else val
            f.write(f"{key} = {val}\n")


def save_model(params: model.ModelParams, path):
    """arch length, arch entries (uint32 LE), then float64 LE values."""
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(params.arch)))
        f.write(struct.pack(f"<{len(params.arch)}I", *params.arch))
        f.write(params.values.astype("<f8").tobytes())


def load_model(path) -> model.ModelParams:
    with open(path, "rb") as f:
        (n,) = struct.unpack("<I", f.read(4))
        arch = struct.unpack(f"<{n}I", f.read(4 * n))
        values = np.frombuffer(f.read(), dtype="<f8")
    return model.ModelParams(values=values.astype(np.float64), arch=arch)


def _load_data(settings):
    data_dir = settings["data_dir"]
    if not data_dir:
        raise SystemExit(
            f"no data directory: pass --data-dir or set {DATA_DIR_ENV}"
        )
    try:
        return data.load_mnist(data_dir)
    except (FileNotFoundError, data.IdxFormatError) as exc:
        raise SystemExit(f"could not load dataset: {exc}")


def cmd_run(args) -> int:
    settings = effective_settings(args)
    train, test = _load_data(settings)
    try:
        config = build_config(settings)
        config.validate()
    except ValueError as exc:
        raise SystemExit(f"invalid configuration: {exc}")

    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    echo_config(settings, os.path.join(out, "config.echo.txt"))

    history = federation.run_federated(config, train, test)
    telemetry.write_metrics(history, os.path.join(out, "metrics.csv"))
    save_model(history.final_params, os.path.join(out, "model.bin"))
    if history.rounds:
        last = history.rounds[-1]
        print(
            f"stopped: {history.stop_reason} after {len(history.rounds)} rounds, "
            f"accuracy={last.accuracy:.4f}, delta={last.delta:.3e}, "
            f"cc={last.cc_cumulative}"
        )
    else:
        print(f"stopped: {history.stop_reason} after 0 rounds")
    return 0


def _sweep_cell(job):
    settings, (b, e, m, sigma), index = job
    cell = dict(settings)
    cell.update(B=b, E=e, m_schedule=str(m), sigma_schedule=str(sigma))
    cell["seed"] = int(cell["seed"]) + index
    train, test = data.load_mnist(cell["data_dir"])
    config = build_config(cell)
    config.validate()
    history = federation.run_federated(config, train, test)
    best_acc = max((r.accuracy for r in history.rounds), default=0.0)
    cr = len(history.rounds)
    cc = history.rounds[-1].cc_cumulative if history.rounds else 0
    return {
        "B": b, "E": e, "m": m, "sigma": sigma, "seed": cell["seed"],
        "best_accuracy": best_acc, "cr": cr, "cc": cc,
        "stop_reason": history.stop_reason,
    }


def rank_cells(rows):
    """Highest accuracy first; ties broken by fewer communication rounds."""
    return sorted(rows, key=lambda r: (-r["best_accuracy"], r["cr"]))


def cmd_sweep(args) -> int:
    settings = effective_settings(args)
    if not settings["data_dir"]:
        raise SystemExit(f"no data directory: pass --data-dir or set {DATA_DIR_ENV}")
    grid_b = [int(x) for x in args.grid_batch_size.split(",")]
    grid_e = [int(x) for x in args.grid_epochs.split(",")]
    grid_m = [int(x) for x in args.grid_m.split(",")]
    grid_sigma = [float(x) for x in args.grid_sigma.split(",")]
    cells = list(itertools.product(grid_b, grid_e, grid_m, grid_sigma))
    if not cells:
        raise SystemExit("empty sweep grid")

    jobs = [(settings, cell, i) for i, cell in enumerate(cells)]
    workers = int(settings["workers"])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(j) for j in jobs]

    rows = rank_cells(rows)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "summary.csv")
    cols = ["B", "E", "m", "sigma", "seed", "best_accuracy", "cr", "cc", "stop_reason"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
    for row in rows[:5]:
        print(
            f"B={row['B']} E={row['E']} m={row['m']} sigma={row['sigma']}: "
            f"acc={row['best_accuracy']:.4f} cr={row['cr']} cc={row['cc']}"
        )
    print(f"wrote {path} ({len(rows)} cells)")
    return 0


def cmd_accountant(args) -> int:
    acct = None
    if args.load_state:
        with open(args.load_state) as f:
            acct = MomentsAccountant.from_text(f.read())
        if acct.epsilon != args.epsilon:
            acct.epsilon = args.epsilon
    else:
        acct = MomentsAccountant(epsilon=args.epsilon)
    rows = []
    for t in range(1, args.rounds + 1):
        acct.accumulate(args.q, args.z)
        rows.append((t, acct.delta()))
    if args.csv:
        print("round,delta")
        for t, d in rows:
            print(f"{t},{d!r}")
    else:
        print(f"q={args.q} z={args.z} epsilon={args.epsilon}")
        print(f"{'round':>6} {'delta':>14}")
        for t, d in rows:
            print(f"{t:>6} {d:>14.6e}")
    if args.save_state:
        with open(args.save_state, "w") as f:
            f.write(acct.to_text())
    return 0


def cmd_inspect_partition(args) -> int:
    settings = effective_settings(args)
    train, _ = _load_data(settings)
    partition = data.shard_non_iid(train, int(settings["K"]), int(settings["seed"]))
    distinct = []
    for k in range(partition.num_clients):
        hist = data.label_histogram(partition, train, k)
        distinct.append(int(np.count_nonzero(hist)))
    counts = np.bincount(distinct, minlength=6)
    print(f"clients={partition.num_clients} points_per_client={partition.points_per_client}")
    print("distinct-label count distribution:")
    for n, c in enumerate(counts):
        if c:
            print(f"  {n} labels: {c} clients")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dpfed",
        description="Client-level differentially private federated averaging on MNIST",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--clients", dest="K", type=int, help="total clients K")
        p.add_argument("--batch-size", dest="B", type=int, help="local mini-batch size")
        p.add_argument("--epochs", dest="E", type=int, help="local epochs per round")
        p.add_argument("--eta", type=float, help="learning rate")
        p.add_argument("--m-schedule", dest="m_schedule", help="clients per round, round:value breakpoints")
        p.add_argument("--sigma-schedule", dest="sigma_schedule", help="noise multiplier, round:value breakpoints")
        p.add_argument("--epsilon", type=float, help="privacy budget epsilon")
        p.add_argument("--delta-threshold", dest="delta_threshold", type=float, help="stop once delta would exceed this")
        p.add_argument("--rounds", dest="max_rounds", type=int, help="maximum communication rounds")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--no-dp", dest="no_dp", action="store_true", default=None, help="non-private FedAvg baseline")
        p.add_argument("--target-accuracy", dest="target_accuracy", type=float, help="stop once test accuracy reaches this")
        p.add_argument("--out", help="output directory")
        p.add_argument("--data-dir", dest="data_dir", help=f"MNIST directory (default ${DATA_DIR_ENV})")
        p.add_argument("--eval-every", dest="eval_every", type=int, help="rounds between central evaluations")
        p.add_argument("--workers", type=int, help="parallel workers")

    p_run = sub.add_parser("run", help="train one federated model")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid search over B, E, m, sigma")
    add_common(p_sweep)
    p_sweep.add_argument("--grid-batch-size", default="10,60", help="comma list of B values")
    p_sweep.add_argument("--grid-epochs", default="1,4", help="comma list of E values")
    p_sweep.add_argument("--grid-m", default="30,50", help="comma list of m values")
    p_sweep.add_argument("--grid-sigma", default="1.0,1.2", help="comma list of sigma values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_acct = sub.add_parser("accountant", help="standalone delta table")
    p_acct.add_argument("--q", type=float, required=True, help="sampling ratio m/K")
    p_acct.add_argument("--z", type=float, required=True, help="noise multiplier sigma")
    p_acct.add_argument("--rounds", type=int, default=10, help="compositions to evaluate")
    p_acct.add_argument("--epsilon", type=float, default=8.0)
    p_acct.add_argument("--csv", action="store_true", help="machine-readable output")
    p_acct.add_argument("--save-state", help="write accountant state to this file")
    p_acct.add_argument("--load-state", help="resume from a saved accountant state")
    p_acct.set_defaults(func=cmd_accountant)

    p_part = sub.add_parser("inspect-partition", help="per-client label statistics")
    p_part.add_argument("--clients", dest="K", type=int, default=100)
    p_part.add_argument("--seed", type=int, default=1)
    p_part.add_argument("--config", help="flat key=value config file")
    p_part.add_argument("--data-dir", dest="data_dir")
    p_part.set_defaults(func=cmd_inspect_partition)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
