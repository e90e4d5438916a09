"""Experiment driver: run sessions, check the convergence bound, generate data.

    vfedmh run -c experiment.cfg        train with the configured method
    vfedmh bound-check -c experiment.cfg
    vfedmh synth -o data/ --n 4000 ...  write a synthetic dataset
    vfedmh ledger out/summary.json      echo the round accounting

Exit codes: 0 success, 2 configuration error, 3 runtime/protocol error.
Diagnostics go to stderr, human summaries to stdout.  The VFEDMH_OUTPUT_DIR
environment variable overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import os
import socket
import subprocess
import sys
import time

import numpy as np

from . import baselines, bounds, metrics, nn, secagg
from .config import ConfigError, ExperimentConfig, load_config
from .data import Dataset, load_csv, load_idx, synth_blobs, vertical_split, write_csv, write_idx
from .optim import OptimizerConfig
from .protocol import ActiveParty, PassiveParty, ProtocolError, run_training
from .transport import TcpClient, TcpHub, TransportError


def _load_datasets(cfg: ExperimentConfig):
    kind = cfg["dataset.kind"]
    if kind == "synthetic":
        n, n_test = cfg["dataset.n"], cfg["dataset.n_test"]
        full = synth_blobs(
            n + n_test,
            cfg["dataset.classes"],
            cfg["dataset.features"],
            cfg["dataset.spread"],
            seed=cfg["seed"],
            scale=cfg["dataset.scale"],
        )
        train = Dataset(full.features[:n], full.labels[:n], full.n_classes)
        test = (
            Dataset(full.features[n:], full.labels[n:], full.n_classes) if n_test else None
        )
        return train, test
    if kind == "idx":
        train = load_idx(cfg["dataset.images"], cfg["dataset.labels"], limit=cfg["dataset.limit"])
        test = None
        if cfg["dataset.test_images"] and cfg["dataset.test_labels"]:
            test = load_idx(
                cfg["dataset.test_images"], cfg["dataset.test_labels"], limit=cfg["dataset.test_limit"]
            )
        return train, test
    train = load_csv(cfg["dataset.csv"])
    test = load_csv(cfg["dataset.test_csv"]) if cfg["dataset.test_csv"] else None
    if test is not None:
        classes = max(train.n_classes, test.n_classes)
        train.n_classes = test.n_classes = classes
    return train, test


def _output_dir(cfg: ExperimentConfig) -> str:
    out = os.environ.get("VFEDMH_OUTPUT_DIR") or cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    return out


def _final_records(records):
    last_epoch = max((r.epoch for r in records), default=None)
    return {r.party: r for r in records if r.epoch == last_epoch}


def _write_outputs(cfg, out_dir, records, ledger, train, extra=None):
    metrics.write_records_csv(records, os.path.join(out_dir, "metrics.csv"))
    n_parties = cfg.n_passive + 1
    finals = _final_records(records)
    summary = {
        "method": cfg["method"],
        "seed": cfg["seed"],
        "n_parties": n_parties,
        "epochs": cfg["training.epochs"],
        "batch_size": cfg["training.batch_size"],
        "n_train": train.n_samples,
        "final": {
            str(p): {"train_loss": r.train_loss, "test_acc": r.test_acc}
            for p, r in sorted(finals.items())
        },
        "ledger": ledger.summary() if ledger else None,
        "ledger_check": (
            metrics.ledger_check(
                ledger,
                train.n_samples,
                cfg["training.batch_size"],
                cfg["training.epochs"],
                num_models=n_parties,
            )
            if ledger
            else None
        ),
        "round_units_3_models": metrics.round_unit_totals(cfg["training.epochs"], 3),
        "bound": None,  # populated only by the bound-check command
    }
    if extra:
        summary.update(extra)
    metrics.write_summary_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def _print_summary(summary):
    print(f"method={summary['method']} epochs={summary['epochs']} parties={summary['n_parties']}")
    for party, vals in summary["final"].items():
        print(
            f"  party {party}: train_loss={vals['train_loss']:.4f} test_acc={vals['test_acc']:.4f}"
        )


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out_dir = _output_dir(cfg)
    method = cfg["method"]
    if method != "vfedmh" and cfg["transport.kind"] == "tcp":
        raise ConfigError(f"method {method!r} supports only the inmem transport")
    train, test = _load_datasets(cfg)
    if train.n_features < cfg.n_passive + 1:
        raise ConfigError(
            f"{train.n_features} features cannot be split across {cfg.n_passive + 1} parties"
        )
    if method == "local":
        return _run_local(cfg, out_dir, train, test)
    if method == "aggvfl":
        return _run_aggvfl(cfg, out_dir, train, test)
    if cfg["transport.kind"] == "tcp":
        if args.party is not None:
            return _run_tcp_party(cfg, out_dir, train, test, args.party, args.port)
        return _run_tcp_parent(args, cfg)
    session = cfg.session()
    shards, labels = vertical_split(train, session.n_parties)
    test_shards = test_labels = None
    if test is not None:
        test_shards, test_labels = vertical_split(test, session.n_parties)
    result = run_training(
        session, shards, labels, test_shards, test_labels, n_classes=train.n_classes
    )
    summary = _write_outputs(cfg, out_dir, result.records, result.ledger, train)
    _print_summary(summary)
    return 0


def _run_local(cfg, out_dir, train, test) -> int:
    session = cfg.session()
    shards, labels = vertical_split(train, session.n_parties)
    test_shards = test_labels = None
    if test is not None:
        test_shards, test_labels = vertical_split(test, session.n_parties)
    party = cfg.party(0)
    spec = nn.spec_from_name(party.model, shards[0].shape[1], session.d_emb, train.n_classes)
    result = baselines.run_local(
        shards[0],
        labels,
        spec,
        OptimizerConfig(kind=party.optimizer, learning_rate=party.lr),
        epochs=session.epochs,
        batch_size=session.batch_size,
        seed=session.seed,
        test_shard=None if test_shards is None else test_shards[0],
        test_labels=test_labels,
    )
    summary = _write_outputs(cfg, out_dir, result.records, None, train)
    _print_summary(summary)
    return 0


def _run_aggvfl(cfg, out_dir, train, test) -> int:
    session = cfg.session()
    shards, labels = vertical_split(train, session.n_parties)
    test_shards = test_labels = None
    if test is not None:
        test_shards, test_labels = vertical_split(test, session.n_parties)
    result = baselines.run_aggvfl(
        session, shards, labels, test_shards, test_labels, n_classes=train.n_classes
    )
    extra = {"aggregate_acc": result.aggregate_acc[-1] if result.aggregate_acc else None}
    summary = _write_outputs(cfg, out_dir, result.records, result.ledger, train, extra)
    _print_summary(summary)
    return 0


# ---------------------------------------------------------------------------
# tcp mode: one process per party, active first
# ---------------------------------------------------------------------------


def _free_port(host: str) -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _run_tcp_parent(args, cfg: ExperimentConfig) -> int:
    host = cfg["transport.host"]
    port = cfg["transport.port"] or _free_port(host)
    procs = []
    base_cmd = [sys.executable, "-m", "vfedmh.cli", "run", "-c", args.config, "--port", str(port)]
    for party in range(cfg.n_passive + 1):
        procs.append(subprocess.Popen(base_cmd + ["--party", str(party)]))
        if party == 0:
            time.sleep(0.2)  # let the hub start listening before passives dial
    code = 0
    for proc in procs:
        proc.wait()
        code = code or proc.returncode
    return code


def _run_tcp_party(cfg, out_dir, train, test, party: int, port_override) -> int:
    from .protocol import build_party_model

    session = cfg.session()
    if not 0 <= party <= session.n_passive:
        raise ConfigError(f"party index {party} outside 0..{session.n_passive}")
    host = cfg["transport.host"]
    port = port_override or cfg["transport.port"]
    if not port:
        raise ConfigError("tcp mode needs transport.port (or the parent's --port)")
    shards, labels = vertical_split(train, session.n_parties)
    test_shards = test_labels = None
    if test is not None:
        test_shards, test_labels = vertical_split(test, session.n_parties)
    model = build_party_model(session, party, shards[party].shape[1], train.n_classes)
    group = secagg.resolve_group(session.group, session.allow_test_groups)
    if party == 0:
        endpoint = TcpHub(host, port, session.n_passive)
        runtime = ActiveParty(
            0,
            session,
            model,
            endpoint,
            shards[0],
            None if test_shards is None else test_shards[0],
            train_labels=labels,
            test_labels=test_labels,
        )
        try:
            runtime.run()
        finally:
            endpoint.close()
        summary = _write_outputs(cfg, out_dir, runtime.records, runtime.ledger, train)
        _print_summary(summary)
        return 0
    deadline = time.monotonic() + 30.0
    while True:
        try:
            endpoint = TcpClient(host, port, party)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise TransportError(f"party {party} could not reach the hub at {host}:{port}")
            time.sleep(0.05)
    runtime = PassiveParty(
        party,
        session,
        model,
        endpoint,
        shards[party],
        None if test_shards is None else test_shards[party],
        group=group,
    )
    try:
        runtime.run()
    finally:
        endpoint.close()
    return 0


# ---------------------------------------------------------------------------
# bound-check
# ---------------------------------------------------------------------------


def cmd_bound_check(args) -> int:
    cfg = load_config(args.config)
    if cfg["bound.model"] != "linear":
        raise ConfigError(
            f"bound.model {cfg['bound.model']!r} is not convex; only 'linear' "
            "(one dense decision layer) is certifiable"
        )
    n, n_test = cfg["bound.n"], 0
    violations = checked = 0
    informative = True
    fixed_points = []
    for i in range(cfg["bound.seeds"]):
        data_seed = cfg["seed"] * 1000 + i
        ds = synth_blobs(
            n,
            cfg["bound.classes"],
            cfg["bound.features"],
            cfg["bound.spread"],
            seed=data_seed,
            scale=cfg["bound.scale"],
        )
        report = bounds.run_convex_calibration(
            ds,
            n_passive=cfg["bound.parties"],
            d_emb=cfg["bound.d_emb"],
            epochs=cfg["bound.epochs"],
            eta=cfg["bound.lr"],
            l2=cfg["bound.l2"],
            seed=data_seed,
            clamp_lr=cfg["bound.clamp_lr"],
        )
        violations += report.violations
        checked += report.checked
        informative = informative and report.informative
        fixed_points.append(report.params.fixed_point)
    rate = violations / checked if checked else 0.0
    fixed_point = float(np.mean(fixed_points))
    out_dir = _output_dir(cfg)
    metrics.write_summary_json(
        os.path.join(out_dir, "bound_check.json"),
        {
            "seeds": cfg["bound.seeds"],
            "violations": violations,
            "checked": checked,
            "violation_rate": rate,
            "fixed_point": fixed_point,
            "informative": informative,
        },
    )
    print(f"bound check over {cfg['bound.seeds']} seeds: {violations}/{checked} violations ({rate:.2%})")
    print(f"fixed point of the recursion: {fixed_point:.6g}")
    if not informative:
        print("warning: contraction factor outside [0, 1); bound is non-informative")
        return 0
    return 0 if rate <= 0.05 else 1


# ---------------------------------------------------------------------------
# synth / ledger
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    full = synth_blobs(
        args.n + args.n_test, args.classes, args.features, args.spread, args.seed, scale=args.scale
    )
    train = Dataset(full.features[: args.n], full.labels[: args.n], full.n_classes)
    test = Dataset(full.features[args.n :], full.labels[args.n :], full.n_classes)
    if args.format == "csv":
        paths = [os.path.join(args.out, "train.csv"), os.path.join(args.out, "test.csv")]
        write_csv(train, paths[0])
        write_csv(test, paths[1])
    else:
        # IDX wants a pixel grid in [0, 1]; min-max scale then quantize
        lo, hi = full.features.min(), full.features.max()
        side = int(np.sqrt(args.features))
        if side * side != args.features:
            raise ConfigError(f"--format idx needs a square feature count, got {args.features}")
        paths = [os.path.join(args.out, p) for p in (
            "train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx")]
        for ds, ip, lp in ((train, paths[0], paths[1]), (test, paths[2], paths[3])):
            scaled = Dataset((ds.features - lo) / (hi - lo), ds.labels, ds.n_classes)
            write_idx(scaled, ip, lp, side, side)
    for p in paths:
        print(p)
    return 0


def cmd_ledger(args) -> int:
    import json

    with open(args.summary) as f:
        summary = json.load(f)
    epochs = summary["epochs"]
    n_parties = summary["n_parties"]
    print(f"epochs: {epochs}, models trained: {n_parties}")
    check = summary.get("ledger_check")
    if check:
        print(f"per-passive-party training messages: expected {check['expected_per_party']}")
        for party, observed in sorted(check["observed_per_party"].items()):
            flag = "" if party not in check["mismatch"] else "  << MISMATCH"
            print(f"  party {party}: observed {observed}{flag}")
        units = check["round_units"]
        print(
            f"round units at {epochs} epochs: this method 1 x 4 x {epochs} = {units['vfedmh']}, "
            f"one-model-at-a-time {n_parties} x 2 x {epochs} = {units['existing']}"
        )
    ref = summary["round_units_3_models"]
    print(
        f"three-model reference: 1 x 4 x {epochs} = {ref['vfedmh']} vs "
        f"3 x 2 x {epochs} = {ref['existing']}"
    )
    ledger = summary.get("ledger")
    if ledger:
        print(f"training bytes: {ledger['train_bytes']}")
        print(f"setup: {ledger['setup_msgs']} msgs / {ledger['setup_bytes']} bytes")
        print(f"eval: {ledger['eval_msgs']} msgs / {ledger['eval_bytes']} bytes")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfedmh", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train with the configured method")
    p_run.add_argument("-c", "--config", required=True)
    p_run.add_argument("--party", type=int, default=None, help=argparse.SUPPRESS)
    p_run.add_argument("--port", type=int, default=None, help=argparse.SUPPRESS)
    p_run.set_defaults(func=cmd_run)

    p_bound = sub.add_parser("bound-check", help="verify the convergence bound empirically")
    p_bound.add_argument("-c", "--config", required=True)
    p_bound.set_defaults(func=cmd_bound_check)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("-o", "--out", required=True)
    p_synth.add_argument("--n", type=int, default=4000)
    p_synth.add_argument("--n-test", type=int, default=1000)
    p_synth.add_argument("--classes", type=int, default=10)
    p_synth.add_argument("--features", type=int, default=64)
    p_synth.add_argument("--spread", type=float, default=0.5)
    p_synth.add_argument("--scale", type=float, default=2.3)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--format", choices=("csv", "idx"), default="csv")
    p_synth.set_defaults(func=cmd_synth)

    p_ledger = sub.add_parser("ledger", help="print round accounting from a summary file")
    p_ledger.add_argument("summary")
    p_ledger.set_defaults(func=cmd_ledger)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ProtocolError, TransportError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
