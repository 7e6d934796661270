"""Command-line entry points.

Subcommands:

* ``simulate``      run any algorithm in-process over a dataset or a
                    synthetic problem, writing a metrics CSV
* ``master``        serve a run over TCP for N remote clients
* ``client``        join a TCP run with one shard file
* ``gen-data``      write a synthetic dataset in LIBSVM format
* ``split-data``    shuffle a dataset and write equal per-client LIBSVM files
* ``check-oracles`` finite-difference validation of the local oracles
* ``traffic-model`` closed-form bytes-on-the-wire for a config

Exit codes: 0 success, 2 bad configuration or data, 3 transport/protocol
failure, 4 numerical failure (divergence, failed factorization or line
search).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import data, linalg, oracle, runtime
from .algorithms import (
    ALGORITHMS,
    DivergenceError,
    HESSIAN_INITS,
    LineSearchError,
    OPTIONS,
    RunConfig,
)
from .compressors import CompressorKind, CompressorSpec
from .linalg import EigenConvergenceError, NotPositiveDefiniteError
from .transport import MasterServer, TransportError, canonical_config

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3
EXIT_NUMERIC = 4


def _parse_synthetic(text: str) -> tuple[int, int]:
    try:
        d_str, m_str = text.split(",")
        return int(d_str), int(m_str)
    except ValueError:
        raise ValueError(f"--synthetic wants D,M (features,samples), got {text!r}")


def _parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must be HOST:PORT, got {text!r}")
    return host, int(port)


def _parse_alpha(text: str) -> float | None:
    return None if text == "auto" else float(text)


def _add_algorithm_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algorithm", choices=ALGORITHMS, default="fednl")
    p.add_argument("--option", choices=OPTIONS, default="b",
                   help="Newton system: a = eigenvalue clamp, b = shift regularization")
    p.add_argument("--compressor", choices=[k.value for k in CompressorKind],
                   default="topk")
    p.add_argument("--k-mult", type=float, default=8.0,
                   help="entry budget k as a multiple of the dimension d (default 8)")
    p.add_argument("--alpha", type=_parse_alpha, default=None, metavar="F|auto",
                   help="estimate learning rate (default: auto from the compressor)")
    p.add_argument("--mu", type=float, default=None,
                   help="eigenvalue floor for option a (default: --lambda)")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3,
                   help="L2 regularization strength (default 1e-3)")
    p.add_argument("--c", type=float, default=0.49, help="line search slope (default 0.49)")
    p.add_argument("--gamma", type=float, default=0.5,
                   help="line search backtracking factor (default 0.5)")
    p.add_argument("--tau", type=int, default=None,
                   help="participants per round (fednl-pp)")
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--hessian-init", choices=HESSIAN_INITS, default="lambda-identity")
    p.add_argument("--reconstruct-indices", choices=("on", "off"), default="on",
                   help="ship only a seed for random index sets (default on)")
    p.add_argument("--topk-ranking", choices=("raw", "weighted"), default="raw",
                   help="topk ranks by |value| (raw) or symmetry-weighted energy")
    p.add_argument("--stop-tol", type=float, default=None,
                   help="stop once the gradient norm falls to this value")
    p.add_argument("--timeout", type=float, default=30.0,
                   help="socket timeout in seconds (default 30)")


def build_config(args: argparse.Namespace, d: int) -> RunConfig:
    """Resolve CLI flags into a RunConfig for problem dimension d."""
    kind = CompressorKind(args.compressor)
    k = None
    if kind in (CompressorKind.TOPK, CompressorKind.TOPLEK,
                CompressorKind.RANDK, CompressorKind.RANDSEQK):
        k = int(round(args.k_mult * d))
        w = linalg.packed_length(d)
        if not 1 <= k <= w:
            raise ValueError(
                f"--k-mult {args.k_mult} gives k={k}, outside [1, {w}] for d={d}"
            )
    cfg = RunConfig(
        algorithm=args.algorithm,
        option=args.option,
        compressor=CompressorSpec(kind, k, topk_weighted=args.topk_ranking == "weighted"),
        rounds=args.rounds,
        alpha=args.alpha,
        lam=args.lam,
        mu=args.mu,
        ls_c=args.c,
        ls_gamma=args.gamma,
        tau=args.tau,
        run_seed=args.seed,
        hessian_init=args.hessian_init,
        reconstruct_indices=args.reconstruct_indices == "on",
        stop_grad_norm=args.stop_tol,
        timeout_s=args.timeout,
    )
    cfg.validate()
    return cfg


def _load_shards(args: argparse.Namespace) -> list[oracle.ClientShard]:
    if args.synthetic is not None:
        feats, m = args.synthetic
        ds = data.generate_synthetic(feats, m, args.seed, args.margin_scale)
    else:
        ds = data.load_libsvm(args.dataset)
    data.normalize_labels(ds)
    return data.augment_and_shard(ds, args.clients, args.seed, args.lam)


def _add_data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--dataset", help="LIBSVM file")
    g.add_argument("--synthetic", type=_parse_synthetic, metavar="D,M",
                   help="generate D features x M samples instead of loading a file")
    p.add_argument("--margin-scale", type=float, default=1.0,
                   help="synthetic label signal strength (0 = pure noise)")


def _summary(rows: list[runtime.MetricsRow]) -> str:
    last = rows[-1]
    return (
        f"round {last.round}: grad_norm {last.grad_norm:.6g} "
        f"f {last.f_value:.9g} up {last.bytes_up_cum} B down {last.bytes_down_cum} B"
    )


def _write_out(args, rows: list[runtime.MetricsRow], config_line: str) -> None:
    if args.out:
        runtime.write_csv(rows, args.out, config_line=config_line)
        log.info("wrote %d rows to %s", len(rows), args.out)


def cmd_simulate(args: argparse.Namespace) -> int:
    shards = _load_shards(args)
    d = shards[0].dim
    cfg = build_config(args, d)
    workers = os.cpu_count() or 1 if args.threads == "auto" else int(args.threads)
    rows = runtime.simulate(cfg, shards, workers=workers)
    print(_summary(rows))
    _write_out(args, rows, canonical_config(cfg, d, len(shards)))
    return EXIT_OK


def cmd_master(args: argparse.Namespace) -> int:
    host, port = _parse_hostport(args.listen)
    server = MasterServer(
        lambda d: build_config(args, d),
        args.clients,
        host=host,
        port=port,
        timeout=args.timeout,
    )
    bound = server.listen()
    log.info("listening on %s:%d for %d clients", host, bound, args.clients)
    try:
        rows = runtime.run_master(server.cfg, args.clients, server=server)
        print(_summary(rows))
        _write_out(args, rows, canonical_config(server.cfg, server.d, args.clients))
    finally:
        server.close()
    return EXIT_OK


def cmd_client(args: argparse.Namespace) -> int:
    host, port = _parse_hostport(args.connect)
    shard = data.load_client_shard(args.dataset, args.lam, args.features)
    cfg = build_config(args, shard.dim)
    final_x = runtime.run_client(
        cfg, host, port, shard, args.client_id, args.clients
    )
    print(f"client {args.client_id} done: final ||x|| = {np.linalg.norm(final_x):.6g}")
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    feats, m = args.synthetic
    ds = data.generate_synthetic(feats, m, args.seed, args.margin_scale)
    with open(args.out, "wb") as fh:
        fh.write(data.write_libsvm(ds))
    print(f"wrote {m} samples x {feats} features to {args.out}")
    return EXIT_OK


def cmd_split_data(args: argparse.Namespace) -> int:
    ds = data.load_libsvm(args.dataset)
    pieces = data.split_rows(ds, args.clients, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    for cid, piece in enumerate(pieces):
        path = os.path.join(args.out_dir, f"client_{cid:04d}.libsvm")
        with open(path, "wb") as fh:
            fh.write(data.write_libsvm(piece))
    print(
        f"wrote {args.clients} shards of {pieces[0].n_samples} samples to {args.out_dir}"
    )
    return EXIT_OK


def cmd_check_oracles(args: argparse.Namespace) -> int:
    shards = _load_shards(args)
    rng = np.random.default_rng(args.seed)
    worst_grad = worst_hess = 0.0
    for cid, shard in enumerate(shards):
        for x in (np.zeros(shard.dim), rng.standard_normal(shard.dim) * 0.5):
            report = oracle.finite_diff_check(shard, x)
            worst_grad = max(worst_grad, report.grad_max_rel_err)
            worst_hess = max(worst_hess, report.hess_max_rel_err)
        print(
            f"client {cid}: grad err <= {worst_grad:.3g}, hess err <= {worst_hess:.3g}"
        )
    ok = worst_grad <= 1e-6 and worst_hess <= 1e-5
    print(f"oracle check {'passed' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_traffic_model(args: argparse.Namespace) -> int:
    cfg = build_config(args, args.d)
    model = runtime.traffic_model(cfg, args.d, args.clients, args.rounds)
    print(f"delta block          : {model.delta_bytes} B")
    print(f"client update payload: {model.update_bytes} B")
    print(
        f"uplink   total       : {model.total_up_bytes} B = {model.up_mib:.1f} MiB"
    )
    print(
        f"downlink total       : {model.total_down_bytes} B = {model.down_mib:.1f} MiB"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fednl",
        description="Communication-compressed Newton-type federated optimization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run in a single process")
    _add_data_flags(p)
    _add_algorithm_flags(p)
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--threads", default="1", help="worker threads or 'auto'")
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("master", help="serve a distributed run")
    _add_algorithm_flags(p)
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_master)

    p = sub.add_parser("client", help="join a distributed run")
    _add_algorithm_flags(p)
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--dataset", required=True, help="this client's LIBSVM shard")
    p.add_argument("--clients", type=int, required=True,
                   help="total client count of the run")
    p.add_argument("--features", type=int, default=None,
                   help="global feature count if this shard undershoots it")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("gen-data", help="write a synthetic LIBSVM dataset")
    p.add_argument("--synthetic", type=_parse_synthetic, required=True, metavar="D,M")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--margin-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split-data", help="write per-client LIBSVM shards")
    p.add_argument("--dataset", required=True)
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split_data)

    p = sub.add_parser("check-oracles", help="finite-difference oracle check")
    _add_data_flags(p)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p.set_defaults(func=cmd_check_oracles)

    p = sub.add_parser("traffic-model", help="closed-form traffic prediction")
    _add_algorithm_flags(p)
    p.add_argument("--d", type=int, required=True, help="problem dimension")
    p.add_argument("--clients", type=int, required=True)
    p.set_defaults(func=cmd_traffic_model)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, data.ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (
        NotPositiveDefiniteError,
        EigenConvergenceError,
        LineSearchError,
        DivergenceError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
