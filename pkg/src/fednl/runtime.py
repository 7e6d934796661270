"""Run drivers: in-process simulator, TCP master, TCP client, metrics CSV.

Both drivers execute the identical client/master state machines from
``algorithms`` in the identical order, so for the same config and shards
they produce bitwise-identical trajectories; the simulator also mirrors
the wire byte accounting exactly (payload bytes of the messages the
algorithm requires; metric probes are free in both drivers).

Metrics: one row per executed round (round k describes the iterate x^k and
the cumulative traffic through round k's exchange), plus a final row for
the last iterate evaluated out of band.  CSV cells are written with %.17g
so parsing the file back reproduces every float bit-for-bit.
"""

from __future__ import annotations

import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, IO, Iterable, TypeVar

import numpy as np

from .algorithms import ClientCore, MasterCore, RunConfig, StepInfo
from .compressors import wire_size_bytes
from .oracle import ClientShard
from . import transport
from .transport import (
    ClientChannel,
    Frame,
    MasterServer,
    MsgType,
    SessionLostError,
    TransportError,
    canonical_config,
    deserialize_init_response,
    deserialize_pp_update,
    deserialize_update,
    init_response_size,
    serialize_init_response,
    serialize_pp_update,
    serialize_update,
    update_payload_size,
    vector_bytes,
    vector_from,
)

CSV_HEADER = "round,wall_seconds,grad_norm,f_value,bytes_up_cum,bytes_down_cum,ls_steps"

T = TypeVar("T")


@dataclass
class MetricsRow:
    round: int
    wall_seconds: float
    grad_norm: float
    f_value: float
    bytes_up_cum: int
    bytes_down_cum: int
    ls_steps: int


def _g17(v: float) -> str:
    return "%.17g" % v


def write_csv(
    rows: Iterable[MetricsRow], dest: str | IO[str], config_line: str | None = None
) -> None:
    """Write metrics (optionally preceded by a '# config: ...' comment)."""
    own = isinstance(dest, str)
    fh = open(dest, "w") if own else dest
    try:
        if config_line is not None:
            fh.write(f"# config: {config_line}\n")
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r.round},{_g17(r.wall_seconds)},{_g17(r.grad_norm)},"
                f"{_g17(r.f_value)},{r.bytes_up_cum},{r.bytes_down_cum},{r.ls_steps}\n"
            )
    finally:
        if own:
            fh.close()


def read_csv(path: str) -> tuple[str | None, list[MetricsRow]]:
    """Parse a metrics CSV back (floats round-trip exactly via %.17g)."""
    config_line = None
    rows: list[MetricsRow] = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# config: "):
                config_line = line[len("# config: ") :]
                continue
            if not line or line == CSV_HEADER:
                continue
            c = line.split(",")
            rows.append(
                MetricsRow(
                    round=int(c[0]),
                    wall_seconds=float(c[1]),
                    grad_norm=float(c[2]),
                    f_value=float(c[3]),
                    bytes_up_cum=int(c[4]),
                    bytes_down_cum=int(c[5]),
                    ls_steps=int(c[6]),
                )
            )
    return config_line, rows


class _Counters:
    __slots__ = ("up", "down")

    def __init__(self) -> None:
        self.up = 0
        self.down = 0


class _RoundClock:
    def __init__(self) -> None:
        self._t0 = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self._t0


def _chunk(cids: list[int], workers: int) -> list[list[int]]:
    return [cids[i::workers] for i in range(workers) if cids[i::workers]]


def simulate(
    cfg: RunConfig, shards: list[ClientShard], workers: int = 1
) -> list[MetricsRow]:
    """Single-process run over in-memory shards.

    ``workers`` only sets the thread count used to execute client rounds;
    the trajectory and the byte counters are invariant to it (clients are
    statically chunked and every reduction is in ascending client order).
    """
    n = len(shards)
    if n == 0:
        raise ValueError("need at least one shard")
    d = shards[0].dim
    if any(s.dim != d for s in shards):
        raise ValueError("all shards must share one dimension")
    cfg.validate(n)
    cores = [ClientCore(cid, shards[cid], cfg) for cid in range(n)]
    master = MasterCore(cfg, d, n)
    workers = max(1, workers)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def run_map(fn: Callable[[ClientCore], T], cids: list[int]) -> dict[int, T]:
        if pool is None or len(cids) == 1:
            return {cid: fn(cores[cid]) for cid in cids}
        futures = [
            pool.submit(lambda chunk=chunk: [(c, fn(cores[c])) for c in chunk])
            for chunk in _chunk(cids, workers)
        ]
        out: dict[int, T] = {}
        for fut in futures:
            out.update(fut.result())
        return out

    try:
        return _simulate_loop(cfg, cores, master, run_map)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)


def _simulate_loop(
    cfg: RunConfig,
    cores: list[ClientCore],
    master: MasterCore,
    run_map: Callable[[Callable[[ClientCore], T], list[int]], dict[int, T]],
) -> list[MetricsRow]:
    n = len(cores)
    d = master.d
    all_cids = list(range(n))
    counters = _Counters()
    clock = _RoundClock()
    rows: list[MetricsRow] = []

    def mean_f(x: np.ndarray) -> float:
        vals = run_map(lambda c: c.eval_f(x), all_cids)
        total = 0.0
        for cid in sorted(vals):
            total += vals[cid]
        return total / n

    def mean_grad(x: np.ndarray) -> np.ndarray:
        vals = run_map(lambda c: c.eval_grad(x), all_cids)
        acc = np.zeros(d)
        for cid in sorted(vals):
            acc += vals[cid]
        return acc / n

    def ls_trial(x: np.ndarray) -> float:
        # line-search probes are algorithm traffic: a request vector down
        # to every client and one f64 back from each
        counters.down += 8 * d * n
        counters.up += 8 * n
        return mean_f(x)

    def add_row(rnd: int, grad_norm: float, f_value: float, ls_steps: int) -> None:
        rows.append(
            MetricsRow(
                round=rnd,
                wall_seconds=clock.elapsed(),
                grad_norm=grad_norm,
                f_value=f_value,
                bytes_up_cum=counters.up,
                bytes_down_cum=counters.down,
                ls_steps=ls_steps,
            )
        )

    # round-0 state initialization (and its traffic, when it is exchanged)
    x0 = master.x.copy()
    payloads = run_map(lambda c: c.init_state(x0), all_cids)
    if cfg.needs_init_exchange(n):
        counters.down += 8 * d * n
        counters.up += n * init_response_size(cfg, d)
        master.apply_init(payloads)
    else:
        master.apply_init(None)

    stop = cfg.stop_grad_norm
    stopped = False
    for rnd in range(cfg.rounds):
        if cfg.is_pp:
            grad_norm = float(np.linalg.norm(mean_grad(master.x)))
            f_value = mean_f(master.x)
            if stop is not None and grad_norm <= stop:
                add_row(rnd, grad_norm, f_value, 0)
                stopped = True
                break
            subset = master.pp_select()
            x_new = master.pp_new_point()
            counters.down += 8 * d * len(subset)
            updates = run_map(lambda c: c.round_pp(x_new, rnd), subset)
            for upd in updates.values():
                counters.up += update_payload_size(
                    cfg, d, wire_size_bytes(upd.delta, cfg.reconstruct_indices)
                )
            master.pp_apply(updates)
            add_row(rnd, grad_norm, f_value, 0)
            continue

        x_k = master.x
        counters.down += 8 * d * n
        updates = run_map(lambda c: c.round_fednl(x_k, rnd), all_cids)
        for upd in updates.values():
            counters.up += update_payload_size(
                cfg, d, wire_size_bytes(upd.delta, cfg.reconstruct_indices)
            )
        if cfg.is_ls:
            info = master.step_ls(updates, ls_trial)
            f_value = info.f_value
        else:
            f_value = mean_f(x_k)
            info = master.step_fednl(updates)
        add_row(rnd, info.grad_norm, f_value, info.ls_steps)
        if stop is not None and info.grad_norm <= stop:
            stopped = True
            break

    if not stopped:
        grad_norm = float(np.linalg.norm(mean_grad(master.x)))
        add_row(cfg.rounds, grad_norm, mean_f(master.x), 0)
    return rows


@dataclass
class TrafficModel:
    """Closed-form per-round and whole-run traffic of a config."""

    delta_bytes: int
    update_bytes: int  # one CLIENT_UPDATE payload
    total_up_bytes: int
    total_down_bytes: int

    @property
    def up_mib(self) -> float:
        return self.total_up_bytes / 2.0**20

    @property
    def down_mib(self) -> float:
        return self.total_down_bytes / 2.0**20


def model_delta_bytes(cfg: RunConfig, d: int) -> int:
    """Wire size of one delta block when every entry is shipped.

    Exact for identity, topk, randk, randseqk and natural; an upper bound
    for toplek (which may ship fewer than k entries in a round).
    """
    from . import linalg
    from .compressors import CompressorKind

    w = linalg.packed_length(d)
    kind = cfg.compressor.kind
    cfg.compressor.validate(w)
    if kind is CompressorKind.IDENTITY:
        return 8 * w
    if kind is CompressorKind.NATURAL:
        return (12 * w + 7) // 8
    if kind in (CompressorKind.RANDK, CompressorKind.RANDSEQK):
        if cfg.reconstruct_indices:
            return 8 + 8 * cfg.compressor.k
        return 12 * cfg.compressor.k
    return 12 * cfg.compressor.k


def traffic_model(cfg: RunConfig, d: int, n_clients: int, rounds: int) -> TrafficModel:
    """Predicted algorithm traffic (matches the live counters exactly for
    fednl runs whose compressor always ships its full entry budget)."""
    delta = model_delta_bytes(cfg, d)
    update = update_payload_size(cfg, d, delta)
    return TrafficModel(
        delta_bytes=delta,
        update_bytes=update,
        total_up_bytes=rounds * n_clients * update,
        total_down_bytes=rounds * n_clients * 8 * d,
    )


# ---------------------------------------------------------------------------
# distributed drivers


def run_master(
    cfg: RunConfig | Callable[[int], RunConfig],
    n_clients: int,
    host: str = "127.0.0.1",
    port: int = 0,
    server: MasterServer | None = None,
) -> list[MetricsRow]:
    """Serve a full run over TCP; returns the metrics rows.

    ``cfg`` may be a factory taking the problem dimension (learned from the
    first client).  Pass a pre-listening :class:`MasterServer` to control
    the bind (tests use this to learn the ephemeral port before starting
    clients).
    """
    own = server is None
    if server is None:
        server = MasterServer(cfg, n_clients, host=host, port=port)
        server.listen()
    try:
        d = server.accept_clients()
        master = MasterCore(server.cfg, d, n_clients)
        return _master_loop(server.cfg, master, server)
    finally:
        if own:
            server.close()


def _master_loop(
    cfg: RunConfig, master: MasterCore, server: MasterServer
) -> list[MetricsRow]:
    n = master.n
    d = master.d
    counters = _Counters()
    clock = _RoundClock()
    rows: list[MetricsRow] = []

    def mean_f(x: np.ndarray, rnd: int, counted: bool) -> float:
        payload = vector_bytes(x)
        sent = server.broadcast(MsgType.EVAL_F_REQUEST, rnd, payload)
        got = server.gather(MsgType.EVAL_F_RESPONSE, rnd)
        if counted:
            counters.down += sent
            counters.up += sum(len(p) for p in got.values())
        total = 0.0
        for cid in sorted(got):
            (fi,) = struct.unpack("<d", got[cid])
            total += fi
        return total / n

    def mean_grad(x: np.ndarray, rnd: int) -> np.ndarray:
        payload = vector_bytes(x)
        server.broadcast(MsgType.EVAL_GRAD_REQUEST, rnd, payload)
        got = server.gather(MsgType.EVAL_GRAD_RESPONSE, rnd)
        acc = np.zeros(d)
        for cid in sorted(got):
            acc += vector_from(got[cid], d)
        return acc / n

    def add_row(rnd: int, grad_norm: float, f_value: float, ls_steps: int) -> None:
        rows.append(
            MetricsRow(
                round=rnd,
                wall_seconds=clock.elapsed(),
                grad_norm=grad_norm,
                f_value=f_value,
                bytes_up_cum=counters.up,
                bytes_down_cum=counters.down,
                ls_steps=ls_steps,
            )
        )

    if cfg.needs_init_exchange(n):
        counters.down += server.broadcast(
            MsgType.INIT_REQUEST, 0, vector_bytes(master.x)
        )
        got = server.gather(MsgType.INIT_RESPONSE, 0)
        counters.up += sum(len(p) for p in got.values())
        master.apply_init(
            {cid: deserialize_init_response(p, cfg, d) for cid, p in got.items()}
        )
    else:
        master.apply_init(None)

    stop = cfg.stop_grad_norm
    stopped = False
    for rnd in range(cfg.rounds):
        if cfg.is_pp:
            grad_norm = float(np.linalg.norm(mean_grad(master.x, rnd)))
            f_value = mean_f(master.x, rnd, counted=False)
            if stop is not None and grad_norm <= stop:
                add_row(rnd, grad_norm, f_value, 0)
                stopped = True
                break
            subset = master.pp_select()
            x_new = master.pp_new_point()
            counters.down += server.broadcast(
                MsgType.ROUND_BEGIN, rnd, vector_bytes(x_new), cids=subset
            )
            got = server.gather(MsgType.CLIENT_UPDATE, rnd, cids=subset)
            counters.up += sum(len(p) for p in got.values())
            master.pp_apply(
                {cid: deserialize_pp_update(p, cfg, d) for cid, p in got.items()}
            )
            add_row(rnd, grad_norm, f_value, 0)
            continue

        x_k = master.x
        counters.down += server.broadcast(
            MsgType.ROUND_BEGIN, rnd, vector_bytes(x_k)
        )
        got = server.gather(MsgType.CLIENT_UPDATE, rnd)
        counters.up += sum(len(p) for p in got.values())
        updates = {cid: deserialize_update(p, cfg, d) for cid, p in got.items()}
        if cfg.is_ls:
            info = master.step_ls(
                updates, lambda x, r=rnd: mean_f(x, r, counted=True)
            )
            f_value = info.f_value
        else:
            f_value = mean_f(x_k, rnd, counted=False)
            info = master.step_fednl(updates)
        add_row(rnd, info.grad_norm, f_value, info.ls_steps)
        if stop is not None and info.grad_norm <= stop:
            stopped = True
            break

    final_round = rows[-1].round + 1 if stopped else cfg.rounds
    if not stopped:
        grad_norm = float(np.linalg.norm(mean_grad(master.x, final_round)))
        add_row(final_round, grad_norm, mean_f(master.x, final_round, counted=False), 0)
    server.broadcast(MsgType.SHUTDOWN, final_round, vector_bytes(master.x))
    return rows


def run_client(
    cfg: RunConfig,
    host: str,
    port: int,
    shard: ClientShard,
    client_id: int,
    n_clients: int,
) -> np.ndarray:
    """Serve one client until SHUTDOWN; returns the final iterate."""
    core = ClientCore(client_id, shard, cfg)
    d = shard.dim
    chan = ClientChannel(host, port, client_id, cfg, d, n_clients)
    try:
        chan.handshake()
        if not cfg.needs_init_exchange(n_clients):
            core.init_state(np.zeros(d))
        while True:
            frame = chan.recv()
            rnd = frame.round
            handler = _CLIENT_HANDLERS.get(frame.msg_type)
            if handler is None:
                raise TransportError(
                    f"client {client_id}: unexpected message type {frame.msg_type}"
                )
            done = handler(core, cfg, chan, frame)
            if done is not None:
                return done
    finally:
        chan.close()


def _on_init(core, cfg, chan, frame):
    x0 = vector_from(frame.payload, core.shard.dim)
    payload = core.init_state(x0)
    chan.send(
        MsgType.INIT_RESPONSE, frame.round, serialize_init_response(payload, cfg)
    )


def _on_round(core, cfg, chan, frame):
    x = vector_from(frame.payload, core.shard.dim)
    if cfg.is_pp:
        body = serialize_pp_update(core.round_pp(x, frame.round), cfg)
    else:
        body = serialize_update(core.round_fednl(x, frame.round), cfg)
    chan.send(MsgType.CLIENT_UPDATE, frame.round, body)


def _on_eval_f(core, cfg, chan, frame):
    x = vector_from(frame.payload, core.shard.dim)
    chan.send(
        MsgType.EVAL_F_RESPONSE, frame.round, struct.pack("<d", core.eval_f(x))
    )


def _on_eval_grad(core, cfg, chan, frame):
    x = vector_from(frame.payload, core.shard.dim)
    chan.send(
        MsgType.EVAL_GRAD_RESPONSE, frame.round, vector_bytes(core.eval_grad(x))
    )


def _on_shutdown(core, cfg, chan, frame):
    return vector_from(frame.payload, core.shard.dim)


_CLIENT_HANDLERS = {
    MsgType.INIT_REQUEST: _on_init,
    MsgType.ROUND_BEGIN: _on_round,
    MsgType.EVAL_F_REQUEST: _on_eval_f,
    MsgType.EVAL_GRAD_REQUEST: _on_eval_grad,
    MsgType.SHUTDOWN: _on_shutdown,
}
