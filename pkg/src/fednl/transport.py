"""Wire protocol: framing, payload codecs, and TCP sessions.

Every message is one frame: a fixed 22-byte little-endian header
(magic "FDNL", version, message type, client id, round, payload length)
followed by the payload.  The protocol is strict lockstep: the master
broadcasts, every addressed client answers exactly once, and any
deviation (bad magic, wrong type, lost session, timeout) aborts the run.

Payload layouts (all little-endian, vectors are raw f64):

* HELLO            u32 dimension, u32 client count, u64 run seed,
                   u64 config hash, then the canonical config text
* WELCOME          u8 status, then the master's canonical config text
* ROUND_BEGIN      the current iterate x (8 d bytes)
* CLIENT_UPDATE    fednl:    grad (8 d) + shift f64 + delta block
                   fednl-ls: grad (8 d) + shift f64 + local f f64 + delta block
                   fednl-pp: shift diff f64 + gvec diff (8 d) + delta block
* INIT_REQUEST     x0 (8 d)
* INIT_RESPONSE    exact-init: packed Hessian (8 w); fednl-pp adds
                   shift0 f64 + gvec0 (8 d) in front
* EVAL_F_REQUEST   a point (8 d); response is one f64
* EVAL_GRAD_REQUEST a point (8 d); response is a vector (8 d)
* SHUTDOWN         final iterate (8 d)

Delta blocks:

* identity         8 w bytes of packed upper-triangle values
* topk / toplek    12 bytes per entry: u32 packed position + f64 value
* randk / randseqk reconstruction mode: u64 seed + 8 bytes per value
                   (positions are regenerated from the seed);
                   explicit mode: same 12-byte entries as topk
* natural          12-bit sign/exponent codes, two per 3 bytes
* any kind         zero bytes when the delta is empty
"""

from __future__ import annotations

import hashlib
import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from queue import Empty, Queue
from typing import Callable

import numpy as np

from . import linalg
from .algorithms import ClientUpdate, InitPayload, PPUpdate, RunConfig, resolve_alpha
from .compressors import (
    CompressedDelta,
    CompressorKind,
    natural_codes_from_values,
    natural_values_from_codes,
    pack_codes_12bit,
    randk_positions,
    randseqk_positions,
    unpack_codes_12bit,
)

MAGIC = b"FDNL"
VERSION = 1
HEADER = struct.Struct("<4sBBIIQ")
HEADER_SIZE = HEADER.size  # 22
MAX_PAYLOAD = 1 << 31
DEFAULT_TIMEOUT = 30.0


class MsgType(IntEnum):
    HELLO = 1
    WELCOME = 2
    ROUND_BEGIN = 3
    CLIENT_UPDATE = 4
    EVAL_F_REQUEST = 5
    EVAL_F_RESPONSE = 6
    EVAL_GRAD_REQUEST = 7
    EVAL_GRAD_RESPONSE = 8
    INIT_REQUEST = 9
    INIT_RESPONSE = 10
    SHUTDOWN = 11


class TransportError(Exception):
    """Any wire-level failure (framing, handshake, session, timeout)."""


class FrameError(TransportError):
    pass


class HandshakeError(TransportError):
    pass


class SessionLostError(TransportError):
    def __init__(self, client_id: int, rnd: int, reason: str):
        self.client_id = client_id
        self.round = rnd
        super().__init__(f"lost client {client_id} at round {rnd}: {reason}")


# welcome status codes
WELCOME_OK = 0
WELCOME_DUPLICATE_ID = 1
WELCOME_CONFIG_MISMATCH = 2
WELCOME_DIMENSION_MISMATCH = 3
WELCOME_BAD_ID = 4
_WELCOME_REASONS = {
    WELCOME_DUPLICATE_ID: "duplicate client id",
    WELCOME_CONFIG_MISMATCH: "config hash mismatch",
    WELCOME_DIMENSION_MISMATCH: "dimension mismatch",
    WELCOME_BAD_ID: "client id out of range",
}


@dataclass
class Frame:
    msg_type: int
    client_id: int
    round: int
    payload: bytes


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(frame.payload)} bytes exceeds limit")
    return (
        HEADER.pack(
            MAGIC,
            VERSION,
            int(frame.msg_type),
            frame.client_id,
            frame.round,
            len(frame.payload),
        )
        + frame.payload
    )


def decode_frame(buf: bytes) -> Frame:
    """Decode one complete frame; the buffer must contain exactly one."""
    if len(buf) < HEADER_SIZE:
        raise FrameError(f"truncated header: {len(buf)} of {HEADER_SIZE} bytes")
    magic, version, msg_type, client_id, rnd, plen = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    if plen > MAX_PAYLOAD:
        raise FrameError(f"payload length {plen} exceeds limit")
    if len(buf) != HEADER_SIZE + plen:
        raise FrameError(
            f"frame length {len(buf)} != header + payload {HEADER_SIZE + plen}"
        )
    return Frame(msg_type, client_id, rnd, buf[HEADER_SIZE:])


def _recv_exact(sock: socket.socket, nbytes: int) -> bytes:
    chunks = []
    got = 0
    while got < nbytes:
        try:
            chunk = sock.recv(nbytes - got)
        except socket.timeout as exc:
            raise TransportError(f"receive timed out after {sock.gettimeout()}s") from exc
        if not chunk:
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Frame:
    header = _recv_exact(sock, HEADER_SIZE)
    magic, version, msg_type, client_id, rnd, plen = HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    if plen > MAX_PAYLOAD:
        raise FrameError(f"payload length {plen} exceeds limit")
    return Frame(msg_type, client_id, rnd, _recv_exact(sock, int(plen)))


def write_frame(sock: socket.socket, frame: Frame) -> None:
    sock.sendall(encode_frame(frame))


def vector_bytes(x: np.ndarray) -> bytes:
    return np.ascontiguousarray(x, dtype="<f8").tobytes()


def vector_from(buf: bytes, n: int, offset: int = 0) -> np.ndarray:
    end = offset + 8 * n
    if len(buf) < end:
        raise FrameError(f"payload too short for a vector of {n} f64s")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=offset).copy()


# ---------------------------------------------------------------------------
# canonical config text and hash (handshake + CSV echo)


def canonical_config(cfg: RunConfig, d: int, n_clients: int) -> str:
    """One-line key=value rendering of everything that defines the run.

    Identical on master and clients by construction; runtime-only knobs
    (stop threshold, timeouts, thread counts) are deliberately excluded.
    """
    w = linalg.packed_length(d)
    comp = cfg.compressor
    pairs = [
        ("algorithm", cfg.algorithm),
        ("option", cfg.option),
        ("compressor", comp.kind.value),
        ("k", str(comp.k) if comp.k is not None else "-"),
        ("topk-ranking", "weighted" if comp.topk_weighted else "raw"),
        ("alpha", repr(resolve_alpha(cfg, w))),
        ("lambda", repr(cfg.lam)),
        ("mu", repr(cfg.effective_mu)),
        ("c", repr(cfg.ls_c)),
        ("gamma", repr(cfg.ls_gamma)),
        ("tau", str(cfg.tau) if cfg.tau is not None else "-"),
        ("rounds", str(cfg.rounds)),
        ("seed", str(cfg.run_seed)),
        ("hessian-init", cfg.hessian_init),
        ("reconstruct-indices", "on" if cfg.reconstruct_indices else "off"),
        ("d", str(d)),
        ("clients", str(n_clients)),
    ]
    return " ".join(f"{k}={v}" for k, v in pairs)


def config_hash(cfg: RunConfig, d: int, n_clients: int) -> int:
    digest = hashlib.sha256(canonical_config(cfg, d, n_clients).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# delta blocks

_ENTRY = np.dtype([("pos", "<u4"), ("val", "<f8")], align=False)


def _rand_reconstructed(
    delta_kind: CompressorKind, reconstruct: bool
) -> bool:
    return reconstruct and delta_kind in (
        CompressorKind.RANDK,
        CompressorKind.RANDSEQK,
    )


def encode_delta_block(delta: CompressedDelta, reconstruct: bool) -> bytes:
    if delta.entry_count == 0:
        return b""
    if delta.kind is CompressorKind.IDENTITY:
        return vector_bytes(delta.values)
    if delta.kind is CompressorKind.NATURAL:
        return pack_codes_12bit(natural_codes_from_values(delta.values))
    if _rand_reconstructed(delta.kind, reconstruct):
        if delta.seed_tag is None:
            raise FrameError("random delta lacks a seed for reconstruction")
        return struct.pack("<Q", delta.seed_tag) + vector_bytes(delta.values)
    entries = np.zeros(delta.entry_count, dtype=_ENTRY)
    entries["pos"] = delta.indices
    entries["val"] = delta.values
    return entries.tobytes()


def decode_delta_block(
    buf: bytes, kind: CompressorKind, d: int, reconstruct: bool
) -> CompressedDelta:
    w = linalg.packed_length(d)
    if len(buf) == 0:
        return CompressedDelta(
            kind=kind, d=d, values=np.zeros(0), indices=np.zeros(0, dtype=np.uint32)
        )
    if kind is CompressorKind.IDENTITY:
        if len(buf) != 8 * w:
            raise FrameError(f"identity block is {len(buf)} bytes, expected {8 * w}")
        return CompressedDelta(kind=kind, d=d, values=vector_from(buf, w))
    if kind is CompressorKind.NATURAL:
        codes = unpack_codes_12bit(buf, w)
        return CompressedDelta(kind=kind, d=d, values=natural_values_from_codes(codes))
    if _rand_reconstructed(kind, reconstruct):
        if len(buf) < 8 or (len(buf) - 8) % 8:
            raise FrameError(f"bad reconstruction block length {len(buf)}")
        (seed,) = struct.unpack_from("<Q", buf)
        count = (len(buf) - 8) // 8
        if kind is CompressorKind.RANDK:
            idx = randk_positions(w, count, seed)
        else:
            idx = randseqk_positions(w, count, seed)
        return CompressedDelta(
            kind=kind,
            d=d,
            values=vector_from(buf, count, offset=8),
            indices=idx.astype(np.uint32),
            seed_tag=seed,
        )
    if len(buf) % _ENTRY.itemsize:
        raise FrameError(f"entry block length {len(buf)} not a multiple of 12")
    entries = np.frombuffer(buf, dtype=_ENTRY)
    idx = entries["pos"].astype(np.uint32)
    if len(idx) and (np.any(idx[1:] <= idx[:-1]) or int(idx[-1]) >= w):
        raise FrameError("entry positions not strictly ascending in range")
    return CompressedDelta(
        kind=kind, d=d, values=entries["val"].astype(np.float64), indices=idx
    )


# ---------------------------------------------------------------------------
# update payloads


def serialize_update(update: ClientUpdate, cfg: RunConfig) -> bytes:
    parts = [vector_bytes(update.grad), struct.pack("<d", update.shift)]
    if cfg.is_ls:
        parts.append(struct.pack("<d", update.f_local))
    parts.append(encode_delta_block(update.delta, cfg.reconstruct_indices))
    return b"".join(parts)


def deserialize_update(buf: bytes, cfg: RunConfig, d: int) -> ClientUpdate:
    grad = vector_from(buf, d)
    offset = 8 * d
    (shift,) = struct.unpack_from("<d", buf, offset)
    offset += 8
    f_local = None
    if cfg.is_ls:
        (f_local,) = struct.unpack_from("<d", buf, offset)
        offset += 8
    delta = decode_delta_block(
        buf[offset:], cfg.compressor.kind, d, cfg.reconstruct_indices
    )
    return ClientUpdate(grad=grad, shift=shift, delta=delta, f_local=f_local)


def serialize_pp_update(update: PPUpdate, cfg: RunConfig) -> bytes:
    return (
        struct.pack("<d", update.shift_diff)
        + vector_bytes(update.gvec_diff)
        + encode_delta_block(update.delta, cfg.reconstruct_indices)
    )


def deserialize_pp_update(buf: bytes, cfg: RunConfig, d: int) -> PPUpdate:
    (shift_diff,) = struct.unpack_from("<d", buf)
    gvec_diff = vector_from(buf, d, offset=8)
    delta = decode_delta_block(
        buf[8 + 8 * d :], cfg.compressor.kind, d, cfg.reconstruct_indices
    )
    return PPUpdate(delta=delta, shift_diff=shift_diff, gvec_diff=gvec_diff)


def serialize_init_response(payload: InitPayload, cfg: RunConfig) -> bytes:
    parts = []
    if cfg.is_pp:
        parts.append(struct.pack("<d", payload.shift0))
        parts.append(vector_bytes(payload.gvec0))
    if cfg.hessian_init == "exact":
        parts.append(vector_bytes(payload.hessian_packed))
    return b"".join(parts)


def deserialize_init_response(buf: bytes, cfg: RunConfig, d: int) -> InitPayload:
    payload = InitPayload()
    offset = 0
    if cfg.is_pp:
        (payload.shift0,) = struct.unpack_from("<d", buf)
        payload.gvec0 = vector_from(buf, d, offset=8)
        offset = 8 + 8 * d
    if cfg.hessian_init == "exact":
        payload.hessian_packed = vector_from(buf, linalg.packed_length(d), offset)
        offset += 8 * linalg.packed_length(d)
    if offset != len(buf):
        raise FrameError(f"init response has {len(buf) - offset} trailing bytes")
    return payload


def update_payload_size(cfg: RunConfig, d: int, delta_bytes: int) -> int:
    """Byte size of a CLIENT_UPDATE payload given its delta block size."""
    if cfg.is_pp:
        return 8 + 8 * d + delta_bytes
    return 8 * d + 8 + (8 if cfg.is_ls else 0) + delta_bytes


def init_response_size(cfg: RunConfig, d: int) -> int:
    size = 0
    if cfg.is_pp:
        size += 8 + 8 * d
    if cfg.hessian_init == "exact":
        size += 8 * linalg.packed_length(d)
    return size


# ---------------------------------------------------------------------------
# sessions


def _configure(sock: socket.socket, timeout: float) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(timeout)


class _Session:
    """One connected client: socket plus a reader thread feeding a queue."""

    def __init__(self, sock: socket.socket, client_id: int):
        self.sock = sock
        self.client_id = client_id
        self.queue: Queue = Queue()
        self.thread: threading.Thread | None = None

    def start_reader(self) -> None:
        self.thread = threading.Thread(
            target=self._read_loop, name=f"reader-{self.client_id}", daemon=True
        )
        self.thread.start()

    def _read_loop(self) -> None:
        while True:
            try:
                self.queue.put(read_frame(self.sock))
            except Exception as exc:  # surfaced to the coordinator
                self.queue.put(exc)
                return

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class MasterServer:
    """Accepts n clients, validates their handshakes, runs lockstep rounds.

    The run config may be given directly or as a factory taking the problem
    dimension (adopted from the first client's HELLO); the factory form lets
    a dimension-dependent config, like k = k_mult * d, be resolved lazily.
    """

    def __init__(
        self,
        cfg: RunConfig | Callable[[int], RunConfig],
        n_clients: int,
        host: str = "127.0.0.1",
        port: int = 0,
        timeout: float | None = None,
    ):
        if isinstance(cfg, RunConfig):
            self.cfg: RunConfig | None = cfg
            self._cfg_factory = None
        else:
            self.cfg = None
            self._cfg_factory = cfg
        self.n = n_clients
        self.host = host
        self.requested_port = port
        if timeout is None:
            timeout = self.cfg.timeout_s if self.cfg is not None else DEFAULT_TIMEOUT
        self.timeout = timeout
        self.d: int | None = None
        self.sessions: dict[int, _Session] = {}
        self._listener: socket.socket | None = None
        self.port: int | None = None

    def listen(self) -> int:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.requested_port))
        listener.listen(self.n + 8)
        listener.settimeout(self.timeout)
        self._listener = listener
        self.port = listener.getsockname()[1]
        return self.port

    def accept_clients(self) -> int:
        """Handshake until all n distinct client ids are connected.

        Returns the problem dimension adopted from the first client.
        Duplicate ids are rejected individually; a config or dimension
        mismatch rejects the client and aborts the whole run.
        """
        if self._listener is None:
            self.listen()
        while len(self.sessions) < self.n:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout as exc:
                raise HandshakeError(
                    f"timed out with {len(self.sessions)} of {self.n} clients"
                ) from exc
            _configure(conn, self.timeout)
            try:
                self._handshake(conn)
            except HandshakeError:
                conn.close()
                raise
            except TransportError:
                # port probe or garbage connection: drop it, keep waiting
                conn.close()
        for session in self.sessions.values():
            session.start_reader()
        return self.d

    def _reject(self, conn: socket.socket, cid: int, status: int) -> None:
        reason = _WELCOME_REASONS[status]
        frame = Frame(MsgType.WELCOME, cid, 0, bytes([status]) + reason.encode())
        try:
            write_frame(conn, frame)
        except OSError:
            pass

    def _handshake(self, conn: socket.socket) -> None:
        frame = read_frame(conn)
        if frame.msg_type != MsgType.HELLO:
            raise HandshakeError(f"expected HELLO, got type {frame.msg_type}")
        if len(frame.payload) < 24:
            raise HandshakeError("HELLO payload too short")
        d, n, seed, their_hash = struct.unpack_from("<IIQQ", frame.payload)
        cid = frame.client_id
        if not 0 <= cid < self.n:
            self._reject(conn, cid, WELCOME_BAD_ID)
            raise HandshakeError(f"client id {cid} out of range [0, {self.n})")
        if cid in self.sessions:
            self._reject(conn, cid, WELCOME_DUPLICATE_ID)
            conn.close()
            return  # keep waiting for the remaining ids
        if self.d is None:
            self.d = d
            if self.cfg is None:
                self.cfg = self._cfg_factory(self.d)
                self.cfg.validate(self.n)
        if d != self.d:
            self._reject(conn, cid, WELCOME_DIMENSION_MISMATCH)
            raise HandshakeError(
                f"client {cid} reports dimension {d}, run uses {self.d}"
            )
        expect = config_hash(self.cfg, self.d, self.n)
        if n != self.n or seed != self.cfg.run_seed or their_hash != expect:
            self._reject(conn, cid, WELCOME_CONFIG_MISMATCH)
            raise HandshakeError(f"client {cid} disagrees on the run config")
        echo = canonical_config(self.cfg, self.d, self.n).encode()
        write_frame(
            conn, Frame(MsgType.WELCOME, cid, 0, bytes([WELCOME_OK]) + echo)
        )
        self.sessions[cid] = _Session(conn, cid)

    def send_to(self, cid: int, msg_type: MsgType, rnd: int, payload: bytes) -> int:
        try:
            write_frame(self.sessions[cid].sock, Frame(msg_type, cid, rnd, payload))
        except OSError as exc:
            raise SessionLostError(cid, rnd, str(exc)) from None
        return len(payload)

    def broadcast(
        self, msg_type: MsgType, rnd: int, payload: bytes, cids: list[int] | None = None
    ) -> int:
        total = 0
        for cid in sorted(self.sessions) if cids is None else cids:
            total += self.send_to(cid, msg_type, rnd, payload)
        return total

    def gather(
        self, msg_type: MsgType, rnd: int, cids: list[int] | None = None
    ) -> dict[int, bytes]:
        """One frame of the given type/round from each addressed client."""
        out: dict[int, bytes] = {}
        for cid in sorted(self.sessions) if cids is None else cids:
            try:
                item = self.sessions[cid].queue.get(timeout=self.timeout)
            except Empty:
                raise SessionLostError(cid, rnd, "timed out waiting for frame") from None
            if isinstance(item, Exception):
                raise SessionLostError(cid, rnd, str(item)) from None
            if item.msg_type != msg_type or item.round != rnd or item.client_id != cid:
                raise SessionLostError(
                    cid,
                    rnd,
                    f"expected type {int(msg_type)} round {rnd}, got "
                    f"type {item.msg_type} round {item.round} id {item.client_id}",
                )
            out[cid] = item.payload
        return out

    def close(self) -> None:
        for session in self.sessions.values():
            session.close()
        if self._listener is not None:
            self._listener.close()


class ClientChannel:
    """Client side of the lockstep session."""

    def __init__(
        self,
        host: str,
        port: int,
        client_id: int,
        cfg: RunConfig,
        d: int,
        n_clients: int,
    ):
        self.cfg = cfg
        self.client_id = client_id
        self.d = d
        self.n = n_clients
        self.sock = socket.create_connection((host, port), timeout=cfg.timeout_s)
        _configure(self.sock, cfg.timeout_s)

    def handshake(self) -> str:
        """HELLO/WELCOME exchange; returns the master's config echo."""
        mine = canonical_config(self.cfg, self.d, self.n)
        hello = struct.pack(
            "<IIQQ", self.d, self.n, self.cfg.run_seed, config_hash(self.cfg, self.d, self.n)
        ) + mine.encode()
        write_frame(
            self.sock, Frame(MsgType.HELLO, self.client_id, 0, hello)
        )
        frame = read_frame(self.sock)
        if frame.msg_type != MsgType.WELCOME or not frame.payload:
            raise HandshakeError("malformed WELCOME")
        status = frame.payload[0]
        if status != WELCOME_OK:
            reason = frame.payload[1:].decode(errors="replace")
            raise HandshakeError(f"master rejected handshake: {reason}")
        echo = frame.payload[1:].decode()
        if echo != mine:
            raise HandshakeError(
                f"config echo mismatch:\n  master: {echo}\n  client: {mine}"
            )
        return echo

    def send(self, msg_type: MsgType, rnd: int, payload: bytes) -> None:
        write_frame(self.sock, Frame(msg_type, self.client_id, rnd, payload))

    def recv(self) -> Frame:
        return read_frame(self.sock)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
