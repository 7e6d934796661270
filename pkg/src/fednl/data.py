"""Dataset handling: LIBSVM parsing, label normalization, sharding.

Pipeline for a run:

1. parse a LIBSVM file (sparse rows ``label idx:val ...``, indices 1-based);
2. normalize the two label values to {-1, +1};
3. shuffle rows (Fisher-Yates under the run seed), append an intercept
   feature fixed at 1, absorb each label into its sample vector, and cut
   the result into equal dense shards of floor(m / n) samples per client
   (the remainder is dropped).

A synthetic generator produces datasets of the same shape for desk-scale
runs, and a writer emits parseable LIBSVM bytes so shards can be exported
to per-client files.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import linalg
from .oracle import ClientShard
from .rng import TAG_SHUFFLE, TAG_SYNTH, Prg, derive_stream

log = logging.getLogger(__name__)


class ParseError(Exception):
    """Malformed LIBSVM input; carries 1-based line and column numbers."""

    def __init__(self, line: int, col: int, reason: str):
        self.line = line
        self.col = col
        super().__init__(f"line {line}, column {col}: {reason}")


@dataclass
class RawDataset:
    """Parsed dataset: dense labels plus sparse rows (1-based indexing kept)."""

    labels: np.ndarray  # (m,) float64, exactly two distinct values
    rows: list[tuple[np.ndarray, np.ndarray]]  # per-sample (indices, values)
    num_features: int  # max feature index seen

    @property
    def n_samples(self) -> int:
        return len(self.rows)


def parse_libsvm(buf: bytes | bytearray | memoryview) -> RawDataset:
    """Parse LIBSVM bytes; raises ParseError with line/column on bad input."""
    labels: list[float] = []
    rows: list[tuple[np.ndarray, np.ndarray]] = []
    max_index = 0
    distinct: set[float] = set()

    data = bytes(buf)
    for lineno, line in enumerate(data.split(b"\n"), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(b"#"):
            continue
        tokens = stripped.split()
        col = line.find(tokens[0]) + 1
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(lineno, col, f"bad label {tokens[0]!r}") from None
        distinct.add(label)
        if len(distinct) > 2:
            raise ParseError(lineno, col, "more than two distinct labels")

        idxs: list[int] = []
        vals: list[float] = []
        cursor = line.find(tokens[0]) + len(tokens[0])
        prev_idx = 0
        for tok in tokens[1:]:
            col = line.find(tok, cursor) + 1
            cursor = col - 1 + len(tok)
            head, sep, tail = tok.partition(b":")
            if not sep:
                raise ParseError(lineno, col, f"feature {tok!r} lacks ':'")
            try:
                idx = int(head)
            except ValueError:
                raise ParseError(lineno, col, f"bad feature index {head!r}") from None
            if idx < 1:
                raise ParseError(lineno, col, f"feature index {idx} < 1")
            if idx <= prev_idx:
                raise ParseError(lineno, col, f"feature index {idx} not increasing")
            try:
                val = float(tail)
            except ValueError:
                raise ParseError(lineno, col, f"bad feature value {tail!r}") from None
            prev_idx = idx
            idxs.append(idx)
            vals.append(val)
        max_index = max(max_index, prev_idx)
        labels.append(label)
        rows.append((np.array(idxs, dtype=np.int64), np.array(vals)))

    if not rows:
        raise ParseError(1, 1, "dataset is empty")
    return RawDataset(
        labels=np.array(labels), rows=rows, num_features=max_index
    )


def load_libsvm(path: str) -> RawDataset:
    with open(path, "rb") as fh:
        return parse_libsvm(fh.read())


def write_libsvm(ds: RawDataset) -> bytes:
    """LIBSVM bytes that parse back to an identical dataset."""
    out: list[bytes] = []
    for label, (idxs, vals) in zip(ds.labels, ds.rows):
        parts = [b"%.17g" % label]
        parts.extend(
            b"%d:%.17g" % (int(i), v) for i, v in zip(idxs, vals)
        )
        out.append(b" ".join(parts))
    out.append(b"")
    return b"\n".join(out)


def normalize_labels(ds: RawDataset) -> None:
    """Map the two label values onto {-1, +1}, in place.

    {-1, +1} is kept, {0, 1} maps 0 to -1; any other pair maps its smaller
    value to -1 (logged, since the orientation is a convention).
    """
    distinct = sorted(set(ds.labels.tolist()))
    if len(distinct) == 1:
        raise ValueError(f"dataset has a single label value {distinct[0]!r}")
    lo, hi = distinct
    if (lo, hi) == (-1.0, 1.0):
        return
    if (lo, hi) != (0.0, 1.0):
        log.info("labels {%g, %g}: mapping %g -> -1, %g -> +1", lo, hi, lo, hi)
    ds.labels = np.where(ds.labels == lo, -1.0, 1.0)


@dataclass
class ShardPlan:
    """Row permutation and per-client slice boundaries."""

    permutation: np.ndarray
    per_client: int
    n_clients: int
    dropped: int

    def client_rows(self, cid: int) -> np.ndarray:
        lo = cid * self.per_client
        return self.permutation[lo : lo + self.per_client]


def make_shard_plan(m: int, n_clients: int, run_seed: int) -> ShardPlan:
    """Equal-size shards of floor(m / n) rows after a seeded shuffle."""
    per_client = m // n_clients
    if per_client < 1:
        raise ValueError(f"{m} samples cannot feed {n_clients} clients")
    perm = np.arange(m, dtype=np.int64)
    derive_stream(run_seed, TAG_SHUFFLE).shuffle(perm)
    return ShardPlan(
        permutation=perm,
        per_client=per_client,
        n_clients=n_clients,
        dropped=m - per_client * n_clients,
    )


def _absorbed_column(
    out: np.ndarray, row: tuple[np.ndarray, np.ndarray], label: float
) -> None:
    idxs, vals = row
    out[:] = 0.0
    if len(idxs):
        out[idxs - 1] = vals
    out[-1] = 1.0  # intercept feature, always last
    out *= label


def augment_and_shard(
    ds: RawDataset, n_clients: int, run_seed: int, lam: float
) -> list[ClientShard]:
    """Dense per-client shards: shuffle, intercept, label absorption.

    Labels must already be normalized to {-1, +1}.  The returned design
    matrices are (num_features + 1) x per_client, column-major, with the
    intercept as the last coordinate and each column scaled by its label.
    """
    seen = set(np.unique(ds.labels).tolist())
    if not seen <= {-1.0, 1.0}:
        raise ValueError(f"labels must be normalized to -1/+1, got {sorted(seen)}")
    plan = make_shard_plan(ds.n_samples, n_clients, run_seed)
    if plan.dropped:
        log.info(
            "dropping %d of %d samples to equalize %d shards",
            plan.dropped,
            ds.n_samples,
            n_clients,
        )
    d = ds.num_features + 1
    shards = []
    for cid in range(n_clients):
        bmat = linalg.new_matrix(d, plan.per_client)
        for col, row_idx in enumerate(plan.client_rows(cid)):
            _absorbed_column(bmat[:, col], ds.rows[row_idx], ds.labels[row_idx])
        shards.append(ClientShard(bmat=bmat, lam=lam))
    return shards


def split_rows(ds: RawDataset, n_clients: int, run_seed: int) -> list[RawDataset]:
    """Per-client raw datasets (same shuffle/slicing as augment_and_shard).

    Rows keep their original indices and labels so each piece can be written
    back out as a standalone LIBSVM file.
    """
    plan = make_shard_plan(ds.n_samples, n_clients, run_seed)
    pieces = []
    for cid in range(n_clients):
        sel = plan.client_rows(cid)
        pieces.append(
            RawDataset(
                labels=ds.labels[sel].copy(),
                rows=[ds.rows[i] for i in sel],
                num_features=ds.num_features,
            )
        )
    return pieces


def load_client_shard(path: str, lam: float, num_features: int | None = None) -> ClientShard:
    """One client's LIBSVM file as a dense shard (no shuffle, no split).

    ``num_features`` pads the dimension when this client's file happens not
    to contain the globally largest feature index.
    """
    ds = load_libsvm(path)
    normalize_labels(ds)
    if num_features is not None:
        if num_features < ds.num_features:
            raise ValueError(
                f"--features {num_features} below max index {ds.num_features}"
            )
        ds.num_features = num_features
    d = ds.num_features + 1
    bmat = linalg.new_matrix(d, ds.n_samples)
    for col in range(ds.n_samples):
        _absorbed_column(bmat[:, col], ds.rows[col], ds.labels[col])
    return ClientShard(bmat=bmat, lam=lam)


def generate_synthetic(
    num_features: int, m: int, seed: int, margin_scale: float = 1.0
) -> RawDataset:
    """Random dense dataset: features uniform in [-1, 1], planted labels.

    A ground-truth vector is drawn once; each label is the sign of
    ``margin_scale * <a, x_true> + noise`` with noise uniform in (-1, 1),
    so margin_scale=0 gives pure coin-flip labels and larger values give a
    cleaner (but never exactly separable) planted signal.
    """
    if num_features < 1 or m < 1:
        raise ValueError("need at least one feature and one sample")
    prg = derive_stream(seed, TAG_SYNTH)
    x_true = 2.0 * prg.f64_block(num_features) - 1.0
    feats = 2.0 * prg.f64_block(m * num_features).reshape(m, num_features) - 1.0
    noise = 2.0 * prg.f64_block(m) - 1.0
    score = margin_scale * (feats @ x_true) + noise
    labels = np.where(score >= 0.0, 1.0, -1.0)
    idxs = np.arange(1, num_features + 1, dtype=np.int64)
    rows = [(idxs, feats[j].copy()) for j in range(m)]
    return RawDataset(labels=labels, rows=rows, num_features=num_features)
