"""Dataset tests: parser errors with positions, sharding, synthetic data."""

from __future__ import annotations

import numpy as np
import pytest

from fednl.data import (
    ParseError,
    augment_and_shard,
    generate_synthetic,
    load_client_shard,
    make_shard_plan,
    normalize_labels,
    parse_libsvm,
    split_rows,
    write_libsvm,
)


SAMPLE = b"""# comment line
+1 1:0.5 3:-2.25
-1 2:1e-3

+1 4:7
"""


# ----------------------------------------------------------------- parser


def test_parse_basic():
    ds = parse_libsvm(SAMPLE)
    assert ds.n_samples == 3
    assert ds.num_features == 4
    assert ds.labels.tolist() == [1.0, -1.0, 1.0]
    idxs, vals = ds.rows[0]
    assert idxs.tolist() == [1, 3]
    assert vals.tolist() == [0.5, -2.25]


def test_parse_label_only_row():
    ds = parse_libsvm(b"1\n-1 1:2\n")
    assert ds.rows[0][0].size == 0
    assert ds.num_features == 1


def test_parse_bad_label_position():
    with pytest.raises(ParseError) as exc:
        parse_libsvm(b"+1 1:1\nxyz 1:1\n")
    assert exc.value.line == 2
    assert exc.value.col == 1


def test_parse_missing_colon():
    with pytest.raises(ParseError) as exc:
        parse_libsvm(b"+1 1:1 23\n")
    assert exc.value.line == 1
    assert exc.value.col == 8
    assert "':'" in str(exc.value)


def test_parse_index_zero():
    with pytest.raises(ParseError) as exc:
        parse_libsvm(b"+1 0:5\n")
    assert "index 0" in str(exc.value)


def test_parse_nonincreasing_index():
    with pytest.raises(ParseError) as exc:
        parse_libsvm(b"+1 2:1 2:2\n")
    assert "not increasing" in str(exc.value)
    with pytest.raises(ParseError):
        parse_libsvm(b"+1 3:1 2:2\n")


def test_parse_bad_value():
    with pytest.raises(ParseError) as exc:
        parse_libsvm(b"+1 1:abc\n")
    assert exc.value.line == 1


def test_parse_three_labels():
    with pytest.raises(ParseError) as exc:
        parse_libsvm(b"1 1:1\n2 1:1\n3 1:1\n")
    assert exc.value.line == 3
    assert "two distinct" in str(exc.value)


def test_parse_empty_input():
    with pytest.raises(ParseError):
        parse_libsvm(b"")
    with pytest.raises(ParseError):
        parse_libsvm(b"# only a comment\n\n")


def test_writer_roundtrip():
    ds = parse_libsvm(SAMPLE)
    again = parse_libsvm(write_libsvm(ds))
    assert again.labels.tolist() == ds.labels.tolist()
    assert again.num_features == ds.num_features
    for (i1, v1), (i2, v2) in zip(ds.rows, again.rows):
        assert np.array_equal(i1, i2)
        assert np.array_equal(v1, v2)


def test_writer_preserves_full_precision():
    ds = generate_synthetic(3, 5, seed=1)
    again = parse_libsvm(write_libsvm(ds))
    for (_, v1), (_, v2) in zip(ds.rows, again.rows):
        assert np.array_equal(v1, v2)  # %.17g is bit-exact for doubles


# ----------------------------------------------------------------- labels


def test_normalize_label_conventions():
    ds = parse_libsvm(b"0 1:1\n1 1:1\n")
    normalize_labels(ds)
    assert ds.labels.tolist() == [-1.0, 1.0]

    ds = parse_libsvm(b"2 1:1\n4 1:1\n")
    normalize_labels(ds)
    assert ds.labels.tolist() == [-1.0, 1.0]

    ds = parse_libsvm(b"-1 1:1\n+1 1:1\n")
    normalize_labels(ds)
    assert ds.labels.tolist() == [-1.0, 1.0]


def test_normalize_single_label_rejected():
    ds = parse_libsvm(b"1 1:1\n1 1:2\n")
    with pytest.raises(ValueError):
        normalize_labels(ds)


# --------------------------------------------------------------- sharding


def test_shard_plan_sizes_and_drop():
    plan = make_shard_plan(7, 3, run_seed=0)
    assert plan.per_client == 2
    assert plan.dropped == 1
    used = np.concatenate([plan.client_rows(c) for c in range(3)])
    assert len(used) == 6
    assert len(set(used.tolist())) == 6  # disjoint
    assert np.array_equal(np.sort(plan.permutation), np.arange(7))


def test_shard_plan_rejects_too_many_clients():
    with pytest.raises(ValueError):
        make_shard_plan(3, 4, run_seed=0)


def test_shard_plan_seed_dependence():
    p0 = make_shard_plan(50, 5, run_seed=0)
    p1 = make_shard_plan(50, 5, run_seed=1)
    p0b = make_shard_plan(50, 5, run_seed=0)
    assert np.array_equal(p0.permutation, p0b.permutation)
    assert not np.array_equal(p0.permutation, p1.permutation)


def test_augment_and_shard_layout():
    ds = generate_synthetic(4, 9, seed=3)
    shards = augment_and_shard(ds, 2, run_seed=3, lam=0.5)
    assert len(shards) == 2
    for shard in shards:
        assert shard.dim == 5  # 4 features + intercept
        assert shard.n_samples == 4
        assert shard.lam == 0.5
        assert shard.bmat.flags.f_contiguous
        # intercept row carries the label (column = label * (features, 1))
        assert set(np.abs(shard.bmat[-1, :]).tolist()) == {1.0}


def test_augment_absorbs_labels():
    ds = parse_libsvm(b"-1 1:3\n+1 1:5\n")
    normalize_labels(ds)
    [shard] = augment_and_shard(ds, 1, run_seed=0, lam=0.0)
    cols = {tuple(shard.bmat[:, j]) for j in range(2)}
    assert cols == {(-3.0, -1.0), (5.0, 1.0)}


def test_augment_requires_normalized_labels():
    ds = parse_libsvm(b"0 1:1\n1 1:1\n")
    with pytest.raises(ValueError):
        augment_and_shard(ds, 1, run_seed=0, lam=0.0)


def test_split_rows_matches_shard_plan():
    ds = generate_synthetic(3, 10, seed=5)
    pieces = split_rows(ds, 3, run_seed=5)
    shards_direct = augment_and_shard(ds, 3, run_seed=5, lam=0.1)
    assert [p.n_samples for p in pieces] == [3, 3, 3]
    plan = make_shard_plan(10, 3, run_seed=5)
    for cid, piece in enumerate(pieces):
        sel = plan.client_rows(cid)
        assert piece.labels.tolist() == ds.labels[sel].tolist()
    # loading a written piece yields the same absorbed columns, given the
    # global feature count (a piece may miss the max index)
    import tempfile

    with tempfile.NamedTemporaryFile(suffix=".svm", delete=False) as fh:
        fh.write(write_libsvm(pieces[0]))
        path = fh.name
    shard = load_client_shard(path, lam=0.1, num_features=ds.num_features)
    assert np.array_equal(shard.bmat, shards_direct[0].bmat)


def test_load_client_shard_feature_padding():
    import tempfile

    with tempfile.NamedTemporaryFile(suffix=".svm", delete=False) as fh:
        fh.write(b"+1 1:2\n-1 1:4\n")
        path = fh.name
    shard = load_client_shard(path, lam=0.0, num_features=3)
    assert shard.dim == 4
    with pytest.raises(ValueError):
        load_client_shard(path, lam=0.0, num_features=0)


# -------------------------------------------------------------- synthetic


def test_synthetic_shape_and_determinism():
    ds = generate_synthetic(6, 20, seed=9)
    assert ds.n_samples == 20
    assert ds.num_features == 6
    assert set(np.unique(ds.labels).tolist()) <= {-1.0, 1.0}
    again = generate_synthetic(6, 20, seed=9)
    for (i1, v1), (i2, v2) in zip(ds.rows, again.rows):
        assert np.array_equal(v1, v2)
    assert np.array_equal(ds.labels, again.labels)
    other = generate_synthetic(6, 20, seed=10)
    assert not all(
        np.array_equal(v1, v2) for (_, v1), (_, v2) in zip(ds.rows, other.rows)
    )


def test_synthetic_features_bounded():
    ds = generate_synthetic(4, 50, seed=11)
    allvals = np.concatenate([v for _, v in ds.rows])
    assert np.all(allvals >= -1.0) and np.all(allvals < 1.0)


def test_synthetic_margin_scale_sharpens_labels():
    # larger planted signal should agree with the true separator more often
    def agreement(scale):
        ds = generate_synthetic(5, 400, seed=12, margin_scale=scale)
        # refit via the planted rule: labels vs sign of score without noise
        from fednl.rng import TAG_SYNTH, derive_stream

        prg = derive_stream(12, TAG_SYNTH)
        x_true = 2.0 * prg.f64_block(5) - 1.0
        feats = 2.0 * prg.f64_block(400 * 5).reshape(400, 5) - 1.0
        clean = np.where(feats @ x_true >= 0, 1.0, -1.0)
        return float(np.mean(clean == ds.labels))

    assert agreement(8.0) > agreement(0.5)


def test_synthetic_validates_arguments():
    with pytest.raises(ValueError):
        generate_synthetic(0, 5, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(3, 0, seed=0)
