import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter1d
from scipy.stats import chisquare

from owgr.errors import CatalogError, DatasetIOError, TooShort
from owgr.synth import (
    BASE_GESTURES,
    NULL,
    Counts,
    Dataset,
    UserSpec,
    channel_stats,
    gen_dataset,
    gen_instance,
    linear_probe_accuracy,
    pooled_energy_features,
    standardize,
    window_segments,
)


def _burst_count(x: np.ndarray) -> int:
    """Contiguous runs of smoothed accel energy above 10% of its peak."""
    energy = gaussian_filter1d((x[:3] ** 2).sum(axis=0), 4.0)
    above = energy > 0.1 * energy.max()
    return int(np.sum(above[1:] & ~above[:-1]) + above[0])


def _quiet(clean_catalog):
    return next(iter(clean_catalog.contexts.values()))


@pytest.mark.parametrize("gid,expected", [("single_pinch", 1), ("double_pinch", 2), ("middle_pinch", 1), ("fist_clench", 1)])
def test_burst_count(clean_catalog, gid, expected):
    ctx = _quiet(clean_catalog)
    user = clean_catalog.users["u00"]
    for s in range(5):
        x = gen_instance(clean_catalog.gestures[gid], ctx, user, np.random.default_rng(s))
        assert _burst_count(x) == expected


def test_gesture_burst_structure(catalog):
    g = catalog.gestures
    assert len(g["double_pinch"].bursts) == 2
    assert len(g["single_pinch"].bursts) == len(g["middle_pinch"].bursts) == 1
    assert g["fist_clench"].bursts[0].width > g["single_pinch"].bursts[0].width


def test_null_without_noise_is_zero(clean_catalog):
    x = gen_instance(None, _quiet(clean_catalog), clean_catalog.users["u00"], np.random.default_rng(0))
    assert x.shape == (6, 120) and not x.any()


def test_rotations_are_orthonormal(catalog):
    for c in catalog.contexts.values():
        R = np.asarray(c.matrix)
        assert np.abs(R @ R.T - np.eye(3)).max() <= 1e-12
    for u in catalog.users.values():
        R = np.asarray(u.matrix)
        assert np.abs(R @ R.T - np.eye(3)).max() <= 1e-12


def test_rotation_couples_accel_and_gyro(clean_catalog, catalog):
    rotated = [c for c in catalog.contexts.values() if not np.allclose(c.matrix, np.eye(3))][0]
    import dataclasses

    quiet = dataclasses.replace(rotated, noise_sigma=0.0, baseline_amp=(0.0,) * 6)
    g = catalog.gestures["fist_clench"]
    u = catalog.users["u00"]
    base = gen_instance(g, _quiet(clean_catalog), u, np.random.default_rng(1))
    rot = gen_instance(g, quiet, u, np.random.default_rng(1))
    R = np.asarray(quiet.matrix)
    np.testing.assert_allclose(rot[:3], R @ base[:3], atol=1e-12)
    np.testing.assert_allclose(rot[3:], R @ base[3:], atol=1e-12)


def test_tempo_range():
    with pytest.raises(CatalogError):
        UserSpec("u", tempo_scale=1.5)


def test_dataset_arithmetic(catalog):
    ctxs = list(catalog.contexts)[:2]
    ds = gen_dataset(catalog, Counts(50, list(BASE_GESTURES), ctxs, ["u00"]), seed=0)
    assert len(ds) == 500
    assert np.sum(ds.gesture == NULL) == 100
    for c in ctxs:
        assert np.sum((ds.context == c) & (ds.gesture == NULL)) == 50


def test_same_seed_byte_identical(tmp_path, catalog):
    counts = Counts(3, list(BASE_GESTURES)[:2], list(catalog.contexts)[:2], ["u00", "u01"])
    digests = []
    for name in ("a", "b"):
        gen_dataset(catalog, counts, seed=9, out=tmp_path / name)
        digests.append(
            [hashlib.sha256((tmp_path / name / f).read_bytes()).hexdigest() for f in ("manifest.json", "samples.f32", "labels.csv")]
        )
    assert digests[0] == digests[1]


def test_load_round_trip(tmp_path, catalog):
    counts = Counts(2, list(BASE_GESTURES), list(catalog.contexts)[:1], ["u00"])
    ds = gen_dataset(catalog, counts, seed=1, out=tmp_path / "d")
    back = Dataset.load(tmp_path / "d")
    assert back.X.dtype == np.float64
    assert np.array_equal(back.X, ds.X)
    assert list(back.split) == list(ds.split) and list(back.gesture) == list(ds.gesture)
    m = back.manifest()
    assert m["sample_rate_hz"] == 100 and m["n_records"] == len(ds)


def test_load_missing(tmp_path):
    with pytest.raises(DatasetIOError):
        Dataset.load(tmp_path / "nothing")


def test_split_fractions(catalog):
    ds = gen_dataset(catalog, Counts(10, list(BASE_GESTURES), list(catalog.contexts)[:3], ["u00"]), seed=0)
    frac = {s: np.mean(ds.split == s) for s in ("train", "val", "test")}
    assert frac == {"train": 0.6, "val": 0.2, "test": 0.2}


def test_coarse_children_drawn_evenly(catalog):
    """Minibatches drawn from a coarse context split evenly between its children."""
    from owgr.tasks import SequenceParams, build_sequence

    ds = gen_dataset(catalog, Counts(10, list(BASE_GESTURES), None, ["u00"]), seed=4)
    seq = build_sequence("new_context", SequenceParams(1, granularity="coarse"), ds, np.random.default_rng(0))
    task = seq.tasks[0]
    name = task.descriptor.split(":", 1)[1]
    children = catalog.coarse[name]
    rng = np.random.default_rng(0)
    draws = ds.context[task.train.record_id[rng.integers(0, len(task.train), 1000)]]
    counts = [np.sum(draws == c) for c in children]
    assert sum(counts) == 1000
    assert chisquare(counts).pvalue > 0.01


@settings(max_examples=200, deadline=None)
@given(st.integers(120, 10000))
def test_window_count(L):
    wins = window_segments(np.zeros((6, L)))
    assert len(wins) == (L - 120) // 60 + 1
    assert all(w.shape == (6, 120) for w in wins)


def test_window_examples():
    assert len(window_segments(np.zeros((6, 600)))) == 9
    assert len(window_segments(np.zeros((6, 120)))) == 1
    with pytest.raises(TooShort):
        window_segments(np.zeros((6, 119)))


def test_windows_overlap():
    sig = np.tile(np.arange(300.0), (6, 1))
    a, b = window_segments(sig)[:2]
    assert np.array_equal(a[:, 60:], b[:, :60])


def test_standardize_constant_channel():
    w = np.ones((4, 6, 120))
    assert not standardize(w, channel_stats(w)).any()


def test_standardize_recomputed_stats():
    w = np.random.default_rng(0).normal(3.0, 5.0, size=(40, 6, 120))
    z = standardize(w, channel_stats(w))
    mean, std = channel_stats(z)
    assert np.abs(mean).max() <= 1e-12
    assert np.abs(std - 1).max() <= 1e-9
    again = standardize(z, channel_stats(z))
    np.testing.assert_allclose(again, z, atol=1e-12)


def test_clean_gestures_linearly_separable(clean_catalog):
    cid = next(iter(clean_catalog.contexts))
    ds = gen_dataset(clean_catalog, Counts(30, list(BASE_GESTURES), [cid], ["u00"]), seed=2)
    keep = ds.gesture != NULL
    assert linear_probe_accuracy(pooled_energy_features(ds.X[keep]), ds.gesture[keep]) == 1.0
