import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgraft import grafting, models, training
from kgraft.errors import FormatError, ShapeError, StalenessError, UsageError, ValidationError
from kgraft.grafting import HeadSpec, SelectionVector
from kgraft.rng import make_rng
from kgraft.training import TrainConfig


def test_scion_examples():
    assert grafting.scion_from_selection(SelectionVector((0,) * 5)) == ()
    s = SelectionVector.from_indices({8, 9, 10}, 14)
    assert grafting.scion_from_selection(s) == (8, 9, 10)
    assert str(s) == "00000000111000"
    with pytest.raises(UsageError):
        SelectionVector.from_indices({14}, 14)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=30))
def test_scion_matches_linear_scan(bits):
    found = []
    for i in range(len(bits)):
        if bits[i] == 1:
            found.append(i)
    s = SelectionVector(tuple(bits))
    assert list(grafting.scion_from_selection(s)) == found
    assert SelectionVector.from_string(str(s)) == s


def test_gap_examples():
    tap = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert grafting.transform_scion_features({3: tap})[3].tolist() == [[2.5]]
    flat = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(grafting.transform_scion_features({1: flat})[1], flat)
    with pytest.raises(ShapeError):
        grafting.transform_scion_features({0: np.ones((2, 2, 2))})


def test_gap_against_loops():
    rng = np.random.default_rng(0)
    taps = {i: rng.normal(size=(2, 3 + i, 4, 2 + i)) for i in range(3)}
    out = grafting.transform_scion_features(taps)
    for i, f in taps.items():
        n, h, w, c = f.shape
        for a in range(n):
            for k in range(c):
                total = 0.0
                for y in range(h):
                    for x in range(w):
                        total += f[a, y, x, k]
                assert abs(out[i][a, k] - total / (h * w)) < 1e-12


def test_compose_examples():
    one = np.ones((2, 3))
    assert np.array_equal(grafting.compose_features({4: one}), one)
    got = grafting.compose_features({9: np.array([[3.0]]), 8: np.array([[1.0, 2.0]])})
    assert got.tolist() == [[1.0, 2.0, 3.0]]
    with pytest.raises(UsageError):
        grafting.compose_features({})


@settings(max_examples=40, deadline=None)
@given(st.permutations(list(range(5))))
def test_compose_normalizes_key_order(perm):
    rng = np.random.default_rng(1)
    g = {i: rng.normal(size=(3, i + 1)) for i in range(5)}
    shuffled = {i: g[i] for i in perm}
    assert np.array_equal(grafting.compose_features(shuffled), grafting.compose_features(g))


def _donor(seed=0, **kw):
    spec = models.build_donor_spec(**kw)
    return spec, models.init_params(spec, make_rng(seed, "init"))


def test_width_examples():
    spec, params = _donor(conv_blocks=((32, 32), (64, 64), (128, 128)))
    s = SelectionVector.from_indices({8, 9, 10}, len(spec))
    g_spec, head = grafting.build_grafted_model(spec, params, s, HeadSpec(4), make_rng(0))
    assert g_spec.input_width == 256
    assert head[grafting.GraftHead.HIDDEN][0].shape == (256, 256)
    last = SelectionVector.from_indices({13}, len(spec))
    g_last, _ = grafting.build_grafted_model(spec, params, last, HeadSpec(4), make_rng(0))
    assert g_last.input_width == 128


def test_empty_scion_and_class_mismatch():
    spec, params = _donor()
    with pytest.raises(UsageError):
        grafting.build_grafted_model(spec, params, SelectionVector((0,) * len(spec)), HeadSpec(4), make_rng(0))
    with pytest.raises(ValidationError):
        grafting.build_grafted_model(spec, params, SelectionVector.from_indices({1}, len(spec)),
                                     HeadSpec(3), make_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.sets(st.integers(0, 14), min_size=1), st.integers(0, 14))
def test_width_is_monotone_and_additive(scion, extra):
    spec = models.build_donor_spec()
    width = grafting.GraftedModelSpec("", "", SelectionVector.from_indices(scion, 23), HeadSpec(4),
                                      tuple(spec.channels(i) for i in sorted(scion)), 0).input_width
    assert width == sum(spec.output_shapes[i][-1] for i in scion)
    bigger = sum(spec.channels(i) for i in scion | {extra})
    assert bigger >= width


def _graft(spec, params, scion, seed=0):
    s = SelectionVector.from_indices(scion, len(spec))
    return grafting.build_grafted_model(spec, params, s, HeadSpec(4, hidden_units=32), make_rng(seed))


def test_raw_path_cache_path_and_oracle_agree():
    spec, params = _donor()
    g_spec, head = _graft(spec, params, {3, 8, 13})
    x = np.random.default_rng(5).uniform(size=(8, 32, 32, 3))
    raw = grafting.grafted_forward(g_spec, head, images=x, donor=(spec, params))
    cache = grafting.build_feature_cache(spec, params, g_spec.selection, {"test": x}, chunk=3)
    cached = grafting.grafted_forward(g_spec, head, features=(cache, "test"))
    assert np.max(np.abs(raw - cached)) < 1e-12
    # independent route: one full forward, loop-free numpy GAP, hand-written head
    _, taps = models.forward_with_taps(spec, params, x, {3, 8, 13})
    h = np.concatenate([taps[i].mean(axis=(1, 2)) for i in (3, 8, 13)], axis=1)
    (w1, b1), (w2, b2) = head["graft_hidden"], head["graft_out"]
    oracle = np.maximum(h @ w1 + b1, 0) @ w2 + b2
    assert np.max(np.abs(raw - oracle)) < 1e-12
    assert raw.shape == (8, 4)


def test_zero_rows_zero_weights_give_bias():
    spec, params = _donor()
    g_spec, head = _graft(spec, params, {1})
    w1, b1 = head["graft_hidden"]
    w2, b2 = head["graft_out"]
    zeroed = {"graft_hidden": (np.zeros_like(w1), b1), "graft_out": (np.zeros_like(w2), np.arange(4.0))}
    out = grafting.grafted_forward(g_spec, zeroed, features=np.zeros((16, g_spec.input_width)))
    assert out.shape == (16, 4) and np.all(out == np.arange(4.0))


def test_stale_cache_and_donor():
    spec, params = _donor()
    g_spec, head = _graft(spec, params, {3})
    x = np.random.default_rng(0).uniform(size=(2, 32, 32, 3))
    other = grafting.build_feature_cache(spec, params, SelectionVector.from_indices({1}, len(spec)), {"t": x})
    with pytest.raises(StalenessError):
        grafting.grafted_forward(g_spec, head, features=(other, "t"))
    _, params2 = _donor(seed=1)
    with pytest.raises(StalenessError):
        grafting.grafted_forward(g_spec, head, images=x, donor=(spec, params2))


def test_cache_files_deterministic_and_checked(tmp_path):
    spec, params = _donor()
    s = SelectionVector.from_indices({6, 11}, len(spec))
    x = np.random.default_rng(3).uniform(size=(5, 32, 32, 3))
    for d in ("a", "b"):
        grafting.save_cache(grafting.build_feature_cache(spec, params, s, {"train": x, "val": x[:2]}), tmp_path / d)
    for f in ("cache.json", "train.grft", "val.grft"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    back = grafting.load_cache(tmp_path / "a")
    assert back.features["train"].shape == (5, 48) and back.widths == (16, 32)
    doc = json.loads((tmp_path / "a" / "cache.json").read_text())
    doc["selection"] = "1" + doc["selection"][1:]
    (tmp_path / "a" / "cache.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        grafting.load_cache(tmp_path / "a")


def test_graft_save_load(tmp_path):
    spec, params = _donor()
    g_spec, head = _graft(spec, params, {8, 13})
    grafting.save_graft(g_spec, head, tmp_path / "g", dtype="f64")
    g2, head2 = grafting.load_graft(tmp_path / "g")
    assert g2 == g_spec
    for k in head:
        assert all(np.array_equal(a, b) for a, b in zip(head[k], head2[k]))


def test_head_training_leaves_donor_bytes_and_is_reproducible():
    spec, params = _donor()
    before = models.params_digest(params)
    x = np.random.default_rng(4).uniform(size=(24, 32, 32, 3))
    y = training.one_hot(np.arange(24) % 4, 4)
    digests = []
    for _ in range(2):
        g_spec, head = _graft(spec, params, {3, 13}, seed=2)
        cache = grafting.build_feature_cache(spec, params, g_spec.selection, {"train": x})
        model = grafting.GraftHead(g_spec.head, g_spec.input_width)
        _, hist = training.train_model(model, head, (cache.features["train"], y),
                                       (cache.features["train"], y), TrainConfig(epochs=2))
        digests.append((models.params_digest(head), training.metrics_csv(hist)))
    assert digests[0] == digests[1]
    assert models.params_digest(params) == before


def test_grafted_size_counts_prefix():
    spec, params = _donor()
    g_spec, _ = _graft(spec, params, {3, 13})
    assert g_spec.donor_prefix_params == models.prefix_parameter_count(spec, 13) == 18184
    assert g_spec.input_width == 8 + 32
    assert g_spec.parameter_count() == (40 + 1) * 32 + 33 * 4 + 18184
