import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relcil.errors import ConfigError, ParseError
from relcil.numerics import rng_stream
from relcil.stream import (
    StreamSpec,
    dataset_hash,
    export_stream,
    load_csv,
    load_manifest,
    make_stream,
    split_classes,
)


def tiny(**kw):
    args = dict(total_classes=6, tasks=3, train_per_class=5, test_per_class=2, input_dim=4, base_classes=2, seed=1)
    args.update(kw)
    return StreamSpec(**args)


def test_single_task_holds_every_class():
    _, tasks = make_stream(tiny(tasks=1))
    assert len(tasks) == 1 and tasks[0].labels == tuple(range(6))
    assert sorted(set(tasks[0].train_y.tolist())) == list(range(6))


def test_stream_is_deterministic():
    a = make_stream(tiny())
    b = make_stream(tiny())
    assert dataset_hash(*a) == dataset_hash(*b)
    assert a[1][2].train_X.tobytes() == b[1][2].train_X.tobytes()
    assert dataset_hash(*make_stream(tiny(seed=2))) != dataset_hash(*a)


def test_spec_rejects_uneven_split():
    with pytest.raises(ConfigError):
        StreamSpec(total_classes=10, tasks=3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 4), st.integers(0, 2**32 - 1))
def test_tasks_are_disjoint_and_exclude_base(T, per, base, seed):
    spec = StreamSpec(total_classes=T * per, tasks=T, train_per_class=2, test_per_class=1, input_dim=3, base_classes=base, seed=seed)
    base_set, tasks = make_stream(spec)
    labels = [c for t in tasks for c in t.labels]
    assert len(labels) == len(set(labels)) == T * per
    assert not set(base_set.y.tolist()) & set(labels)
    for t in tasks:
        assert set(t.train_y.tolist()) <= set(t.labels) and set(t.test_y.tolist()) <= set(t.labels)


def test_cluster_means_lie_on_the_sphere():
    spec = tiny(train_per_class=2000, test_per_class=0, within_class_std=0.5, cluster_separation=6.0)
    _, tasks = make_stream(spec)
    for t in tasks:
        for c in t.labels:
            mu = t.train_X[t.train_y == c].mean(axis=0)
            assert abs(np.linalg.norm(mu) - 6.0) < 5 * 0.5 * np.sqrt(4 / 2000) + 1e-12
            assert np.all(np.abs(t.train_X[t.train_y == c].std(axis=0) - 0.5) < 0.03)


def softmax_probe(X, y, Xt, yt, steps=400, lr=0.5):
    """Multinomial logistic regression with a bias, plain gradient descent."""
    classes = np.unique(y)
    Y = (y[:, None] == classes[None]).astype(float)
    A = np.hstack([X, np.ones((len(X), 1))])
    W = np.zeros((A.shape[1], len(classes)))
    for _ in range(steps):
        Z = A @ W
        P = np.exp(Z - Z.max(axis=1, keepdims=True))
        P /= P.sum(axis=1, keepdims=True)
        W -= lr * A.T @ (P - Y) / len(X)
    At = np.hstack([Xt, np.ones((len(Xt), 1))])
    return np.mean(classes[np.argmax(At @ W, axis=1)] == yt)


def test_default_tasks_are_linearly_separable():
    _, tasks = make_stream(StreamSpec())
    for t in tasks:
        assert softmax_probe(t.train_X, t.train_y, t.test_X, t.test_y) > 0.95


def test_split_classes_examples():
    rng = np.random.default_rng(0)
    parts = split_classes([0, 1, 2, 3], 2, rng)
    assert len(parts) == 2 and all(len(p) == 2 for p in parts)
    assert not set(parts[0]) & set(parts[1]) and set(parts[0]) | set(parts[1]) == {0, 1, 2, 3}
    parts = split_classes(range(5), 5, rng)
    assert sorted(p[0] for p in parts) == list(range(5)) and all(len(p) == 1 for p in parts)
    with pytest.raises(ConfigError):
        split_classes(range(5), 2, rng)


def test_split_classes_matches_shuffle_and_chunk():
    ids = list(range(100))
    got = split_classes(ids, 20, rng_stream(9, "data", "split"))
    order = rng_stream(9, "data", "split").permutation(100)
    want = []
    for i in range(20):
        chunk = [ids[order[5 * i + j]] for j in range(5)]
        want.append(tuple(sorted(chunk)))
    assert got == want


# CSV ------------------------------------------------------------------------


def write(path, text):
    path.write_text(text)
    return path


def test_csv_two_classes_eight_two_split(tmp_path):
    lines = ["label,feat_1,feat_2"] + [f"{c},{i}.5,{c}" for c in (0, 1) for i in range(10)]
    tasks = load_csv(write(tmp_path / "d.csv", "\n".join(lines) + "\n"), tasks=1)
    t = tasks[0]
    assert t.labels == (0, 1)
    for c in (0, 1):
        assert np.sum(t.train_y == c) == 8 and np.sum(t.test_y == c) == 2
    # every row lands in exactly one split
    feats = sorted(map(tuple, np.vstack([t.train_X, t.test_X])))
    assert feats == sorted((i + 0.5, float(c)) for c in (0, 1) for i in range(10))


@pytest.mark.parametrize(
    "text, line",
    [
        ("label,feat_1\n", 2),
        ("", 1),
        ("y,feat_1\n0,1\n", 1),
        ("label,feat_1,feat_2\n0,1,2\n1,3\n", 3),
        ("label,feat_1\n0,1\n1,abc\n", 3),
        ("label,feat_1\n0,nan\n", 2),
    ],
    ids=["empty-data", "empty-file", "bad-header", "ragged", "non-numeric", "non-finite"],
)
def test_csv_parse_errors_carry_line_numbers(tmp_path, text, line):
    with pytest.raises(ParseError) as info:
        load_csv(write(tmp_path / "bad.csv", text))
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_export_roundtrip_is_exact(tmp_path):
    spec = tiny(within_class_std=1 / 3)
    base, tasks = make_stream(spec)
    manifest = export_stream(base, tasks, tmp_path, spec)
    assert [e["file"] for e in manifest["tasks"]] == ["task_01.csv", "task_02.csv", "task_03.csv"]
    base2, tasks2 = load_manifest(tmp_path / "manifest.json")
    assert dataset_hash(base2, tasks2) == dataset_hash(base, tasks)
    for a, b in zip(tasks, tasks2):
        assert a.labels == b.labels
        assert a.train_X.tobytes() == b.train_X.tobytes() and a.test_y.tobytes() == b.test_y.tobytes()
