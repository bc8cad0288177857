from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krontime.data import (
    TimeSeriesDataset,
    TsFormatWarning,
    TsParseError,
    gen_synthetic,
    load_ts,
    load_uea,
    merge,
    parse_ts,
    serialize_ts,
    uea_paths,
    z_normalize,
)

CORPUS = Path(__file__).parent / "ts_corpus"

TOY = "@problemName toy\n@classLabel true a b\n@data\n1,2,3:a\n4,5,6:b"


def test_parse_toy_example():
    ds = parse_ts(TOY)
    assert ds.problem_name == "toy"
    assert ds.X.shape == (2, 1, 3)
    np.testing.assert_array_equal(ds.X[:, 0], [[1, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(ds.y, [0, 1])
    assert ds.class_names == ["a", "b"]


def test_comments_before_data_are_skipped():
    text = "# lead\n@problemName toy\n# mid\n@classLabel true a b\n#\n@data\n1,2,3:a\n4,5,6:b"
    assert parse_ts(text) == parse_ts(TOY)


def test_nonnumeric_value_names_line():
    text = "@problemName toy\n@classLabel true a b\n@data\n1,2,x:a"
    with pytest.raises(TsParseError) as err:
        parse_ts(text)
    assert err.value.data_row == 1
    assert err.value.line == 4
    assert "data line 1" in str(err.value)
    assert "value 3" in str(err.value)


def test_corpus_univariate():
    ds = load_ts(CORPUS / "toy_univariate.ts")
    assert ds.X.shape == (4, 1, 4)
    np.testing.assert_array_equal(ds.y, [0, 1, 2, 0])
    assert ds.class_names == ["up", "down", "flat"]
    np.testing.assert_array_equal(ds.X[3, 0], [-1e-3, 0.0, 100.0, 3.25])


def test_corpus_multivariate():
    ds = load_ts(CORPUS / "toy_multivariate.ts")
    assert ds.X.shape == (3, 3, 5)
    # labels "1","2" keep declaration order, not numeric value
    np.testing.assert_array_equal(ds.y, [1, 0, 0])
    np.testing.assert_array_equal(ds.X[0, 2], [-2, -1, 0, 1, 2])


@pytest.mark.parametrize(
    "name, fragment",
    [
        ("bad_nonnumeric.ts", "line 4"),
        ("bad_no_data.ts", "line 3"),
        ("bad_label.ts", "line 5"),
        ("bad_channels.ts", "line 5"),
        ("bad_timestamps.ts", "timestamped"),
        ("bad_missing.ts", "missing"),
        ("bad_unequal.ts", "unequal"),
        ("bad_series_length.ts", "@seriesLength"),
    ],
)
def test_corpus_malformed(name, fragment):
    with pytest.raises(TsParseError) as err:
        load_ts(CORPUS / name)
    assert fragment in str(err.value)
    assert name in str(err.value)


def test_missing_data_marker_only_header():
    with pytest.raises(TsParseError, match="missing @data"):
        parse_ts("@problemName x\n@classLabel true a\n")


def test_unknown_directive_warns():
    with pytest.warns(TsFormatWarning):
        ds = parse_ts("@problemName toy\n@flavour vanilla\n@classLabel true a b\n@data\n1:a\n2:b")
    assert len(ds) == 2


@pytest.mark.parametrize(
    "text",
    [
        "",
        "@data\n1,2:a",
        "@classLabel false\n@data\n1,2",
        "@classLabel true a a\n@data\n1:a",
        "@classLabel true a\n@data\n1,2",
        "@seriesLength abc\n@classLabel true a\n@data\n1:a",
        "@univariate maybe\n@classLabel true a\n@data\n1:a",
        "@classLabel true a\n@data\n1,inf:a",
        "@univariate true\n@classLabel true a\n@data\n1:2:a",
        "hello\n@data",
    ],
)
def test_malformed_inputs_raise_diagnostics(text):
    with pytest.raises(TsParseError):
        parse_ts(text)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="@#:,.-0123456789abcdeE? \n", max_size=120))
def test_parser_never_crashes(text):
    try:
        parse_ts("@classLabel true a b\n@data\n" + text)
    except TsParseError:
        pass


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(1, 6), c=st.integers(1, 3), L=st.integers(1, 8),
    k=st.integers(1, 4), seed=st.integers(0, 1000),
)
def test_serialize_roundtrip(n, c, L, k, seed):
    rng = np.random.default_rng(seed)
    ds = TimeSeriesDataset(
        X=rng.normal(size=(n, c, L)) * 10 ** rng.uniform(-5, 5),
        y=rng.integers(0, k, size=n),
        class_names=[f"c{i}" for i in range(k)],
        problem_name="rt",
    )
    again = parse_ts(serialize_ts(ds))
    assert again == ds
    assert parse_ts(serialize_ts(again)) == again


def test_corpus_roundtrip():
    for name in ("toy_univariate.ts", "toy_multivariate.ts"):
        ds = load_ts(CORPUS / name)
        assert parse_ts(serialize_ts(ds)) == ds


def test_matches_reference_loader(tmp_path):
    loaders = pytest.importorskip("aeon.datasets")
    for name in ("toy_univariate.ts", "toy_multivariate.ts"):
        # the reference reader refuses blank lines inside @data, which this parser skips
        text = (CORPUS / name).read_text()
        path = tmp_path / name
        path.write_text("\n".join(line for line in text.splitlines() if line.strip()) + "\n")
        X, y = loaders.load_from_tsfile(str(path))
        ds = load_ts(CORPUS / name)
        np.testing.assert_array_equal(np.asarray(X, dtype=float), ds.X)
        assert [ds.class_names[i] for i in ds.y] == list(y)


def test_serialized_files_read_by_reference_loader(tmp_path):
    loaders = pytest.importorskip("aeon.datasets")
    for seed in range(5):
        ds = gen_synthetic("burst-position", 9, 17, noise=1.0, seed=seed, n_classes=3)
        path = tmp_path / f"s{seed}.ts"
        path.write_text(serialize_ts(ds))
        X, y = loaders.load_from_tsfile(str(path))
        np.testing.assert_array_equal(np.asarray(X, dtype=float), ds.X)
        assert [ds.class_names[i] for i in ds.y] == list(y)


def test_merge_and_uea_layout(tmp_path, monkeypatch):
    root = tmp_path / "uea"
    (root / "Toy").mkdir(parents=True)
    train = "@problemName Toy\n@classLabel true a b\n@data\n1,2:a\n3,4:b\n"
    test = "@problemName Toy\n@classLabel true a b\n@data\n5,6:b\n"
    (root / "Toy" / "Toy_TRAIN.ts").write_text(train)
    (root / "Toy" / "Toy_TEST.ts").write_text(test)
    monkeypatch.setenv("KRONTIME_DATA", str(root))
    ds = load_uea("Toy")
    np.testing.assert_array_equal(ds.y, [0, 1, 1])
    with pytest.raises(FileNotFoundError):
        load_uea("Absent")
    other = parse_ts("@classLabel true b a\n@data\n1,2:a")
    with pytest.raises(ValueError):
        merge(ds, other)


# --- paper datasets, only when present locally -----------------------------

PAPER_DATASETS = [
    # name, length, classes, channels
    ("FaultDetectionA", 5120, 3, 1),
    ("EigenWorms", 17891, 5, 6),
    ("BinaryHeartbeat", 18530, 2, 1),
]


@pytest.mark.parametrize("name, length, n_classes, n_channels", PAPER_DATASETS)
def test_uea_metadata_when_present(name, length, n_classes, n_channels):
    paths = uea_paths(name)
    if paths is None or not all(p.exists() for p in paths):
        pytest.skip(f"{name} not available under $KRONTIME_DATA")
    ds = load_uea(name)
    assert ds.series_len == length
    assert ds.n_classes == n_classes
    assert ds.n_channels == n_channels


# --- normalisation --------------------------------------------------------------


def _ds(X):
    X = np.asarray(X, dtype=float)
    return TimeSeriesDataset(X=X, y=np.zeros(len(X), dtype=int), class_names=["a"])


def test_z_normalize_definition():
    out = z_normalize(_ds([[[1.0, 2.0, 3.0]]])).X[0, 0]
    np.testing.assert_allclose(out, [-np.sqrt(1.5), 0.0, np.sqrt(1.5)], atol=1e-12)
    assert abs(out.mean()) <= 1e-7 and abs(out.std() - 1) <= 1e-7


def test_z_normalize_constant_is_zero():
    out = z_normalize(_ds([[[4.2] * 6, [0.0] * 6]])).X
    assert not out.any()


def test_z_normalize_idempotent():
    rng = np.random.default_rng(0)
    ds = _ds(rng.normal(3, 5, size=(8, 2, 50)))
    once = z_normalize(ds)
    np.testing.assert_allclose(z_normalize(once).X, once.X, atol=1e-6)
    np.testing.assert_allclose(once.X.mean(-1), 0, atol=1e-7)
    np.testing.assert_allclose(once.X.std(-1), 1, atol=1e-7)


# --- synthetic -----------------------------------------------------------------


@pytest.mark.parametrize("kind", ["two-freq", "burst-position"])
def test_synthetic_reproducible_and_balanced(kind):
    a = gen_synthetic(kind, 40, 128, noise=0.3, seed=5)
    b = gen_synthetic(kind, 40, 128, noise=0.3, seed=5)
    assert a == b
    assert np.bincount(a.y).tolist() == [20, 20]
    assert a.X.shape == (40, 1, 128)
    assert a != gen_synthetic(kind, 40, 128, noise=0.3, seed=6)


def test_synthetic_invalid_kind():
    with pytest.raises(ValueError):
        gen_synthetic("sawtooth", 10, 32)


def test_two_freq_noiseless_spectral_separation():
    ds = gen_synthetic("two-freq", 50, 256, noise=0.0, seed=1)
    spec = np.abs(np.fft.rfft(ds.X[:, 0], axis=-1))
    peak = spec.argmax(axis=-1)
    # frequency bin of the peak identifies the class exactly
    np.testing.assert_array_equal(peak, np.where(ds.y == 0, 256 // 16, 256 // 8))


def test_burst_position_locates_class_segment():
    ds = gen_synthetic("burst-position", 30, 256, noise=0.0, seed=2, n_classes=3)
    centre = np.abs(ds.X[:, 0]).argmax(axis=-1)
    np.testing.assert_array_equal(centre * 3 // 256, ds.y)
