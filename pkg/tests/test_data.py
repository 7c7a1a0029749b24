import numpy as np
import pytest

from leakguard.data import (DatasetSplit, SyntheticConfig, find_har_dir, ingest_csv, load_uci_har,
                            make_synthetic, rescale_features, synthetic_splits, write_csv)
from leakguard.errors import DomainError, ParseError
from leakguard.numeric import make_rng


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_toy_csv_exact(tmp_path):
    p = write(tmp_path, "a,b,label\n0.5,-0.25,1\n1,0,0\n-1,0.125,2\n")
    s = ingest_csv(p)
    assert s.features.tolist() == [[0.5, -0.25], [1.0, 0.0], [-1.0, 0.125]]
    assert s.labels.tolist() == [1, 0, 2]
    assert s.feature_names == ["a", "b"] and s.num_classes == 3


def test_label_column_anywhere(tmp_path):
    s = ingest_csv(write(tmp_path, "label,x\n1,0.3\n0,-0.3\n"))
    assert s.features.ravel().tolist() == [0.3, -0.3] and s.labels.tolist() == [1, 0]


def test_parse_error_names_row_and_column(tmp_path):
    p = write(tmp_path, "a,b,label\n0.5,0.1,1\n0.2,oops,0\n")
    with pytest.raises(ParseError) as exc:
        ingest_csv(p)
    assert (exc.value.row, exc.value.col) == (3, 1)
    assert "row 3" in str(exc.value)
    with pytest.raises(ParseError) as exc:
        ingest_csv(write(tmp_path, "a,label\n0.1,1\n0.2\n", "short.csv"))
    assert exc.value.row == 3


def test_label_out_of_range(tmp_path):
    for text in ("a,label\n0.1,-1\n", "a,label\n0.1,1.5\n"):
        with pytest.raises(DomainError):
            ingest_csv(write(tmp_path, text))
    with pytest.raises(DomainError):
        ingest_csv(write(tmp_path, "a,label\n0.1,6\n"), num_classes=6)


def test_out_of_range_features_need_rescale(tmp_path):
    p = write(tmp_path, "a,b,label\n10,5,0\n20,5,1\n15,5,0\n")
    with pytest.raises(DomainError):
        ingest_csv(p)
    s = ingest_csv(p, rescale=True)
    assert s.features.tolist() == [[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]
    lo, hi = s.feature_ranges
    t = ingest_csv(write(tmp_path, "a,b,label\n25,5,0\n", "t.csv"), rescale=True, feature_ranges=(lo, hi))
    assert t.features.tolist() == [[1.0, 0.0]]  # clipped to the training range


def test_rescale_bounds():
    x = make_rng(1).normal(0, 10, (50, 4))
    out, _ = rescale_features(x)
    assert out.min() == -1.0 and out.max() == 1.0


def test_csv_round_trip(tmp_path):
    train, _ = synthetic_splits(SyntheticConfig.small(seed=2))
    write_csv(train, tmp_path / "x.csv")
    back = ingest_csv(tmp_path / "x.csv")
    assert np.array_equal(back.features, train.features) and np.array_equal(back.labels, train.labels)


def test_split_invariants():
    with pytest.raises(DomainError):
        DatasetSplit(np.full((2, 2), 1.5), [0, 1])
    with pytest.raises(DomainError):
        DatasetSplit(np.zeros((2, 2)), [0, 3], num_classes=2)


def test_zero_spread_zero_variance():
    s = make_synthetic(3, 10, 60, 0.0, make_rng(0))
    for c in range(3):
        rows = s.features[s.labels == c]
        assert np.array_equal(rows, np.broadcast_to(rows[0], rows.shape))
    assert np.bincount(s.labels).tolist() == [20, 20, 20]
    with pytest.raises(DomainError):
        make_synthetic(1, 10, 10, 0.1, make_rng(0))


def test_nearest_centroid_on_small_spread():
    train, test = synthetic_splits(SyntheticConfig(num_classes=5, k=30, n_train=500, n_test=500,
                                                   spread=0.05, intrinsic_dim=None, noise_floor=0.0))
    cents = np.stack([train.features[train.labels == c].mean(axis=0) for c in range(5)])
    pred = np.argmin(((test.features[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == test.labels) >= 0.99


def test_synthetic_deterministic():
    a = synthetic_splits(SyntheticConfig.small(seed=7))
    b = synthetic_splits(SyntheticConfig.small(seed=7))
    c = synthetic_splits(SyntheticConfig.small(seed=8))
    assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))
    assert not np.array_equal(a[0].features, c[0].features)
    har = SyntheticConfig.har_like()
    assert (har.k, har.num_classes, har.n_train, har.n_test) == (561, 6, 7352, 2947)


@pytest.mark.skipif(find_har_dir() is None, reason="UCI HAR data not available")
def test_har_shapes():
    train, test = load_uci_har(find_har_dir())
    assert train.k == 561 and train.num_classes == 6 and train.n == 7352 and test.n == 2947
