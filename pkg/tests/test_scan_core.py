import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from palletscan.scan_core import (
    NO_RETURN,
    BoundingBox,
    Frame,
    ParseError,
    Scan,
    ScanLabel,
    load_frames,
    parse_label,
    parse_scan,
    save_frame,
    split_dataset,
    write_label,
    write_scan,
)

MINIMAL = f"angle_min 0\nangle_increment {math.pi / 2}\ncount 3\n1.0 2.0 1.5\n"


def test_parse_minimal_file():
    scan = parse_scan(MINIMAL)
    assert scan.ranges == (1.0, 2.0, 1.5)
    assert scan.angle_min == 0.0
    assert scan.angle_increment == pytest.approx(math.pi / 2)


def test_count_mismatch_names_line():
    text = "angle_min 0\nangle_increment 0.1\ncount 3\n1.0 2.0\n"
    with pytest.raises(ParseError, match="count mismatch") as info:
        parse_scan(text)
    assert info.value.line == 4


@pytest.mark.parametrize(
    "text, line",
    [
        ("angle_mn 0\nangle_increment 0.1\ncount 1\n1\n", 1),
        ("angle_min 0\nangle_increment x\ncount 1\n1\n", 2),
        ("angle_min 0\nangle_increment 0.1\ncount two\n1\n", 3),
        ("angle_min 0\nangle_increment 0.1\ncount 2\n1 -0.5\n", 4),
        ("angle_min 0\nangle_increment 0.1\ncount 1\nnan\n", 4),
        ("angle_min 0\nangle_increment 0\ncount 1\n1\n", 2),
    ],
)
def test_malformed_files_report_line(text, line):
    with pytest.raises(ParseError) as info:
        parse_scan(text, source="x.scan")
    assert info.value.line == line
    assert "x.scan" in str(info.value)


def test_empty_file_is_an_error():
    with pytest.raises(ParseError, match="empty"):
        parse_scan(b"")


def test_no_return_is_written_as_inf():
    scan = Scan(0.0, 0.5, (1.0, NO_RETURN, 2.0))
    text = write_scan(scan).decode()
    assert text.splitlines()[3] == "1.0 inf 2.0"
    assert parse_scan(text).ranges[1] == math.inf


def test_canonical_form():
    scan = Scan(0.0, math.pi / 2, (1, 2, 1.5))
    assert write_scan(scan) == (
        f"angle_min 0.0\nangle_increment {math.pi / 2!r}\ncount 3\n1.0 2.0 1.5\n"
    ).encode()


def test_write_of_parse_is_canonical():
    loose = "angle_min   0\nangle_increment 1.5707963267948966\ncount 3\n1 2.00 1.5e0\n"
    canonical = write_scan(parse_scan(loose))
    assert write_scan(parse_scan(canonical)) == canonical


ranges = st.lists(
    st.one_of(st.floats(0, 100, allow_nan=False), st.just(math.inf)), min_size=1, max_size=50
)


@settings(max_examples=200, deadline=None)
@given(st.floats(-4, 4, allow_nan=False), st.floats(1e-4, 0.1), ranges)
def test_round_trip(angle_min, inc, rs):
    scan = Scan(angle_min, inc, tuple(rs))
    assert parse_scan(write_scan(scan)) == scan


def test_scan_invariants():
    with pytest.raises(ValueError):
        Scan(0, 0.1, ())
    with pytest.raises(ValueError):
        Scan(0, 1.0, (1.0,) * 10)  # span 9 rad > 2 pi
    with pytest.raises(ValueError):
        Scan(0, 0.1, (-1.0,))


def test_box_and_label():
    b = BoundingBox(2, 3, 4, 5)
    assert (b.area, b.row1, b.col1, b.center) == (20, 6, 8, (4.0, 5.5))
    assert b.inside(8) and not b.inside(7)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 1)
    with pytest.raises(ValueError):
        ScanLabel(False, (b,))


def test_label_round_trip_and_errors():
    label = ScanLabel(True, (BoundingBox(1, 2, 3, 4), BoundingBox(0, 0, 1, 1)))
    assert parse_label(write_label(label)) == label
    assert parse_label("has_pallet 0\n") == ScanLabel(False)
    with pytest.raises(ParseError) as info:
        parse_label("has_pallet 1\nbox 1 2 3\n")
    assert info.value.line == 2
    with pytest.raises(ParseError):
        parse_label("has_pallet 0\nbox 1 2 3 4\n")


def test_frames_on_disk(tmp_path):
    frames = [
        Frame("b", Scan(0, 0.1, (1.0, 2.0)), ScanLabel(True, (BoundingBox(0, 0, 2, 2),))),
        Frame("a", Scan(0, 0.1, (3.0,)), None),
    ]
    for f in frames:
        save_frame(tmp_path, f)
    loaded = load_frames(tmp_path)
    assert [f.stem for f in loaded] == ["a", "b"]
    assert [f.scan.timestamp for f in loaded] == [0, 1]
    assert loaded[1].label == frames[0].label
    with pytest.raises(ParseError, match="missing label"):
        load_frames(tmp_path, require_labels=True)


@pytest.mark.parametrize("n, n_train", [(340, 238), (10, 7), (565, 395), (2, 1)])
def test_split_sizes(n, n_train):
    s = split_dataset(n, 0.7, seed=3)
    assert len(s.train_indices) == n_train
    assert len(s.test_indices) == n - n_train


def test_split_seeding():
    assert split_dataset(100, 0.7, 5) == split_dataset(100, 0.7, 5)
    assert split_dataset(100, 0.7, 5) != split_dataset(100, 0.7, 6)


@given(st.integers(2, 2000), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
def test_split_partitions(n, frac, seed):
    s = split_dataset(n, frac, seed)
    both = np.concatenate([s.train_indices, s.test_indices])
    assert sorted(both.tolist()) == list(range(n))
    assert len(s.train_indices) == math.floor(frac * n + 1e-9)


def test_split_rejects_bad_input():
    with pytest.raises(ValueError):
        split_dataset(1)
    with pytest.raises(ValueError):
        split_dataset(10, 1.0)
