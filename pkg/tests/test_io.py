import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mhnforget.geometry import build_equal_angular
from mhnforget.io import csv_text, fmt, load_memory_set, read_csv, save_memory_set, write_csv, write_json


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_cells_round_trip(x):
    assert float(fmt(x)) == x


def test_cell_formats():
    assert fmt(np.float64(0.1)) == "0.10000000000000001"
    assert fmt(True) == "true" and fmt(np.int64(3)) == "3" and fmt("cluster") == "cluster"


def test_csv_layout():
    text = csv_text(["a", "b"], [(1, 0.5), (2, 1e-20)])
    assert text == "a,b\n1,0.5\n2,9.9999999999999995e-21\n"


def test_atomic_writes_leave_no_temporaries(tmp_path):
    write_csv(tmp_path / "sub" / "t.csv", ["a"], [(1,)])
    write_json(tmp_path / "sub" / "t.json", {"x": np.arange(3)})
    assert sorted(p.name for p in (tmp_path / "sub").iterdir()) == ["t.csv", "t.json"]
    assert json.loads((tmp_path / "sub" / "t.json").read_text()) == {"x": [0, 1, 2]}


@pytest.mark.parametrize("suffix", [".json", ".csv"])
def test_memory_file_round_trip(tmp_path, suffix):
    X = build_equal_angular(4, 7, 0.3)
    back = load_memory_set(save_memory_set(tmp_path / f"m{suffix}", X))
    assert np.array_equal(back.vectors, X.vectors) and back.roles == X.roles


def test_corrupted_memory_file_names_rows(tmp_path):
    X = build_equal_angular(4, 7, 0.3)
    path = save_memory_set(tmp_path / "m.csv", X)
    header, rows = read_csv(path)
    rows[1][2] = "0.9"
    rows[3][1] = "2.0"
    write_csv(path, header, rows)
    with pytest.raises(ValueError, match=r"1 .*3 "):
        load_memory_set(path)
