"""Strict-parse and lossless round-trip behaviour."""

import pytest

from mergeplot.schema import (
    SPREAD_COLUMNS,
    UTILIZATION_COLUMNS,
    SchemaError,
    Table,
    read_table,
    write_table,
)


def write(path, text):
    path.write_text(text)
    return str(path)


GOOD = ("time_ns,link_id,direction,utilization\r\n"
        "0,3,up,0.125000\r\n"
        "1000,3,down,0.500000\r\n")


def test_reads_exact_header(tmp_path):
    t = read_table(write(tmp_path / "u.csv", GOOD), UTILIZATION_COLUMNS)
    assert t.columns == UTILIZATION_COLUMNS
    assert t.rows == (("0", "3", "up", "0.125000"),
                      ("1000", "3", "down", "0.500000"))
    assert t.floats("utilization") == [0.125, 0.5]
    assert t.ints("time_ns") == [0, 1000]


def test_unknown_column_is_an_error_naming_both_sides(tmp_path):
    bad = GOOD.replace("utilization", "utilisation")
    with pytest.raises(SchemaError) as exc:
        read_table(write(tmp_path / "u.csv", bad), UTILIZATION_COLUMNS)
    assert exc.value.expected == UTILIZATION_COLUMNS
    assert "utilisation" in str(exc.value)
    assert "utilization" in str(exc.value)


def test_extra_column_rejected_not_ignored(tmp_path):
    bad = ("time_ns,link_id,direction,utilization,note\r\n"
           "0,3,up,0.1,hi\r\n")
    with pytest.raises(SchemaError):
        read_table(write(tmp_path / "u.csv", bad), UTILIZATION_COLUMNS)


def test_missing_header_reported(tmp_path):
    with pytest.raises(SchemaError) as exc:
        read_table(write(tmp_path / "empty.csv", ""), UTILIZATION_COLUMNS)
    assert exc.value.found is None


def test_ragged_row_rejected(tmp_path):
    bad = GOOD + "0,3,up\r\n"
    with pytest.raises(SchemaError):
        read_table(write(tmp_path / "u.csv", bad), UTILIZATION_COLUMNS)


def test_header_only_file_is_a_valid_empty_table(tmp_path):
    t = read_table(write(tmp_path / "u.csv",
                         "time_ns,link_id,direction,utilization\r\n"),
                   UTILIZATION_COLUMNS)
    assert t.rows == ()


def test_round_trip_is_byte_identical(tmp_path):
    src = tmp_path / "s.csv"
    src.write_bytes(
        b"addr,kind,first_ns,last_ns,spread_ns,requesters\r\n"
        b"4096,load,10,250,240,3\r\n"
        b"8192,reduction,0,30128,30128,3\r\n")
    t = read_table(str(src), SPREAD_COLUMNS)
    dst = tmp_path / "out.csv"
    write_table(str(dst), t)
    assert dst.read_bytes() == src.read_bytes()


def test_round_trip_preserves_float_formatting(tmp_path):
    # 0.666667 must not come back as 0.666667000000001 or 0.67.
    src = tmp_path / "u.csv"
    src.write_bytes(b"time_ns,link_id,direction,utilization\r\n"
                    b"0,0,up,0.666667\r\n")
    t = read_table(str(src), UTILIZATION_COLUMNS)
    dst = tmp_path / "o.csv"
    write_table(str(dst), Table(t.columns, t.rows))
    assert dst.read_bytes() == src.read_bytes()
