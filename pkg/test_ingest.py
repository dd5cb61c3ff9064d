#!/usr/bin/env python3
"""
Tests for observation parsing, serialization and complete-case filtering
"""

from datetime import date

import pytest

from core import ParseError, UnknownCellError
from ingest import (
    OBSERVATION_COLUMNS,
    complete_case_filter,
    parse_observations,
    write_observations,
)

HEADER = ",".join(OBSERVATION_COLUMNS)


def write_csv(path, lines, header=HEADER, newline="\n"):
    path.write_text(newline.join([header, *lines]) + newline, encoding="utf-8")
    return path


def row(cell="c1", lat="55.0", lon="100.0", day="2023-05-01", elev="300", temp="235.2",
        h2o="0.41", trop="11000", surface="290.5"):
    return ",".join([cell, lat, lon, day, elev, temp, h2o, trop, surface])


def test_three_valid_rows(tmp_path):
    path = write_csv(tmp_path / "obs.csv", [
        row(day="2023-05-02"), row(day="2023-05-01"), row(cell="c0"),
    ])
    table = parse_observations(path)
    assert len(table) == 3
    assert table.n_rejected == 0
    assert [r.key for r in table.rows] == sorted(r.key for r in table.rows)
    assert table.cell_ids == ("c0", "c1")


def test_header_only_is_empty_table(tmp_path):
    table = parse_observations(write_csv(tmp_path / "obs.csv", []))
    assert len(table) == 0


def test_crlf_line_endings(tmp_path):
    path = write_csv(tmp_path / "obs.csv", [row(), row(cell="c2")], newline="\r\n")
    assert len(parse_observations(path)) == 2


def test_empty_fields_become_absent(tmp_path):
    table = parse_observations(write_csv(tmp_path / "obs.csv", [row(trop="", surface="")]))
    record = table.rows[0]
    assert record.precursors.tropopause_m is None
    assert record.surface_temp_k is None
    assert record.precursors.elevation_m == 300.0


def test_out_of_range_latitude_names_line(tmp_path):
    path = write_csv(tmp_path / "obs.csv", [row(), row(cell="c2", lat="95")])
    with pytest.raises(ParseError, match="line 3"):
        parse_observations(path)


def test_malformed_number_and_date(tmp_path):
    with pytest.raises(ParseError, match="line 2"):
        parse_observations(write_csv(tmp_path / "a.csv", [row(temp="warm")]))
    with pytest.raises(ParseError, match="line 2"):
        parse_observations(write_csv(tmp_path / "b.csv", [row(day="2023-13-01")]))


def test_wrong_header(tmp_path):
    with pytest.raises(ParseError, match="header"):
        parse_observations(write_csv(tmp_path / "obs.csv", [row()], header=HEADER.replace("h2o_l8", "h2o")))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_observations(tmp_path / "nope.csv")


def test_duplicates_strict_and_lenient(tmp_path):
    path = write_csv(tmp_path / "obs.csv", [row(surface="290.0"), row(surface="291.0")])
    with pytest.raises(ParseError, match="duplicate"):
        parse_observations(path)
    table = parse_observations(path, strict=False)
    assert len(table) == 1
    assert table.rows[0].surface_temp_k == 291.0


def test_lenient_counts_rejections(tmp_path):
    path = write_csv(tmp_path / "obs.csv", [
        row(), row(cell="c2", lat="95"), row(cell="c3", temp="x"), "c4,55.0,100.0",
    ])
    table = parse_observations(path, strict=False)
    assert len(table) == 1
    assert table.n_rejected == 3


def test_round_trip_is_fixed_point(tmp_path):
    path = write_csv(tmp_path / "obs.csv", [
        row(), row(cell="c2", trop=""), row(cell="c3", day="2023-05-03", surface="288.125"),
    ])
    first = parse_observations(path)
    out = write_observations(first, tmp_path / "out.csv")
    second = parse_observations(out)
    assert second.rows == first.rows
    again = write_observations(second, tmp_path / "again.csv")
    assert again.read_bytes() == out.read_bytes()


def test_lookup_helpers(tmp_path):
    table = parse_observations(write_csv(tmp_path / "obs.csv", [row(), row(day="2023-05-02")]))
    assert set(table.cell_days("c1")) == {date(2023, 5, 1), date(2023, 5, 2)}
    assert len(table.on_date(date(2023, 5, 2))) == 1
    assert table.on_date(date(2020, 1, 1)) == []
    with pytest.raises(UnknownCellError):
        table.cell_days("c9")


def _ten_row_table(tmp_path):
    lines = [row(cell=f"c{i}") for i in range(6)]
    lines += [
        row(cell="c6", trop=""),
        row(cell="c7", surface=""),
        row(cell="c8", elev=""),
        row(cell="c9", h2o="", temp=""),
    ]
    return parse_observations(write_csv(tmp_path / "obs.csv", lines))


def test_complete_case_filter_counts(tmp_path):
    table = _ten_row_table(tmp_path)
    required = {"elevation_m", "temp_l8_k", "h2o_l8", "tropopause_m", "surface_temp_k"}
    assert len(complete_case_filter(table, required)) == 6
    only_trop = complete_case_filter(table, {"tropopause_m"})
    assert "c6" not in only_trop.cell_ids
    assert len(only_trop) == 9


def test_complete_case_filter_noop_idempotent_and_nested(tmp_path):
    table = _ten_row_table(tmp_path)
    assert complete_case_filter(table, set()).rows == table.rows
    a, b = {"tropopause_m"}, {"surface_temp_k", "elevation_m"}
    once = complete_case_filter(table, a)
    assert complete_case_filter(once, a).rows == once.rows
    assert complete_case_filter(table, a | b).rows == complete_case_filter(complete_case_filter(table, b), a).rows


def test_line_numbers_count_blank_lines(tmp_path):
    path = tmp_path / "obs.csv"
    path.write_text("\n".join([HEADER, row(), "", row(cell="c2", lat="95")]) + "\n", encoding="utf-8")
    with pytest.raises(ParseError, match="line 4") as excinfo:
        parse_observations(path)
    assert excinfo.value.line == 4


def test_extra_field_names_its_line(tmp_path):
    path = write_csv(tmp_path / "obs.csv", [row(), row(cell="c2") + ",7"])
    with pytest.raises(ParseError, match="expected 9 fields, got 10") as excinfo:
        parse_observations(path)
    assert excinfo.value.line == 3


def test_lenient_rejections_do_not_shift_line_numbers(tmp_path, caplog):
    path = write_csv(tmp_path / "obs.csv", [row(), "c4,55.0,100.0,,1,2,3,4,5,6", row(cell="c2", temp="warm")])
    with caplog.at_level("WARNING", logger="ingest"):
        assert parse_observations(path, strict=False).n_rejected == 2
    assert "line 3: expected 9 fields, got 10" in caplog.text
    assert "line 4: malformed numeric field temp_l8_k" in caplog.text
