import numpy as np
import pytest

from svmpvar.panel import (
    CountryMeta,
    EmptySubsampleError,
    PanelConflictError,
    PanelError,
    PanelParseError,
    PanelSchema,
    PanelValidationError,
    from_arrays,
    load_metadata,
    load_panel,
    regional_average,
    split_years,
    subsample,
    write_metadata,
    write_panel,
)

SCHEMA = PanelSchema(values=("temp", "gdp"), units={"temp": "C", "gdp": "pp"})


def _write(path, text):
    path.write_text(text)
    return path


def _grid(M=4, Y=6, seed=0):
    g = np.random.default_rng(seed)
    metas = [CountryMeta(id=f"C{i}", region="east" if i < 2 else "west", poor=i % 2 == 0, hot=i == 0,
                         agricultural=i < 3) for i in range(M)]
    return from_arrays(g.normal(size=(M, Y, 2)), range(1970, 1970 + Y), ("temp", "gdp"), ("C", "pp"), metas)


def test_round_trip(tmp_path):
    ds = _grid()
    write_panel(ds, tmp_path / "p.csv", header={"seed": 4})
    write_metadata(ds, tmp_path / "m.csv", header={"seed": 4})
    back = load_panel(tmp_path / "p.csv", SCHEMA, tmp_path / "m.csv")
    np.testing.assert_array_equal(back.values, ds.values)
    assert back.countries == ds.countries
    assert back.years == ds.years


def test_ragged_windows_trim_leading_and_trailing(tmp_path):
    p = _write(tmp_path / "p.csv", "country,year,temp,gdp\n"
               "A,2000,NA,1\nA,2001,1,2\nA,2002,1,2\nA,2003,1,\n"
               "B,2001,0,0\nB,2002,0,0\n")
    ds = load_panel(p, SCHEMA)
    assert ds.windows == ((1, 3), (1, 3))
    assert ds.mask[0, 0, 0] and ds.mask[0, 3, 1]


def test_interior_gap_rejected(tmp_path):
    p = _write(tmp_path / "p.csv", "country,year,temp,gdp\nA,2000,1,1\nA,2001,NA,2\nA,2002,1,2\n")
    with pytest.raises(PanelValidationError, match="contiguous"):
        load_panel(p, SCHEMA)


def test_duplicate_row_conflict(tmp_path):
    p = _write(tmp_path / "p.csv", "country,year,temp,gdp\nA,2000,1,1\nA,2000,1,1\n")
    with pytest.raises(PanelConflictError, match="row 3"):
        load_panel(p, SCHEMA)


def test_parse_error_reports_row(tmp_path):
    p = _write(tmp_path / "p.csv", "country,year,temp,gdp\nA,2000,1,1\nA,2001,hot,1\n")
    with pytest.raises(PanelParseError) as info:
        load_panel(p, SCHEMA)
    assert info.value.row == 3


def test_missing_column(tmp_path):
    p = _write(tmp_path / "p.csv", "country,year,temp\nA,2000,1\n")
    with pytest.raises(PanelParseError, match="gdp"):
        load_panel(p, SCHEMA)


def test_country_missing_from_metadata(tmp_path):
    p = _write(tmp_path / "p.csv", "country,year,temp,gdp\nA,2000,1,1\nA,2001,1,1\nB,2000,1,1\n")
    m = _write(tmp_path / "m.csv", "country,region,poor,hot,agricultural\nA,r,1,0,0\n")
    with pytest.raises(PanelValidationError, match="'B'"):
        load_panel(p, SCHEMA, m)


def test_metadata_duplicate(tmp_path):
    m = _write(tmp_path / "m.csv", "country,region,poor,hot,agricultural\nA,r,1,0,0\nA,r,1,0,0\n")
    with pytest.raises(PanelConflictError):
        load_metadata(m)


def test_units_required():
    with pytest.raises(PanelValidationError, match="unit"):
        from_arrays(np.zeros((1, 3, 2)), range(3), ("a", "b"), ("C", ""), ["A"])


def test_single_variable_rejected():
    with pytest.raises(PanelValidationError, match="N >= 2"):
        from_arrays(np.zeros((1, 3, 1)), range(3), ("a",), ("C",), ["A"])


@pytest.mark.parametrize("flag,expected", [("poor", ["C0", "C2"]), ("rich", ["C1", "C3"]), ("hot", ["C0"]),
                                           ("agricultural", ["C0", "C1", "C2"]), ("non-agricultural", ["C3"])])
def test_group_subsamples(flag, expected):
    assert list(subsample(_grid(), flag).country_ids) == expected


def test_year_split_partitions():
    ds = _grid()
    pre, post = split_years(ds, 1973)
    assert pre.years == (1970, 1971, 1972)
    assert post.years == (1973, 1974, 1975)
    assert subsample(ds, "pre1973").years == pre.years
    assert subsample(ds, "post1973").years == post.years
    np.testing.assert_array_equal(np.concatenate([pre.values, post.values], axis=1), ds.values)


def test_empty_subsample():
    metas = [CountryMeta(id="A", poor=False, hot=False)]
    ds = from_arrays(np.zeros((1, 3, 2)), range(3), ("a", "b"), ("C", "pp"), metas)
    with pytest.raises(EmptySubsampleError):
        subsample(ds, "hot")
    with pytest.raises(PanelError):
        subsample(ds, "tropical")


def test_regional_average_flags_missing():
    series = {"A": [1.0, 2.0, np.nan], "B": [3.0, np.nan, np.nan], "C": [5.0, 5.0, 5.0]}
    avg, flags = regional_average(series, {"A": "r1", "B": "r1", "C": "r2"})
    np.testing.assert_allclose(avg["r1"][:2], [2.0, 2.0])
    assert np.isnan(avg["r1"][2])
    assert list(flags["r1"]) == [False, True, True]
    assert not flags["r2"].any()


def test_regional_average_order_invariant():
    g = np.random.default_rng(1)
    series = {f"c{i}": g.normal(size=5) for i in range(7)}
    regions = {k: "r" for k in series}
    a, _ = regional_average(series, regions)
    b, _ = regional_average(dict(reversed(list(series.items()))), regions)
    np.testing.assert_array_equal(a["r"], b["r"])
