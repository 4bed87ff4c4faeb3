import json
import math

import numpy as np
import pandas as pd
import pytest

from simmeta import io


def test_json_rounds_to_twelve_digits_and_nulls_nan():
    text = io.dumps_json({"a": math.pi, "b": np.float64("nan"), "c": np.arange(2),
                          "d": np.int64(3), "e": [1 / 3]})
    d = json.loads(text)
    assert d["a"] == float(f"{math.pi:.12g}") and d["b"] is None
    assert d["c"] == [0, 1] and d["d"] == 3 and d["e"] == [float(f"{1 / 3:.12g}")]


def test_csv_round_trip_keeps_empty_flags(tmp_path):
    df = pd.DataFrame({"estimator": ["adjusted", "unadjusted"], "flag": ["", "rank"],
                       "x": [0.1, 2.0 / 3.0]})
    sha = io.write_csv(df, tmp_path / "t.csv")
    assert sha == io.sha256_file(tmp_path / "t.csv")
    back = io.read_csv(tmp_path / "t.csv")
    assert list(back["flag"]) == ["", "rank"]
    assert back["x"][1] == pytest.approx(2 / 3, rel=1e-11)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    io.atomic_write_text(tmp_path / "a.txt", "one")
    io.atomic_write_text(tmp_path / "a.txt", "two")
    assert (tmp_path / "a.txt").read_text() == "two"
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]


def test_manifest_checks(tmp_path):
    est = tmp_path / "estimates.csv"
    est.write_text("a\n1\n")
    with pytest.raises(io.ManifestError, match="no manifest"):
        io.check_estimates(est)
    assert io.check_estimates(est, force=True) is None
    io.write_json({"files": {"estimates.csv": {"sha256": io.sha256_file(est)}},
                   "artifacts": {}}, tmp_path / io.MANIFEST)
    assert io.check_estimates(est) is not None
    io.record_artifact(tmp_path / io.MANIFEST, "x.csv", "abc")
    assert io.load_manifest(tmp_path / io.MANIFEST)["artifacts"]["x.csv"]["sha256"] == "abc"
    est.write_text("a\n2\n")
    with pytest.raises(io.ManifestError, match="does not match"):
        io.check_estimates(est)
