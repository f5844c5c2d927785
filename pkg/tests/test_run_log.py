import json

import pandas as pd
import pytest

from harness.run_log import EVAL_COLUMNS, RunLog, write_json, write_table


def test_header_exists_before_any_record(tmp_path):
    path = tmp_path / "logs" / "eval_log.csv"
    log = RunLog(str(path), EVAL_COLUMNS)
    assert path.read_text().strip() == ",".join(EVAL_COLUMNS)
    log.close()
    assert pd.read_csv(path).empty


def test_records_are_flushed_in_batches(tmp_path):
    path = tmp_path / "train.csv"
    log = RunLog(str(path), ["step", "value"], flush_every=2)
    log.append({"step": 1, "value": 0.5})
    assert len(pd.read_csv(path)) == 0
    log.append({"step": 2, "value": 0.25})
    assert len(pd.read_csv(path)) == 2
    log.append({"step": 3})
    log.close()
    frame = pd.read_csv(path)
    assert frame["step"].tolist() == [1, 2, 3]
    assert pd.isna(frame["value"].iloc[2])


def test_unknown_columns_and_bad_flush_interval_are_rejected(tmp_path):
    with pytest.raises(ValueError):
        RunLog(str(tmp_path / "x.csv"), ["step"], flush_every=0)
    with RunLog(str(tmp_path / "y.csv"), ["step"]) as log:
        with pytest.raises(ValueError):
            log.append({"step": 1, "loss": 2.0})


def test_write_table_and_json(tmp_path):
    write_table(str(tmp_path / "t.csv"), ["arm", "median_iters"], [{"arm": "cold", "median_iters": 12.0}])
    assert pd.read_csv(tmp_path / "t.csv").to_dict("records") == [{"arm": "cold", "median_iters": 12.0}]
    write_table(str(tmp_path / "empty.csv"), ["arm"], [])
    assert list(pd.read_csv(tmp_path / "empty.csv").columns) == ["arm"]
    write_json(str(tmp_path / "s.json"), {"pearson_r": "undefined"})
    assert json.loads((tmp_path / "s.json").read_text()) == {"pearson_r": "undefined"}
