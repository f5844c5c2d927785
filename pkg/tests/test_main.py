import sys

import pandas as pd
import pytest

import main

TINY_BENCH = [
    "--override", "bench.dim=4",
    "--override", "bench.trials=1",
    "--override", "bench.spectral_radii=[0.0]",
]


def test_parser_knows_every_command():
    parser = main.build_parser()
    for command in main.COMMANDS:
        args = parser.parse_args([command])
        assert args.command == command
    assert parser.parse_args(["eval", "--checkpoint", "ckpt"]).checkpoint == "ckpt"
    with pytest.raises(SystemExit):
        parser.parse_args(["bench-solvers", "--checkpoint", "ckpt"])


def test_bench_command_writes_its_tables(tmp_path):
    main.main(["bench-solvers", "--out", str(tmp_path), "--seed", "3", *TINY_BENCH])
    assert len(pd.read_csv(tmp_path / "bench_solvers.csv")) == 3
    assert '"seed": 3' in (tmp_path / "config.json").read_text()


def test_config_errors_exit_with_code_2(tmp_path, monkeypatch):
    monkeypatch.setattr(sys, "argv", ["deqflow", "bench-solvers", "--out", str(tmp_path), "--override", "bench.dimm=4"])
    with pytest.raises(SystemExit) as exc:
        main.run()
    assert exc.value.code == main.EXIT_CONFIG_ERROR


def test_numerical_aborts_exit_with_code_3(tmp_path, monkeypatch):
    def abort(cfg, out_dir):
        raise main.NumericalAbort("loss is nan")

    monkeypatch.setattr(main, "cmd_train", abort)
    monkeypatch.setattr(sys, "argv", ["deqflow", "train", "--out", str(tmp_path)])
    with pytest.raises(SystemExit) as exc:
        main.run()
    assert exc.value.code == main.EXIT_NUMERICAL_ABORT
