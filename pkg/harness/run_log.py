import json
import logging
import os

import pandas as pd

from config import FLUSH_EVERY

logger = logging.getLogger(__name__)

TRAIN_COLUMNS = ["step", "loss_total", "loss_main", "loss_cor", "fwd_iters", "abs_residual", "rel_residual", "wall_ms"]
EVAL_COLUMNS = ["step", "aepe", "f1_all", "mean_residual"]
ABLATION_COLUMNS = ["arm", "step", "kind", "loss_total", "abs_residual", "rel_residual", "aepe"]
ABLATION_SUMMARY_COLUMNS = ["arm", "final_phase_residual", "final_aepe"]
REUSE_COLUMNS = ["stream", "frame", "arm", "iters", "initial_residual", "final_residual", "converged"]
REUSE_CURVE_COLUMNS = ["stream", "frame", "arm", "iteration", "rel_residual"]
REUSE_SUMMARY_COLUMNS = ["arm", "median_iters", "speedup"]
CORRELATION_COLUMNS = ["sample", "max_disp", "epe", "abs_residual", "flow_magnitude"]
BENCH_COLUMNS = ["method", "map", "spectral_radius", "trial", "iters", "converged", "wall_ms"]
BENCH_SUMMARY_COLUMNS = ["method", "map", "spectral_radius", "median_iters"]
BEST_OF_COLUMNS = ["run", "seed", "final_aepe", "best"]


class RunLog:
    """
    An append-only CSV file with a fixed header.

    The file is created with its header when the log is opened, so a run with
    no records still leaves a valid CSV. Records are buffered and written
    every ``flush_every`` appends and on :meth:`close`, which bounds what an
    interrupted run can lose.
    """

    def __init__(self, path: str, columns: list[str], flush_every: int = FLUSH_EVERY):
        if flush_every < 1:
            raise ValueError(f"flush_every must be >= 1, got {flush_every}")
        self.path = path
        self.columns = list(columns)
        self.flush_every = flush_every
        self._pending: list[dict] = []
        self.n_records = 0
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        pd.DataFrame(columns=self.columns).to_csv(self.path, index=False)
        logger.debug(f"Logging {', '.join(self.columns)} to {self.path}")

    def append(self, record: dict) -> None:
        unknown = set(record) - set(self.columns)
        if unknown:
            raise ValueError(f"Record has columns {sorted(unknown)} not in the header of {self.path}")
        self._pending.append(record)
        self.n_records += 1
        if len(self._pending) >= self.flush_every:
            self.flush()

    def extend(self, records) -> None:
        for record in records:
            self.append(record)

    def flush(self) -> None:
        if not self._pending:
            return
        frame = pd.DataFrame(self._pending, columns=self.columns)
        frame.to_csv(self.path, mode="a", header=False, index=False)
        self._pending.clear()

    def close(self) -> None:
        self.flush()

    def __enter__(self) -> "RunLog":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def write_table(path: str, columns: list[str], records: list[dict]) -> None:
    """Writes a complete CSV in one go (used for merged shards and summaries)."""
    with RunLog(path, columns, flush_every=max(len(records), 1)) as log:
        log.extend(records)


def write_json(path: str, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
