"""Per-round metrics: between-clients variance, update scale, CSV output."""

import csv
import io
import json
from dataclasses import dataclass, fields

import numpy as np


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    accuracy: float
    delta: float
    clip_bound: float
    v_c: float
    u_s: float
    m_t: int
    sigma_t: float
    cc_cumulative: int


CSV_COLUMNS = [f.name for f in fields(RoundMetrics)]


def _stack(updates) -> np.ndarray:
    mat = np.asarray(updates, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("updates must be equal-length 1-D vectors")
    return mat


def between_clients_variance(updates) -> float:
    """Population variance of each coordinate across clients, averaged over coordinates."""
    mat = _stack(updates)
    return float(np.mean(np.var(mat, axis=0)))


def update_scale(updates) -> float:
    """Squared per-coordinate mean update, averaged over coordinates."""
    mat = _stack(updates)
    return float(np.mean(np.mean(mat, axis=0) ** 2))


def _format(value):
    if isinstance(value, float):
        return repr(value)  # shortest round-trip representation
    return str(value)


def metrics_csv_text(rounds) -> str:
    """Render round metrics as CSV text (header always included)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rm in rounds:
        writer.writerow([_format(getattr(rm, col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def write_metrics(history, path):
    """Write one CSV row per executed round of a TrainingHistory."""
    try:
        with open(path, "w", newline="") as f:
            f.write(metrics_csv_text(history.rounds))
    except OSError as exc:
        raise OSError(f"could not write metrics to {path}: {exc}") from exc


def write_metrics_jsonl(history, path):
    """JSON-lines mirror of the CSV with identical fields."""
    try:
        with open(path, "w") as f:
            for rm in history.rounds:
                f.write(json.dumps({col: getattr(rm, col) for col in CSV_COLUMNS}))
                f.write("\n")
    except OSError as exc:
        raise OSError(f"could not write metrics to {path}: {exc}") from exc


def read_metrics(path):
    """Parse a metrics CSV back into RoundMetrics rows."""
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                RoundMetrics(
                    round=int(row["round"]),
                    accuracy=float(row["accuracy"]),
                    delta=float(row["delta"]),
                    clip_bound=float(row["clip_bound"]),
                    v_c=float(row["v_c"]),
                    u_s=float(row["u_s"]),
                    m_t=int(row["m_t"]),
                    sigma_t=float(row["sigma_t"]),
                    cc_cumulative=int(row["cc_cumulative"]),
                )
            )
    return out
