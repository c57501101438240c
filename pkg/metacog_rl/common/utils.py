"""General utils for metacog-rl."""
import csv
import logging
import os
from typing import Iterable, Optional, Sequence

import numpy as np


LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def grid_steps(duration: float, dt: float, what: str = "interval") -> int:
    """Number of integration steps of length ``dt`` in ``duration``.

    Raises:
        ValueError: when ``duration`` is not a positive integer multiple of ``dt``
    """
    steps = int(round(duration / dt))
    if steps < 1 or abs(steps * dt - duration) > 1e-9 * max(1.0, duration):
        raise ValueError(f"{what} {duration} is not a positive integer multiple of dt={dt}")
    return steps


def format_value(v) -> str:
    """Fixed CSV rendering: 17 significant digits for reals, text as is."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Writes a CSV table with byte-stable formatting (``\\n`` line endings).

    Args:
        path: output file
        header: column names
        rows: rows of values, rendered with ``format_value``
    """
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def read_csv(path: str):
    """Header and rows (as strings) of a CSV table."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def configure_logging(level: Optional[str] = None) -> None:
    """Configures the package logger from a level name (``METACOG_LOG`` when not given).

    Args:
        level: one of error, warn, info, debug; unknown names fall back to warn
    """
    name = (level if level is not None else os.environ.get("METACOG_LOG", "warn")).strip().lower()
    logger = logging.getLogger("metacog_rl")
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
    logger.setLevel(LOG_LEVELS.get(name, logging.WARNING))
    if name not in LOG_LEVELS:
        logger.warning("unknown METACOG_LOG level '%s', using warn", name)
