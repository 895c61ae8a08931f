"""
Tabular output utilities
Writes CSV reports with pandas and renders flat key=value text blocks
"""

import logging
import platform
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import pandas as pd

from ballsparse.processing.utils.array_utils import blas_thread_count

logger = logging.getLogger(__name__)


def write_csv(rows: Iterable[Mapping], output_path: Optional[Path], columns: Optional[list] = None) -> pd.DataFrame:
    """
    Save a sequence of row dicts as CSV

    Args:
        rows: Row mappings (one dict per CSV row)
        output_path: Destination file; None writes to stdout
        columns: Optional explicit column order

    Returns:
        The DataFrame that was written
    """
    df = pd.DataFrame(list(rows), columns=columns)

    if output_path is None:
        print(df.to_csv(index=False), end="")
        return df

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(output_path, index=False)
    logger.info(f"Saved {len(df)} rows to {output_path}")

    return df


def format_key_values(values: Mapping[str, object]) -> str:
    """
    Render a flat mapping as key=value lines

    Floats use repr-exact formatting so the block can be parsed back losslessly.
    """
    lines = []
    for key, value in values.items():
        if isinstance(value, (float, np.floating)):
            value = repr(float(value))
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> Dict[str, str]:
    """Inverse of format_key_values (values stay strings)"""
    parsed = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        parsed[key.strip()] = value.strip()
    return parsed


def environment_metadata(threads: Optional[int], precision: str) -> Dict[str, object]:
    """Describe the machine a measurement ran on"""
    return {
        "threads": threads if threads is not None else blas_thread_count(),
        "precision": precision,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "machine": platform.machine(),
        "system": platform.system(),
    }
