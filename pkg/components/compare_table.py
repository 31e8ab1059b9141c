#compare_table.py
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
from rich.console import Console
from rich.table import Table

METHODS = ["Mertens", "DeepFuse"]
COLUMNS = ["sequence"] + METHODS
MEAN_LABEL = "Mean"


def build_frame(rows: List[Dict]) -> pd.DataFrame:
    """
    One row per sequence plus a trailing mean row

    Args:
        rows: Dicts with a 'sequence' name and one score per method

    Returns:
        DataFrame with COLUMNS; an empty input gives a header-only frame
    """
    frame = pd.DataFrame(rows, columns=COLUMNS)
    if frame.empty:
        return frame
    mean = {"sequence": MEAN_LABEL, **{m: float(frame[m].mean()) for m in METHODS}}
    return pd.concat([frame, pd.DataFrame([mean], columns=COLUMNS)], ignore_index=True)


def render_table(frame: pd.DataFrame, console: Optional[Console] = None) -> None:
    """Print the grid with the best method of each row in bold"""
    console = console or Console()
    table = Table(title="MEF-SSIM scores")
    table.add_column("Sequence")
    for method in METHODS:
        table.add_column(method, justify="right")

    for _, row in frame.iterrows():
        best = max(row[m] for m in METHODS)
        cells = [f"[bold]{row[m]:.4f}[/bold]" if row[m] == best else f"{row[m]:.4f}" for m in METHODS]
        table.add_row(str(row["sequence"]), *cells)
    console.print(table)


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.4f")
    return path
