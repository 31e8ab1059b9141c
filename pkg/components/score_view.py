#score_view.py
from typing import Optional

from rich.console import Console
from rich.table import Table

from utils.mefssim import MefSsimResult


def format_score(score: float) -> str:
    return f"MEF-SSIM score: {score:.6f}"


def render_score(result: MefSsimResult, console: Optional[Console] = None, title: str = "MEF-SSIM") -> None:
    """
    Print the scalar score and a per-scale breakdown

    Args:
        result: Output of mef_ssim
        console: Target console (stdout when omitted)
        title: Table caption, e.g. the image name
    """
    console = console or Console()
    console.print(format_score(result.score), highlight=False)

    table = Table(title=title)
    table.add_column("Scale", justify="right")
    table.add_column("Resolution", justify="right")
    table.add_column("Mean score", justify="right")
    height, width = result.score_map.shape
    for scale, value in enumerate(result.scale_scores):
        table.add_row(str(scale), f"{height >> scale}x{width >> scale}", f"{value:.4f}")
    console.print(table)
