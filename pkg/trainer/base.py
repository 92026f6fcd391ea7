import os
import dataclasses
import pandas as pd
import matplotlib
matplotlib.use("Agg")
from matplotlib import pyplot as plt
from dataclasses import dataclass
from constants import METRICS_FILENAME
from typing import Dict, List, Optional, Tuple


METRICS_COLUMNS = ["epoch", "split", "output", "accuracy", "loss", "mean_target_entropy", "lr", "wall_ms"]


@dataclass
class MetricsRecord:
    """
    One row of the metrics stream.

    output is "exit_k" for intermediate exits, "final" or "ensemble".
    mean_target_entropy is the mean entropy of the soft target supervising an exit,
    or of the output distribution itself for the final and ensemble rows; None when
    there is nothing to report.
    """
    epoch: int
    split: str
    output: str
    accuracy: float
    loss: Optional[float]
    mean_target_entropy: Optional[float]
    lr: float
    wall_ms: float


class BaseTrainer:
    metrics_dir = "metrics"
    checkpoints_dir = "checkpoints"

    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        self.metrics_dir = os.path.join(run_dir, self.metrics_dir)
        self.checkpoints_dir = os.path.join(run_dir, self.checkpoints_dir)
        self._valid_splits = ["train", "val"]

        # every record emitted so far, and the ones not yet flushed to csv
        self._metrics: List[Dict[str, float]] = []
        self._pending: List[Dict[str, float]] = []

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.run_dir, METRICS_FILENAME)

    def log_metrics(self, records: List[MetricsRecord]):
        rows = [dataclasses.asdict(r) for r in records]
        self._metrics.extend(rows)
        self._pending.extend(rows)

    def metrics_to_csv(self):
        # append-only: rows already on disk are never rewritten
        if not self._pending:
            return
        os.makedirs(self.run_dir, exist_ok=True)
        write_header = not os.path.isfile(self.metrics_path)
        df = pd.DataFrame(self._pending, columns=METRICS_COLUMNS)
        df.to_csv(self.metrics_path, mode="a", header=write_header, index=False)
        self._pending = []

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self._metrics, columns=METRICS_COLUMNS)

    def save_metrics_plots(self, figsize: Tuple[float, float]=(15, 12)):
        df = self.metrics_frame()
        if df.empty:
            return
        os.makedirs(self.metrics_dir, exist_ok=True)
        for split in self._valid_splits:
            self._save_metrics_plots(df[df["split"] == split], split, figsize)

    def _save_metrics_plots(self, df: pd.DataFrame, split: str, figsize: Tuple[float, float]):
        if df.empty:
            return
        fig, axs = plt.subplots(2, 1, figsize=figsize)
        for i, col in enumerate(["accuracy", "loss"]):
            for output, group in df.groupby("output", sort=False):
                axs[i].plot(group["epoch"].to_numpy(), group[col].to_numpy(), label=output)
            label = col.replace("_", " ").title()
            axs[i].grid(visible=True)
            axs[i].set_xlabel("Epoch")
            axs[i].set_ylabel(label)
            axs[i].set_title(f"[{split.title()}] {label} vs Epoch", fontsize=18)
            axs[i].legend()
        fig.savefig(os.path.join(self.metrics_dir, f"{split}_metrics_plot.jpg"))
        fig.clear()
        plt.close(fig)
