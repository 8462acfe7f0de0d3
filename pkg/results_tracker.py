# results_tracker.py
"""
Combined results ledger: one CSV row per evaluation-type command.
"""

import os
from datetime import datetime
from typing import Dict, Optional

import pandas as pd

COLUMNS = [
    "Timestamp",
    "Command",
    "Experiment",
    "Stack",
    "Domain",
    "Seed",
    "Episodes",
    "Success Rate",
    "Mean Cycle Time (s)",
    "Checkpoint Hash",
    "Time (sec)",
]


class ResultsTracker:
    """Append evaluation summaries to a shared CSV and read them back."""

    def __init__(self, csv_file: str = "combined_results.csv"):
        self.csv_file = str(csv_file)
        self.ensure_csv_exists()

    def ensure_csv_exists(self):
        """Create CSV file with headers if it doesn't exist."""
        if not os.path.exists(self.csv_file):
            os.makedirs(os.path.dirname(self.csv_file) or ".", exist_ok=True)
            pd.DataFrame(columns=COLUMNS).to_csv(self.csv_file, index=False)

    def add_result(self,
                   command: str,
                   experiment: str,
                   stack: str,
                   domain_digest: str,
                   seed: int,
                   n_episodes: int,
                   success_rate: float,
                   mean_cycle_time_s: Optional[float],
                   checkpoint_hash: str = "",
                   execution_time: float = 0.0,
                   verbose: bool = True):
        """Add a new result row."""
        row = {
            "Timestamp": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            "Command": command,
            "Experiment": experiment,
            "Stack": stack,
            "Domain": domain_digest,
            "Seed": seed,
            "Episodes": n_episodes,
            "Success Rate": success_rate,
            "Mean Cycle Time (s)": mean_cycle_time_s,
            "Checkpoint Hash": checkpoint_hash[:16],
            "Time (sec)": round(execution_time, 1),
        }
        pd.DataFrame([row], columns=COLUMNS).to_csv(self.csv_file, mode="a", header=False, index=False)

        if verbose:
            print(f"\n📊 Results saved to {self.csv_file}")
            print(f"   Stack: {stack} (seed {seed})")
            print(f"   Success: {success_rate:.2%} over {n_episodes} episodes")
            cycle = f"{mean_cycle_time_s:.2f}s" if mean_cycle_time_s is not None else "N/A"
            print(f"   Cycle time: {cycle}")
            print(f"   Time: {execution_time:.1f}s")

    def get_latest_results(self, stack: str) -> Optional[Dict]:
        """Get the latest row for a policy stack."""
        if not os.path.exists(self.csv_file):
            return None
        df = pd.read_csv(self.csv_file)
        rows = df[df["Stack"] == stack]
        if rows.empty:
            return None
        return rows.iloc[-1].to_dict()
