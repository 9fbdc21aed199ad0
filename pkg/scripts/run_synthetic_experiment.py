#!/usr/bin/env python3
"""Synthetic localisation experiment: RAN vs average pooling, then the fusion table."""

import sys
import os

# Add the parent directory to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from data.synthetic import SyntheticSpec
from pipeline.trainer import TrainConfig
from pipeline.workflow_coordinator import WorkflowCoordinator
from utils.config import DEFAULT_SEED, DEFAULT_THREADS, RAN_OUTPUT_DIR


def main():
    """Run the experiment and report the three localisation checks."""
    out_dir = sys.argv[1] if len(sys.argv) > 1 else os.path.join(RAN_OUTPUT_DIR, "synthetic_experiment")
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else DEFAULT_SEED

    coordinator = WorkflowCoordinator(out_dir, threads=DEFAULT_THREADS)
    summary = coordinator.run_full_workflow(SyntheticSpec(seed=seed), TrainConfig(seed=seed))

    print(f"\nStatus: {summary['status']}")
    if "fusion" in summary:
        for row in summary["fusion"]:
            print(f"{row['model']}: {row['accuracy']:.4f}")
    return 0 if summary["status"] == "completed" else 1


if __name__ == "__main__":
    sys.exit(main())
