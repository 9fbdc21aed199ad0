#!/usr/bin/env python3
"""Occlusion and pose subsets plus statistics for one manifest."""

import sys
import os

# Add the parent directory to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from data.datasets import (
    MissingAnglesError,
    build_occlusion_subset,
    build_pose_subset,
    format_stats_table,
    load_manifest,
    subset_stats,
    write_manifest,
    write_stats_json,
)
from utils.config import RAN_OUTPUT_DIR
from utils.utils import get_run_dir


def main():
    """Write occlusion, pose>30 and pose>45 manifests and the stats table."""
    manifest = sys.argv[1] if len(sys.argv) > 1 else input("Manifest path: ").strip()
    if not manifest:
        print("No manifest")
        return 2
    out_dir = get_run_dir(sys.argv[2] if len(sys.argv) > 2 else os.path.join(RAN_OUTPUT_DIR, "subsets"))

    records = load_manifest(manifest)
    print(f"Loaded {len(records)} records")

    occlusion = build_occlusion_subset(records)
    write_manifest(os.path.join(out_dir, "occlusion_manifest.csv"), occlusion)
    print(f"Occlusion subset: {len(occlusion)}")

    for threshold in (30, 45):
        try:
            pose = build_pose_subset(records, threshold)
        except MissingAnglesError as e:
            print(f"Skipping pose>{threshold}: {e}")
            continue
        write_manifest(os.path.join(out_dir, f"pose{threshold}_manifest.csv"), pose)
        print(f"Pose>{threshold} subset: {len(pose)}")

    stats = subset_stats(records)
    write_stats_json(os.path.join(out_dir, "stats.json"), stats)
    print()
    print(format_stats_table(stats, os.path.splitext(os.path.basename(manifest))[0]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
