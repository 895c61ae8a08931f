"""
Generate sample point-cloud files for the training and receptive-field commands
Writes synthetic deformed-sphere clouds (x y z target) to data/raw/clouds/
"""

import sys
sys.path.append('.')

import logging

from ballsparse.config import RAW_DATA_DIR, TRAIN_CONFIG
from ballsparse.processing.geom.cloud_io import save_point_cloud
from ballsparse.processing.training.dataset import synthetic_cloud
from ballsparse.processing.utils.array_utils import make_rng

logging.basicConfig(level=logging.WARNING, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

N_CLOUDS = 40
N_POINTS = TRAIN_CONFIG["n_points"]
SEED = 7

output_dir = RAW_DATA_DIR / "clouds"
output_dir.mkdir(parents=True, exist_ok=True)

print("Generating sample point clouds...")

# 1. Regression clouds (last column is the per-point target)
print(f"\n1. Creating {N_CLOUDS} clouds of {N_POINTS} points...")
rng = make_rng(SEED)
for i in range(N_CLOUDS):
    sample = synthetic_cloud(N_POINTS, rng)
    save_point_cloud(output_dir / f"cloud_{i:03d}.txt", sample.points, extra=sample.target)
print(f"   ✅ Saved to {output_dir}")

# 2. One large cloud without targets for receptive-field plots
print("\n2. Creating a 4096-point cloud for receptive-field export...")
large = synthetic_cloud(4096, rng)
large_path = RAW_DATA_DIR / "rf_cloud.txt"
save_point_cloud(large_path, large.points)
print(f"   ✅ Saved to {large_path}")

print("\nSample data generation complete!")
print(f"  Train with: python -m ballsparse.main train --dataset-path {output_dir}")
print(f"  Export with: python -m ballsparse.main rf --points-file {large_path} --token 0")
