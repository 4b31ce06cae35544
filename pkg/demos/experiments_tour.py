"""The analysis experiments at small scale, driven from Python instead of the CLI.

Same drivers as ``vqkv <subcommand> configs/<name>.cfg``; shrunk here so the
whole tour runs in a few seconds.

Run: python3 demos/experiments_tour.py
"""

from vqkv.experiments import run_experiment
from vqkv.io import ExperimentConfig

small = dict(head_dim=16, context_length=2048, calib_tokens=2048, codebook_size=32, max_iters=20, clusters=8)

runs = {
    "codebook_similarity": dict(n_seeds=2, position_span=32768),
    "attention_mse": dict(n_seeds=3, rope_mode="none"),
    "ablation_grid": dict(n_seeds=2, decode_steps=4, duplicate_fraction=0.02),
    "serve_sim": dict(heads=2, decode_steps=3),
}
for experiment, overrides in runs.items():
    cfg = ExperimentConfig(experiment=experiment, **small, **overrides)
    print(f"== {experiment} (config {cfg.config_hash()})")
    for row in run_experiment(cfg):
        if not row.label:
            print(f"   {row.metric:28s} {row.value:.4f} {row.units}")
