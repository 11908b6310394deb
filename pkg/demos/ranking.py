"""Rank students by signal strength for growing ensembles.

Each watermarked teacher is hidden in an ensemble with N - 1 plain teachers;
students of that ensemble are the positives for its key, every other student
(including ones trained on ground truth) a negative.

``python demos/ranking.py [out_dir]`` takes a few minutes on one core.
"""
import sys

from spectral_watermark.harness import ExperimentParams, run_single_watermark_experiment

out = sys.argv[1] if len(sys.argv) > 1 else "ranking_out"
params = ExperimentParams(ensemble_sizes=[1, 2, 4], epsilons=[0.1], students_per=2,
                          independents=2, seed=0)
report = run_single_watermark_experiment(params, out)

print(f"{'N':>3} {'mAP':>6} {'std':>6} {'random':>7} {'P_snr+':>7} {'P_snr-':>7}")
for s in report["results"]:
    print(f"{s['N']:>3} {s['mAP']:6.3f} {s['mAP_std']:6.3f} {s['random_mAP']:7.3f} "
          f"{s['mean_positive_snr']:7.2f} {s['mean_negative_snr']:7.2f}")
print(f"per-run rankings, periodograms and summaries under {out}/")
