"""Recompute the dataset-level aggregates from published classwise values."""
from bloodseg import seg_metrics as sm

CLASSWISE = {1: (0.97451, 0.54431, 0.59489), 2: (0.93342, 0.40626, 0.33086), 3: (0.85112, 0.009304, 0.15307)}
FREQUENCIES = {1: 0.9355, 2: 0.0609, 3: 0.0034}
PUBLISHED = {"GlobalAccuracy": 0.97184, "MeanAccuracy": 0.91969, "MeanIoU": 0.31996,
             "WeightedIoU": 0.53511, "MeanBFScore": 0.40654}

if __name__ == "__main__":
    per = [sm.ClassMetrics(c, a, i, b) for c, (a, i, b) in CLASSWISE.items()]
    table = sm.aggregate(per, FREQUENCIES).as_table()
    print(f"{'metric':<16}{'recomputed':>12}{'published':>12}{'diff':>10}")
    for key, ref in PUBLISHED.items():
        print(f"{key:<16}{table[key]:>12.5f}{ref:>12.5f}{table[key] - ref:>+10.5f}")
