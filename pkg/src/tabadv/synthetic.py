"""Seeded synthetic credit-style dataset shipped with the package.

Ten mixed-type features: two immutable (``age``, ``gender``), one
dependent (``total_balance`` = ``income`` + ``debt``) and seven editable
ones. The label comes from a noisy logistic score.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from tabadv.schema import Dataset, FeatureSpec, Schema

DATA_DIR = Path(__file__).resolve().parent / "data"


def synthetic_schema() -> Schema:
    return Schema(
        (
            FeatureSpec("age", "integer", 18, 80, mutable=False),
            FeatureSpec("gender", "binary", 0, 1, mutable=False),
            FeatureSpec("income", "continuous", 0.0, 200.0),
            FeatureSpec("debt", "continuous", 0.0, 100.0),
            FeatureSpec("utilization", "continuous", 0.0, 1.0),
            FeatureSpec("savings", "continuous", 0.0, 50.0),
            FeatureSpec("monthly_spend", "continuous", 0.0, 20.0),
            FeatureSpec("n_accounts", "integer", 0, 20),
            FeatureSpec("region", "categorical", 0, 3, cardinality=4),
            FeatureSpec("total_balance", "continuous", 0.0, 300.0, dependent=True),
        ),
        label_name="default",
        n_classes=2,
    )


def make_synthetic(n=2000, seed=0) -> Dataset:
    rng = np.random.default_rng(seed)
    age = rng.integers(18, 81, n).astype(float)
    gender = rng.integers(0, 2, n).astype(float)
    income = np.clip(rng.lognormal(3.9, 0.45, n), 0, 200)
    debt = np.clip(rng.gamma(2.0, 12.0, n), 0, 100)
    util = rng.beta(2, 3, n)
    savings = np.clip(rng.gamma(2.0, 4.0, n) + 0.05 * income, 0, 50)
    spend = np.clip(rng.normal(6.0, 2.0, n) + 0.03 * income, 0, 20)
    n_acc = np.clip(rng.poisson(4, n), 0, 20).astype(float)
    region = rng.integers(0, 4, n).astype(float)
    total = income + debt

    score = (0.05 * (debt - 24) - 0.03 * (income - 50) + 3.0 * (util - 0.4)
             - 0.12 * (savings - 10) + 0.3 * (spend - 7.5) + 0.2 * (n_acc - 4)
             + np.array([0.0, 0.4, -0.3, 0.2])[region.astype(int)] - 0.01 * (age - 49))
    label = (score + rng.logistic(0, 0.6, n) > 0).astype(np.int64)
    rows = np.column_stack([age, gender, income, debt, util, savings, spend, n_acc, region, total])
    return Dataset(synthetic_schema(), rows, label)


if __name__ == "__main__":  # regenerate the bundled files
    from tabadv.schema import save_csv, save_schema

    DATA_DIR.mkdir(exist_ok=True)
    save_schema(synthetic_schema(), DATA_DIR / "synthetic_schema.yaml")
    save_csv(make_synthetic(), DATA_DIR / "synthetic.csv")
