"""Regenerate the bundled toy dataset (200 rows, 2 clusters)."""

import csv
import os

import numpy as np

OUT = os.path.join(os.path.dirname(__file__), '..', 'src', 'balweights', 'resources',
                   'toy.csv')


def main(seed=2024, n=200):
    rng = np.random.default_rng(seed)
    hospital = rng.choice(['north', 'south'], size=n, p=[0.55, 0.45])
    age = np.round(rng.normal(60, 12, n), 1)
    severity = np.round(rng.gamma(2.0, 1.5, n), 2)
    female = rng.binomial(1, 0.5, n)
    shift = np.where(hospital == 'north', 0.3, -0.4)
    eta = -0.2 + shift + 0.03 * (age - 60) + 0.25 * (severity - 3)
    group = rng.binomial(1, 1 / (1 + np.exp(-eta)))
    los = np.round(np.exp(1.0 + 0.01 * (age - 60) + 0.12 * severity
                          + 0.2 * group + rng.normal(0, 0.3, n)), 2)
    p = 1 / (1 + np.exp(-(-1.6 + 0.3 * (severity - 3) + 0.3 * group)))
    complication = rng.binomial(1, p)
    with open(OUT, 'w', newline='', encoding='utf-8') as fh:
        w = csv.writer(fh, lineterminator='\n')
        w.writerow(['id', 'group', 'hospital', 'los', 'complication', 'age', 'severity',
                    'female'])
        for i in range(n):
            w.writerow([f'u{i + 1:03d}', group[i], hospital[i], los[i], complication[i],
                        age[i], severity[i], female[i]])


if __name__ == '__main__':
    main()
