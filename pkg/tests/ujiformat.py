"""Writes small files in the public UJIndoorLoc CSV layout for loader tests."""

import csv

import numpy as np

from earlyloc.fingerprint import UJI_FLOORS_PER_BUILDING, UJI_METADATA


def class_to_building_floor(c):
    for b, n in enumerate(UJI_FLOORS_PER_BUILDING):
        if c < n:
            return b, c
        c -= n
    raise ValueError(c)


def write_uji_csv(path, rssi_dbm, labels, rng=None):
    """``rssi_dbm`` uses -100 for unheard WAPs; written as the file's +100 sentinel."""
    rng = rng or np.random.default_rng(0)
    n, w = rssi_dbm.shape
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([f"WAP{i + 1:03d}" for i in range(w)] + list(UJI_METADATA))
        for values, c in zip(rssi_dbm, labels):
            b, f = class_to_building_floor(int(c))
            cells = [100 if v <= -100 else int(round(v)) for v in values]
            lon = -7600.0 + 80.0 * b + rng.normal(0, 5)
            lat = 4864800.0 + 10.0 * f + rng.normal(0, 5)
            out.writerow(cells + [lon, lat, f, b, 100 + c, 2, 1, 13, 1371713733])
    return path
