"""Rebuild the UCI HAR windowed layout from raw HAPT recordings.

Input is an ``.npz`` with ``uNN_eK_signals`` (6, T) arrays (accelerometer
xyz in g, gyroscope xyz in rad/s, 50 Hz) and ``uNN_eK_labels`` (T,) activity
ids (-1 for unlabeled). Output mirrors the published UCI HAR directory:
``{train,test}/Inertial Signals/{total_acc,body_acc,body_gyro}_{x,y,z}_<split>.txt``
plus ``y_<split>.txt`` and ``subject_<split>.txt``.

Filtering follows the public dataset description: 3-point median filter,
third-order Butterworth low-pass at 20 Hz, gravity split off with a 0.3 Hz
Butterworth low-pass, and 128-sample windows with 50% overlap.

Usage::

    python3 scripts/hapt_to_uci_har.py /root/data/hapt_raw.npz /root/data/har
"""
import argparse
import re
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy import signal

FS = 50.0
WINDOW = 128
STEP = 64
TEST_SUBJECTS = {2, 4, 9, 10, 12, 13, 18, 20, 24}


def denoise(x):
    x = signal.medfilt(x, kernel_size=(1, 3))
    b, a = signal.butter(3, 20.0, fs=FS)
    return signal.filtfilt(b, a, x, axis=-1)


def gravity(acc):
    b, a = signal.butter(3, 0.3, fs=FS)
    return signal.filtfilt(b, a, acc, axis=-1)


def windows(labels):
    """Start indices of windows lying inside one run of a label in 1..6."""
    out = []
    edges = np.flatnonzero(np.diff(labels)) + 1
    for s, e in zip(np.r_[0, edges], np.r_[edges, len(labels)]):
        lab = int(labels[s])
        if 1 <= lab <= 6:
            out += [(t, lab) for t in range(s, e - WINDOW + 1, STEP)]
    return out


def convert(src, dst):
    raw = np.load(src)
    keys = sorted(k for k in raw.files if k.endswith("_signals"))
    rows = {"train": defaultdict(list), "test": defaultdict(list)}
    for key in keys:
        subject = int(re.match(r"u(\d+)_", key).group(1))
        split = "test" if subject in TEST_SUBJECTS else "train"
        sig = denoise(raw[key])
        total, gyro = sig[:3], sig[3:]
        body = total - gravity(total)
        labels = raw[key.replace("_signals", "_labels")]
        for t, lab in windows(labels):
            sl = slice(t, t + WINDOW)
            for name, arr in (("total_acc", total), ("body_acc", body), ("body_gyro", gyro)):
                for k, ax in enumerate("xyz"):
                    rows[split][f"{name}_{ax}"].append(arr[k, sl])
            rows[split]["y"].append(lab)
            rows[split]["subject"].append(subject)
    for split, cols in rows.items():
        sig_dir = Path(dst) / split / "Inertial Signals"
        sig_dir.mkdir(parents=True, exist_ok=True)
        for name, series in cols.items():
            if name in ("y", "subject"):
                np.savetxt(Path(dst) / split / f"{name}_{split}.txt", np.array(series), fmt="%d")
            else:
                np.savetxt(sig_dir / f"{name}_{split}.txt", np.array(series), fmt="%.8e")
        print(f"{split}: {len(cols['y'])} windows")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("src")
    p.add_argument("dst")
    args = p.parse_args()
    convert(args.src, args.dst)


if __name__ == "__main__":
    main()
