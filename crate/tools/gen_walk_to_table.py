"""Writes the bundled synthetic trace: walk to the table, work over it, leave."""
import csv
import math
import sys

import numpy as np

RATE = 50.0
DURATION = 22.0
FLOOR = -0.75
X_FAR, X_TABLE = 3.5, 1.05
WALK_SPEED = 1.0
WALK_TIME = (X_FAR - X_TABLE) / WALK_SPEED
T_ARRIVE = 0.5 + WALK_TIME
T_WORK_START, T_WORK_END = T_ARRIVE + 1.0, 15.0
T_LEAVE = T_WORK_END + 1.0

KEYPOINTS = [
    "head", "neck", "pelvis",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_hip", "left_knee", "left_ankle",
    "right_hip", "right_knee", "right_ankle",
]


def smoothstep(u):
    u = min(max(u, 0.0), 1.0)
    return u * u * (3.0 - 2.0 * u)


def body_x(t):
    if t < 0.5:
        return X_FAR
    if t < T_ARRIVE:
        return X_FAR - WALK_SPEED * (t - 0.5)
    if t < T_LEAVE:
        return X_TABLE
    return min(X_TABLE + WALK_SPEED * (t - T_LEAVE), X_FAR)


def walking(t):
    return 0.5 <= t < T_ARRIVE or (t >= T_LEAVE and body_x(t) < X_FAR)


def frame(t):
    x = body_x(t)
    p = {}
    p["pelvis"] = (x, 0.0, FLOOR + 0.95)
    p["neck"] = (x, 0.0, FLOOR + 1.45)
    p["head"] = (x, 0.0, FLOOR + 1.65)
    swing = 0.0
    if walking(t):
        t_walk = t - 0.5 if t < T_ARRIVE else t - T_LEAVE
        # seven half strides per walk so the legs end straight
        swing = 0.045 * math.sin(7 * math.pi * t_walk / WALK_TIME)
    for side, s in (("left", 1.0), ("right", -1.0)):
        p[f"{side}_hip"] = (x, 0.1 * s, FLOOR + 0.9)
        p[f"{side}_knee"] = (x - s * swing, 0.1 * s, FLOOR + 0.48)
        p[f"{side}_ankle"] = (x - 2 * s * swing, 0.1 * s, FLOOR + 0.06)
        p[f"{side}_shoulder"] = (x, 0.2 * s, FLOOR + 1.4)
        # blend between hanging arms and hands over the table
        w = smoothstep((t - T_ARRIVE) / 1.0) * (1.0 - smoothstep((t - T_WORK_END) / 1.0))
        phase = 2 * math.pi * 1.0 * t + (0.0 if s > 0 else math.pi)
        cx, cz = 0.05 * math.cos(phase), 0.05 * math.sin(phase)
        hang_e, work_e = (x, 0.22 * s, FLOOR + 1.1), (x - 0.25, 0.2 * s, 0.4)
        hang_w, work_w = (x, 0.22 * s, FLOOR + 0.85), (x - 0.45 + cx, 0.12 * s, 0.2 + cz)
        p[f"{side}_elbow"] = tuple(a + w * (b - a) for a, b in zip(hang_e, work_e))
        p[f"{side}_wrist"] = tuple(a + w * (b - a) for a, b in zip(hang_w, work_w))
    return p


def main(path):
    times = np.arange(0.0, DURATION + 1e-9, 1.0 / RATE)
    frames = [frame(t) for t in times]
    for k in KEYPOINTS:
        pts = np.array([f[k] for f in frames])
        v = np.linalg.norm(np.diff(pts, axis=0), axis=1) * RATE
        assert v.max() <= 2.0, (k, v.max())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"{k}_{a}" for k in KEYPOINTS for a in "xyz"])
        for t, f in zip(times, frames):
            w.writerow([f"{t:.2f}"] + [f"{c:.5f}" for k in KEYPOINTS for c in f[k]])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "walk_to_table.csv")
