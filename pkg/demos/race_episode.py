"""Fly one closed-loop episode on the shipped desktop profile.

A 4-gate circle of radius 5 m, flown for 3 laps under the analytic gate
field. Prints the outcome, gate pass times, lap times and a coarse top-down
trace. Takes about 15 s on one core.

    python demos/race_episode.py [position|yaw|none] [magnitude]
"""

import sys

import numpy as np

from gatemppi import config, sim

kind = sys.argv[1] if len(sys.argv) > 1 else "none"
mag = float(sys.argv[2]) if len(sys.argv) > 2 else 0.0
if kind == "yaw":
    mag = np.deg2rad(mag)

cfg = config.load(profile="desk")
track = cfg.make_track()
sc = cfg.scenario_for(kind, mag, 4.0, seed=7, trials=1)
r = sim.run_episode(track, sc, trial=0)

print(f"scenario {sim.cell_name(sc.cell())}, provider {sc.provider}")
print(f"success {r.success}  failure {r.failure}  duration {r.duration:.2f} s")
# the guide field is negative anywhere outside a gate's funnel, e.g. in the turns
print(f"peak speed {r.max_speed:.2f} m/s  lowest guide-field value {r.min_sdf:.2f} m")
print("gate passes (s):", " ".join(f"{t:.2f}" for t in r.pass_times))
print("lap times (s):  ", " ".join(f"{t:.2f}" for t in r.lap_times(track.n_gates)))

# top-down trace on a 41 x 21 grid; gates as 'G'
W, H, R = 41, 21, 6.5
canvas = [[" "] * W for _ in range(H)]


def cell(x, y):
    return int(round((y + R) / (2 * R) * (H - 1))), int(round((x + R) / (2 * R) * (W - 1)))


for x, y in r.log[:, 1:3]:
    i, j = cell(x, y)
    canvas[H - 1 - i][j] = "."
for gp in track.nominal:
    i, j = cell(*gp.position[:2])
    canvas[H - 1 - i][j] = "G"
print("\n".join("".join(row) for row in canvas))
