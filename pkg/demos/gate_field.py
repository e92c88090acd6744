"""Look at the gate field.

Prints a coarse character map of the guide SDF on the gate's horizontal
mid-plane. The flight direction runs left to right along x. Inside the
funnel the field is positive and the funnel widens with distance, so a
sampled trajectory is steered towards the centre line long before it reaches
the frame. '#' marks negative field, outside the funnel.
"""

import numpy as np

from gatemppi.gate_sdf import GateGeometry, guide_sdf

g = GateGeometry()
xs = np.linspace(-3, 3, 61)
ys = np.linspace(-1.5, 1.5, 25)
X, Y = np.meshgrid(xs, ys)
P = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
s = guide_sdf(P, g).reshape(X.shape)

ramp = " .:-=+*%@"
print(f"guide SDF at z = 0 (x in [-3, 3] m across, y in [-1.5, 1.5] m down), range {s.min():.2f}..{s.max():.2f} m")
for row in s[::-1]:
    print("".join("#" if v < 0 else ramp[min(int(v / 0.25), len(ramp) - 1)] for v in row))

print()
print("along the centre line the field is 0.5 + |x| tan(20 deg):")
for x in (0.0, 1.0, 2.0, 4.0):
    print(f"  x = {x:3.1f} m  sdf = {guide_sdf(np.array([[x, 0, 0]]), g)[0]:.3f} m")
