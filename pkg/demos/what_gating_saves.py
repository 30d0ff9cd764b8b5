"""How much describer time does the detector gate save?

First the closed-form cost model across gate rates, then a replay of
simulated drives at a few traffic spreads. The measured gate rate depends
on how much ground the driver covers, since a car that keeps moving meets
more pedestrians and cyclists than one stuck behind a bicycle.

    python demos/what_gating_saves.py
"""

import numpy as np

from dualpath.experiments import replay_gating, simulated_trajectory
from dualpath.gate import Detector, DetectorConfig, savings
from dualpath.world import WorldConfig

T_DET, T_LVLM = 0.021, 1.0

print("gate rate  savings")
for p in (0.0, 0.1, 0.2, 0.3, 0.5, 1.0):
    print(f"{p:9.1f}  {savings(p, T_DET, T_LVLM):7.3f}")

print("\ntraffic spread  gate rate  savings")
for ahead in (3000.0, 1000.0, 600.0):
    frames = simulated_trajectory(WorldConfig(traffic_ahead_m=ahead), seed=0, n_frames=500)
    det = Detector(DetectorConfig(), rng=np.random.default_rng(0))
    row = replay_gating(f"{ahead:.0f} m", frames, det, T_DET, T_LVLM)
    print(f"{row.episode:>14}  {row.gate_rate:9.3f}  {row.savings:7.3f}")
