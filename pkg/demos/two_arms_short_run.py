"""Train the dual-pathway arm and the static-only arm briefly, side by side.

This is a smoke-scale version of the ablation. A few thousand steps are
far too few for either policy to learn to drive, so read the output as a
tour of what a run produces, not as evidence for either arm.

    python demos/two_arms_short_run.py [--steps 3000]
"""

import argparse

from dualpath.config import RunConfig
from dualpath.experiments import arm_config, arm_summary, compare_arms, train_seed
from dualpath.learner import SacConfig
from dualpath.pipeline import PipelineConfig
from dualpath.synthesis import NO_PENALTY, SynthesisConfig
from dualpath.world import load_eval_routes

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=3000)
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
args = ap.parse_args()

base = RunConfig(
    total_steps=args.steps,
    synthesis=SynthesisConfig(mode=NO_PENALTY),
    pipeline=PipelineConfig(warmup=500),
    learner=SacConfig(batch_size=32, hidden=[64, 64]),
)
routes = load_eval_routes()[:2]
arms = {}
for arm in ("main", "static_only"):
    results = [train_seed(arm_config(base, arm), s, routes) for s in args.seeds]
    arms[arm] = arm_summary(results, args.steps)
    for r in results:
        rep = r.report
        print(f"{arm:>11} seed {r.seed}: {len(rep.episodes)} episodes, "
              f"{sum(e.collisions for e in rep.episodes)} collisions, "
              f"{rep.updates} updates, {rep.describer_calls} describer calls, eval SR {r.eval.sr:.2f}")

print()
print(compare_arms(arms["main"], arms["static_only"]).describe())
