"""Cost-function probes and configuration ablations behind the decisions ledger.

    python3 scripts/ablations.py gt-vs-perturbed            # GT cheaper than GT turned 10 deg?
    python3 scripts/ablations.py depth-bias                 # where the cost minimum sits along each axis
    python3 scripts/ablations.py variants                   # pipeline recovery for config overrides
    python3 scripts/ablations.py variants --override '{"refine": {"shell_layers": null}}'
"""

import argparse
import json

import numpy as np

from cascade_pose.experiments import benchmark_dataset, run
from cascade_pose.features import FeatureConfig, build_pyramid
from cascade_pose.pipeline import EstimatorConfig
from cascade_pose.pose import PoseResidual, apply_residual
from cascade_pose.refiner import RefineConfig, make_stages
from cascade_pose.synth import generate
from cascade_pose.volume import VolumeCost, build_support_volume, nearest_views

FC = FeatureConfig()

VARIANTS = {
    "default": {},
    "plain-cost": {"refine": {"shell_layers": None}},
    "shell-2": {"refine": {"shell_layers": 2.0}},
    "shell-8": {"refine": {"shell_layers": 8.0}},
    "var-weight-0.3": {"refine": {"var_weight": 0.3}},
    "bins-16-16-16": {"bins": [16, 16, 16]},
    "sweeps-4": {"sweeps": 4},
}


def _costs(ds, st, consistency):
    S = ds.supports
    for t in ds.targets:
        vol = build_support_volume(S, nearest_views(S, t.gt, 6), st.resolution, st.div, FC)
        yield t, VolumeCost(build_pyramid(t.image), t.K, vol, st.div, 0.0, consistency)


def gt_vs_perturbed(args):
    ds = generate(args.seed, 32, args.targets)
    for st in make_stages():
        for cons in (None, RefineConfig().consistency(st.resolution)):
            rng = np.random.default_rng(0)
            wins = 0
            for t, c in _costs(ds, st, cons):
                ax = rng.normal(size=3)
                ax *= np.radians(10) / np.linalg.norm(ax)
                wins += c(t.gt) < c(apply_residual(t.gt, PoseResidual(rot=ax)))
            print(json.dumps({"resolution": st.resolution, "consistency": cons, "gt_wins": wins / len(ds.targets)}))


def depth_bias(args):
    ds = generate(args.seed, 32, args.targets)
    offs = np.linspace(-0.1, 0.1, 41)
    d = ds.supports.diameter
    for st in make_stages():
        for cons in (None, RefineConfig().consistency(st.resolution)):
            arg = [[], [], []]
            for t, c in _costs(ds, st, cons):
                for ax in range(3):
                    cs = [c(apply_residual(t.gt, PoseResidual.axis(3 + ax, o), d)) for o in offs]
                    arg[ax].append(offs[int(np.argmin(cs))])
            print(json.dumps({"resolution": st.resolution, "consistency": cons,
                              "median_argmin_xyz": [float(np.median(a)) for a in arg]}))


def variants(args):
    ds = benchmark_dataset(args.seed, args.targets)
    todo = {"override": json.loads(args.override)} if args.override else VARIANTS
    for name, over in todo.items():
        res = run(ds, args.shots, EstimatorConfig.from_dict(over))
        row = {"variant": name, **res.summary(), "stagewise_nonincreasing": res.stagewise_nonincreasing()}
        print(json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()}), flush=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("probe", choices=["gt-vs-perturbed", "depth-bias", "variants"])
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--targets", type=int, default=None)
    ap.add_argument("--shots", type=int, default=32)
    ap.add_argument("--override", help="JSON EstimatorConfig overrides (variants only)")
    args = ap.parse_args()
    if args.probe == "variants":
        args.seed = 0 if args.seed is None else args.seed
        args.targets = args.targets or 100
        variants(args)
    else:
        args.seed = 2 if args.seed is None else args.seed
        args.targets = args.targets or 100
        (gt_vs_perturbed if args.probe == "gt-vs-perturbed" else depth_bias)(args)


if __name__ == "__main__":
    main()
