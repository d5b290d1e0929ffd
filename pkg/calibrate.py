"""Benchmark calibration harness (not part of the package).

Runs (variant x seed) grids for the canonical synthetic benchmark in
worker processes and prints mean/std per variant.
"""
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def run_one(args):
    variant, seed, shift_consts, cfg_overrides = args
    import msdakit.data as data

    data.ROTATION_SCALE, data.TRANSLATION_SCALE, data.AXIS_SCALE_RANGE = shift_consts
    from msdakit.data import SynthSpec, generate_synth
    from msdakit.trainer import TrainConfig, evaluate, train_fold

    spec = SynthSpec(
        num_domains=5,
        classes=3,
        feature_dim=20,
        class_separation=4.0,
        domain_shift=1.0,
        samples_per_class_per_domain=200,
        noise_sigma=0.5,
        seed=seed,
    )
    ds = generate_synth(spec)
    base = dict(
        epochs=100,
        batch_size=128,
        lr=1e-3,
        cfe_widths=(64, 48, 32),
        grl_warmup_epochs=10,
        seed=seed,
    )
    base.update(cfg_overrides)
    cfg = TrainConfig(**base)
    t0 = time.time()
    model, rep = train_fold(ds[:-1], ds[-1], cfg)
    acc = evaluate(model, ds[-1]).accuracy
    return variant, seed, acc, time.time() - t0


VARIANTS = {
    "full": {},
    "baseline": dict(lambda1=0, lambda2=0, lambda3=0, ada=False, pcc=False, cda=False, dasw=False),
    "no_ada": dict(ada=False),
    "no_dasw": dict(dasw=False),
    "no_cda": dict(cda=False),
}


def main():
    grid_file = sys.argv[1]
    grid = json.loads(open(grid_file).read())
    shift_consts = tuple(grid.get("shift_consts", [0.25, 0.55, 0.25]))
    overrides = grid.get("overrides", {})
    seeds = grid.get("seeds", [1, 2, 3, 4, 5])
    variants = grid.get("variants", list(VARIANTS))
    jobs = [
        (v, s, shift_consts, {**VARIANTS[v], **overrides.get(v, {}), **overrides.get("*", {})})
        for v in variants
        for s in seeds
    ]
    results = {}
    with ProcessPoolExecutor(max_workers=grid.get("workers", 2)) as pool:
        for variant, seed, acc, dt in pool.map(run_one, jobs):
            results.setdefault(variant, []).append(acc)
            print(f"  {variant:9s} seed={seed} acc={acc:.4f} ({dt:.0f}s)", flush=True)
    print(f"shift_consts={shift_consts} overrides={overrides}")
    means = {}
    for variant in variants:
        accs = np.array(results[variant])
        means[variant] = accs.mean()
        print(f"{variant:9s}: mean={accs.mean():.4f} +/- {accs.std():.4f}  {np.round(accs,3).tolist()}")
    if "full" in means and "baseline" in means:
        print(f"GAP full-baseline: {100*(means['full']-means['baseline']):.1f} pts")


if __name__ == "__main__":
    main()
