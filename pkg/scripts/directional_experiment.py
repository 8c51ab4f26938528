"""Five-fold cascade vs single-stage comparison on the default synthetic cohort.

    python3 scripts/directional_experiment.py --out runs/directional.json
"""
import argparse
import json
import time
from pathlib import Path

from tabcascade.cascade import StagePlan
from tabcascade.experiment import render_table, run_cv_experiment
from tabcascade.synthetic import SyntheticSpec, generate_synthetic_cohort


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=SyntheticSpec().noise)
    ap.add_argument("--epochs", type=int, default=StagePlan().epochs)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--all-models", action="store_true")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    table = generate_synthetic_cohort(SyntheticSpec(noise=args.noise, seed=args.seed))
    plan = StagePlan(epochs=args.epochs, seed=args.seed)
    models = None if args.all_models else ("Cascade", "SingleStageTabNet")
    t0 = time.perf_counter()

    def log(fold, model, stage, epoch, lr, loss):
        if epoch % 50 == 49:
            print(f"fold {fold} {model}/{stage} epoch {epoch + 1} loss {loss:.4f} "
                  f"[{time.perf_counter() - t0:.0f}s]", flush=True)

    kwargs = {} if models is None else {"models": models}
    report = run_cv_experiment(table, plan, k=5, seed=args.seed, jobs=args.jobs,
                               log=log if args.jobs == 1 else None, **kwargs)
    print(render_table(report))
    print(f"elapsed {time.perf_counter() - t0:.0f}s")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
