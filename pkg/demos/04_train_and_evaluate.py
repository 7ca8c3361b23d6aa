"""The full workflow: synthesize a dataset, train, evaluate, report.

Everything the command line does, driven through the library API: a
noisy nested-region dataset, a linear per-voxel model trained with the
Dice + cross-entropy composite, mean-softmax ensembling over two seeds,
small-component cleanup, and the standard region metrics with their
aggregate table.
"""

import tempfile

import numpy as np

from segopt.losses import LabelMap
from segopt.metrics import (
    aggregate,
    ensemble_mean_softmax,
    evaluate_case,
    format_aggregate_table,
    postprocess_et,
)
from segopt.model import Model, ModelSpec, TrainConfig, train
from segopt.synthdata import SynthConfig, generate, load


def fit(cases, seed):
    spec = ModelSpec(kind="linear", input_features=4, num_classes=4, seed=seed)
    config = TrainConfig(loss="dice_ce", optimizer="ranger", lr=0.05,
                         epochs=300, batch_size=2, seed=seed)
    return train(Model.init(spec), cases, config)


def main():
    with tempfile.TemporaryDirectory() as workdir:
        config = SynthConfig(grid=(32, 32), subgroup_cases={"common": 8},
                             sigma=0.35, no_et_fraction=0.25, seed=4)
        generate(config, workdir)
        cases = load(f"{workdir}/manifest.json")
    print(f"dataset: {len(cases)} cases on a 32x32 grid, noise 0.35, "
          f"a quarter with no enhancing tumor")

    models = [fit(cases, seed) for seed in (0, 1)]
    for i, trained in enumerate(models):
        print(f"model {i}: final mean loss "
              f"{trained.training_log[-1].loss:.4f} after "
              f"{len(trained.training_log)} epochs")
    print()

    # The cleanup threshold is sized for full-resolution volumes, where
    # an enhancing tumor under 50 voxels is almost surely noise.  Blobs
    # on this little grid run 40-80 voxels, so the demo scales the
    # threshold down; rerun with the default to watch it swallow every
    # borderline prediction, which is exactly what it is for.
    min_et = 20
    results = []
    for case in cases:
        preds = [t.model().forward(case.features) for t in models]
        ens = ensemble_mean_softmax(preds)
        decoded = LabelMap(np.argmax(ens.voxels, axis=1), 4,
                           case.labels.spatial_shape)
        cleaned = postprocess_et(decoded, min_et_voxels=min_et)
        results.append(evaluate_case(cleaned, case.labels,
                                     case_id=case.case_id))

    print("per-case dice after cleanup (whole tumor / enhancing tumor):")
    for r in results:
        print(f"  {r.case_id}: WT {r.dice['WT']:.3f}  ET {r.dice['ET']:.3f}")
    print()
    print(format_aggregate_table(aggregate(results)))
    print()
    print("the two no-ET cases score ET dice 1.0: absent in truth, absent")
    print("in the prediction, and agreement on absence counts as perfect")


if __name__ == "__main__":
    main()
