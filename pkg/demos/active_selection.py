"""Active-selection comparison: starting from a small labeled seed set, query
batches of pool nodes by predicted interval width versus at random, and track
how quickly each strategy finds the largest-error nodes.
"""

import numpy as np

from calpro import active, datagen, trainer

pool = datagen.gen_chain_dataset(datagen.GeneratorConfig(seed=7))
retrain = trainer.TrainConfig(learning_rate=3e-3, batch_size=4,
                              max_epochs=15, patience=6)

configs = [active.ActiveConfig(seed_set_size=40, batch_size=10, rounds=4,
                               strategy=s, retrain=retrain, seed=0)
           for s in ("calpro_width", "epistemic_var", "random")]

out = active.compare_strategies(pool, configs, seeds=[0, 1, 2])

print("median best-found target by round:")
header = "round " + " ".join(f"{c.strategy:>14}" for c in configs)
print(header)
rounds = out["strategies"][configs[0].strategy]["rounds"]
for r in sorted(rounds, key=int):
    row = " ".join(
        f"{out['strategies'][c.strategy]['rounds'][r]['best_found_median']:14.3f}"
        for c in configs)
    print(f"{r:>5} {row}")
print("\nstrategy ordering by final median best-found:", out["ordering"])
