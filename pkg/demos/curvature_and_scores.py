"""
Where does the forget set live in the parameters?
=================================================

Train a small federated MLP, then ask every client for its curvature
statistics and see which weights the target samples dominate.
"""

import numpy as np

from fedunlearn import (
    FedConfig,
    NetworkSpec,
    Selector,
    aggregate_hessians,
    client_stats,
    fed_train,
    init_params,
    mark_forget,
    partition_random,
    select_reset_mask,
    synth_blobs,
    target_information_score,
)

# four clients share a 4-class blob dataset; client 2 will ask to be forgotten
data = synth_blobs(classes=4, per_class=150, d=16, spread=0.3, seed=0)
partition = mark_forget(partition_random(data, 4, seed=0), Selector.client(2))
print(f"{len(data)} samples, {partition.target_indices().size} flagged for forgetting")

spec = NetworkSpec.mlp([16, 12, 4])
init = init_params(spec, seed=1)
trained, _ = fed_train(spec, init, data, partition, FedConfig(rounds=10, local_epochs=3, seed=2))

# each client reports curvature of its forget and retain samples plus two counts
stats = [client_stats(spec, trained, data, partition, c) for c in range(partition.n_clients)]
for c, s in enumerate(stats):
    print(f"client {c}: {s.n_f:3d} forget, {s.n_r:3d} retain samples")

# the server combines them into full-data curvature h and the target share h'
h, h_prime = aggregate_hessians(stats)
scores = target_information_score(h, h_prime)

# score distribution per block: a long right tail means a few weights carry the forget set
for name, block in scores.blocks.items():
    q = np.quantile(block, [0.5, 0.9, 1.0])
    print(f"{name:9s} median {q[0]:.3f}  p90 {q[1]:.3f}  max {q[2]:.3f}")

# resetting 20% of each block picks the highest-scoring entries
mask = select_reset_mask(scores, 0.2)
print("entries to reset per block:", mask.popcounts())
