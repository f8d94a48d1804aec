"""
Removing a backdoor by forgetting its client
============================================

One client stamps a white square on its images and relabels them, so the
federated model learns to obey the square.  Forgetting that client should
take the behaviour away again.
"""

from fedunlearn import (
    BackdoorSpec,
    FedConfig,
    NetworkSpec,
    Selector,
    digits_datasets,
    fed_train,
    init_params,
    mark_forget,
    partition_random,
    poison,
    unlearn_pipeline,
)
from fedunlearn.metrics import accuracy, asr, backdoor_accuracy

# 28x28 renderings of the scikit-learn digits, four jittered copies each
train, test = digits_datasets(copies=4, seed=0)
partition = partition_random(train, 5, seed=0)
backdoor = BackdoorSpec(trigger_size=5, target_label=9, poisoned_client=0)
train = poison(train, partition, backdoor)
partition = mark_forget(partition, Selector.client(0))

spec = NetworkSpec.mlp([784, 64, 32, 10])
init = init_params(spec, seed=3)
cfg = FedConfig(rounds=40, seed=4)


def report(label, params):
    print(f"{label:10s} test acc {accuracy(spec, params, test):.3f}  "
          f"ASR {asr(spec, params, test, backdoor):.3f}  "
          f"backdoor acc {backdoor_accuracy(spec, params, test, backdoor):.3f}")


trained, _ = fed_train(spec, init, train, partition, cfg)
report("poisoned", trained)

# score, reset 40% of every block to its initial value, retrain the reset entries for one epoch
result = unlearn_pipeline(spec, trained, init, train, partition, 0.4, cfg)
report("reset", result.theta_reset)
report("unlearned", result.theta_retrained)
print(f"unlearning took {result.timing.unlearn_seconds:.1f} s")
