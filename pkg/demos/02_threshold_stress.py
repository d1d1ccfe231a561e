"""
Surrogate scaling under extreme thresholds
==========================================

Three ways of feeding the threshold into the surrogate gradient:

* AS   -- argument ``M - vthr``: the window has a fixed width in volts,
          so a large threshold leaves few neurons inside it.
* RS   -- argument ``M / vthr - 1``: the gradient picks up a ``1/vthr``
          factor, which blows up for small thresholds.
* TrSG -- RS plus the output scaled by ``vthr`` during training; the two
          factors cancel.

We train a small spiking MLP (no batch norm, so nothing rescales the
gradient) at ``vthr`` in {0.1, 1, 2} and compare accuracy and the share of
surrogate arguments inside the window (RatioAG).
"""

import numpy as np

from snn_forge.data import synth_gaussian_blobs, train_test_split
from snn_forge.errors import DivergenceError
from snn_forge.network import mlp_net
from snn_forge.surrogate import SurrogateConfig
from snn_forge.training import TrainConfig, train

data = synth_gaussian_blobs(5, 2000, dims=(32,), seed=0, separation=4.0)
train_set, test_set = train_test_split(data, 0.25, seed=0)
cfg = TrainConfig(epochs=3, lr=0.05, batch_size=64)

print(f"{'mode':<5} {'vthr':>5} {'test acc':>9} {'RatioAG':>8} {'|grad|':>9}")
for vthr in (0.1, 1.0, 2.0):
    for mode in ("AS", "RS", "TrSG"):
        net = mlp_net([32, 64, 5], sg=SurrogateConfig("rectangular", mode), vthr=vthr, seed=0)
        try:
            log = train(net, train_set, cfg, test_set=test_set)
        except DivergenceError as err:
            print(f"{mode:<5} {vthr:>5} {'div.':>9}  ({err})")
            continue
        last = log.epochs[-1]
        print(f"{mode:<5} {vthr:>5} {last['test_acc']:>9.3f} {last['ratio_ag_0']:>8.3f} {last['abs_str_0']:>9.2e}")

# Expect RS gradients to be roughly 10x larger at vthr=0.1 and AS RatioAG
# to collapse at vthr=2.  TrSG keeps both in range.
