"""
MP-Init, drift and deployment
=============================

Train the same SmallNet with and without membrane-potential
initialisation, measure how far the first timestep's membrane distribution
sits from the last one, then fold thresholds into the weights for
inference and estimate energy.
"""

import numpy as np

from snn_forge.diagnostics import count_operations, drift_report, energy_estimate
from snn_forge.data import synth_gaussian_blobs, train_test_split
from snn_forge.network import convert_for_inference, small_net
from snn_forge.training import TrainConfig, evaluate, train

data = synth_gaussian_blobs(10, 3000, seed=0)
train_set, test_set = train_test_split(data, 0.2, seed=0)
cfg = TrainConfig(epochs=3, lr=0.05, precision="float32")

nets = {}
for mpinit in (True, False):
    net = small_net(mpinit=mpinit, seed=0)
    log = train(net, train_set, cfg, test_set=test_set, monitor=False)
    reports = drift_report(net, test_set.images[:256])
    drift = ["silent" if r.empty else f"{r.tv_at(1):.3f}" for r in reports]
    mu = [f"{lif.mp.mu:.3f}" for lif in net.lif_layers]
    print(f"MP-Init {'on ' if mpinit else 'off'}: test acc {log.epochs[-1]['test_acc']:.3f}, "
          f"TV(U[1], U[T]) per layer {drift}, mu {mu}")
    nets[mpinit] = net

# Threshold absorption: binary spikes, same logits.
net = nets[True]
deployed = convert_for_inference(net)
x = test_set.images[:64]
print("max |logit difference| after conversion:",
      float(np.max(np.abs(deployed.predict(x) - net.eval().predict(x)))))
print(f"deployed accuracy: {evaluate(deployed, test_set.images, test_set.labels):.3f}")

acs, macs = count_operations(deployed, x)
print(f"per sample: {acs / 1e3:.1f}k AC, {macs / 1e3:.1f}k MAC -> {energy_estimate(acs, macs) * 1e6:.2f} nJ")
