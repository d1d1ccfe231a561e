"""Gradient health, distribution drift, firing rates and energy accounting."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .surrogate import ratio_in_window

DEFAULT_BINS = 64
E_AC_PJ = 0.9
E_MAC_PJ = 4.6


@dataclass
class GradientReport:
    abs_str: float
    ratio_ag: float
    grad_cv: float  # nan when mean |g| is zero

    def as_dict(self):
        return asdict(self)


def gradient_report(grads, args_x, gamma=1.0):
    """Mean |g|, fraction of surrogate arguments inside the window, and CV of |g|."""
    g = np.abs(np.asarray(grads, dtype=np.float64)).ravel()
    if g.size == 0 or np.size(args_x) == 0:
        raise ValueError("gradient_report needs nonempty gradients and arguments")
    mean = g.mean()
    cv = float(g.std() / mean) if mean > 0 else float("nan")
    return GradientReport(abs_str=float(mean), ratio_ag=ratio_in_window(args_x, gamma), grad_cv=cv)


# --- distributions ------------------------------------------------------------

def histogram(samples, edges):
    counts, _ = np.histogram(np.asarray(samples).ravel(), bins=edges)
    total = counts.sum()
    return counts / total if total else counts.astype(float)


def pooled_edges(*sample_sets, bins=DEFAULT_BINS):
    lo = min(float(np.min(s)) for s in sample_sets if np.size(s))
    hi = max(float(np.max(s)) for s in sample_sets if np.size(s))
    if hi <= lo:
        hi = lo + 1e-12
    return np.linspace(lo, hi, bins + 1)


def tv_distance(p, q):
    """Half the L1 distance between two normalised histograms on the same bins."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"histograms use different binnings: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def tv_between_samples(a, b, bins=DEFAULT_BINS):
    edges = pooled_edges(a, b, bins=bins)
    return tv_distance(histogram(a, edges), histogram(b, edges))


@dataclass
class DriftReport:
    layer: int
    timesteps: list
    edges: np.ndarray = None
    histograms: list = field(default_factory=list)
    reference_t: int = None
    tv_to_reference: list = field(default_factory=list)  # one entry per t != reference_t
    tv_timesteps: list = field(default_factory=list)
    empty: bool = False

    def tv_at(self, t):
        return self.tv_to_reference[self.tv_timesteps.index(t)]


def drift_report(net, batch, T=None, reference_t=None, bins=DEFAULT_BINS):
    """Per spiking layer: histograms of active-neuron ``U[t]`` and TV to ``U[reference_t]``.

    Runs the network in eval mode on ``batch`` (static inputs).
    """
    if T is not None and T != net.timesteps:
        net.timesteps = T
    T = net.timesteps
    reference_t = T if reference_t is None else reference_t
    was_training = net.training
    net.eval()
    try:
        fp = net.forward_window(batch, record=True, requires_grad=False)
    finally:
        net.training = was_training
    reports = []
    for layer, rec in zip(net.lif_layers, fp.records):
        mask = rec.active_mask
        rep = DriftReport(layer=layer.index, timesteps=list(range(1, T + 1)), reference_t=reference_t)
        if not mask.any():
            rep.empty = True
            reports.append(rep)
            continue
        samples = [u[mask] for u in rec.U]
        rep.edges = pooled_edges(*samples, bins=bins)
        rep.histograms = [histogram(s, rep.edges) for s in samples]
        ref = rep.histograms[reference_t - 1]
        for t in rep.timesteps:
            if t != reference_t:
                rep.tv_timesteps.append(t)
                rep.tv_to_reference.append(tv_distance(rep.histograms[t - 1], ref))
        reports.append(rep)
    return reports


# --- firing -------------------------------------------------------------------

@dataclass
class FiringRates:
    per_layer: list
    per_timestep: list  # per layer, list over t
    global_rate: float


def firing_rate(spike_record):
    """``spike_record``: per layer, a list over timesteps of binary spike arrays."""
    per_layer, per_t, total, count = [], [], 0.0, 0
    for layer_spikes in spike_record:
        arr = np.stack([np.asarray(s, dtype=float) for s in layer_spikes])
        per_t.append([float(a.mean()) for a in arr])
        per_layer.append(float(arr.mean()))
        total += arr.sum()
        count += arr.size
    return FiringRates(per_layer, per_t, float(total / count) if count else 0.0)


# --- assumption checks ------------------------------------------------------------

@dataclass
class LjungBoxResult:
    pass_fraction: float
    n_tested: int
    n_excluded: int
    q: np.ndarray


def ljung_box_lag1(series, alpha=0.05):
    """Lag-1 Ljung-Box test per row of ``series`` (shape ``(n_series, length)``).

    Returns the fraction of non-constant series for which independence is
    not rejected at level ``alpha``.  Constant series are excluded.
    """
    x = np.atleast_2d(np.asarray(series, dtype=np.float64))
    n = x.shape[1]
    if n < 3:
        raise ValueError("Ljung-Box needs series of length >= 3")
    d = x - x.mean(axis=1, keepdims=True)
    denom = (d * d).sum(axis=1)
    keep = denom > 1e-300
    r1 = (d[keep, :-1] * d[keep, 1:]).sum(axis=1) / denom[keep]
    q = n * (n + 2) * r1 ** 2 / (n - 1)
    crit = stats.chi2.ppf(1.0 - alpha, df=1)
    n_tested = int(keep.sum())
    frac = float(np.mean(q <= crit)) if n_tested else float("nan")
    return LjungBoxResult(frac, n_tested, int((~keep).sum()), q)


def boundedness_ratio(U, vthr):
    """Fractions of ``|U| <= vthr`` and ``|U| <= 2*vthr``."""
    a = np.abs(np.asarray(U, dtype=float)).ravel()
    if a.size == 0:
        raise ValueError("boundedness_ratio needs samples")
    return float(np.mean(a <= vthr)), float(np.mean(a <= 2 * vthr))


@dataclass
class AssumptionReport:
    layer: int
    tv_inputs: list               # TV of input current at t=1..T-1 vs t=T
    ljung_box_pass_fraction: float
    ljung_box_excluded: int
    within_1vthr: float
    within_2vthr: float
    u_min: float
    u_max: float


def assumption_report(net, batches, alpha=0.05, bins=DEFAULT_BINS):
    """Check i.i.d. inputs and bounded membranes on active neurons.

    Each neuron's input-current series is the concatenation of its
    per-timestep inputs over consecutive windows (one window per sample).
    """
    if isinstance(batches, np.ndarray):
        batches = [batches]
    was_training = net.training
    net.eval()
    per_layer = None
    try:
        for batch in batches:
            fp = net.forward_window(batch, record=True, requires_grad=False)
            if per_layer is None:
                per_layer = [{"I": [], "U": [], "mask": []} for _ in fp.records]
            for acc, rec in zip(per_layer, fp.records):
                acc["I"].append(np.stack(rec.I))
                acc["U"].append(np.stack(rec.U))
                acc["mask"].append(rec.active_mask)
    finally:
        net.training = was_training
    reports = []
    for layer, acc in zip(net.lif_layers, per_layer):
        I = np.concatenate(acc["I"], axis=1)       # T, N, feat...
        U = np.concatenate(acc["U"], axis=1)
        mask = np.concatenate(acc["mask"], axis=0)  # N, feat...
        T = I.shape[0]
        flatI = I.reshape(T, -1)
        flatm = mask.reshape(-1)
        ref = flatI[-1][flatm] if flatm.any() else flatI[-1]
        tv_inputs = [tv_between_samples(flatI[t][flatm] if flatm.any() else flatI[t], ref, bins)
                     for t in range(T - 1)]
        # neuron-wise series: (neurons, N*T) ordered window by window
        neurons = I.reshape(T, I.shape[1], -1).transpose(2, 1, 0).reshape(-1, I.shape[1] * T)
        lb = ljung_box_lag1(neurons, alpha) if neurons.shape[1] >= 3 else None
        act_u = U[:, mask] if mask.any() else U.reshape(T, -1)
        w1, w2 = boundedness_ratio(act_u, layer.vthr)
        reports.append(AssumptionReport(
            layer=layer.index, tv_inputs=tv_inputs,
            ljung_box_pass_fraction=lb.pass_fraction if lb else float("nan"),
            ljung_box_excluded=lb.n_excluded if lb else 0,
            within_1vthr=w1, within_2vthr=w2,
            u_min=float(act_u.min()), u_max=float(act_u.max())))
    return reports


# --- energy -------------------------------------------------------------------------

def energy_estimate(ac_count, mac_count):
    """Energy in millijoules at 0.9 pJ per AC and 4.6 pJ per MAC."""
    if ac_count < 0 or mac_count < 0:
        raise ValueError("operation counts must be nonnegative")
    return (ac_count * E_AC_PJ + mac_count * E_MAC_PJ) * 1e-9


def count_operations(net, batch):
    """Per-sample (ACs, MACs) over one window.

    The first weight layer sees real-valued input and costs MACs; later
    weight layers are driven by spikes and cost one AC per delivered spike,
    approximated as dense MACs times the incoming firing rate.
    """
    from .network import LIF, Conv2d, Linear

    was_training = net.training
    net.eval()
    try:
        fp = net.forward_window(batch, record=True, requires_grad=False)
    finally:
        net.training = was_training
    N = np.shape(batch)[0]
    T = net.timesteps
    shape = np.shape(batch)[1:]
    acs = macs = 0.0
    rate = None
    rec_iter = iter(fp.records)
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            c, h, w = shape
            ho = (h + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
            dense = ho * wo * layer.out_channels * c * layer.kernel_size ** 2
            shape = (layer.out_channels, ho, wo)
        elif isinstance(layer, Linear):
            dense = layer.in_features * layer.out_features
            shape = (layer.out_features,)
        else:
            if layer.kind == "avgpool":
                c, h, w = shape
                shape = (c, h // layer.kernel_size, w // layer.kernel_size)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, LIF):
                rec = next(rec_iter)
                rate = float(np.mean(np.stack(rec.S)))
            continue
        if rate is None:
            macs += dense * T
        else:
            acs += dense * T * rate
    return acs, macs


# --- temporal gradient alignment ------------------------------------------------------

def gradient_similarity_matrix(grads):
    """Cosine similarity between per-timestep gradient vectors; nan for zero norms."""
    g = np.asarray(grads, dtype=np.float64).reshape(len(grads), -1)
    if g.shape[0] < 2:
        raise ValueError("need gradients for at least two timesteps")
    norms = np.linalg.norm(g, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (g @ g.T) / np.outer(norms, norms)
    sim[norms == 0, :] = np.nan
    sim[:, norms == 0] = np.nan
    return np.clip(sim, -1.0, 1.0)


def per_timestep_weight_grads(net, inputs, labels, layer):
    """Split the weight gradient of ``layer`` into per-timestep contributions."""
    from .training import loss_classification

    fp = net.forward_window(inputs)
    loss = loss_classification(fp.logits, labels)
    net.zero_grad()
    fp.tape.backward(loss)
    x_node, y_node = layer.last_io
    T = net.timesteps
    g = y_node.grad.reshape((T, -1) + y_node.shape[1:])
    if layer.kind == "linear":
        x = x_node.value.reshape((T, -1) + x_node.shape[1:])
        return np.stack([x[t].T @ g[t] for t in range(T)])
    win = y_node.ctx["win"]
    n = win.shape[0] // T
    return np.stack([np.tensordot(g[t], win[t * n:(t + 1) * n], axes=([0, 2, 3], [0, 2, 3]))
                     for t in range(T)])


# --- export ---------------------------------------------------------------------------

def write_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in header})


def _fmt(v):
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return v


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


LOGITS_HEADER = ["sample", "t", "label"]


def export_logits_csv(path, logits, labels=None):
    """Per-timestep logits, one row per (sample, t), for external PCA plotting."""
    logits = np.asarray(logits)
    T, N, C = logits.shape
    header = LOGITS_HEADER + [f"logit_{c}" for c in range(C)]
    rows = []
    for n in range(N):
        for t in range(T):
            row = {"sample": n, "t": t + 1, "label": int(labels[n]) if labels is not None else ""}
            row.update({f"logit_{c}": float(logits[t, n, c]) for c in range(C)})
            rows.append(row)
    write_csv(path, rows, header)
