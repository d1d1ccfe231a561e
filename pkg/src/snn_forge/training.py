"""Losses, optimiser, learning-rate schedule and the training loop."""

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .diagnostics import gradient_report
from .errors import DivergenceError

PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass
class TrainConfig:
    timesteps: int = 4
    epochs: int = 10
    lr: float = 0.02
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    sparsity_lambda: float = 0.0
    sparsity_target: float = 0.0
    precision: str = "float64"

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.sparsity_lambda < 0 or not 0.0 <= self.sparsity_target <= 1.0:
            raise ValueError("sparsity_lambda must be >= 0 and sparsity_target in [0, 1]")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def cosine_lr(epoch, epochs, lr0):
    """Cosine annealing from ``lr0`` at epoch 0 to 0 at epoch ``epochs``."""
    if epochs <= 0:
        return lr0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / epochs))


class SGD:
    """SGD with momentum; weight decay is added to the gradient."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self._buf = {}

    def step(self):
        for p in self.params:
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf = self._buf.get(id(p))
            if buf is None or not self.momentum:
                buf = np.array(d, copy=True)
            else:
                buf = self.momentum * buf + d
            self._buf[id(p)] = buf
            with np.errstate(over="ignore", invalid="ignore"):  # non-finite results are caught by train()
                p.data = (p.data - self.lr * buf).astype(p.data.dtype)


def loss_classification(logits, labels):
    """Cross-entropy of the time-averaged logits; ``logits`` is a (T, N, C) node."""
    labels = np.asarray(labels, dtype=int)
    T, N, C = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError("label out of range")
    mean_logits = ad.mean(logits, axis=0)
    onehot = np.zeros((N, C), dtype=logits.value.dtype)
    onehot[np.arange(N), labels] = 1.0
    return -ad.sum(ad.log_softmax(mean_logits) * onehot) / N


def firing_rates(records):
    """Per-layer mean spike value as tape nodes (differentiable via surrogates)."""
    return [ad.mean(ad.stack(rec.spike_nodes)) for rec in records]


def loss_sparsity(rates, target, lam):
    """``lam * sum_l (rate_l - target)^2``; rates may be floats or nodes."""
    if lam == 0 or not rates:
        return 0.0
    total = 0.0
    for r in rates:
        d = r - target
        total = total + d * d
    return total * lam


def evaluate(net, images, labels, batch_size=256):
    """Top-1 accuracy of the time-averaged logits (current train/eval mode kept)."""
    was_training = net.training
    net.eval()
    correct = 0
    try:
        for i in range(0, len(labels), batch_size):
            pred = net.predict(images[i:i + batch_size]).argmax(axis=1)
            correct += int((pred == labels[i:i + batch_size]).sum())
    finally:
        net.training = was_training
    return correct / max(len(labels), 1)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""

    def as_dict(self):
        return asdict(self)


def _check_finite(net, loss_value, epoch, step):
    if not np.isfinite(loss_value):
        raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}")
    for name, p in net.named_parameters().items():
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient for {name} at epoch {epoch} step {step}", layer=name)


def train(net, dataset, cfg, test_set=None, hooks=(), monitor=True, verbose=False):
    """Minibatch SGD over ``cfg.epochs`` with per-epoch cosine annealing.

    ``dataset`` and ``test_set`` expose ``images`` and ``labels``.  On
    divergence a :class:`DivergenceError` is raised carrying the partial log
    as ``err.log``.
    """
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ValueError("training dataset is empty")
    net.timesteps = cfg.timesteps
    if net.dtype != np.dtype(cfg.dtype):
        net.astype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    net.rng = np.random.default_rng(cfg.seed + 1)
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    pairs = net.monitored_layers()
    log = TrainLog()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
            net.train()
            order = rng.permutation(len(labels))
            t0 = time.perf_counter()
            ep_loss, ep_correct, ep_seen, ep_reports = 0.0, 0, 0, []
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb, yb = images[idx], labels[idx]
                net.zero_grad()
                fp = net.forward_window(xb)
                loss = ce = loss_classification(fp.logits, yb)
                sp = 0.0
                if cfg.sparsity_lambda:
                    sp = loss_sparsity(firing_rates(fp.records), cfg.sparsity_target, cfg.sparsity_lambda)
                    loss = ce + sp
                loss_value = float(loss.value)
                if np.isfinite(loss_value):
                    fp.tape.backward(loss)
                _check_finite(net, loss_value, epoch, step)
                rec = {"epoch": epoch, "step": step, "lr": opt.lr, "loss": loss_value,
                       "ce": float(ce.value), "sparsity": float(getattr(sp, "value", sp))}
                pred = fp.logits.value.mean(axis=0).argmax(axis=1)
                ep_correct += int((pred == yb).sum())
                ep_seen += len(yb)
                ep_loss += loss_value * len(yb)
                if monitor:
                    reports = []
                    for i, (wl, lif) in enumerate(pairs):
                        x = np.concatenate([np.ravel(a) for a in lif.last.x])
                        r = gradient_report(wl.weight.grad, x, lif.sg.gamma)
                        rate = float(np.mean([np.mean(n.value) for n in lif.last.spike_nodes]))
                        rec.update({f"abs_str_{i}": r.abs_str, f"ratio_ag_{i}": r.ratio_ag,
                                    f"grad_cv_{i}": r.grad_cv, f"rate_{i}": rate})
                        reports.append(r)
                    ep_reports.append(reports)
                opt.step()
                for p in opt.params:
                    if not np.all(np.isfinite(p.data)):
                        raise DivergenceError(f"non-finite parameter {p.name} after step {step}", layer=p.name)
                log.steps.append(rec)
                for hook in hooks:
                    hook(rec, net)
                fp.tape.release()
                step += 1
            net.clear_traces()
            ep = {"epoch": epoch, "lr": opt.lr, "train_loss": ep_loss / ep_seen,
                  "train_acc": ep_correct / ep_seen, "seconds": time.perf_counter() - t0}
            for i, lif in enumerate(net.lif_layers):
                ep[f"vthr_{i}"] = lif.vthr
                ep[f"tau_{i}"] = lif.tau
                ep[f"mu_{i}"] = lif.mp.mu
            if ep_reports:
                for i in range(len(pairs)):
                    for key in ("abs_str", "ratio_ag", "grad_cv"):
                        vals = np.array([getattr(r[i], key) for r in ep_reports], dtype=float)
                        # a layer silent for the whole epoch has no defined CV
                        ep[f"{key}_{i}"] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
            if test_set is not None:
                ep["test_acc"] = evaluate(net, test_set.images, test_set.labels)
            log.epochs.append(ep)
            if verbose:
                print(ep)
    except DivergenceError as err:
        net.clear_traces()
        log.diverged = True
        log.message = str(err)
        err.log = log
        raise
    return log
