"""Run modes behind the command line: train, eval, drift, theory and stress.

Every mode writes into one output directory:

``config.json``
    the resolved configuration; rerunning with it reproduces the metrics.
``metrics.csv``
    mode-specific table with a fixed header (see ``*_HEADER`` below).
``summary.json``
    headline numbers and status.
``checkpoint.ckpt``
    trained or converted network (train, eval, drift and each stress cell).
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import data as data_io
from . import theory
from .checkpoint import load_checkpoint, save_checkpoint
from .diagnostics import assumption_report, drift_report, write_csv, write_json
from .errors import DivergenceError
from .network import convert_for_inference, mlp_net, small_net
from .surrogate import SurrogateConfig
from .training import TrainConfig, evaluate, train

EPOCH_HEADER = ["epoch", "lr", "train_loss", "train_acc", "test_acc"]
DRIFT_HEADER = ["layer", "t", "tv"]
STRESS_HEADER = ["mode", "vthr", "reset", "status", "test_acc"]
EVAL_HEADER = ["split", "n", "accuracy"]


def worker_count(n_jobs):
    """Workers for parallel cells, capped by ``SNN_FORGE_THREADS`` when set."""
    cap = os.environ.get("SNN_FORGE_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def load_data(cfg):
    """(train, test) datasets; the training split is optionally subsampled."""
    d = cfg.data
    if d.kind == "idx":
        train_set = data_io.load_idx(d.train_images, d.train_labels)
        if d.test_images:
            test_set = data_io.load_idx(d.test_images, d.test_labels, num_classes=train_set.num_classes)
        else:
            train_set, test_set = data_io.train_test_split(train_set, d.test_fraction, d.data_seed)
    else:
        full = data_io.synth_gaussian_blobs(d.num_classes, d.n, tuple(d.dims), seed=d.data_seed,
                                            separation=d.separation, noise=d.noise)
        train_set, test_set = data_io.train_test_split(full, d.test_fraction, d.data_seed)
    if d.subsample:
        train_set = data_io.subsample(train_set, d.subsample, d.data_seed)
    return train_set, test_set


def build_net(cfg, in_shape, num_classes):
    sg = SurrogateConfig(cfg.sg.shape, cfg.sg.scale_mode, cfg.sg.gamma)
    common = dict(tau=cfg.init_tau, vthr=cfg.init_vthr, reset=cfg.reset, sg=sg,
                  mpinit=cfg.mpinit.enabled, beta=cfg.mpinit.beta, train_tau=cfg.train_tau,
                  train_vthr=cfg.train_vthr, timesteps=cfg.timesteps, seed=cfg.seed)
    if cfg.net == "small":
        return small_net(in_shape, num_classes, dropout=cfg.dropout, **common)
    return mlp_net([int(np.prod(in_shape))] + list(cfg.hidden) + [num_classes], **common)


def train_config(cfg):
    o = cfg.optim
    return TrainConfig(timesteps=cfg.timesteps, epochs=o.epochs, lr=o.lr, weight_decay=o.weight_decay,
                       momentum=o.momentum, batch_size=o.batch_size, seed=cfg.seed,
                       sparsity_lambda=cfg.sparsity.weight, sparsity_target=cfg.sparsity.target,
                       precision=cfg.precision)


def _flat(dataset, cfg):
    if cfg.net == "mlp":
        return replace(dataset, images=dataset.images.reshape(len(dataset), -1))
    return dataset


def _epoch_header(log):
    extra = sorted({k for e in log.epochs for k in e} - set(EPOCH_HEADER) - {"seconds"})
    return EPOCH_HEADER + extra


def train_once(cfg):
    """Train one network; returns ``(net, log, test_set)``.  Divergence propagates."""
    train_set, test_set = load_data(cfg)
    train_set, test_set = _flat(train_set, cfg), _flat(test_set, cfg)
    net = build_net(cfg, train_set.images.shape[1:], train_set.num_classes)
    log = train(net, train_set, train_config(cfg), test_set=test_set)
    return net, log, test_set


def run_train(cfg, out):
    summary = {"mode": "train", "status": "ok"}
    try:
        net, log, test_set = train_once(cfg)
    except DivergenceError as err:
        log = err.log
        write_csv(os.path.join(out, "metrics.csv"), log.epochs, _epoch_header(log))
        write_json(os.path.join(out, "summary.json"),
                   {**summary, "status": "diverged", "message": str(err), "epochs_completed": len(log.epochs)})
        raise
    write_csv(os.path.join(out, "metrics.csv"), log.epochs, _epoch_header(log))
    save_checkpoint(net, os.path.join(out, "checkpoint.ckpt"), cfg.to_dict())
    last = log.epochs[-1] if log.epochs else {}
    summary.update(test_acc=last.get("test_acc"), train_acc=last.get("train_acc"),
                   epochs_completed=len(log.epochs),
                   vthr=[lif.vthr for lif in net.lif_layers], tau=[lif.tau for lif in net.lif_layers],
                   mu=[lif.mp.mu for lif in net.lif_layers])
    write_json(os.path.join(out, "summary.json"), summary)
    return summary


def run_eval(cfg, out):
    net, _ = load_checkpoint(cfg.checkpoint)
    _, test_set = load_data(cfg)
    test_set = _flat(test_set, cfg)
    net = convert_for_inference(net)
    acc = evaluate(net, test_set.images, test_set.labels)
    write_csv(os.path.join(out, "metrics.csv"), [{"split": "test", "n": len(test_set), "accuracy": acc}],
              EVAL_HEADER)
    save_checkpoint(net, os.path.join(out, "checkpoint.ckpt"), cfg.to_dict())
    summary = {"mode": "eval", "status": "ok", "test_acc": acc, "checkpoint": cfg.checkpoint}
    write_json(os.path.join(out, "summary.json"), summary)
    return summary


def run_drift(cfg, out, batch_size=256):
    """Train (or load ``cfg.checkpoint``) and report per-layer membrane drift."""
    if cfg.checkpoint:
        net, _ = load_checkpoint(cfg.checkpoint)
        _, test_set = load_data(cfg)
        test_set = _flat(test_set, cfg)
    else:
        net, _, test_set = train_once(cfg)
    save_checkpoint(net, os.path.join(out, "checkpoint.ckpt"), cfg.to_dict())
    batch = test_set.images[:batch_size]
    reports = drift_report(net, batch)
    rows = [{"layer": r.layer, "t": t, "tv": tv}
            for r in reports for t, tv in zip(r.tv_timesteps, r.tv_to_reference)]
    write_csv(os.path.join(out, "metrics.csv"), rows, DRIFT_HEADER)
    assumptions = assumption_report(net, batch)
    summary = {"mode": "drift", "status": "ok",
               "tv_first_to_last": {str(r.layer): (None if r.empty else r.tv_at(1)) for r in reports},
               "assumptions": [vars(a) for a in assumptions]}
    write_json(os.path.join(out, "summary.json"), summary)
    return summary


def run_theory(cfg, out):
    th = cfg.theory
    base = theory.ChainConfig(input_dist=tuple(th.input_dist), tau=th.taus[0], vthr=th.vthrs[0],
                              reset_mode=cfg.reset, T=th.T, n_samples=th.n_samples, u0=th.u0,
                              seed=cfg.seed)
    cells = len(th.taus) * len(th.vthrs)
    rows = theory.parameter_sweep(base, th.taus, th.vthrs, workers=worker_count(cells))
    theory.write_sweep_csv(os.path.join(out, "metrics.csv"), rows)
    fits = [{"tau": k[0], "vthr": k[1], "rate": v[0], "r2": v[1]} for k, v in theory.fits_by_cell(rows).items()]
    summary = {"mode": "theory", "status": "ok", "fits": fits}
    write_json(os.path.join(out, "summary.json"), summary)
    return summary


def _stress_cell(args):
    cfg, out = args
    row = {"mode": cfg.sg.scale_mode, "vthr": cfg.init_vthr, "reset": cfg.reset}
    try:
        net, log, _ = train_once(cfg)
    except DivergenceError as err:
        last = err.log.steps[-1] if err.log.steps else {}
        row.update(status="div.", test_acc="div.", message=str(err))
        row.update({k: v for k, v in last.items() if k.startswith(("abs_str", "ratio_ag", "grad_cv"))})
        return row
    if out:
        name = f"{row['mode']}_{row['reset']}_{row['vthr']:g}.ckpt"
        save_checkpoint(net, os.path.join(out, name), cfg.to_dict())
    last = log.epochs[-1]
    row.update(status="ok", test_acc=last["test_acc"])
    row.update({k: v for k, v in last.items() if k.startswith(("abs_str", "ratio_ag", "grad_cv"))})
    return row


def stress_cells(cfg):
    """The (mode, vthr, reset) grid as a list of configurations in table order."""
    cells = []
    for reset in cfg.stress.resets:
        for mode in cfg.stress.modes:
            for v in cfg.stress.vthrs:
                cells.append(replace(cfg, sg=replace(cfg.sg, scale_mode=mode), init_vthr=float(v),
                                     reset=reset, train_vthr=False, train_tau=False))
    return cells


def stress_matrix(cfg, out=None):
    """Train every cell; diverged cells are recorded as ``"div."`` rather than raised."""
    cells = stress_cells(cfg)
    jobs = [(c, out) for c in cells]
    workers = worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_stress_cell, jobs))
    else:
        rows = [_stress_cell(j) for j in jobs]
    return rows


def run_stress(cfg, out):
    rows = stress_matrix(cfg, out)
    extra = sorted({k for r in rows for k in r} - set(STRESS_HEADER) - {"message"})
    write_csv(os.path.join(out, "metrics.csv"), rows, STRESS_HEADER + extra)
    summary = {"mode": "stress", "status": "ok", "cells": len(rows),
               "diverged": [f"{r['mode']}/{r['reset']}/{r['vthr']}" for r in rows if r["status"] == "div."]}
    write_json(os.path.join(out, "summary.json"), summary)
    return summary


RUNNERS = {"train": run_train, "eval": run_eval, "drift": run_drift, "theory": run_theory,
           "stress": run_stress}


def run(cfg, out):
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "config.json"), cfg.to_dict())
    return RUNNERS[cfg.mode](cfg, out)
