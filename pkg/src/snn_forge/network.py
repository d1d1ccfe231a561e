"""Layer stack, simulation-window forward pass and inference conversion.

Non-spiking layers see the time axis folded into the batch axis, shape
``(T*N, ...)``; this is what lets batch normalisation pool statistics over
batch and time together.  Spiking layers unfold the time axis and run the
LIF recursion step by step.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .errors import ShapeError
from .lif import LifParams, NeuronState, absorb_threshold, reparam, reparam_nodes, step
from .mpinit import MpInitState, batch_mean_active, init_window, update_running_mean
from .surrogate import SurrogateConfig


@dataclass
class ForwardContext:
    tape: Tape
    T: int
    N: int
    training: bool
    record: bool = False
    rng: np.random.Generator = None


class Layer:
    kind = "layer"
    weighted = False

    def __init__(self):
        self.index = None
        self.last = None
        self.last_io = None

    @property
    def prefix(self):
        return f"{self.index}.{self.kind}"

    def parameters(self):
        return []

    def buffers(self):
        """Named non-learnable arrays stored in checkpoints."""
        return {}

    def load_buffers(self, buffers):
        pass

    def spec(self):
        return {"kind": self.kind}

    def forward(self, x, ctx):
        raise NotImplementedError


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Layer):
    kind = "linear"
    weighted = True

    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(_uniform(rng, in_features, (in_features, out_features)))
        self.bias = Parameter(_uniform(rng, in_features, (out_features,))) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features, "bias": self.bias is not None}

    def forward(self, x, ctx):
        if x.value.ndim != 2:
            x = ad.reshape(x, (x.shape[0], -1))
        y = x @ ctx.tape.param(self.weight)
        self.last_io = (x, y)
        if self.bias is not None:
            y = y + ctx.tape.param(self.bias)
        return y


class Conv2d(Layer):
    kind = "conv2d"
    weighted = True

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_uniform(rng, fan_in, (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(_uniform(rng, fan_in, (out_channels,))) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding,
                "bias": self.bias is not None}

    def forward(self, x, ctx):
        y = ad.conv2d(x, ctx.tape.param(self.weight), stride=self.stride, padding=self.padding)
        self.last_io = (x, y)
        if self.bias is not None:
            y = y + ad.reshape(ctx.tape.param(self.bias), (1, -1, 1, 1))
        return y


class AvgPool2d(Layer):
    kind = "avgpool"

    def __init__(self, kernel_size=2):
        super().__init__()
        self.kernel_size = kernel_size

    def spec(self):
        return {"kind": self.kind, "kernel_size": self.kernel_size}

    def forward(self, x, ctx):
        return ad.avgpool2d(x, self.kernel_size)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, ctx):
        return ad.reshape(x, (x.shape[0], -1))


class Dropout(Layer):
    """Inverted dropout; one mask per sample, shared by every timestep."""

    kind = "dropout"

    def __init__(self, p=0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p

    def spec(self):
        return {"kind": self.kind, "p": self.p}

    def forward(self, x, ctx):
        if not ctx.training or self.p == 0.0:
            return x
        rng = ctx.rng or np.random.default_rng()
        keep = rng.random((ctx.N,) + x.shape[1:]) >= self.p
        mask = np.tile(keep, (ctx.T,) + (1,) * (x.value.ndim - 1)) / (1.0 - self.p)
        return x * mask.astype(x.value.dtype)


class BatchNormFoldTime(Layer):
    """Per-channel batch norm over (time x batch x spatial) positions."""

    kind = "batchnorm_fold_time"

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.num_features, self.eps, self.momentum = num_features, eps, momentum
        self.weight = Parameter(np.ones(num_features))
        self.bias = Parameter(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def parameters(self):
        return [self.weight, self.bias]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, buffers):
        self.running_mean = np.array(buffers["running_mean"])
        self.running_var = np.array(buffers["running_var"])

    def spec(self):
        return {"kind": self.kind, "num_features": self.num_features, "eps": self.eps,
                "momentum": self.momentum}

    def forward(self, x, ctx):
        tape = ctx.tape
        gamma, beta = tape.param(self.weight), tape.param(self.bias)
        if x.shape[1] != self.num_features:
            raise ShapeError(f"batchnorm expects {self.num_features} channels, got shape {x.shape}")
        if ctx.training:
            y = ad.batchnorm(x, gamma, beta, eps=self.eps)
            n = y.ctx["count"]
            unbiased = y.ctx["var"] * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * y.ctx["mean"]
            self.running_var = (1 - m) * self.running_var + m * unbiased
            return y
        shape = (1, -1) + (1,) * (x.value.ndim - 2)
        scale = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(shape)
        xhat = (x - self.running_mean.reshape(shape).astype(x.value.dtype)) * scale.astype(x.value.dtype)
        return xhat * ad.reshape(gamma, shape) + ad.reshape(beta, shape)


@dataclass
class LifRecord:
    """Per-window traces of one spiking layer (values, not nodes)."""

    M: list = field(default_factory=list)
    U: list = field(default_factory=list)
    S: list = field(default_factory=list)
    I: list = field(default_factory=list)
    x: list = field(default_factory=list)
    U0: np.ndarray = None
    active_mask: np.ndarray = None
    spike_nodes: list = field(default_factory=list)


class LIF(Layer):
    kind = "lif"

    def __init__(self, params=None, sg=None, mp=None):
        super().__init__()
        self.params = params or LifParams()
        self.sg = sg or SurrogateConfig()
        self.mp = mp or MpInitState()
        self.w_raw = Parameter(self.params.w_raw, requires_grad=self.params.train_tau)
        self.k_raw = Parameter(self.params.k_raw, requires_grad=self.params.train_vthr)
        self.scale_output = True
        self.last = None

    def parameters(self):
        return [self.w_raw, self.k_raw]

    @property
    def tau(self):
        return self._current_params().tau

    @property
    def vthr(self):
        return self._current_params().vthr

    def _current_params(self):
        p = copy.copy(self.params)
        p.w_raw, p.k_raw = float(self.w_raw.data), float(self.k_raw.data)
        return p

    def buffers(self):
        return {"mu": np.array(self.mp.mu)}

    def load_buffers(self, buffers):
        self.mp.mu = float(buffers["mu"])

    def spec(self):
        p = self.params
        return {"kind": self.kind, "reset_mode": p.reset_mode, "train_tau": p.train_tau,
                "train_vthr": p.train_vthr, "sg_shape": self.sg.shape, "sg_mode": self.sg.scale_mode,
                "gamma": self.sg.gamma, "scale_output": self.scale_output,
                "mp": {k: v for k, v in self.mp.to_dict().items() if k != "mu"}}

    def forward(self, x, ctx):
        tape, T, N = ctx.tape, ctx.T, ctx.N
        feat = x.shape[1:]
        dtype = x.value.dtype
        inv_tau, vthr = reparam_nodes(tape, self.w_raw, self.k_raw)
        if not self.params.train_tau:
            inv_tau = 1.0 / reparam(self._current_params())[0]
        xs = ad.reshape(x, (T, N) + feat)
        U0 = init_window(self.mp, (N,) + feat, dtype=dtype)
        state = NeuronState.initial(U0)
        state.U = tape.constant(U0)
        rec = LifRecord(U0=U0)
        outs = []
        params = self._current_params()
        for t in range(T):
            I_t = ad.index(xs, t)
            state, O = step(state, I_t, params, self.sg, inv_tau=inv_tau, vthr=vthr,
                            scale_output=self.scale_output, layer=self.index, t=t + 1)
            outs.append(O)
            rec.spike_nodes.append(state.S)
            rec.x.append(state.S.ctx["saved"]["x"])
            if ctx.record:
                rec.M.append(state.M.value)
                rec.U.append(state.U.value)
                rec.S.append(state.S.value)
                rec.I.append(I_t.value)
        rec.active_mask = state.active_mask
        self.last = rec
        if ctx.training and self.mp.enabled and not self.mp.frozen:
            update_running_mean(self.mp, batch_mean_active(state.U.value, state.active_mask))
        return ad.reshape(ad.stack(outs), (T * N,) + feat)


LAYER_TYPES = {cls.kind: cls for cls in (Linear, Conv2d, AvgPool2d, Flatten, Dropout, BatchNormFoldTime, LIF)}


@dataclass
class ForwardPass:
    tape: Tape
    logits: object  # Node of shape (T, N, classes)
    records: list   # LifRecord per spiking layer, in order


class Network:
    """Sequential spiking network run over a simulation window of length ``T``."""

    def __init__(self, layers, timesteps=4, dtype=np.float64, seed=0):
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            layer.index = i
        self.timesteps = timesteps
        self.dtype = np.dtype(dtype)
        self.training = True
        self.rng = np.random.default_rng(seed)
        self.astype(self.dtype)

    # bookkeeping --------------------------------------------------------
    def named_parameters(self):
        out = {}
        for layer in self.layers:
            for p in layer.parameters():
                suffix = {id(getattr(layer, a, None)): a for a in ("weight", "bias", "w_raw", "k_raw")}[id(p)]
                p.name = f"{layer.prefix}.{suffix}"
                out[p.name] = p
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self):
        return {f"{layer.prefix}.{k}": v for layer in self.layers for k, v in layer.buffers().items()}

    @property
    def lif_layers(self):
        return [layer for layer in self.layers if isinstance(layer, LIF)]

    def monitored_layers(self):
        """(weighted layer, following LIF) pairs used for gradient reports."""
        pairs, last_weighted = [], None
        for layer in self.layers:
            if layer.weighted:
                last_weighted = layer
            elif isinstance(layer, LIF) and last_weighted is not None:
                pairs.append((last_weighted, layer))
        return pairs

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for p in self.parameters():
            p.astype(self.dtype)
        return self

    def clear_traces(self):
        """Drop references to the last tape so copies and checkpoints stay small."""
        for layer in self.layers:
            layer.last = None
            layer.last_io = None

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    # forward --------------------------------------------------------------
    def encode(self, x):
        """Static images ``(N, ...)`` are replicated ``T`` times; sequences pass through."""
        x = np.asarray(x, dtype=self.dtype)
        return np.broadcast_to(x, (self.timesteps,) + x.shape)

    def forward_window(self, inputs, record=False, static=True, requires_grad=True):
        """Run one window.  ``inputs`` is ``(N, ...)`` if ``static`` else ``(T, N, ...)``."""
        seq = self.encode(inputs) if static else np.asarray(inputs, dtype=self.dtype)
        if seq.shape[0] != self.timesteps:
            raise ShapeError(f"input has {seq.shape[0]} timesteps, network expects {self.timesteps}")
        T, N = seq.shape[:2]
        tape = Tape(self.dtype)
        if not requires_grad:
            for p in self.parameters():
                tape.param(p).requires_grad = False
        ctx = ForwardContext(tape, T, N, self.training, record, self.rng)
        h = tape.constant(seq.reshape((T * N,) + seq.shape[2:]))
        for layer in self.layers:
            h = layer.forward(h, ctx)
        logits = ad.reshape(h, (T, N, -1))
        return ForwardPass(tape, logits, [layer.last for layer in self.lif_layers])

    def predict(self, inputs, static=True):
        fp = self.forward_window(inputs, static=static, requires_grad=False)
        out = fp.logits.value.mean(axis=0)
        fp.tape.release()
        return out


# --- builders ----------------------------------------------------------------

def _lif_kwargs(tau, vthr, reset, sg, mpinit, beta, train_tau, train_vthr):
    return dict(
        params=LifParams.from_values(tau=tau, vthr=vthr, reset_mode=reset, train_tau=train_tau,
                                     train_vthr=train_vthr),
        sg=sg, mp=MpInitState(beta=beta, enabled=mpinit))


def small_net(in_shape=(1, 8, 8), num_classes=10, *, tau=2.0, vthr=1.0, reset="soft", sg=None,
              mpinit=True, beta=0.9, train_tau=False, train_vthr=False, dropout=0.0,
              batchnorm=True, timesteps=4, dtype=np.float64, seed=0):
    """16C3-AP2-32C3-AP2-128FC-10FC with a LIF after each hidden weight layer.

    With ``batchnorm`` each hidden weight layer is followed by time-folded
    batch norm before its LIF.
    """
    sg = sg or SurrogateConfig()
    rng = np.random.default_rng(seed)
    c, h, w = in_shape
    lk = _lif_kwargs(tau, vthr, reset, sg, mpinit, beta, train_tau, train_vthr)

    def block(n):
        return ([BatchNormFoldTime(n)] if batchnorm else []) + [LIF(**copy.deepcopy(lk))]

    layers = [Conv2d(c, 16, rng=rng), *block(16), AvgPool2d(2),
              Conv2d(16, 32, rng=rng), *block(32), AvgPool2d(2), Flatten()]
    flat = 32 * (h // 4) * (w // 4)
    if dropout:
        layers.append(Dropout(dropout))
    layers += [Linear(flat, 128, rng=rng), *block(128)]
    if dropout:
        layers.append(Dropout(dropout))
    layers.append(Linear(128, num_classes, rng=rng))
    return Network(layers, timesteps=timesteps, dtype=dtype, seed=seed)


def mlp_net(sizes, *, tau=2.0, vthr=1.0, reset="soft", sg=None, mpinit=True, beta=0.9,
            train_tau=False, train_vthr=False, batchnorm=False, timesteps=4, dtype=np.float64,
            seed=0, weight_scale=1.0):
    """Fully connected spiking net ``sizes[0] -> ... -> sizes[-1]``; no LIF on the output."""
    sg = sg or SurrogateConfig()
    rng = np.random.default_rng(seed)
    lk = _lif_kwargs(tau, vthr, reset, sg, mpinit, beta, train_tau, train_vthr)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lin = Linear(a, b, rng=rng)
        lin.weight.data *= weight_scale
        layers.append(lin)
        if i < len(sizes) - 2:
            if batchnorm:
                layers.append(BatchNormFoldTime(b))
            layers.append(LIF(**copy.deepcopy(lk)))
    return Network(layers, timesteps=timesteps, dtype=dtype, seed=seed)


def build_network(layer_specs, timesteps, dtype=np.float64, seed=0):
    """Rebuild a network from ``Layer.spec()`` dictionaries (weights left random)."""
    layers = []
    for spec in layer_specs:
        spec = dict(spec)
        kind = spec.pop("kind")
        if kind == "lif":
            layer = LIF(LifParams(reset_mode=spec["reset_mode"], train_tau=spec["train_tau"],
                                  train_vthr=spec["train_vthr"]),
                        SurrogateConfig(spec["sg_shape"], spec["sg_mode"], spec["gamma"]),
                        MpInitState(**spec["mp"]))
            layer.scale_output = spec["scale_output"]
        elif kind in ("flatten",):
            layer = Flatten()
        else:
            try:
                layer = LAYER_TYPES[kind](**spec)
            except KeyError:
                raise ValueError(f"unknown layer kind {kind!r}") from None
        layers.append(layer)
    return Network(layers, timesteps=timesteps, dtype=dtype, seed=seed)


# --- inference conversion ------------------------------------------------------

class ConversionError(ValueError):
    pass


def convert_for_inference(net):
    """Copy of ``net`` with TrSG thresholds folded into the next weights.

    The copy emits binary spikes only, has frozen MP-Init and batch-norm
    statistics, and is in eval mode.
    """
    net.clear_traces()
    out = copy.deepcopy(net)
    layers = out.layers
    for i, layer in enumerate(layers):
        if not isinstance(layer, LIF):
            continue
        layer.mp.frozen = True
        if layer.sg.scale_mode != "TrSG" or not layer.scale_output:
            continue
        target = None
        for nxt in layers[i + 1:]:
            if nxt.weighted:
                target = nxt
                break
            if isinstance(nxt, (LIF, BatchNormFoldTime)):
                break
        if target is None:
            raise ConversionError(f"spiking layer {i} has no following weight layer to absorb its threshold")
        target.weight.data = absorb_threshold(target.weight.data, layer.vthr).astype(target.weight.data.dtype)
        layer.scale_output = False
    return out.eval()
