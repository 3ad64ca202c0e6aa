"""Linear / LoRA layers and the two desk-scale architectures."""
from __future__ import annotations

import contextlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .rng import RngStream
from .tensor import Tensor

ARCHITECTURES = ("mlp", "tiny_transformer")
INITS = ("kaiming_uniform", "kaiming_normal")


def _kaiming(stream, shape, fan_in, kind):
    count = int(np.prod(shape))
    if kind == "kaiming_uniform":
        bound = math.sqrt(6.0 / fan_in)
        vals = stream.uniform(count, -bound, bound)
    elif kind == "kaiming_normal":
        vals = stream.normal(count) * math.sqrt(2.0 / fan_in)
    else:
        raise ConfigError("unknown init", [kind])
    return vals.reshape(shape)


class Linear:
    """y = x Wᵀ + b with W of shape (out, in); rows of W are the filters."""

    adapted = False

    def __init__(self, name, weight, bias=None, train_base=False):
        self.name = name
        self.weight = Tensor(weight, requires_grad=train_base, name=f"{name}.weight")
        self.bias = None
        if bias is not None:
            self.bias = Tensor(bias, requires_grad=train_base, name=f"{name}.bias")
        self.capture = False
        self._captured = None

    @property
    def out_features(self):
        return self.weight.shape[0]

    @property
    def in_features(self):
        return self.weight.shape[1]

    def params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def _pre_bias(self, x2):
        w = self.weight
        if w.delta is not None:
            w = T.add(w, Tensor(w.delta))
        return T.matmul(x2, T.transpose(w))

    def __call__(self, x):
        x = T._as_tensor(x)
        n = self.in_features
        if x.shape[-1] != n:
            raise DimensionError(f"{self.name}: expected last dim {n}, got {x.shape}")
        lead = x.shape[:-1]
        x2 = x if x.data.ndim == 2 else T.reshape(x, (-1, n))
        h = self._pre_bias(x2)
        if self.capture:
            self._captured = (x2.data, h.retain_grad())
        if self.bias is not None:
            b = self.bias
            if b.delta is not None:
                b = T.add(b, Tensor(b.delta))
            h = T.add_bias(h, b)
        if x.data.ndim != 2:
            h = T.reshape(h, lead + (self.out_features,))
        return h

    def merged_weight(self):
        return self.weight.data.copy()

    def merged_grad(self):
        """Gradient of the last captured loss w.r.t. the merged weight W′."""
        if self._captured is None or self._captured[1].grad is None:
            raise ContractError(f"{self.name}: no captured forward/backward")
        x2, h = self._captured
        return h.grad.T @ x2


class LoRALayer(Linear):
    """Frozen base weight W plus trainable factors: h = W x + s·B(A x)."""

    adapted = True

    def __init__(self, name, weight, A, B, alpha, bias=None, train_base=False):
        super().__init__(name, weight, bias, train_base=train_base)
        m, n = self.weight.shape
        r = A.shape[0]
        if not 1 <= r <= min(m, n):
            raise ContractError(f"{name}: rank {r} outside [1, {min(m, n)}]")
        if A.shape != (r, n) or B.shape != (m, r):
            raise DimensionError(f"{name}: A {A.shape} / B {B.shape} inconsistent with W {(m, n)}")
        self.A = Tensor(A, requires_grad=True, name=f"{name}.A")
        self.B = Tensor(B, requires_grad=True, name=f"{name}.B")
        self.alpha = float(alpha)
        self.rank = r

    @property
    def scaling(self):
        return self.alpha / self.rank

    def params(self):
        return super().params() + [("A", self.A), ("B", self.B)]

    def _pre_bias(self, x2):
        h = super()._pre_bias(x2)
        a, b = self.A, self.B
        if a.delta is not None:
            a = T.add(a, Tensor(a.delta))
        if b.delta is not None:
            b = T.add(b, Tensor(b.delta))
        low = T.matmul(T.matmul(x2, T.transpose(a)), T.transpose(b))
        return T.add(h, T.scale(low, self.scaling))

    def merged_weight(self):
        return merge_weights(self)


def lora_init(m, n, r, alpha, stream, W=None, init="kaiming_uniform", name="lora", bias=None):
    """LoRA layer with A ~ Kaiming(fan_in=n), B = 0 and frozen W."""
    if not 1 <= r <= min(m, n):
        raise ContractError(f"rank {r} outside [1, {min(m, n)}]")
    if W is None:
        W = _kaiming(stream.child("W"), (m, n), n, "kaiming_uniform")
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (m, n):
        raise DimensionError(f"W has shape {W.shape}, expected {(m, n)}")
    A = _kaiming(stream.child("A"), (r, n), n, init)
    return LoRALayer(name, W, A, np.zeros((m, r)), alpha, bias=bias)


def lora_forward(layer, x):
    return layer(x)


def merge_weights(layer):
    """W′ = W + s·B·A as a fresh array; the layer is not modified."""
    if not layer.adapted:
        return layer.weight.data.copy()
    return layer.weight.data + layer.scaling * (layer.B.data @ layer.A.data)


class LayerNorm:
    def __init__(self, name, n, trainable=False):
        self.name = name
        self.gain = Tensor(np.ones(n), requires_grad=trainable, name=f"{name}.gain")
        self.bias = Tensor(np.zeros(n), requires_grad=trainable, name=f"{name}.bias")

    def params(self):
        return [("gain", self.gain), ("bias", self.bias)]

    def __call__(self, x):
        g, b = self.gain, self.bias
        if g.delta is not None:
            g = T.add(g, Tensor(g.delta))
        if b.delta is not None:
            b = T.add(b, Tensor(b.delta))
        return T.layernorm(x, g, b)


# ---------------------------------------------------------------- spec + models

@dataclass
class ModelSpec:
    architecture: str = "mlp"
    widths: list = field(default_factory=lambda: [2, 64, 64, 2])
    vocab_size: int = 8
    seq_len: int = 16
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    n_classes: int = 2
    lora_targets: object = "all"
    rank: int = 4
    alpha: float = 8.0
    init: str = "kaiming_uniform"
    adapters: bool = True
    train_base: bool = False
    train_head: bool = False
    train_norms: bool = False

    def validate(self):
        bad = []
        if self.architecture not in ARCHITECTURES:
            bad.append("architecture")
        if self.architecture == "mlp" and (len(self.widths) < 2 or min(self.widths) < 1):
            bad.append("widths")
        if self.architecture == "tiny_transformer":
            if self.d_model % max(self.n_heads, 1) or self.n_heads < 1:
                bad.append("n_heads")
            for k in ("vocab_size", "seq_len", "d_model", "d_ff", "n_classes"):
                if getattr(self, k) < 1:
                    bad.append(k)
        if self.rank < 1:
            bad.append("rank")
        if self.alpha <= 0:
            bad.append("alpha")
        if self.init not in INITS:
            bad.append("init")
        if self.adapters and not (self.lora_targets == "all" or
                                  (isinstance(self.lora_targets, list) and self.lora_targets)):
            bad.append("lora_targets")
        if bad:
            raise ConfigError("invalid model spec", bad)
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("unknown model fields", unknown)
        return cls(**d)


class Model:
    """Ordered collection of modules with a shared parameter registry."""

    def __init__(self, spec):
        self.spec = spec
        self.modules = {}
        self.extra = {}  # name -> Tensor for embeddings etc.

    def params(self):
        out = {}
        for mname, mod in self.modules.items():
            for pname, p in mod.params():
                out[f"{mname}.{pname}"] = p
        for name, p in self.extra.items():
            out[name] = p
        return out

    def trainable(self):
        return {k: p for k, p in self.params().items() if p.requires_grad}

    def frozen(self):
        return {k: p for k, p in self.params().items() if not p.requires_grad}

    def linear_layers(self):
        return [m for m in self.modules.values() if isinstance(m, Linear)]

    def lora_layers(self):
        return [m for m in self.linear_layers() if m.adapted]

    def layer(self, name):
        return self.modules[name]

    def zero_grad(self):
        for p in self.params().values():
            p.grad = None

    def n_params(self, trainable_only=False):
        ps = self.trainable() if trainable_only else self.params()
        return int(sum(p.size for p in ps.values()))

    def loss(self, x, y):
        return T.softmax_cross_entropy(self.forward(x), y)

    @contextlib.contextmanager
    def capture(self):
        """Record each linear layer's input and pre-bias output for merged-weight grads."""
        layers = self.linear_layers()
        for l in layers:
            l.capture = True
        try:
            yield layers
        finally:
            for l in layers:
                l.capture = False

    def clear_capture(self):
        for l in self.linear_layers():
            l._captured = None

    # landscape probe interface ------------------------------------------
    def probe_weights(self):
        return {l.name: l.merged_weight() for l in self.linear_layers()}

    def probe_loss(self, data, offsets=None):
        x, y = data
        layers = {l.name: l for l in self.linear_layers()}
        offsets = offsets or {}
        try:
            for name, off in offsets.items():
                layers[name].weight.delta = off
            with T.no_grad():
                return self.loss(x, y).item()
        finally:
            for name in offsets:
                layers[name].weight.delta = None

    def state_arrays(self):
        return {k: p.data.copy() for k, p in self.params().items()}


def _targeted(spec, name):
    if not spec.adapters:
        return False
    return spec.lora_targets == "all" or name in spec.lora_targets


def _make_linear(spec, name, m, n, stream, is_head=False):
    W = _kaiming(stream.child(name, "W"), (m, n), n, "kaiming_uniform")
    bound = 1.0 / math.sqrt(n)
    b = stream.child(name, "b").uniform(m, -bound, bound)
    train_base = spec.train_base or (is_head and spec.train_head)
    if _targeted(spec, name):
        r = min(spec.rank, m, n)
        A = _kaiming(stream.child(name, "A"), (r, n), n, spec.init)
        alpha = spec.alpha * r / spec.rank  # keep s = alpha/rank when the rank is clipped
        return LoRALayer(name, W, A, np.zeros((m, r)), alpha, bias=b, train_base=train_base)
    return Linear(name, W, b, train_base=train_base)


class MLP(Model):
    def __init__(self, spec, stream):
        super().__init__(spec)
        w = spec.widths
        k = len(w) - 1
        for i in range(k):
            name = "head" if i == k - 1 else f"fc{i}"
            self.modules[name] = _make_linear(spec, name, w[i + 1], w[i], stream, is_head=(i == k - 1))

    def forward(self, x):
        h = T._as_tensor(x)
        mods = list(self.modules.values())
        for i, mod in enumerate(mods):
            h = mod(h)
            if i < len(mods) - 1:
                h = T.relu(h)
        return h


class TinyTransformer(Model):
    """One pre-norm encoder block, learned positions, mean-pooled classifier."""

    def __init__(self, spec, stream):
        super().__init__(spec)
        d, V, L = spec.d_model, spec.vocab_size, spec.seq_len
        tn = spec.train_norms or spec.train_base
        self.extra["tok_emb"] = Tensor(stream.child("tok_emb").normal(V * d).reshape(V, d) * 0.5,
                                       requires_grad=spec.train_base, name="tok_emb")
        self.extra["pos_emb"] = Tensor(stream.child("pos_emb").normal(L * d).reshape(L, d) * 0.5,
                                       requires_grad=spec.train_base, name="pos_emb")
        self.modules["ln1"] = LayerNorm("ln1", d, tn)
        for nm in ("attn.q", "attn.k", "attn.v", "attn.o"):
            self.modules[nm] = _make_linear(spec, nm, d, d, stream)
        self.modules["ln2"] = LayerNorm("ln2", d, tn)
        self.modules["mlp.fc1"] = _make_linear(spec, "mlp.fc1", spec.d_ff, d, stream)
        self.modules["mlp.fc2"] = _make_linear(spec, "mlp.fc2", d, spec.d_ff, stream)
        self.modules["ln_f"] = LayerNorm("ln_f", d, tn)
        self.modules["head"] = _make_linear(spec, "head", spec.n_classes, d, stream, is_head=True)

    def _emb(self, key, idx):
        t = self.extra[key]
        if t.delta is not None:
            t = T.add(t, Tensor(t.delta))
        return T.embedding(t, idx)

    def forward(self, x):
        idx = np.asarray(x, dtype=np.int64)
        if idx.ndim != 2 or idx.shape[1] != self.spec.seq_len:
            raise DimensionError(f"expected token batch (b, {self.spec.seq_len}), got {idx.shape}")
        b, L = idx.shape
        H = self.spec.n_heads
        d = self.spec.d_model
        dh = d // H
        m = self.modules
        pos = np.broadcast_to(np.arange(L), (b, L))
        h = T.add(self._emb("tok_emb", idx), self._emb("pos_emb", pos))

        a = m["ln1"](h)

        def heads(t):
            return T.transpose(T.reshape(t, (b, L, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(m["attn.q"](a)), heads(m["attn.k"](a)), heads(m["attn.v"](a))
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)))
        ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, L, d))
        h = T.add(h, m["attn.o"](ctx))
        f = m["mlp.fc2"](T.gelu(m["mlp.fc1"](m["ln2"](h))))
        h = T.add(h, f)
        pooled = T.mean(m["ln_f"](h), axis=1)
        return m["head"](pooled)


def build_model(spec, stream):
    """Deterministically initialised model for ``spec`` drawn from ``stream``."""
    spec.validate()
    if spec.architecture == "mlp":
        model = MLP(spec, stream)
    else:
        model = TinyTransformer(spec, stream)
    if spec.adapters and isinstance(spec.lora_targets, list):
        names = {l.name for l in model.linear_layers()}
        missing = sorted(set(spec.lora_targets) - names)
        if missing:
            raise ConfigError("lora_targets name unknown layers", missing)
    return model


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, header=None):
    """npz archive: one f64 array per parameter plus a JSON header entry."""
    head = {"model_spec": model.spec.to_dict()}
    head.update(header or {})
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(head, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    return header, params


def load_checkpoint(path):
    header, params = read_checkpoint(path)
    spec = ModelSpec.from_dict(header["model_spec"])
    model = build_model(spec, RngStream(int(header.get("seed", 0))))
    own = model.params()
    if set(own) != set(params):
        raise ConfigError("checkpoint parameters do not match model", sorted(set(own) ^ set(params)))
    for k, p in own.items():
        if p.shape != params[k].shape:
            raise DimensionError(f"{k}: checkpoint shape {params[k].shape} vs model {p.shape}")
        p.data = params[k]
    return model, header
