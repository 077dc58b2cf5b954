"""End-to-end model assembly, training, and evaluation.

Pipeline per batch: a per-modality 1x1-conv + tanh frame encoder maps raw
(B, d_f, T, h, w) volumes to width-d features; a content vector per
modality is produced by the configured provider (attention-based, pooled
cross-concat, or the modality's own pooled summary); spatial pooling
yields the per-frame sequence each recurrent cell consumes together with
its content vector; the per-timestep hidden states of all modalities
either drive the feature bank (read once at the end) or are concatenated
at the last step; a linear head + softmax closes the graph.

Stream probes are linear classifiers on each modality's final hidden
state, trained with the trunk frozen; they measure how much label
information a single stream carries.
"""

from dataclasses import dataclass, field

import numpy as np

from . import bank as bank_mod
from . import cfem as cfem_mod
from . import mcu as mcu_mod
from . import checkpoint as ckpt_mod
from . import tensor as T
from .init import xavier_uniform, zeros
from .optim import Adam
from .synthdata import EpisodeBatch
from .util import ConfigError, NumericError, derive_seed, make_rng

CONTENT_MODES = ("cfem", "cross-concat", "self")
FUSION_MODES = ("bank", "concat")


@dataclass
class ModelConfig:
    n_modalities: int = 2
    seq_len: int = 16
    feat_channels: int = 8
    hidden_dim: int = 512
    grid_h: int = 2
    grid_w: int = 2
    bank_size: int = 8
    n_classes: int = 2
    heads: int = 4
    content_mode: str = "cfem"
    fusion_mode: str = "bank"
    precision: str = "float32"
    seed: int = 0

    # attention keys get the positional embedding; this mirrors it onto
    # the values as well (experimental, off by default)
    pos_on_values: bool = False

    def validate(self):
        if self.n_modalities < 1:
            raise ConfigError("n_modalities must be >= 1")
        if self.content_mode not in CONTENT_MODES:
            raise ConfigError(f"unknown content_mode {self.content_mode!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.n_modalities == 1 and self.content_mode != "self":
            raise ConfigError(
                f"content_mode {self.content_mode!r} requires n_modalities "
                f">= 2; single-modality models must use 'self'"
            )
        if self.fusion_mode == "bank" and self.hidden_dim % self.n_modalities:
            raise ConfigError(
                f"hidden_dim must be divisible by n_modalities for bank "
                f"fusion: {self.hidden_dim} % {self.n_modalities} != 0"
            )
        if self.hidden_dim % self.heads:
            raise ConfigError(
                f"hidden_dim must be divisible by heads: "
                f"{self.hidden_dim} % {self.heads} != 0"
            )
        if self.content_mode == "cfem" and self.seq_len < cfem_mod.min_seq_len():
            raise ConfigError(
                f"seq_len must be >= {cfem_mod.min_seq_len()} for the "
                f"temporal content encoder, got {self.seq_len}"
            )
        if min(self.seq_len, self.feat_channels, self.grid_h, self.grid_w,
               self.n_classes, self.bank_size, self.heads) < 1:
            raise ConfigError("all size fields must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        return self

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def content_dim(self):
        if self.content_mode == "cross-concat":
            return self.hidden_dim * max(self.n_modalities - 1, 1)
        return self.hidden_dim


@dataclass
class ForwardTrace:
    content: list                 # per modality: (B, d_g) tensors
    hidden: list                  # per modality: list over t of (B, d) tensors
    bank_states: list | None
    logits: T.Tensor              # (B, C)
    probs: np.ndarray             # (B, C), rows sum to 1
    stream_probs: list | None = None
    attention: list | None = None


class MMixer:
    """Holds every parameter group and runs the forward graph."""

    def __init__(self, config):
        self.config = config.validate()
        c = config
        dt = c.dtype
        rng = make_rng(derive_seed(c.seed, "init"))

        self.enc_w, self.enc_b = [], []
        for i in range(c.n_modalities):
            self.enc_w.append(xavier_uniform(rng, c.feat_channels, c.hidden_dim,
                                             dt, name=f"enc.{i}.weight"))
            self.enc_b.append(zeros(c.hidden_dim, dt, name=f"enc.{i}.bias"))

        self.mcus = [
            mcu_mod.MCUParams(rng, c.hidden_dim, c.content_dim, dt,
                              prefix=f"mcu.{i}")
            for i in range(c.n_modalities)
        ]

        self.cfem = None
        if c.content_mode == "cfem":
            self.cfem = cfem_mod.CFEMParams(rng, c.hidden_dim, c.n_modalities,
                                            c.grid_h, c.grid_w, c.heads, dt)

        self.bank = None
        if c.fusion_mode == "bank":
            self.bank = bank_mod.BankParams(rng, c.hidden_dim, c.n_modalities,
                                            c.bank_size, dt)

        head_in = (c.hidden_dim if c.fusion_mode == "bank"
                   else c.hidden_dim * c.n_modalities)
        self.head_w = xavier_uniform(rng, head_in, c.n_classes, dt, name="head.W_p")
        self.head_b = zeros(c.n_classes, dt, name="head.b_p")

        # frozen-trunk stream probes, one linear map per modality, no bias
        self.probes = [
            xavier_uniform(rng, c.hidden_dim, c.n_classes, dt, name=f"probe.{i}.W_p")
            for i in range(c.n_modalities)
        ]

    # -- parameter plumbing ------------------------------------------------

    def named_parameters(self, include_probes=True):
        out = []
        for i in range(self.config.n_modalities):
            out += [self.enc_w[i], self.enc_b[i]]
        for m in self.mcus:
            out += m.tensors()
        if self.cfem is not None:
            out += self.cfem.tensors()
        if self.bank is not None:
            out += self.bank.tensors()
        out += [self.head_w, self.head_b]
        if include_probes:
            out += self.probes
        return [(p.name, p) for p in out]

    def parameters(self, include_probes=False):
        return [p for _, p in self.named_parameters(include_probes)]

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    # -- forward -----------------------------------------------------------

    def encode_frames(self, inputs):
        """Per-modality toy frame encoder: 1x1 channel map + tanh."""
        return [
            T.tanh(T.conv1x1(x, self.enc_w[i], self.enc_b[i]))
            for i, x in enumerate(inputs)
        ]

    def content_vectors(self, encoded):
        mode = self.config.content_mode
        if mode == "cfem":
            return cfem_mod.cfem_forward(
                encoded, self.cfem, pos_on_values=self.config.pos_on_values
            )
        return [cfem_mod.self_content(encoded, i, mode)
                for i in range(len(encoded))], None

    def forward(self, inputs, collect_bank=False):
        """Run the graph on per-modality input tensors -> ForwardTrace."""
        c = self.config
        if len(inputs) != c.n_modalities:
            raise ConfigError(
                f"model built for {c.n_modalities} modalities, got {len(inputs)}"
            )
        encoded = self.encode_frames(inputs)
        contents, attn = self.content_vectors(encoded)
        hidden = []
        for i, feat in enumerate(encoded):
            f_seq = spatial_pool(feat)
            hidden.append(mcu_mod.mcu_run(f_seq, contents[i], self.mcus[i]))

        bank_states = None
        if c.fusion_mode == "bank":
            seqs = [T.stack(h_list, axis=1) for h_list in hidden]
            fused, states = bank_mod.run_bank_sequences(seqs, self.bank,
                                                        return_states=True)
            if collect_bank:
                bank_states = states
        else:
            last = [h[-1] for h in hidden]
            fused = last[0] if len(last) == 1 else T.concat(last, axis=1)

        logits = T.add(fused @ self.head_w, self.head_b)
        probs = _softmax_rows(logits.data)
        return ForwardTrace(content=contents, hidden=hidden,
                            bank_states=bank_states, logits=logits,
                            probs=probs, attention=attn)

    def forward_batch(self, batch, collect_bank=False):
        return self.forward(self.batch_tensors(batch), collect_bank=collect_bank)

    def batch_tensors(self, batch):
        dt = self.config.dtype
        return [T.Tensor(m.astype(dt, copy=False)) for m in batch.modalities]

    def loss(self, trace, labels):
        """Mean cross-entropy of the trace's logits against integer labels."""
        loss, _ = T.softmax_cross_entropy(trace.logits, labels)
        return loss

    def per_stream_heads(self, trace, labels):
        """Frozen-trunk per-stream classifier losses.

        Returns (joint loss, per-stream prob arrays). The final hidden
        states are detached, so backward through the joint loss reaches
        only the probe weights, never the trunk.
        """
        total = None
        probs = []
        for i, h_list in enumerate(trace.hidden):
            logits = h_list[-1].detach() @ self.probes[i]
            li, pi = T.softmax_cross_entropy(logits, labels)
            probs.append(pi)
            total = li if total is None else T.add(total, li)
        trace.stream_probs = probs
        return total, probs

    # -- persistence ---------------------------------------------------------

    def save(self, path, optimizer=None):
        named = self.named_parameters()
        state = None
        if optimizer is not None:
            # moments are stored in manifest order; parameters outside the
            # optimizer (the probes) carry fresh zero moments
            slot = {id(p): i for i, p in enumerate(optimizer.params)}
            m, v = [], []
            for _, p in named:
                i = slot.get(id(p))
                m.append(optimizer.m[i] if i is not None else np.zeros_like(p.data))
                v.append(optimizer.v[i] if i is not None else np.zeros_like(p.data))
            state = (optimizer.t, m, v)
        ckpt_mod.save(path, [(n, p.data) for n, p in named],
                      self.config.precision, optimizer_state=state)

    def load(self, path, optimizer=None):
        ckpt = ckpt_mod.load(path)
        if ckpt.precision != self.config.precision:
            raise ckpt_mod.CheckpointError(
                f"checkpoint precision {ckpt.precision} != model precision "
                f"{self.config.precision}"
            )
        named = self.named_parameters()
        for name, p in named:
            if name not in ckpt.params:
                raise ckpt_mod.CheckpointError(
                    f"checkpoint is missing tensor {name!r}"
                )
            arr = ckpt.params[name]
            if arr.shape != p.data.shape:
                raise ckpt_mod.CheckpointError(
                    f"tensor {name!r}: checkpoint shape {arr.shape} != model "
                    f"shape {p.data.shape}"
                )
        extra = set(ckpt.params) - {n for n, _ in named}
        if extra:
            raise ckpt_mod.CheckpointError(
                f"checkpoint holds unknown tensor {sorted(extra)[0]!r}"
            )
        for name, p in named:
            p.data = ckpt.params[name].astype(self.config.dtype, copy=False)
        if optimizer is not None and ckpt.opt_step is not None:
            slot = {id(p): i for i, p in enumerate(optimizer.params)}
            m = [np.array(x) for x in optimizer.m]
            v = [np.array(x) for x in optimizer.v]
            for (_, p), mm, vv in zip(named, ckpt.opt_m, ckpt.opt_v):
                i = slot.get(id(p))
                if i is not None:
                    m[i], v[i] = mm, vv
            optimizer.load_state(ckpt.opt_step, m, v)
        return ckpt


def spatial_pool(feat):
    """(B, d, T, h, w) -> (B, d, T): mean over the spatial grid."""
    return T.mean_pool(feat, axes=(3, 4))


def _softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- training loop -----------------------------------------------------------


def _accumulate(metrics, probs, labels):
    pred = probs.argmax(axis=1)
    metrics["n"] += len(labels)
    metrics["correct"] += int((pred == labels).sum())
    for cls, hit in zip(labels, pred == labels):
        metrics["class_n"][cls] += 1
        metrics["class_correct"][cls] += int(hit)


def _finish(metrics, loss_sum):
    n = max(metrics["n"], 1)
    class_n = np.maximum(metrics["class_n"], 1)
    return {
        "loss": loss_sum / n,
        "acc": metrics["correct"] / n,
        "per_class": metrics["class_correct"] / class_n,
    }


def _fresh(n_classes):
    return {"n": 0, "correct": 0,
            "class_n": np.zeros(n_classes, dtype=np.int64),
            "class_correct": np.zeros(n_classes, dtype=np.int64)}


def train_epoch(model, data, optimizer, batch_size=8, epoch=0):
    """One pass over `data` in shuffled batches; returns epoch metrics."""
    if len(data) == 0:
        raise ConfigError("training dataset is empty")
    order = make_rng(derive_seed(model.config.seed, "shuffle", epoch)).permutation(
        len(data)
    )
    metrics = _fresh(model.config.n_classes)
    loss_sum = 0.0
    for start in range(0, len(order), batch_size):
        sl = data.take(order[start : start + batch_size])
        trace = model.forward_batch(sl)
        loss = model.loss(trace, sl.labels)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"loss became non-finite at epoch {epoch}")
        model.zero_grad()
        loss.backward()
        optimizer.step()
        loss_sum += value * len(sl)
        _accumulate(metrics, trace.probs, sl.labels)
    return _finish(metrics, loss_sum)


def evaluate(model, data, batch_size=256):
    """Side-effect-free metrics over `data` in deterministic order."""
    if len(data) == 0:
        raise ConfigError("evaluation dataset is empty")
    metrics = _fresh(model.config.n_classes)
    loss_sum = 0.0
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            sl = data.take(np.arange(start, min(start + batch_size, len(data))))
            trace = model.forward_batch(sl)
            loss_sum += float(model.loss(trace, sl.labels).data) * len(sl)
            _accumulate(metrics, trace.probs, sl.labels)
    return _finish(metrics, loss_sum)


# -- stream probes -------------------------------------------------------------


def stream_features(model, data, batch_size=256):
    """Final hidden state per modality for every sample, trunk frozen."""
    feats = [[] for _ in range(model.config.n_modalities)]
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            sl = data.take(np.arange(start, min(start + batch_size, len(data))))
            trace = model.forward_batch(sl)
            for i, h_list in enumerate(trace.hidden):
                feats[i].append(h_list[-1].data.copy())
    return [np.concatenate(f, axis=0) for f in feats]


def fit_stream_probes(model, data, steps=300, lr=0.05):
    """Train the per-stream probes on cached features, full-batch Adam.

    Equivalent to optimizing the joint per-stream loss with the trunk
    fixed; only the probe weights move.
    """
    feats = stream_features(model, data)
    labels = data.labels
    for i, probe in enumerate(model.probes):
        x = T.Tensor(feats[i])
        opt = Adam([probe], lr=lr)
        for _ in range(steps):
            loss, _ = T.softmax_cross_entropy(x @ probe, labels)
            probe.grad = None
            loss.backward()
            opt.step()
        probe.grad = None


def stream_probe_accuracy(model, data):
    """Per-stream probe accuracy on `data` (probes as currently trained)."""
    feats = stream_features(model, data)
    out = []
    for i, probe in enumerate(model.probes):
        pred = (feats[i] @ probe.data).argmax(axis=1)
        out.append(float((pred == data.labels).mean()))
    return out


def make_optimizer(model, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """Adam over the trunk parameters (probes train separately)."""
    return Adam(model.parameters(include_probes=False), lr=lr, betas=betas,
                eps=eps)


__all__ = [
    "ModelConfig", "MMixer", "ForwardTrace", "EpisodeBatch", "spatial_pool",
    "train_epoch", "evaluate", "stream_features", "fit_stream_probes",
    "stream_probe_accuracy", "make_optimizer",
]
