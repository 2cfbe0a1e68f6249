"""Stage-2 classifier: deep/static fusion, attention-gated FFNN, focal loss,
fine-tuning with early stopping."""

import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import mae, metrics
from .synth import N_STATIC
from .tensorgrad import AdamWState, NumericOverflowError, Tensor, adamw_step, backward, no_grad, ops

log = logging.getLogger(__name__)

N_LABELS = 4
HIDDEN = (256, 64)
STD_FLOOR = 1e-6
THRESHOLD = 0.5


# -------------------------------------------------------------------- fusion

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass
class FusedVector:
    values: np.ndarray
    deep_span: tuple
    static_span: tuple


def fuse(deep, static, standardizer=None):
    """Concatenate deep features (first) with standardized static features.

    Works on one vector or on row-stacked batches. ``standardizer`` must be
    fitted on the training split; without it the static part is passed
    through unchanged.
    """
    deep = np.asarray(deep, dtype=np.float64)
    static = np.asarray(static, dtype=np.float64)
    if static.shape[-1] != N_STATIC:
        raise ValueError(f"static features must have {N_STATIC} values, got {static.shape[-1]}")
    if deep.ndim != static.ndim or deep.shape[:-1] != static.shape[:-1]:
        raise ValueError("deep and static inputs disagree in batch shape")
    s = standardizer(static) if standardizer is not None else static
    d = deep.shape[-1]
    return FusedVector(np.concatenate([deep, s], axis=-1), (0, d), (d, d + N_STATIC))


# ---------------------------------------------------------------------- head

class AttentionFfnn:
    """Per-dimension logistic gate, then fused -> 256 -> 64 -> 4 with GELU."""

    def __init__(self, params):
        self.params = params

    @classmethod
    def init(cls, in_dim, seed=0, hidden=HIDDEN, zero=False):
        rng = np.random.default_rng(seed)
        dims = (in_dim,) + tuple(hidden) + (N_LABELS,)
        # the gate starts at 0.5 for every dimension; a random start makes
        # each gate depend on all the distractor inputs from step one
        raw = {"att.w": np.zeros((in_dim, in_dim)), "att.b": np.zeros(in_dim)}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            raw[f"mlp.{i}.w"] = np.zeros((a, b)) if zero else mae._xavier(rng, a, b)
            raw[f"mlp.{i}.b"] = np.zeros(b)
        params = {f"head.{k}": Tensor(v, requires_grad=True, name=f"head.{k}") for k, v in raw.items()}
        return cls(params)

    @property
    def in_dim(self):
        return self.params["head.att.b"].shape[0]

    @property
    def n_layers(self):
        return sum(1 for k in self.params if k.startswith("head.mlp.") and k.endswith(".w"))

    def parameters(self):
        return list(self.params.values())

    def copy(self):
        return AttentionFfnn({k: Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()})


def attention_weights(head, z):
    p = head.params
    return ops.sigmoid(ops.linear(z, p["head.att.w"], p["head.att.b"]))


def forward(head, fused):
    """Logits for a fused vector or batch; sigmoid is applied by the caller."""
    z = fused if isinstance(fused, Tensor) else Tensor(getattr(fused, "values", fused))
    if z.shape[-1] != head.in_dim:
        raise ValueError(f"fused width {z.shape[-1]} != head input {head.in_dim}")
    p = head.params
    h = z * attention_weights(head, z)
    last = head.n_layers - 1
    for i in range(head.n_layers):
        h = ops.linear(h, p[f"head.mlp.{i}.w"], p[f"head.mlp.{i}.b"])
        if i < last:
            h = ops.gelu(h)
    return h


def focal_loss(logits, labels, gamma=2.0):
    labels = np.asarray(labels, dtype=np.float64)
    return ops.sigmoid_focal_loss(logits, labels, gamma)


def probabilities(logits):
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return ops._sigmoid(np.asarray(z, dtype=np.float64))


# ----------------------------------------------------------------- training

@dataclass
class FinetuneData:
    ids: list
    participant_ids: list
    static: np.ndarray
    labels: np.ndarray
    patches: np.ndarray = None  # (n, N, K) raw patch values, or None

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return FinetuneData(
            [self.ids[i] for i in idx],
            [self.participant_ids[i] for i in idx],
            self.static[idx],
            self.labels[idx],
            None if self.patches is None else self.patches[idx],
        )


@dataclass
class FinetuneHyper:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 60
    patience: int = 10
    gamma: float = 2.0
    weight_decay: float = 0.01
    freeze_encoder: bool = False
    use_deep: bool = True
    # std of Gaussian noise added to the standardized static block while
    # training; keeps the head from memorizing the label-free dimensions
    input_noise: float = 1.0


class EarlyStopping:
    """Counts epochs without strict improvement of a score to be maximized."""

    def __init__(self, patience):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch, score):
        """Record ``score`` for ``epoch`` (1-based); return True when training should stop."""
        if score > self.best:
            self.best = score
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def _deep_features(encoder, patches, grad):
    if grad:
        return ops.mean(mae.encode(encoder, patches), axis=1)
    return Tensor(mae.extract_features(encoder, patches))


def _fused_batch(encoder, data, idx, standardizer, hyper, cache=None, rng=None):
    static = standardizer(data.static[idx])
    if rng is not None and hyper.input_noise > 0:
        static = static + hyper.input_noise * rng.standard_normal(static.shape)
    if encoder is None or not hyper.use_deep:
        return Tensor(static)
    if hyper.freeze_encoder:
        deep = Tensor(cache[idx]) if cache is not None else _deep_features(encoder, data.patches[idx], False)
    else:
        deep = _deep_features(encoder, data.patches[idx], True)
    return ops.concat([deep, Tensor(static)], axis=1)


def predict_proba(encoder, head, data, standardizer, hyper, batch_size=64, cache=None):
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            z = _fused_batch(encoder, data, idx, standardizer, hyper, cache)
            out.append(probabilities(forward(head, z)))
    return np.concatenate(out, axis=0)


def head_input_dim(encoder, hyper):
    if encoder is None or not hyper.use_deep:
        return N_STATIC
    return encoder.config.encoder_dim + N_STATIC


def finetune(encoder, head, train, val, hyper=None, seed=0, log_fh=None):
    """Joint fine-tuning of encoder and head with early stopping on validation
    Macro F1. Returns ``(encoder, head, history, standardizer)`` holding the
    best-epoch parameters. ``encoder`` may be None for a static-only model.
    With ``val=None`` there is no early stopping: all ``max_epochs`` run and
    the final parameters are kept. Inputs are copied, never mutated.
    """
    hyper = hyper or FinetuneHyper()
    if len(train) == 0 or (val is not None and len(val) == 0):
        raise ValueError("empty train or validation split")
    if val is not None and set(train.participant_ids) & set(val.participant_ids):
        raise ValueError("train and validation share participants")
    encoder = encoder.copy() if encoder is not None else None
    head = head.copy()
    standardizer = Standardizer.fit(train.static)
    train_enc = encoder is not None and hyper.use_deep and not hyper.freeze_encoder
    params = head.parameters() + (encoder.encoder_parameters() if train_enc else [])
    state = AdamWState(lr=hyper.lr, weight_decay=hyper.weight_decay)

    tr_cache = va_cache = None
    if encoder is not None and hyper.use_deep and hyper.freeze_encoder:
        tr_cache = mae.extract_features(encoder, train.patches)
        va_cache = mae.extract_features(encoder, val.patches) if val is not None else None

    stopper = EarlyStopping(hyper.patience)
    best = _snapshot(params)
    history = []
    n = len(train)
    bs = max(1, min(hyper.batch_size, n))
    for epoch in range(1, hyper.max_epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            z = _fused_batch(encoder, train, idx, standardizer, hyper, tr_cache, rng)
            loss = focal_loss(forward(head, z), train.labels[idx], hyper.gamma)
            try:
                grads = backward(loss, params)
            except NumericOverflowError as err:
                raise NumericOverflowError(err.op, f"finetune epoch {epoch}") from err
            adamw_step(params, grads, state)
            total += float(loss.data) * len(idx)
        rec = {"epoch": epoch, "train_loss": total / n}
        stop = False
        if val is not None:
            proba = predict_proba(encoder, head, val, standardizer, hyper, cache=va_cache)
            score = metrics.macro_f1(proba, val.labels, THRESHOLD)
            stop = stopper.update(epoch, score)
            if stopper.best_epoch == epoch:
                best = _snapshot(params)
            rec.update(val_macro_f1=score, best_so_far=stopper.best, best_epoch=stopper.best_epoch)
        else:
            best = None
        history.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
        if stop:
            break
    if best is not None:
        _restore(params, best)
    return encoder, head, history, standardizer


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, snap):
    for p, d in zip(params, snap):
        p.data = d


@dataclass
class FittedClassifier:
    encoder: object
    head: AttentionFfnn
    standardizer: Standardizer
    hyper: FinetuneHyper
    history: list = field(default_factory=list)

    def predict_proba(self, data):
        return predict_proba(self.encoder, self.head, data, self.standardizer, self.hyper)

    def evaluate(self, data, model_name=""):
        return metrics.metric_panel(metrics.EvalBatch(self.predict_proba(data), data.labels, THRESHOLD), model_name)


def fit_classifier(encoder, train, val, hyper=None, seed=0, log_fh=None):
    """Build a head for ``encoder`` (or static-only when None) and fine-tune it."""
    hyper = copy.copy(hyper or FinetuneHyper())
    head = AttentionFfnn.init(head_input_dim(encoder, hyper), seed=seed)
    enc, head, hist, std = finetune(encoder, head, train, val, hyper, seed, log_fh)
    return FittedClassifier(enc, head, std, hyper, hist)
