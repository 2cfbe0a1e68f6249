"""Masked autoencoder over spectrogram patches: model, losses, pre-training.

Inputs are standardized by one corpus-wide mean/std (stored with the
encoder) before patching; the encoder never sees per-patch normalized
values. Per-patch normalization, when enabled, applies to the
reconstruction targets only.
"""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import masking, spectro
from .tensorgrad import AdamWState, NumericOverflowError, Tensor, adamw_step, backward, no_grad, ops, tag
from .tensorgrad.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LN_EPS = 1e-6


@dataclass(frozen=True)
class MaeConfig:
    patch_size: int = 16
    n_mels: int = 128
    n_frames: int = 256
    encoder_dim: int = 64
    encoder_depth: int = 2
    encoder_heads: int = 4
    decoder_dim: int = 64
    decoder_depth: int = 1
    decoder_heads: int = 4
    mlp_ratio: int = 2
    mask_ratio: float = 0.75
    norm_targets: bool = True
    loss_kind: str = "ma_error"
    mask_strategy: str = "content_aware"
    high_fraction: float = 0.7
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 8
    warmup_epochs: int = 5
    init_seed: int = 0

    def __post_init__(self):
        if self.encoder_dim % self.encoder_heads or self.decoder_dim % self.decoder_heads:
            raise ValueError("model dims must be divisible by head counts")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.loss_kind not in ("ma_error", "mse"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.mask_strategy not in ("random", "content_aware"):
            raise ValueError(f"unknown mask_strategy {self.mask_strategy!r}")
        if self.n_mels % self.patch_size or self.n_frames < self.patch_size:
            raise ValueError("spectrogram extent incompatible with patch_size")

    @property
    def n_patches(self):
        return (self.n_mels // self.patch_size) * (self.n_frames // self.patch_size)

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size

    @classmethod
    def full_scale(cls, **kw):
        """ViT-Base encoder and the 256/4/8 decoder; far too slow for CPU tests."""
        base = dict(encoder_dim=768, encoder_depth=12, encoder_heads=12,
                    decoder_dim=256, decoder_depth=4, decoder_heads=8, mlp_ratio=4)
        base.update(kw)
        return cls(**base)

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- parameters

def _xavier(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def sincos_2d(rows, cols, dim):
    """Fixed 2-D sine/cosine table (rows*cols, dim); half the channels encode
    the frequency block, half the time block. Used to initialize the
    learnable positional embeddings."""
    if dim % 4:
        raise ValueError("sincos_2d needs dim divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter) / quarter)

    def enc(pos):
        a = np.outer(pos, omega)
        return np.concatenate([np.sin(a), np.cos(a)], axis=1)

    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.concatenate([enc(r), enc(c)], axis=1)


def _block_params(rng, prefix, dim, mlp_ratio):
    hidden = dim * mlp_ratio
    return {
        f"{prefix}.ln1.g": np.ones(dim),
        f"{prefix}.ln1.b": np.zeros(dim),
        f"{prefix}.qkv.w": _xavier(rng, dim, 3 * dim),
        # query and value biases only: a key bias shifts every score in a row
        # by the same amount, which softmax cancels
        f"{prefix}.q.b": np.zeros(dim),
        f"{prefix}.v.b": np.zeros(dim),
        f"{prefix}.proj.w": _xavier(rng, dim, dim),
        f"{prefix}.proj.b": np.zeros(dim),
        f"{prefix}.ln2.g": np.ones(dim),
        f"{prefix}.ln2.b": np.zeros(dim),
        f"{prefix}.fc1.w": _xavier(rng, dim, hidden),
        f"{prefix}.fc1.b": np.zeros(hidden),
        f"{prefix}.fc2.w": _xavier(rng, hidden, dim),
        f"{prefix}.fc2.b": np.zeros(dim),
    }


class MaeModel:
    """Parameter bundle. ``params`` maps names to Tensors; names starting with
    ``enc.`` belong to the encoder, ``dec.`` to the decoder."""

    def __init__(self, config, params, input_mean=0.0, input_std=1.0):
        self.config = config
        self.params = params
        self.input_mean = float(input_mean)
        self.input_std = float(input_std)

    @classmethod
    def init(cls, config, seed=None):
        c = config
        rng = np.random.default_rng(c.init_seed if seed is None else seed)
        n, k = c.n_patches, c.patch_dim
        rows, cols = c.n_mels // c.patch_size, c.n_frames // c.patch_size
        raw = {
            "enc.patch.w": _xavier(rng, k, c.encoder_dim),
            "enc.patch.b": np.zeros(c.encoder_dim),
            "enc.pos": sincos_2d(rows, cols, c.encoder_dim),
        }
        for i in range(c.encoder_depth):
            raw.update(_block_params(rng, f"enc.blocks.{i}", c.encoder_dim, c.mlp_ratio))
        raw["enc.norm.g"] = np.ones(c.encoder_dim)
        raw["enc.norm.b"] = np.zeros(c.encoder_dim)
        raw["dec.embed.w"] = _xavier(rng, c.encoder_dim, c.decoder_dim)
        raw["dec.embed.b"] = np.zeros(c.decoder_dim)
        raw["dec.mask_token"] = 0.02 * rng.standard_normal(c.decoder_dim)
        raw["dec.pos"] = sincos_2d(rows, cols, c.decoder_dim)
        for i in range(c.decoder_depth):
            raw.update(_block_params(rng, f"dec.blocks.{i}", c.decoder_dim, c.mlp_ratio))
        raw["dec.norm.g"] = np.ones(c.decoder_dim)
        raw["dec.norm.b"] = np.zeros(c.decoder_dim)
        raw["dec.head.w"] = _xavier(rng, c.decoder_dim, k)
        raw["dec.head.b"] = np.zeros(k)
        params = {name: Tensor(v, requires_grad=True, name=name) for name, v in raw.items()}
        return cls(config, params)

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self, prefix=""):
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def encoder_parameters(self):
        return self.parameters("enc.")

    def parameter_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self):
        params = {n: Tensor(p.data, requires_grad=True, name=n) for n, p in self.params.items()}
        return MaeModel(self.config, params, self.input_mean, self.input_std)

    def state_arrays(self, prefix=""):
        out = {n: p.data for n, p in self.params.items() if n.startswith(prefix)}
        if "enc.".startswith(prefix) or prefix == "":
            out["enc.input_stats"] = np.array([self.input_mean, self.input_std])
        return out

    def save(self, path, prefix=""):
        save_checkpoint(path, self.state_arrays(prefix))

    @classmethod
    def load(cls, path, config, encoder_only=False):
        """Rebuild a model from a TGCK file. With ``encoder_only`` the decoder
        keeps its fresh initialization."""
        arrays = load_checkpoint(path, prefix="enc." if encoder_only else None)
        model = cls.init(config)
        stats = arrays.pop("enc.input_stats", None)
        for name, arr in arrays.items():
            if name not in model.params:
                raise KeyError(f"unexpected parameter {name!r} in {path}")
            if arr.shape != model.params[name].shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {model.params[name].shape}")
            model.params[name].data = arr.copy()
        if stats is not None:
            model.input_mean, model.input_std = float(stats[0]), float(stats[1])
        return model


# ------------------------------------------------------------------ forward

def _block(x, model, prefix, heads):
    p = model.params
    bsz, t, d = x.shape
    dh = d // heads
    h = ops.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], LN_EPS)
    qkv = ops.linear(h, p[f"{prefix}.qkv.w"])
    qkv = ops.transpose(qkv.reshape(bsz, t, 3, heads, dh), (2, 0, 3, 1, 4))
    q, k, v = (ops.take(qkv, np.int64(i)) for i in range(3))
    q = q + p[f"{prefix}.q.b"].reshape(heads, 1, dh)
    v = v + p[f"{prefix}.v.b"].reshape(heads, 1, dh)
    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    att = ops.softmax(scores)
    out = ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)).reshape(bsz, t, d)
    x = x + ops.linear(out, p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"])
    h = ops.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"], LN_EPS)
    h = ops.gelu(ops.linear(h, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"]))
    return x + ops.linear(h, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])


def standardize(model, patches):
    return (np.asarray(patches, dtype=np.float64) - model.input_mean) / model.input_std


def encode(model, patches, visible=None):
    """Encoder over a batch.

    ``patches`` is (B, N, K) raw patch values; ``visible`` is a (B, Nv)
    index array (ascending per row) or None for the full sequence. Returns a
    (B, Nv, encoder_dim) Tensor.
    """
    c = model.config
    p = model.params
    x = standardize(model, patches)
    bsz, n, _ = x.shape
    if n != c.n_patches:
        raise ValueError(f"expected {c.n_patches} patches, got {n}")
    if visible is None:
        visible = np.broadcast_to(np.arange(n), (bsz, n))
    visible = np.asarray(visible, dtype=np.int64)
    xv = np.take_along_axis(x, visible[:, :, None], axis=1)
    with tag("encoder"):
        h = ops.linear(Tensor(xv), p["enc.patch.w"], p["enc.patch.b"])
        h = h + ops.take(p["enc.pos"], visible)
        for i in range(c.encoder_depth):
            h = _block(h, model, f"enc.blocks.{i}", c.encoder_heads)
        return ops.layer_norm(h, p["enc.norm.g"], p["enc.norm.b"], LN_EPS)


def _stack_plans(plans):
    if isinstance(plans, masking.MaskPlan):
        plans = [plans]
    vis = np.stack([pl.visible for pl in plans])
    msk = np.stack([pl.masked for pl in plans])
    return plans, vis, msk


def encode_visible(model, patches, plan):
    """Encode only the visible patches of one sample (N, K) or a batch (B, N, K)
    with a matching plan or list of plans."""
    single = np.ndim(patches) == 2
    x = np.asarray(patches)[None] if single else np.asarray(patches)
    plans, vis, _ = _stack_plans(plan)
    if len(plans) != x.shape[0]:
        raise ValueError("one mask plan per sample required")
    for pl in plans:
        if pl.n_total != x.shape[1]:
            raise ValueError(f"plan covers {pl.n_total} patches, input has {x.shape[1]}")
    out = encode(model, x, vis)
    return out.reshape(out.shape[1:]) if single else out


def decode_reconstruct(model, tokens, plan):
    """Decoder: embed tokens, fill masked slots with the mask token, restore
    patch order, add positions, run blocks, project to patch values."""
    c = model.config
    p = model.params
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape((1,) + tokens.shape)
    plans, vis, msk = _stack_plans(plan)
    bsz, nv, _ = tokens.shape
    if vis.shape != (bsz, nv):
        raise ValueError("token count does not match plan's visible set")
    n = plans[0].n_total
    with tag("decoder"):
        y = ops.linear(tokens, p["dec.embed.w"], p["dec.embed.b"])
        fill = ops.add(np.zeros((bsz, msk.shape[1], c.decoder_dim)), p["dec.mask_token"])
        seq = ops.concat([y, fill], axis=1)
        # position of patch i inside the [visible..., masked...] sequence
        order = np.concatenate([vis, msk], axis=1)
        restore = np.argsort(order, axis=1)
        y = ops.take_rows(seq, restore) + p["dec.pos"]
        for i in range(c.decoder_depth):
            y = _block(y, model, f"dec.blocks.{i}", c.decoder_heads)
        y = ops.layer_norm(y, p["dec.norm.g"], p["dec.norm.b"], LN_EPS)
        out = ops.linear(y, p["dec.head.w"], p["dec.head.b"])
    assert out.shape[1] == n
    return out.reshape(out.shape[1:]) if single else out


# -------------------------------------------------------------------- losses

def reconstruction_targets(model, patches, norm_targets):
    x = standardize(model, patches)
    if norm_targets:
        x, _, _ = spectro.patch_normalize(x, spectro.NORM_EPS)
    return x


def recon_loss(pred, target_patches, plan, kind, norm_targets):
    """Per-element mean reconstruction error over masked patches.

    ``target_patches`` are already in model units (see
    ``reconstruction_targets``); with ``norm_targets`` each target patch is
    standardized here by its own mean and std. ``kind`` is ``"ma_error"``
    (absolute error) or ``"mse"`` (squared error).
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    single = pred.ndim == 2
    if single:
        pred = pred.reshape((1,) + pred.shape)
        target_patches = np.asarray(target_patches)[None]
    plans, _, msk = _stack_plans(plan)
    if msk.shape[1] == 0:
        raise ValueError("recon_loss needs at least one masked patch")
    tgt = np.asarray(target_patches, dtype=np.float64)
    if tgt.shape != pred.shape:
        raise ValueError(f"target shape {tgt.shape} != prediction shape {pred.shape}")
    tgt = np.take_along_axis(tgt, msk[:, :, None], axis=1)
    if norm_targets:
        tgt, _, _ = spectro.patch_normalize(tgt, spectro.NORM_EPS)
    diff = ops.take_rows(pred, msk) - tgt
    if kind == "ma_error":
        return ops.mean(ops.abs(diff))
    if kind == "mse":
        return ops.mean(ops.square(diff))
    raise ValueError(f"unknown loss kind {kind!r}")


# ------------------------------------------------------------------- corpus

@dataclass
class PatchCorpus:
    ids: list
    patches: np.ndarray  # (n, N, K) raw values
    variances: np.ndarray  # (n, N)

    def __len__(self):
        return len(self.ids)


def build_corpus(spectrograms, config):
    """Crop/pad and patchify spectrograms into a PatchCorpus."""
    ids, patches, variances = [], [], []
    for s in spectrograms:
        s = spectro.crop_or_pad(s, config.n_frames)
        g = spectro.patchify(s, config.patch_size)
        ids.append(s.id)
        patches.append(g.patches)
        variances.append(g.per_patch_var)
    return PatchCorpus(ids, np.stack(patches), np.stack(variances))


def corpus_stats(corpus):
    x = corpus.patches
    return float(x.mean()), float(x.std())


# ----------------------------------------------------------------- training

def make_plans(config, variances, rng):
    ratio, strat = config.mask_ratio, config.mask_strategy
    seeds = rng.integers(0, 2**63 - 1, size=len(variances))
    return [masking.plan_mask(strat, v, ratio, int(s), config.high_fraction)
            for v, s in zip(variances, seeds)]


def loss_on_batch(model, patches, plans, config):
    tokens = encode_visible(model, patches, plans)
    pred = decode_reconstruct(model, tokens, plans)
    targets = standardize(model, patches)
    return recon_loss(pred, targets, plans, config.loss_kind, config.norm_targets)


def lr_at(config, step, steps_per_epoch):
    """Linear warmup over ``warmup_epochs`` then constant."""
    warm = config.warmup_epochs * steps_per_epoch
    if warm <= 0:
        return config.lr
    return config.lr * min(1.0, (step + 1) / warm)


def pretrain(model, corpus, config=None, epochs=30, seed=0, log_fh=None, plan_fh=None):
    """Stage-1 training. Mutates ``model`` and returns ``(model, history)``.

    ``history`` holds the sample-weighted mean loss of each epoch. A fresh
    mask plan is drawn for every sample in every epoch. When ``log_fh`` is
    given, one JSON line per epoch is written to it; ``plan_fh`` receives
    every mask plan.
    """
    config = config or model.config
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if model.input_mean == 0.0 and model.input_std == 1.0:
        model.input_mean, model.input_std = corpus_stats(corpus)
    params = list(model.params.values())
    state = AdamWState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                       weight_decay=config.weight_decay)
    n = len(corpus)
    bs = max(1, min(config.batch_size, n))
    steps_per_epoch = -(-n // bs)
    history = []
    cfg_hash = config.config_hash()
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            plans = make_plans(config, corpus.variances[idx], rng)
            if plan_fh is not None:
                for i, pl in zip(idx, plans):
                    plan_fh.write(pl.to_json(corpus.ids[i]) + "\n")
            try:
                loss = loss_on_batch(model, corpus.patches[idx], plans, config)
                grads = backward(loss, params)
            except NumericOverflowError as err:
                raise NumericOverflowError(err.op, f"epoch {epoch} batch {b}") from err
            state.lr = lr_at(config, epoch * steps_per_epoch + b, steps_per_epoch)
            adamw_step(params, grads, state)
            total += float(loss.data) * len(idx)
        history.append(total / n)
        log.info("pretrain epoch %d loss %.6f", epoch + 1, history[-1])
        if log_fh is not None:
            log_fh.write(json.dumps({"epoch": epoch + 1, "loss": history[-1], "config_hash": cfg_hash}) + "\n")
    return model, history


def evaluate_recon(model, corpus, config=None, seed=0):
    """Mean masked reconstruction loss over the corpus without updating."""
    config = config or model.config
    rng = np.random.default_rng([seed, 10**6])
    total = 0.0
    with no_grad():
        for start in range(0, len(corpus), config.batch_size):
            sl = slice(start, start + config.batch_size)
            plans = make_plans(config, corpus.variances[sl], rng)
            loss = loss_on_batch(model, corpus.patches[sl], plans, config)
            total += float(loss.data) * len(plans)
    return total / len(corpus)


def extract_features(model, patches, batch_size=64):
    """Mean-pooled encoder output over all patches, (B, encoder_dim)."""
    x = np.asarray(patches)
    out = []
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            out.append(encode(model, x[start:start + batch_size]).data.mean(axis=1))
    return np.concatenate(out, axis=0)


def extract_feature(model, spectrogram):
    c = model.config
    s = spectro.crop_or_pad(spectrogram, c.n_frames) if isinstance(spectrogram, spectro.Spectrogram) else spectrogram
    grid = spectro.patchify(s, c.patch_size)
    return extract_features(model, grid.patches[None])[0]


def with_cell(config, loss_kind, norm_targets, mask_strategy):
    return replace(config, loss_kind=loss_kind, norm_targets=norm_targets, mask_strategy=mask_strategy)
