"""Joint training loop for the mask estimator and the voice activity detector.

Two optimizers on one computation graph: the enhancement parameters (backbone
plus embedding head) take an Adam step on the masking MSE; the VAD parameters
take an Adam step on cross-entropy plus lambda times that same MSE, where the
MSE gradient reaches the VAD only through the posterior's slot in the
embedding input. Everything is seeded: shuffles, dropout, and the randomized
posteriors of the eta = 1.0 ablation all derive from (seed, epoch), so runs
are reproducible bit for bit and resuming from a checkpoint continues the
exact same trajectory.
"""

import hashlib
import os
from dataclasses import asdict, dataclass

import numpy as np

from dne import corpus as corpus_mod
from dne import dsp
from dne.embedding import (
    DneExtractor,
    avg_pool_half,
    confident_noise_feature,
    simple_noise_feature,
)
from dne.enhance import (
    BACKBONES,
    UNET_CHUNK,
    BackboneConfig,
    apply_mask,
    make_backbone,
    reconstruct,
    unet_forward,
)
from dne.nncore import Adam, Tensor, concat, load_checkpoint, no_grad, pad_axis, save_checkpoint
from dne.nncore.losses import BCE_CLAMP
from dne.vad import VadModel

DNE_MODES = ("off", "sn", "cn", "dne")

LOG_HEADER = "epoch\ttrain_mse\ttrain_ce\tval_mse\tval_ce\tlr_se\tlr_vad"


@dataclass
class TrainConfig:
    backbone: str = "unet"
    dne: str = "dne"
    eta: float = 0.3
    lam: float = 1.0
    lr_se: float = 1e-3
    lr_vad: float = 1e-2
    lr_decay: float = 0.1
    lr_floor: float = 1e-8
    patience: int = 3
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    out_dir: str = "run"
    val_fraction: float = 0.1
    warm_start_epochs: int = 0

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        if self.dne not in DNE_MODES:
            raise ValueError(f"dne mode must be one of {DNE_MODES}")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must be in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.lr_se <= 0 or self.lr_vad <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs/batch size")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        return self


class JointModel:
    """VAD + backbone (+ embedding head in dne mode) behind prefixed names."""

    def __init__(self, config, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        seed = config.seed
        self.vad = VadModel(rng=np.random.default_rng([seed, 11]), dtype=dtype)
        bcfg = BackboneConfig(config.backbone, use_dne=config.dne != "off")
        self.backbone = make_backbone(bcfg, rng=np.random.default_rng([seed, 12]), dtype=dtype)
        self.extractor = None
        if config.dne == "dne":
            self.extractor = DneExtractor(bcfg.dne_dim, rng=np.random.default_rng([seed, 13]), dtype=dtype)
        self.aux_dim = bcfg.dne_dim if config.dne != "off" else 0

    def parts(self):
        parts = [("vad", self.vad), ("backbone", self.backbone)]
        if self.extractor is not None:
            parts.append(("extractor", self.extractor))
        return parts

    def named_parameters(self):
        for prefix, mod in self.parts():
            yield from mod.named_parameters(prefix + ".")

    def named_buffers(self):
        for prefix, mod in self.parts():
            yield from mod.named_buffers(prefix + ".")

    def se_named_parameters(self):
        for prefix, mod in self.parts():
            if prefix != "vad":
                yield from mod.named_parameters(prefix + ".")

    def vad_named_parameters(self):
        yield from self.vad.named_parameters("vad.")

    def train(self):
        for _, mod in self.parts():
            mod.train()

    def eval(self):
        for _, mod in self.parts():
            mod.eval()

    def reseed_dropout(self, seed, epoch):
        rng = np.random.default_rng([seed, 500 + epoch])
        for _, mod in self.parts():
            for sub in _walk_modules(mod):
                if hasattr(sub, "reseed"):
                    sub.reseed(int(rng.integers(2**31)))


def _walk_modules(mod):
    yield mod
    for child in mod._modules.values():
        yield from _walk_modules(child)


class JointOptimizers:
    def __init__(self, model, config):
        self.se = Adam(model.se_named_parameters(), lr=config.lr_se)
        self.vad = Adam(model.vad_named_parameters(), lr=config.lr_vad)


@dataclass
class LrScheduler:
    """Decay both rates by a fixed factor after ``patience`` epochs without
    validation improvement; rates never drop below the floor."""

    patience: int = 3
    factor: float = 0.1
    floor: float = 1e-8
    best: float = float("inf")
    bad: int = 0

    def update(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            return True
        return False

    def apply(self, optimizers):
        optimizers.se.lr = max(optimizers.se.lr * self.factor, self.floor)
        optimizers.vad.lr = max(optimizers.vad.lr * self.factor, self.floor)

    def state(self):
        return {"patience": self.patience, "factor": self.factor, "floor": self.floor,
                "best": self.best, "bad": self.bad}

    @classmethod
    def from_state(cls, state):
        return cls(**state)


def lr_schedule(config, val_history):
    """Rates in effect after feeding a validation-loss history through the
    plateau rule; a pure function used for schedule audits."""
    sched = LrScheduler(config.patience, config.lr_decay, config.lr_floor)
    lr_se, lr_vad = config.lr_se, config.lr_vad
    for v in val_history:
        if sched.update(v):
            lr_se = max(lr_se * sched.factor, sched.floor)
            lr_vad = max(lr_vad * sched.factor, sched.floor)
    return lr_se, lr_vad


@dataclass
class PreparedUtt:
    """Per-utterance arrays shared by every batch that touches it."""

    mag: np.ndarray        # raw magnitude (T, 257)
    mag_std: np.ndarray    # standardized magnitude
    clean_mag: np.ndarray  # raw clean magnitude
    mfb: np.ndarray        # log mel features (T, 40)
    labels: np.ndarray     # speech/nonspeech per frame
    mean: float
    std: float

    @property
    def frames(self):
        return self.mag.shape[0]


def prepare_waveforms(noisy, clean, labels, dtype=np.float32, filterbank=None):
    mag, _ = dsp.split_mag_phase(dsp.stft(noisy))
    clean_mag, _ = dsp.split_mag_phase(dsp.stft(clean))
    if len(labels) != mag.shape[0]:
        raise ValueError(f"{len(labels)} labels for {mag.shape[0]} frames")
    mfb = dsp.log_mfb(mag, filterbank)
    mag_std, mean, std = dsp.standardize(mag)
    return PreparedUtt(
        mag.astype(dtype),
        mag_std.astype(dtype),
        clean_mag.astype(dtype),
        mfb.astype(dtype),
        np.asarray(labels, dtype=dtype),
        mean,
        std,
    )


def prepare_entries(manifest, entries, dtype=np.float32):
    filterbank = dsp.mel_filterbank()
    utts = []
    for entry in entries:
        noisy, clean, labels = corpus_mod.load_entry(manifest, entry)
        utts.append(prepare_waveforms(noisy, clean, labels, dtype, filterbank))
    return utts


def val_split(entries, fraction, seed):
    """Seed-stable hash split; returns (train_entries, val_entries)."""
    if fraction == 0 or not entries:
        return list(entries), []
    def digest(e):
        return hashlib.md5(f"{seed}:{e.noisy_path}".encode()).hexdigest()
    ranked = sorted(entries, key=lambda e: (digest(e), e.noisy_path))
    n_val = max(1, round(fraction * len(entries)))
    val = ranked[:n_val]
    val_keys = {e.noisy_path for e in val}
    train = [e for e in entries if e.noisy_path not in val_keys]
    return train, val


@dataclass
class Batch:
    mag: np.ndarray      # (B, L, 257) raw
    mag_std: np.ndarray
    clean_mag: np.ndarray
    mfb: np.ndarray      # (B, L, 40)
    labels: np.ndarray   # (B, L)
    frame_mask: np.ndarray  # (B, L), 1.0 on real frames
    lengths: list
    stats: list          # per-item (mean, std) of the raw magnitude

    @property
    def full(self):
        return all(n == self.labels.shape[1] for n in self.lengths)


def _pad_rows(a, length):
    if a.shape[0] == length:
        return a
    pad = np.zeros((length - a.shape[0],) + a.shape[1:], dtype=a.dtype)
    return np.concatenate([a, pad], axis=0)


def make_batch(utts, items, kind):
    """Assemble one batch. ``items`` are utterance indices for the dense and
    recurrent backbones, (utterance, start-frame) pairs for the chunked one."""
    views = []
    if kind == "unet":
        for i, start in items:
            u = utts[i]
            stop = min(start + UNET_CHUNK, u.frames)
            views.append((u, slice(start, stop)))
        length = UNET_CHUNK
    else:
        views = [(utts[i], slice(0, utts[i].frames)) for i in items]
        length = max(u.frames for u, _ in views)

    fields_ = {"mag": [], "mag_std": [], "clean_mag": [], "mfb": [], "labels": []}
    mask_rows, lengths, stats = [], [], []
    for u, sl in views:
        n = sl.stop - sl.start
        lengths.append(n)
        stats.append((u.mean, u.std))
        for name in fields_:
            fields_[name].append(_pad_rows(getattr(u, name)[sl], length))
        row = np.zeros(length, dtype=u.mag.dtype)
        row[:n] = 1.0
        mask_rows.append(row)
    stacked = {name: np.stack(rows) for name, rows in fields_.items()}
    return Batch(frame_mask=np.stack(mask_rows), lengths=lengths, stats=stats, **stacked)


def epoch_items(utts, kind, rng=None):
    """Training units for one epoch: utterance indices, or aligned 64-frame
    chunk coordinates for the chunked backbone. ``rng=None`` keeps file
    order (validation)."""
    if kind == "unet":
        items = []
        for i, u in enumerate(utts):
            if u.frames <= UNET_CHUNK:
                items.append((i, 0))
                continue
            starts = list(range(0, u.frames - UNET_CHUNK + 1, UNET_CHUNK))
            if starts[-1] + UNET_CHUNK < u.frames:
                starts.append(u.frames - UNET_CHUNK)
            items.extend((i, s) for s in starts)
    else:
        items = list(range(len(utts)))
    if rng is not None:
        items = [items[j] for j in rng.permutation(len(items))]
    return items


def _batched(items, size):
    return [items[i : i + size] for i in range(0, len(items), size)]


def _aux_features(model, batch, posterior_data):
    """Broadcast noise-average features for the sn/cn baselines; constants."""
    config = model.config
    rows = []
    for b, n in enumerate(batch.lengths):
        mag = batch.mag[b, :n]
        if config.dne == "sn":
            v = simple_noise_feature(mag)
        else:
            v = confident_noise_feature(mag, posterior_data[b, :n], config.eta)
        # reuse the utterance's standardization so scales match the main input
        mean, std = batch.stats[b]
        v = (v - mean) / std
        if config.backbone != "unet":
            v = avg_pool_half(v)
        full = np.zeros((batch.labels.shape[1], v.shape[0]), dtype=batch.mag.dtype)
        full[:n] = v
        rows.append(full)
    return np.stack(rows)


def _embedding_input_posterior(posterior, config, post_rng):
    """The posterior tensor the embedding consumes: the live VAD output, or
    seeded uniform noise when eta = 1.0 (selection then keeps every frame
    and the VAD is out of the loop)."""
    if config.eta == 1.0:
        rand = post_rng.random(posterior.shape).astype(posterior.data.dtype)
        return Tensor(rand)
    return posterior


def forward_losses(model, batch, post_rng=None):
    """(posterior, l_mse, l_ce) on one batch; losses are masked means."""
    config = model.config
    posterior = model.vad(batch.mfb)  # (B, L)
    mask2 = batch.frame_mask
    n_frames = float(mask2.sum())
    post_rng = post_rng or np.random.default_rng([config.seed, 71])

    aux = None
    if config.dne == "dne":
        post_emb = _embedding_input_posterior(posterior, config, post_rng)
        if batch.full:
            aux = model.extractor(batch.mag, post_emb, config.eta)
        else:
            rows = []
            for b, n in enumerate(batch.lengths):
                key = (b, slice(0, n))
                emb = model.extractor(batch.mag[b, :n], post_emb[key], config.eta)
                emb = pad_axis(emb, 0, 0, batch.labels.shape[1] - n)
                rows.append(emb.reshape(1, *emb.shape))
            aux = concat(rows, axis=0)
    elif config.dne in ("sn", "cn"):
        with no_grad():
            aux = Tensor(_aux_features(model, batch, posterior.data))

    if config.backbone == "unet":
        b_sz, length, bins = batch.mag_std.shape
        planes = [Tensor(batch.mag_std).reshape(b_sz, 1, length, bins)]
        if aux is not None:
            planes.append(aux.reshape(b_sz, 1, length, bins))
        vol = planes[0] if len(planes) == 1 else concat(planes, axis=1)
        mask = model.backbone(vol)
    else:
        mask = model.backbone(Tensor(batch.mag_std), aux)

    enhanced = apply_mask(Tensor(batch.mag), mask)
    diff = enhanced - Tensor(batch.clean_mag)
    bins = batch.mag.shape[-1]
    l_mse = (diff * diff * mask2[:, :, None]).sum() * (1.0 / (n_frames * bins))

    p = posterior.clip(BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = batch.labels
    ce_terms = Tensor(y) * p.log() + Tensor(1.0 - y) * (Tensor(np.ones_like(y)) - p).log()
    l_ce = (ce_terms * mask2).sum() * (-1.0 / n_frames)
    return posterior, l_mse, l_ce


def joint_train_step(model, batch, optimizers, post_rng=None, warm_start=False):
    """One coupled update; returns (l_mse, l_ce) as floats.

    Order matters: the MSE backward pass fills gradients for everything it
    touches; the enhancement step consumes (and clears) its own, the VAD's
    leftover MSE gradient is scaled by lambda, then the cross-entropy
    backward pass accumulates on top before the VAD step.
    """
    config = model.config
    posterior, l_mse, l_ce = forward_losses(model, batch, post_rng)
    mse_val, ce_val = float(l_mse.data), float(l_ce.data)
    if not (np.isfinite(mse_val) and np.isfinite(ce_val)):
        raise RuntimeError(f"non-finite training loss: mse={mse_val}, ce={ce_val}")

    if warm_start:
        l_ce.backward()
        optimizers.vad.step()
        return mse_val, ce_val

    l_mse.backward()
    optimizers.se.step()
    if config.lam != 1.0:
        for _, p in model.vad_named_parameters():
            if p.grad is not None:
                p.grad = p.grad * config.lam
    l_ce.backward()
    optimizers.vad.step()
    return mse_val, ce_val


def evaluate_losses(model, utts, post_rng=None, batch_size=4):
    """Masked-mean losses over a fixed utterance list, inference mode."""
    kind = model.config.backbone
    mse_sum = ce_sum = weight = 0.0
    with no_grad():
        for items in _batched(epoch_items(utts, kind), batch_size):
            batch = make_batch(utts, items, kind)
            _, l_mse, l_ce = forward_losses(model, batch, post_rng)
            w = float(batch.frame_mask.sum())
            mse_sum += float(l_mse.data) * w
            ce_sum += float(l_ce.data) * w
            weight += w
    return mse_sum / weight, ce_sum / weight


CKPT_PARAM = "param/"
CKPT_BUFFER = "buffer/"


def save_training_checkpoint(path, model, optimizers, meta):
    params = {CKPT_PARAM + name: p.data for name, p in model.named_parameters()}
    params.update({CKPT_BUFFER + name: b for name, b in model.named_buffers()})
    opt_state = {"se/" + k: v for k, v in optimizers.se.store.state_arrays().items()}
    opt_state.update({"vad/" + k: v for k, v in optimizers.vad.store.state_arrays().items()})
    save_checkpoint(path, params, opt_state, meta)


def load_training_checkpoint(path, model, optimizers=None):
    params, opt_state, meta = load_checkpoint(path)
    own_params = {k[len(CKPT_PARAM):]: v for k, v in params.items() if k.startswith(CKPT_PARAM)}
    own_bufs = {k[len(CKPT_BUFFER):]: v for k, v in params.items() if k.startswith(CKPT_BUFFER)}
    for prefix, mod in model.parts():
        pre = prefix + "."
        mod.load_state(
            {k[len(pre):]: v for k, v in own_params.items() if k.startswith(pre)},
            {k[len(pre):]: v for k, v in own_bufs.items() if k.startswith(pre)},
        )
    if optimizers is not None:
        optimizers.se.store.load_state_arrays(
            {k[3:]: v for k, v in opt_state.items() if k.startswith("se/")}
        )
        optimizers.vad.store.load_state_arrays(
            {k[4:]: v for k, v in opt_state.items() if k.startswith("vad/")}
        )
    return meta


def load_model(path, dtype=np.float32):
    """Rebuild a JointModel from a checkpoint alone."""
    _, _, meta = load_checkpoint(path)
    config = TrainConfig(**meta["config"])
    model = JointModel(config, dtype=dtype)
    load_training_checkpoint(path, model)
    return model


def _portable_config(config):
    """Config dict for checkpoint meta; the output directory is where the
    file sits, not part of the experiment, so it stays out."""
    d = asdict(config)
    d.pop("out_dir")
    return d


def resolved_config_text(config):
    pairs = sorted(asdict(config).items())
    return "\n".join(f"{k}={v}" for k, v in pairs) + "\n"


@dataclass
class TrainResult:
    best_path: str
    log_path: str
    history: list
    best_val: float


def _log_row(row):
    epoch, tm, tc, vm, vc, ls, lv = row
    return f"{epoch}\t{tm:.8e}\t{tc:.8e}\t{vm:.8e}\t{vc:.8e}\t{ls:.3e}\t{lv:.3e}"


def train(manifest, config, resume=None, dtype=np.float32, info=None):
    """Full training run; returns paths to the best checkpoint and the log.

    Deterministic byte for byte under a fixed (seed, config): shuffles,
    dropout masks, and randomized posteriors all derive from (seed, epoch),
    and logs carry no timestamps. ``resume`` continues the exact trajectory
    of the interrupted run.
    """
    config.validate()
    info = info or (lambda msg: None)
    train_entries, _ = corpus_mod.split_entries(manifest)
    if not train_entries:
        raise ValueError("manifest has no training entries")
    fit_entries, val_entries = val_split(train_entries, config.val_fraction, config.seed)

    utts = prepare_entries(manifest, fit_entries, dtype)
    val_utts = prepare_entries(manifest, val_entries, dtype)
    kind = config.backbone

    model = JointModel(config, dtype=dtype)
    optimizers = JointOptimizers(model, config)
    scheduler = LrScheduler(config.patience, config.lr_decay, config.lr_floor)
    history = []
    best_val = float("inf")
    start_epoch = 0

    os.makedirs(config.out_dir, exist_ok=True)
    if resume:
        meta = load_training_checkpoint(resume, model, optimizers)
        scheduler = LrScheduler.from_state(meta["scheduler"])
        optimizers.se.lr = meta["lr_se"]
        optimizers.vad.lr = meta["lr_vad"]
        history = [tuple(row) for row in meta["history"]]
        best_val = meta["best_val"]
        start_epoch = meta["epoch"] + 1
        info(f"resumed from {resume} at epoch {start_epoch}")

    with open(os.path.join(config.out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(resolved_config_text(config))

    log_path = os.path.join(config.out_dir, "train_log.tsv")
    best_path = os.path.join(config.out_dir, "best.ckpt")
    for epoch in range(start_epoch, config.epochs):
        model.train()
        model.reseed_dropout(config.seed, epoch)
        shuffle_rng = np.random.default_rng([config.seed, 1000 + epoch])
        post_rng = np.random.default_rng([config.seed, 700 + epoch])
        warm = epoch < config.warm_start_epochs

        mse_sum = ce_sum = weight = 0.0
        for items in _batched(epoch_items(utts, kind, shuffle_rng), config.batch_size):
            batch = make_batch(utts, items, kind)
            l_mse, l_ce = joint_train_step(model, batch, optimizers, post_rng, warm_start=warm)
            w = float(batch.frame_mask.sum())
            mse_sum += l_mse * w
            ce_sum += l_ce * w
            weight += w
        train_mse, train_ce = mse_sum / weight, ce_sum / weight

        model.eval()
        if val_utts:
            val_rng = np.random.default_rng([config.seed, 900 + epoch])
            val_mse, val_ce = evaluate_losses(model, val_utts, val_rng, config.batch_size)
        else:
            val_mse, val_ce = train_mse, train_ce

        row = (epoch, train_mse, train_ce, val_mse, val_ce, optimizers.se.lr, optimizers.vad.lr)
        history.append(row)
        info(_log_row(row))
        if scheduler.update(val_mse):
            scheduler.apply(optimizers)

        meta = {
            "config": _portable_config(config),
            "epoch": epoch,
            "scheduler": scheduler.state(),
            "lr_se": optimizers.se.lr,
            "lr_vad": optimizers.vad.lr,
            "history": [list(r) for r in history],
            "best_val": min(best_val, val_mse),
        }
        save_training_checkpoint(
            os.path.join(config.out_dir, f"epoch_{epoch:04d}.ckpt"), model, optimizers, meta
        )
        if val_mse < best_val:
            best_val = val_mse
            save_training_checkpoint(best_path, model, optimizers, meta)

        with open(log_path, "w", encoding="utf-8") as f:
            f.write(LOG_HEADER + "\n")
            for r in history:
                f.write(_log_row(r) + "\n")

    if not os.path.exists(best_path):
        # zero-epoch (or fully resumed) run: persist the current state so the
        # returned path is always valid
        meta = {
            "config": _portable_config(config),
            "epoch": start_epoch - 1,
            "scheduler": scheduler.state(),
            "lr_se": optimizers.se.lr,
            "lr_vad": optimizers.vad.lr,
            "history": [list(r) for r in history],
            "best_val": best_val,
        }
        save_training_checkpoint(best_path, model, optimizers, meta)
        with open(log_path, "w", encoding="utf-8") as f:
            f.write(LOG_HEADER + "\n")
            for r in history:
                f.write(_log_row(r) + "\n")
    return TrainResult(best_path, log_path, history, best_val)


def enhance_waveform(model, noisy, identity_mask=False, post_rng=None):
    """Run the full inference pipeline on one waveform."""
    config = model.config
    model.eval()
    spec = dsp.stft(noisy)
    mag, phase = dsp.split_mag_phase(spec)
    mag = mag.astype(model.dtype)
    mag_std, mean, std = dsp.standardize(mag)
    mag_std = mag_std.astype(model.dtype)

    if identity_mask:
        return reconstruct(mag, phase, length=len(noisy))

    with no_grad():
        posterior = model.vad(dsp.log_mfb(mag).astype(model.dtype)).data

        aux = None
        if config.dne == "dne":
            if config.eta == 1.0:
                post_rng = post_rng or np.random.default_rng([config.seed, 71])
                post_emb = post_rng.random(posterior.shape).astype(model.dtype)
            else:
                post_emb = posterior
            aux = model.extractor(mag, Tensor(post_emb), config.eta).data
        elif config.dne in ("sn", "cn"):
            if config.dne == "sn":
                v = simple_noise_feature(mag)
            else:
                v = confident_noise_feature(mag, posterior, config.eta)
            v = (v - mean) / std
            if config.backbone != "unet":
                v = avg_pool_half(v)
            aux = np.broadcast_to(v.astype(model.dtype), (mag.shape[0], v.shape[0]))

        if config.backbone == "unet":
            mask = unet_forward(model.backbone, mag_std, aux)
        else:
            aux_t = None if aux is None else Tensor(np.ascontiguousarray(aux))
            mask = model.backbone(Tensor(mag_std), aux_t).data

    return reconstruct(mask * mag, phase, length=len(noisy))


def vad_posteriors(model, noisy):
    """Per-frame speech posteriors for one waveform."""
    model.eval()
    mag, _ = dsp.split_mag_phase(dsp.stft(noisy))
    with no_grad():
        return model.vad(dsp.log_mfb(mag).astype(model.dtype)).data
