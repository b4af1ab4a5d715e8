"""Physics-informed temporal discriminator and adversarial fine-tuning of the token generator.

The discriminator sees a whole sequence (conditioning plus predicted frames)
together with one consistency score per frame, each broadcast over the grid
as an extra input channel. Conditioning frames carry a score of 1.

During fine-tuning the generator's predicted frames are the decoder output
for the *expected* codebook vector under the teacher-forced token
distribution, so both the frames and their consistency scores stay
differentiable with respect to the transformer's logits.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import ArityError, PrecipSequence
from .physics import (ConsistencyConfig, ResidualConfig, differentiable_scores, precip_free_terms,
                      sequence_scores)
from .tensor import autograd as ag
from .tensor.autograd import Tensor, stop_gradient
from .tensor.checkpoint import load_checkpoint, save_checkpoint
from .tensor.nn import Conv2d, Linear, Module
from .tensor.optim import Adam
from .transformer import TokenTransformer, forward_logits, sample_rollout
from .vqgan import (PROB_EPS, TrainingDivergedError, VqGan, bce_real, decode, decode_frames, encode_tokens,
                    to_model_space)

REPORT_COLUMNS = ("step", "gen_ce", "gen_adv", "disc", "mean_eta_fake", "mean_eta_real")
FAKE_DECODES = ("soft", "argmax", "sample", "rollout")
ABLATIONS = ("full", "-P", "-PT")

# call counters for the physics and temporal-discriminator paths
CALLS = Counter()


@dataclass
class TemporalDiscConfig:
    widths: tuple = (16, 32)
    eta_injection: str = "channel"
    lr: float = 2e-4
    steps: int = 1  # discriminator updates per generator update

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) < 1:
            raise ValueError("discriminator widths must be positive")
        if self.eta_injection != "channel":
            raise ValueError(f"unsupported eta_injection {self.eta_injection!r}; only 'channel'")
        if self.steps < 1:
            raise ValueError("discriminator steps must be >= 1")


@dataclass(frozen=True)
class AblationFlags:
    physics_enabled: bool = True
    temporal_disc_enabled: bool = True

    def __post_init__(self):
        if self.physics_enabled and not self.temporal_disc_enabled:
            raise ValueError("physics scores only reach the generator through the temporal discriminator")

    @classmethod
    def from_name(cls, name: str):
        if name not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {name!r}")
        return cls(name == "full", name != "-PT")

    @property
    def name(self):
        if self.physics_enabled:
            return "full"
        return "-P" if self.temporal_disc_enabled else "-PT"


@dataclass
class PidConfig:
    n_cond: int = 3
    m_pred: int = 6
    steps: int = 100
    lr: float = 5e-4
    batch_size: int = 4
    w_adv: float = 0.1
    disc: TemporalDiscConfig = field(default_factory=TemporalDiscConfig)
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    unfreeze_decoder: bool = False
    spatial_disc: bool = False
    fake_decode: str = "rollout"
    real_from_tokens: bool = True

    def __post_init__(self):
        if isinstance(self.disc, dict):
            self.disc = TemporalDiscConfig(**self.disc)
        if isinstance(self.residual, dict):
            self.residual = ResidualConfig(**self.residual)
        if isinstance(self.consistency, dict):
            self.consistency = ConsistencyConfig(**self.consistency)
        if self.n_cond < 1 or self.m_pred < 1 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("n_cond, m_pred, batch_size >= 1 and steps >= 0 required")
        if self.w_adv < 0:
            raise ValueError("w_adv must be non-negative")
        if self.fake_decode not in FAKE_DECODES:
            raise ValueError(f"fake_decode must be one of {FAKE_DECODES}, got {self.fake_decode!r}")

    def to_dict(self):
        d = asdict(self)
        d["disc"]["widths"] = list(self.disc.widths)
        return d


# -- discriminator ----------------------------------------------------------------

class TemporalDiscriminator(Module):
    """Frames and their score maps stacked as channels, two strided convs, global mean, linear."""

    def __init__(self, n_frames: int, cfg: TemporalDiscConfig = TemporalDiscConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_frames = n_frames
        self.cfg = cfg
        widths = (2 * n_frames,) + cfg.widths
        self.convs = [Conv2d(widths[i], widths[i + 1], 4, rng, stride=2, padding=1)
                      for i in range(len(cfg.widths))]
        self.head = Linear(cfg.widths[-1], 1, rng)

    def forward(self, frames, eta_maps):
        h = ag.concat([frames, eta_maps], axis=1)
        for conv in self.convs:
            h = ag.leaky_relu(conv(h))
        return self.head(ag.mean(h, axis=(2, 3))).reshape(-1)


def _eta_maps(etas, n_cond, shape):
    """(B, M) scores -> (B, N + M, H, W) channels with ones for the conditioning frames."""
    etas = etas if isinstance(etas, Tensor) else Tensor(np.asarray(etas, dtype=np.float64))
    b = etas.shape[0]
    per_frame = ag.concat([Tensor(np.ones((b, n_cond))), etas], axis=1)
    return ag.mul(per_frame.reshape(b, -1, 1, 1), Tensor(np.ones((1, 1) + tuple(shape))))


def temporal_disc_forward(disc: TemporalDiscriminator, frames, etas, max_intensity: float = 100.0):
    """Realness probability D(x, eta) in (0, 1), one per sequence.

    ``frames`` is a PrecipSequence (mm/h) or a model-space array/tensor of
    shape (T, H, W) or (B, T, H, W); ``etas`` has one score per predicted
    frame, i.e. T minus the number of conditioning frames.
    """
    CALLS["disc"] += 1
    if isinstance(frames, PrecipSequence):
        frames = to_model_space(frames.array, max_intensity)
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
    eta = etas if isinstance(etas, Tensor) else Tensor(np.asarray(etas, dtype=np.float64))
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if eta.ndim == 1:
        eta = eta.reshape(1, -1)
    if x.shape[1] != disc.n_frames:
        raise ArityError(f"discriminator expects {disc.n_frames} frames, got {x.shape[1]}")
    n_cond = disc.n_frames - eta.shape[1]
    if n_cond < 0 or eta.shape[0] != x.shape[0]:
        raise ArityError(f"eta shape {eta.shape} does not match {x.shape[0]} sequences of {disc.n_frames} frames")
    return ag.sigmoid(disc(x, _eta_maps(eta, n_cond, x.shape[2:])))


def _clamp(p):
    return ag.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def pid_disc_loss(d_real, d_fake):
    """-mean log D(x, eta) - mean log(1 - D(x_hat, eta_hat)), probabilities clamped."""
    return -ag.mean(ag.log(_clamp(d_real))) - ag.mean(ag.log(1.0 - _clamp(d_fake)))


def pid_gen_loss(d_fake):
    """Non-saturating generator loss -mean log D(x_hat, eta_hat)."""
    return -ag.mean(ag.log(_clamp(d_fake)))


# -- data --------------------------------------------------------------------------

@dataclass
class PidData:
    tokens: np.ndarray       # (S, T, h, w)
    frames: np.ndarray       # (S, T, H, W) model space
    free_terms: np.ndarray   # (S, M, H, W) residual + precipitation, mm/h
    eta_real: np.ndarray     # (S, M)
    recon: np.ndarray | None = None      # (S, T, H, W) decoded true tokens, model space
    eta_recon: np.ndarray | None = None  # (S, M)

    @property
    def streams(self):
        return self.tokens.reshape(len(self.tokens), -1)


def prepare_pid_data(samples, vqgan: VqGan, cfg: PidConfig = PidConfig()) -> PidData:
    """Tokenize sequences and precompute the precipitation-free physics terms of each target frame.

    ``samples`` holds objects with ``precip`` (PrecipSequence of N + M frames)
    and ``meteo`` (MeteoStacks covering every target frame and its predecessor).
    """
    tokens, frames, free, eta, recon, eta_rec = [], [], [], [], [], []
    t_len = cfg.n_cond + cfg.m_pred
    for s in samples:
        seq = s.precip
        if len(seq) != t_len:
            raise ArityError(f"sequence has {len(seq)} frames, expected {t_len}")
        target = PrecipSequence(seq.frames[cfg.n_cond:], seq.step_minutes)
        free.append(precip_free_terms(target.timestamps, s.meteo, seq.step_minutes, cfg.residual))
        eta.append(sequence_scores(target, s.meteo, cfg.residual, cfg.consistency))
        tok = encode_tokens(vqgan, seq.array)
        rec = decode_frames(vqgan, tok)
        tokens.append(tok)
        frames.append(to_model_space(seq.array, vqgan.cfg.max_intensity))
        recon.append(to_model_space(rec, vqgan.cfg.max_intensity))
        rec_target = PrecipSequence.from_array(rec[cfg.n_cond:], seq.step_minutes, target.frames[0].timestamp,
                                               seq.pixel_size_km)
        eta_rec.append(sequence_scores(rec_target, s.meteo, cfg.residual, cfg.consistency))
    return PidData(np.stack(tokens), np.stack(frames), np.stack(free), np.stack(eta),
                   np.stack(recon), np.stack(eta_rec))


# -- generator side ----------------------------------------------------------------

def model_space_to_mm_h(y, max_intensity: float):
    """Differentiable inverse of the log1p intensity transform, clamped at 0."""
    half = 0.5 * math.log1p(max_intensity)
    return ag.relu(ag.exp(ag.clip(y, -1.0, 1.0) * half + half) - 1.0)


def _target_codes(logits, n_cond, frame_shape):
    h, w = frame_shape
    start = n_cond * h * w
    return logits[:, start - 1:logits.shape[1] - 1]


def _decode_codes(z, vqgan, frame_shape):
    b, n, _ = z.shape
    h, w = frame_shape
    m = n // (h * w)
    z = ag.transpose(z.reshape(b * m, h, w, -1), (0, 3, 1, 2))
    out = decode(vqgan, z)  # (B*M, 1, H, W)
    return out.reshape(b, m, *out.shape[2:])


def _straight_through(probs, codes, vqgan):
    z = ag.matmul(probs, vqgan.codebook)
    return z + Tensor(vqgan.codebook.data[codes] - z.data)


def soft_target_frames(logits, vqgan: VqGan, n_cond: int, frame_shape, mode: str = "soft", rng=None):
    """Decoded target frames from teacher-forced logits, model space (B, M, H, W).

    ``logits`` are (B, L, V); position p - 1 predicts token p. ``mode``:

    - ``"soft"``: decode the expected code under the softmax.
    - ``"argmax"``: decode the most likely code; gradients flow through the
      expected code (straight-through).
    - ``"sample"``: decode a code drawn with Gumbel noise from ``rng``;
      gradients flow through the Gumbel-softmax relaxation at unit temperature.
    """
    if mode not in ("soft", "argmax", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    sel = _target_codes(logits, n_cond, frame_shape)
    if mode == "sample":
        if rng is None:
            raise ValueError("mode 'sample' needs an rng")
        u = np.clip(rng.random(sel.shape), 1e-12, 1.0 - 1e-12)
        sel = sel + Tensor(-np.log(-np.log(u)).astype(sel.data.dtype))
    probs = ag.softmax(sel, axis=-1)
    if mode == "soft":
        z = ag.matmul(probs, vqgan.codebook)  # (B, M*h*w, D)
    else:
        z = _straight_through(probs, np.argmax(probs.data, axis=-1), vqgan)
    return _decode_codes(z, vqgan, frame_shape)


def rollout_target_frames(logits, tokens, vqgan: VqGan, n_cond: int, frame_shape):
    """Decoded target frames of given token streams, straight-through to ``logits``.

    ``tokens`` (B, L) are typically a sampled rollout and ``logits`` the
    model's teacher-forced logits on that same stream; the forward value is
    the decode of the sampled codes and gradients flow through the expected
    code under the softmax.
    """
    h, w = frame_shape
    probs = ag.softmax(_target_codes(logits, n_cond, frame_shape), axis=-1)
    codes = np.asarray(tokens)[:, n_cond * h * w:]
    return _decode_codes(_straight_through(probs, codes, vqgan), vqgan, frame_shape)


def physics_eta(pred_mm_h, free_terms, ccfg: ConsistencyConfig):
    CALLS["physics"] += 1
    return differentiable_scores(pred_mm_h, free_terms, ccfg)


def disc_seed(seed: int) -> int:
    """Initialisation seed of the temporal discriminator for a training seed."""
    return int(np.random.default_rng([seed, 1]).integers(2 ** 31))


@dataclass
class PidReport:
    step: int
    gen_ce: float
    gen_adv: float | None = None
    disc: float | None = None
    mean_eta_fake: float | None = None
    mean_eta_real: float | None = None
    gen_total: float = 0.0

    def row(self):
        return [self.step] + ["" if v is None else repr(float(v))
                              for v in (self.gen_ce, self.gen_adv, self.disc, self.mean_eta_fake,
                                        self.mean_eta_real)]


@dataclass
class PidTrainResult:
    transformer: TokenTransformer
    disc: TemporalDiscriminator | None
    reports: list
    calls: dict


def train_pid(data: PidData, vqgan: VqGan, transformer: TokenTransformer, flags: AblationFlags = AblationFlags(),
              cfg: PidConfig = PidConfig(), seed: int = 0, report_csv=None) -> PidTrainResult:
    """Alternating discriminator/generator fine-tuning of a pretrained transformer.

    The generator loss is the teacher-forced cross-entropy plus
    ``w_adv * pid_gen_loss``. Batches and dropout draw from the same streams
    as ``train_transformer``, so with the temporal discriminator disabled the
    loss curve is the plain transformer curve for the same seed. The
    transformer is updated in place; the decoder stays frozen unless
    ``cfg.unfreeze_decoder``.
    """
    streams = data.streams
    s, t_len, h, w = data.tokens.shape
    if t_len != cfg.n_cond + cfg.m_pred:
        raise ArityError(f"data has {t_len} frames per sequence, expected {cfg.n_cond + cfg.m_pred}")
    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng(rng.integers(2 ** 63))
    before = Counter(CALLS)
    vqgan.freeze()
    params = transformer.parameters()
    if cfg.unfreeze_decoder:
        for p in vqgan.decoder.parameters(trainable_only=False):
            p.requires_grad = True
        params = params + vqgan.decoder.parameters()
    opt = Adam(params, lr=cfg.lr, clip_norm=1.0)
    disc = dopt = None
    if flags.temporal_disc_enabled:
        disc = TemporalDiscriminator(t_len, cfg.disc, disc_seed(seed))
        dopt = Adam(disc.parameters(), lr=cfg.disc.lr, betas=(0.5, 0.9))
        gumbel_rng = np.random.default_rng([seed, 2])
    transformer.train()
    reports = []
    fh = open(report_csv, "w", newline="") if report_csv is not None else None
    try:
        writer = csv.writer(fh, lineterminator="\n") if fh is not None else None
        if writer is not None:
            writer.writerow(REPORT_COLUMNS)
        for step in range(cfg.steps):
            idx = np.sort(rng.choice(s, size=min(cfg.batch_size, s), replace=False))
            logits = forward_logits(transformer, streams[idx], drop_rng)
            ce = ag.cross_entropy(logits[:, :-1], streams[idx][:, 1:])
            rep = PidReport(step, ce.item())
            total = ce
            if disc is not None:
                if cfg.fake_decode == "rollout":
                    cond_tok = data.tokens[idx][:, :cfg.n_cond]
                    rolled = sample_rollout(transformer, cond_tok, cfg.m_pred, 1.0, 0,
                                            gumbel_rng.integers(2 ** 31, size=len(idx)))
                    stream = np.concatenate([cond_tok, rolled], axis=1).reshape(len(idx), -1)
                    fake = rollout_target_frames(forward_logits(transformer, stream, gumbel_rng), stream, vqgan,
                                                 cfg.n_cond, (h, w))
                else:
                    fake = soft_target_frames(logits, vqgan, cfg.n_cond, (h, w), cfg.fake_decode, gumbel_rng)
                use_rec = cfg.real_from_tokens and data.recon is not None
                real_frames = data.recon[idx] if use_rec else data.frames[idx]
                real = Tensor(real_frames)
                cond = Tensor(real_frames[:, :cfg.n_cond])
                if flags.physics_enabled:
                    eta_fake = physics_eta(model_space_to_mm_h(fake, vqgan.cfg.max_intensity),
                                           data.free_terms[idx], cfg.consistency)
                    eta_real = data.eta_recon[idx] if use_rec else data.eta_real[idx]
                else:
                    eta_fake = Tensor(np.ones((len(idx), cfg.m_pred)))
                    eta_real = np.ones((len(idx), cfg.m_pred))
                fake_seq = ag.concat([cond, fake], axis=1)
                for _ in range(cfg.disc.steps):
                    d_loss = pid_disc_loss(temporal_disc_forward(disc, real, eta_real),
                                           temporal_disc_forward(disc, stop_gradient(fake_seq),
                                                                 stop_gradient(eta_fake)))
                    dopt.zero_grad()
                    d_loss.backward()
                    dopt.step()
                g_adv = pid_gen_loss(temporal_disc_forward(disc, fake_seq, eta_fake))
                total = ce + cfg.w_adv * g_adv
                if cfg.spatial_disc:
                    total = total + cfg.w_adv * bce_real(vqgan.disc(fake.reshape(-1, 1, *fake.shape[2:])))
                rep.gen_adv, rep.disc = g_adv.item(), d_loss.item()
                rep.mean_eta_fake = float(np.mean(eta_fake.data))
                rep.mean_eta_real = float(np.mean(eta_real))
            rep.gen_total = total.item()
            if not np.isfinite(rep.gen_total) or (rep.disc is not None and not np.isfinite(rep.disc)):
                raise TrainingDivergedError(f"non-finite loss at step {step}: {rep}; "
                                            f"previous: {reports[-1] if reports else None}")
            opt.zero_grad()
            total.backward()
            opt.step()
            reports.append(rep)
            if writer is not None:
                writer.writerow(rep.row())
    finally:
        if fh is not None:
            fh.close()
    calls = {k: CALLS[k] - before.get(k, 0) for k in ("physics", "disc")}
    return PidTrainResult(transformer, disc, reports, calls)


# -- prediction ------------------------------------------------------------------------

@dataclass
class Ensemble:
    mean: PrecipSequence
    members: list


def predict_ensemble(cond: PrecipSequence, vqgan: VqGan, transformer: TokenTransformer, m_pred: int,
                     n_samples: int = 5, seeds=None, temperature: float = 1.0, top_k: int = 64) -> Ensemble:
    """Sample ``n_samples`` token rollouts, decode them, and average pixel-wise.

    Forecast frames continue the conditioning timestamps at the same step.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    seeds = list(range(n_samples)) if seeds is None else list(seeds)
    if len(seeds) != n_samples:
        raise ValueError("need one seed per ensemble member")
    tok = encode_tokens(vqgan, cond.array)
    rolls = sample_rollout(transformer, np.stack([tok] * n_samples), m_pred, temperature, top_k, seeds)
    start = cond.timestamps[-1] + cond.step_minutes
    members = []
    for r in rolls:
        frames = decode_frames(vqgan, r).astype(np.float32)
        members.append(PrecipSequence.from_array(frames, cond.step_minutes, start, cond.pixel_size_km))
    mean = np.mean([m.array.astype(np.float64) for m in members], axis=0).astype(np.float32)
    return Ensemble(PrecipSequence.from_array(mean, cond.step_minutes, start, cond.pixel_size_km), members)


# -- checkpoints -------------------------------------------------------------------------

def save_temporal_disc(path, disc: TemporalDiscriminator):
    meta = {"kind": "temporal_disc", "n_frames": disc.n_frames,
            "config": {"widths": list(disc.cfg.widths), "eta_injection": disc.cfg.eta_injection,
                       "lr": disc.cfg.lr, "steps": disc.cfg.steps}}
    save_checkpoint(path, disc.state_dict(), meta)


def load_temporal_disc(path) -> TemporalDiscriminator:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "temporal_disc":
        raise ValueError(f"{path} is not a temporal discriminator checkpoint")
    disc = TemporalDiscriminator(meta["n_frames"], TemporalDiscConfig(**meta["config"]))
    disc.load_state_dict(params)
    return disc
