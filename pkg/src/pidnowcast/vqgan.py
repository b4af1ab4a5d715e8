"""Vector-quantized autoencoder trained against a patch discriminator.

Frames enter in model space: ``log1p(x)`` scaled to [-1, 1] by a fixed
maximum intensity. The encoder downsamples by ``downsample_factor``, every
latent vector snaps to its nearest codebook entry, and gradients cross the
quantizer with the straight-through rule ``z_e + sg(z_q - z_e)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import autograd as ag
from .tensor.autograd import ShapeError, Tensor, nondiff, stop_gradient
from .tensor.checkpoint import load_checkpoint, save_checkpoint
from .tensor.nn import Conv2d, ConvTranspose2d, Module, Parameter
from .tensor.optim import Adam

LOSS_COLUMNS = ("step", "rec", "commit_cb", "commit_enc", "perceptual", "gan_g", "gan_d", "lambda_gan")
PROB_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class VqGanConfig:
    codebook_size: int = 512
    code_dim: int = 64
    downsample_factor: int = 4
    channels: tuple = (16, 32)
    commitment_weight: float = 1.0
    perceptual_weight: float = 1.0
    gan_start_step: int = 2000
    delta: float = 1e-6
    max_intensity: float = 100.0
    disc_channels: int = 16
    dead_code_steps: int = 200
    lr: float = 2e-3
    disc_lr: float = 2e-4
    batch_size: int = 8
    perceptual_seed: int = 1234
    max_gan_weight: float = 1e4

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        ds = self.downsample_factor
        if ds < 1 or ds & (ds - 1):
            raise ValueError(f"downsample_factor must be a power of 2, got {ds}")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if not self.channels or min(self.channels) < 1 or self.code_dim < 1:
            raise ValueError("channel widths and code_dim must be positive")
        if not self.max_intensity > 0:
            raise ValueError("max_intensity must be positive")

    @property
    def n_down(self) -> int:
        return int(round(math.log2(self.downsample_factor)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class TokenGrid:
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ShapeError(f"TokenGrid must be 2-D, got shape {self.indices.shape}")

    def validate(self, vocab: int):
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= vocab):
            raise IndexError(f"token index outside [0, {vocab})")
        return self


@dataclass
class LossReport:
    rec: float = 0.0
    commit_cb: float = 0.0
    commit_enc: float = 0.0
    perceptual: float = 0.0
    gan_g: float = 0.0
    gan_d: float = 0.0
    lambda_gan: float = 0.0

    def row(self, step):
        return [step] + [getattr(self, c) for c in LOSS_COLUMNS[1:]]

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())


# -- intensity transform -----------------------------------------------------

def to_model_space(x, max_intensity: float):
    """mm/h -> [-1, 1] via log1p scaled by log1p(max_intensity)."""
    y = 2.0 * np.log1p(np.maximum(np.asarray(x, dtype=np.float64), 0.0)) / math.log1p(max_intensity) - 1.0
    return np.clip(y, -1.0, 1.0)


def from_model_space(y, max_intensity: float):
    y = np.clip(np.asarray(y, dtype=np.float64), -1.0, 1.0)
    return np.maximum(np.expm1((y + 1.0) * 0.5 * math.log1p(max_intensity)), 0.0)


# -- networks ----------------------------------------------------------------

def _width(channels, i):
    return channels[min(i, len(channels) - 1)]


class Encoder(Module):
    def __init__(self, cfg: VqGanConfig, rng):
        ch = cfg.channels
        self.conv_in = Conv2d(1, ch[0], 3, rng, padding=1)
        self.down = [Conv2d(_width(ch, i), _width(ch, i + 1), 4, rng, stride=2, padding=1)
                     for i in range(cfg.n_down)]
        self.conv_out = Conv2d(_width(ch, cfg.n_down), cfg.code_dim, 1, rng)

    def forward(self, x):
        h = ag.leaky_relu(self.conv_in(x))
        for layer in self.down:
            h = ag.leaky_relu(layer(h))
        return self.conv_out(h)


class Decoder(Module):
    def __init__(self, cfg: VqGanConfig, rng):
        ch = cfg.channels
        self.conv_in = Conv2d(cfg.code_dim, _width(ch, cfg.n_down), 1, rng)
        self.up = [ConvTranspose2d(_width(ch, i + 1), _width(ch, i), 4, rng, stride=2, padding=1)
                   for i in reversed(range(cfg.n_down))]
        self.conv_out = Conv2d(ch[0], 1, 3, rng, padding=1)

    def forward(self, z):
        h = ag.leaky_relu(self.conv_in(z))
        for layer in self.up:
            h = ag.leaky_relu(layer(h))
        return self.conv_out(h)

    def last_layer(self):
        return [self.conv_out.weight, self.conv_out.bias]


class PerceptualNet(Module):
    """Frozen, randomly initialised 3-layer CNN whose feature maps define the perceptual distance."""

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        self.layers = [Conv2d(1, 8, 3, rng, padding=1), Conv2d(8, 16, 3, rng, stride=2, padding=1),
                       Conv2d(16, 32, 3, rng, stride=2, padding=1)]
        self.freeze()

    def forward(self, x):
        feats = []
        for layer in self.layers:
            x = ag.leaky_relu(layer(x))
            feats.append(x)
        return feats


class PatchDiscriminator(Module):
    def __init__(self, width: int, rng):
        self.c1 = Conv2d(1, width, 4, rng, stride=2, padding=1)
        self.c2 = Conv2d(width, 2 * width, 4, rng, stride=2, padding=1)
        self.c3 = Conv2d(2 * width, 1, 3, rng, padding=1)

    def forward(self, x):
        return self.c3(ag.leaky_relu(self.c2(ag.leaky_relu(self.c1(x)))))


class VqGan(Module):
    def __init__(self, cfg: VqGanConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        k = cfg.codebook_size
        self.codebook = Parameter(rng.uniform(-1.0 / k, 1.0 / k, size=(k, cfg.code_dim)))
        self.disc = PatchDiscriminator(cfg.disc_channels, rng)
        self.perceptual = PerceptualNet(cfg.perceptual_seed)

    def generator_parameters(self):
        return self.encoder.parameters() + self.decoder.parameters() + [self.codebook]


# -- quantization ------------------------------------------------------------

def nearest_codes(vectors, codebook):
    """Index of the nearest codebook row (Euclidean) per vector; ties go to the lowest index."""
    v = np.asarray(vectors, dtype=np.float64)
    c = np.asarray(codebook, dtype=np.float64)
    d = (v * v).sum(1, keepdims=True) - 2.0 * v @ c.T + (c * c).sum(1)[None, :]
    return np.argmin(d, axis=1)


def lookup(codebook, indices):
    """Quantized latents (B, D, h, w) for token indices (B, h, w)."""
    idx = np.asarray(indices)
    z = ag.embedding(codebook, idx)  # (B, h, w, D)
    return ag.transpose(z, (0, 3, 1, 2))


@dataclass
class Encoded:
    tokens: np.ndarray
    z_e: Tensor
    z_q: Tensor
    z_st: Tensor
    commit_cb: Tensor
    commit_enc: Tensor


def quantize(z_e, codebook):
    b, d, h, w = z_e.shape
    flat = np.ascontiguousarray(z_e.data.transpose(0, 2, 3, 1)).reshape(-1, d)
    tokens = nondiff(nearest_codes(flat, codebook.data).reshape(b, h, w))
    z_q = lookup(codebook, tokens)
    commit_cb = ag.mse_loss(stop_gradient(z_e), z_q)
    commit_enc = ag.mse_loss(stop_gradient(z_q), z_e)
    z_st = ag.add(z_e, stop_gradient(ag.sub(z_q, z_e)))
    return Encoded(tokens, z_e, z_q, z_st, commit_cb, commit_enc)


def _as_batch(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        x = x.reshape(x.shape[0], 1, *x.shape[1:])
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected frames (B, H, W) or (B, 1, H, W), got {x.shape}")
    return x


def encode_quantize(model: VqGan, x) -> Encoded:
    """Encode model-space frames and snap latents to the codebook."""
    x = _as_batch(x)
    ds = model.cfg.downsample_factor
    if x.shape[2] % ds or x.shape[3] % ds:
        raise ShapeError(f"encode_quantize: frame {x.shape[2:]} not divisible by downsample factor {ds}")
    return quantize(model.encoder(x), model.codebook)


def decode(model: VqGan, tokens_or_latents):
    """Decoder output in model space, shape (B, 1, H, W).

    Accepts token indices (B, h, w) or a TokenGrid, or latents (B, D, h, w).
    """
    if isinstance(tokens_or_latents, TokenGrid):
        tokens_or_latents = tokens_or_latents.validate(model.cfg.codebook_size).indices[None]
    if isinstance(tokens_or_latents, Tensor):
        z = tokens_or_latents
    else:
        arr = np.asarray(tokens_or_latents)
        if np.issubdtype(arr.dtype, np.integer):
            z = lookup(model.codebook, arr)
        else:
            z = Tensor(arr)
    return model.decoder(z)


def decode_frames(model: VqGan, tokens) -> np.ndarray:
    """Tokens (B, h, w) -> precipitation (B, H, W) in mm/h, clamped at 0."""
    with ag.no_grad():
        out = decode(model, np.asarray(tokens, dtype=np.int64))
    return from_model_space(out.data[:, 0], model.cfg.max_intensity)


def encode_tokens(model: VqGan, frames_mm_h) -> np.ndarray:
    """Precipitation (B, H, W) in mm/h -> tokens (B, h, w)."""
    with ag.no_grad():
        enc = encode_quantize(model, to_model_space(frames_mm_h, model.cfg.max_intensity))
    return np.asarray(enc.tokens)


# -- losses ------------------------------------------------------------------

def perceptual_loss(net: PerceptualNet, x, x_hat):
    """Sum over layers of the mean absolute feature difference."""
    total = None
    for fa, fb in zip(net(x), net(x_hat)):
        term = ag.l1_loss(fa, fb)
        total = term if total is None else total + term
    return total


def vqvae_loss(x, x_hat, enc: Encoded, cfg: VqGanConfig, perceptual: PerceptualNet | None = None):
    """Non-adversarial loss: rec + w_c (codebook + encoder commitment) + w_p perceptual."""
    rec = ag.l1_loss(x_hat, x)
    total = rec + cfg.commitment_weight * (enc.commit_cb + enc.commit_enc)
    perc = None
    if perceptual is not None and cfg.perceptual_weight > 0:
        perc = perceptual_loss(perceptual, x, x_hat)
        total = total + cfg.perceptual_weight * perc
    report = LossReport(rec=rec.item(), commit_cb=enc.commit_cb.item(), commit_enc=enc.commit_enc.item(),
                        perceptual=0.0 if perc is None else perc.item())
    return total, rec, perc, report


def _clamped_prob(logits):
    return ag.clip(ag.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)


def bce_real(logits):
    """-mean log D for discriminator logits."""
    return -ag.mean(ag.log(_clamped_prob(logits)))


def bce_fake(logits):
    """-mean log(1 - D)."""
    return -ag.mean(ag.log(1.0 - _clamped_prob(logits)))


def spatial_disc_loss(real_logits, fake_logits):
    """(d_loss, g_adv) for patch logits; probabilities clamped to [1e-7, 1 - 1e-7]."""
    return bce_real(real_logits) + bce_fake(fake_logits), bce_real(fake_logits)


def _norm(grads):
    return math.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads))


def adaptive_gan_weight(rec_like_loss, gan_loss, last_layer_params, delta: float = 1e-6,
                        max_weight: float = 1e4) -> float:
    """||grad rec|| / (||grad gan|| + delta) on the decoder's last layer, clamped to [0, max_weight].

    Returned as a plain float, so no gradient flows through the weight.
    """
    g_rec = _norm(ag.grad(rec_like_loss, last_layer_params))
    g_gan = _norm(ag.grad(gan_loss, last_layer_params))
    return gan_weight_from_norms(g_rec, g_gan, delta, max_weight)


def gan_weight_from_norms(g_rec, g_gan, delta=1e-6, max_weight=1e4) -> float:
    return float(min(max(g_rec / (g_gan + delta), 0.0), max_weight))


# -- invariant checks --------------------------------------------------------

def gradient_routing(model: VqGan, x_model):
    """Check straight-through and commitment-asymmetry gradient routing on one batch.

    Returns a dict of booleans; every value must be True.
    """
    x = _as_batch(x_model)
    enc = encode_quantize(model, x)
    rec = ag.l1_loss(model.decoder(enc.z_st), x)
    g_ze, g_st = ag.grad(rec, [enc.z_e, enc.z_st])
    enc_params = model.encoder.parameters()
    cb_grads = ag.grad(enc.commit_cb, [model.codebook] + enc_params)
    en_grads = ag.grad(enc.commit_enc, [model.codebook] + enc_params)
    exact = bool(enc.commit_cb.item() == 0.0)
    return {
        "straight_through": bool(np.array_equal(g_ze, g_st)),
        "codebook_term_moves_codebook": exact or bool(np.any(cb_grads[0] != 0)),
        "codebook_term_spares_encoder": all(not np.any(g) for g in cb_grads[1:]),
        "encoder_term_moves_encoder": exact or any(np.any(g) for g in en_grads[1:]),
        "encoder_term_spares_codebook": not np.any(en_grads[0]),
    }


def assert_gradient_routing(model, x_model, step=None):
    bad = [k for k, ok in gradient_routing(model, x_model).items() if not ok]
    if bad:
        where = "" if step is None else f" at step {step}"
        raise AssertionError(f"gradient routing violated{where}: {', '.join(bad)}")


# -- training ----------------------------------------------------------------

@dataclass
class VqGanTrainResult:
    model: VqGan
    reports: list = field(default_factory=list)
    reseeded: int = 0


def _reseed_dead_codes(model, last_used, step, z_e_flat, rng, opt, cb_slot):
    dead = np.flatnonzero(step - last_used >= model.cfg.dead_code_steps)
    if dead.size == 0:
        return 0
    pick = rng.integers(0, len(z_e_flat), size=dead.size)
    cb = model.codebook.data.copy()
    cb[dead] = z_e_flat[pick]
    model.codebook.data = cb
    if opt.state.m:
        opt.state.m[cb_slot][dead] = 0.0
        opt.state.v[cb_slot][dead] = 0.0
    last_used[dead] = step
    return int(dead.size)


def train_vqgan(frames_mm_h, cfg: VqGanConfig = VqGanConfig(), steps: int = 500, seed: int = 0,
                loss_csv=None, check_every: int = 0, model: VqGan | None = None) -> VqGanTrainResult:
    """Alternate autoencoder(+adversarial) and discriminator updates.

    The adversarial terms, and the discriminator updates, start at
    ``cfg.gan_start_step``. Every ``check_every`` steps the gradient routing
    invariants are asserted on the current batch.
    """
    frames = to_model_space(np.asarray(frames_mm_h, dtype=np.float64), cfg.max_intensity)
    if frames.ndim != 3:
        raise ShapeError(f"train_vqgan expects frames (N, H, W), got {frames.shape}")
    rng = np.random.default_rng(seed)
    model = model if model is not None else VqGan(cfg, seed)
    gen_params = model.generator_parameters()
    opt = Adam(gen_params, lr=cfg.lr)
    dopt = Adam(model.disc.parameters(), lr=cfg.disc_lr, betas=(0.5, 0.9))
    cb_slot = len(gen_params) - 1
    last_used = np.zeros(cfg.codebook_size, dtype=np.int64)
    result = VqGanTrainResult(model)
    last = None
    writer = None
    fh = open(loss_csv, "w", newline="") if loss_csv is not None else None
    try:
        if fh is not None:
            writer = csv.writer(fh)
            writer.writerow(LOSS_COLUMNS)
        n = len(frames)
        for step in range(steps):
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            x = Tensor(frames[idx][:, None])
            if check_every and step % check_every == 0:
                assert_gradient_routing(model, x, step)
            enc = encode_quantize(model, x)
            x_hat = model.decoder(enc.z_st)
            total, rec, perc, report = vqvae_loss(x, x_hat, enc, cfg, model.perceptual)
            use_gan = step >= cfg.gan_start_step
            if use_gan:
                g_adv = bce_real(model.disc(x_hat))
                rec_like = rec if perc is None else rec + cfg.perceptual_weight * perc
                lam = adaptive_gan_weight(rec_like, g_adv, model.decoder.last_layer(), cfg.delta,
                                          cfg.max_gan_weight)
                total = total + lam * g_adv
                report.gan_g, report.lambda_gan = g_adv.item(), lam
            if not (np.isfinite(total.item()) and report.finite()):
                raise TrainingDivergedError(f"non-finite loss at step {step}; last finite report: {last}")
            opt.zero_grad()
            total.backward()
            opt.step()
            if use_gan:
                d_loss, _ = spatial_disc_loss(model.disc(x), model.disc(stop_gradient(x_hat)))
                dopt.zero_grad()
                d_loss.backward()
                dopt.step()
                report.gan_d = d_loss.item()
            last_used[np.unique(enc.tokens)] = step
            flat = np.ascontiguousarray(enc.z_e.data.transpose(0, 2, 3, 1)).reshape(-1, cfg.code_dim)
            result.reseeded += _reseed_dead_codes(model, last_used, step, flat, rng, opt, cb_slot)
            last = report
            result.reports.append(report)
            if writer is not None:
                writer.writerow(report.row(step))
    finally:
        if fh is not None:
            fh.close()
    return result


def save_vqgan(path, model: VqGan, extra: dict | None = None):
    meta = {"kind": "vqgan", "config": model.cfg.to_dict()}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_vqgan(path) -> VqGan:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "vqgan":
        raise ValueError(f"{path} is not a vqgan checkpoint")
    model = VqGan(VqGanConfig(**meta["config"]))
    model.load_state_dict(params)
    return model
