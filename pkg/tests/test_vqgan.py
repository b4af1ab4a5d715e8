import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from pidnowcast.tensor import Tensor, grad, grad_check
from pidnowcast.tensor import autograd as ag
from pidnowcast.tensor.autograd import ShapeError
from pidnowcast.tensor.gradcheck import numeric_gradient, relative_deviation
from pidnowcast.vqgan import (LOSS_COLUMNS, TokenGrid, TrainingDivergedError, VqGan, VqGanConfig,
                              adaptive_gan_weight, decode, decode_frames, encode_quantize,
                              encode_tokens, from_model_space, gan_weight_from_norms,
                              gradient_routing, load_vqgan, nearest_codes, quantize, save_vqgan,
                              spatial_disc_loss, to_model_space, train_vqgan, vqvae_loss)

TINY = VqGanConfig(codebook_size=8, code_dim=4, downsample_factor=2, channels=(3,), disc_channels=2)


def blobs(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.zeros((n, size, size))
    for i in range(n):
        for _ in range(3):
            cx, cy, r, a = rng.uniform(0, size), rng.uniform(0, size), rng.uniform(2, 6), rng.uniform(1, 20)
            out[i] += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    return out


def test_transform_roundtrip():
    x = np.array([0.0, 0.3, 5.0, 99.0])
    assert_allclose(from_model_space(to_model_space(x, 100.0), 100.0), x, rtol=1e-12, atol=1e-12)
    assert to_model_space(0.0, 100.0) == -1.0 and to_model_space(1e4, 100.0) == 1.0


def test_exact_match_entry_zero():
    cb = Tensor(np.array([[0.5, -1.0], [3.0, 3.0]]), requires_grad=True)
    z = Tensor(np.array([0.5, -1.0]).reshape(1, 2, 1, 1), requires_grad=True)
    enc = quantize(z, cb)
    assert enc.tokens.tolist() == [[[0]]]
    assert enc.commit_cb.item() == 0.0 and enc.commit_enc.item() == 0.0


def test_tie_goes_to_lowest_index():
    cb = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    assert nearest_codes(np.zeros((1, 2)), cb).tolist() == [0]
    assert nearest_codes(np.array([[0.0, -5.0]]), cb[[2, 1, 0]]).tolist() == [1]


def test_assignment_matches_brute_force():
    rng = np.random.default_rng(0)
    cb = rng.normal(size=(2, 3))
    v = rng.normal(size=(4, 3))
    brute = [min(range(2), key=lambda k: float(np.sum((row - cb[k]) ** 2))) for row in v]
    assert nearest_codes(v, cb).tolist() == brute


def test_quantization_idempotent():
    model = VqGan(TINY, seed=1)
    x = to_model_space(blobs(2, 8), TINY.max_intensity)
    enc = encode_quantize(model, x)
    again = quantize(enc.z_q, model.codebook)
    assert np.array_equal(again.tokens, enc.tokens)


def test_non_divisible_dims():
    with pytest.raises(ShapeError, match="divisible"):
        encode_quantize(VqGan(TINY), np.zeros((1, 7, 8)))


def test_decode_token_latent_equivalence():
    model = VqGan(TINY, seed=2)
    tokens = np.random.default_rng(0).integers(0, TINY.codebook_size, (1, 4, 4))
    latents = model.codebook.data[tokens].transpose(0, 3, 1, 2)
    a = decode(model, tokens).data
    b = decode(model, latents).data
    c = decode(model, TokenGrid(tokens[0])).data
    assert np.array_equal(a, b) and np.array_equal(a, c)
    assert a.shape == (1, 1, 8, 8)
    with pytest.raises(IndexError):
        decode(model, TokenGrid(np.full((4, 4), TINY.codebook_size)))


def test_zero_latents_finite():
    out = decode(VqGan(TINY), np.zeros((2, TINY.code_dim, 4, 4), dtype=np.float32))
    assert np.all(np.isfinite(out.data))
    assert np.all(decode_frames(VqGan(TINY), np.zeros((1, 4, 4), dtype=int)) >= 0)


def test_loss_terms_zero_at_perfect_reconstruction():
    model = VqGan(TINY, seed=3)
    x = Tensor(to_model_space(blobs(1, 8), TINY.max_intensity)[:, None])
    z = model.codebook.data[[1, 2, 3, 1]].T.reshape(1, TINY.code_dim, 2, 2)
    enc = quantize(Tensor(z), model.codebook)
    _, _, _, rep = vqvae_loss(x, x, enc, TINY, model.perceptual)
    assert (rep.rec, rep.commit_cb, rep.commit_enc, rep.perceptual) == (0.0, 0.0, 0.0, 0.0)


def test_rec_of_unit_offset():
    model = VqGan(TINY, seed=3)
    x = Tensor(np.zeros((1, 1, 8, 8)))
    enc = encode_quantize(model, x)
    _, rec, _, rep = vqvae_loss(x, x + 1.0, enc, TINY)
    assert rep.rec == 1.0


def test_total_equals_sum_of_terms():
    cfg = VqGanConfig(codebook_size=8, code_dim=4, downsample_factor=2, channels=(3,),
                      commitment_weight=0.7, perceptual_weight=1.3)
    model = VqGan(cfg, seed=4)
    x = Tensor(to_model_space(blobs(2, 8, seed=5), cfg.max_intensity)[:, None])
    enc = encode_quantize(model, x)
    x_hat = model.decoder(enc.z_st)
    total, _, _, rep = vqvae_loss(x, x_hat, enc, cfg, model.perceptual)
    xs, xh = x.data.astype(np.float64), x_hat.data.astype(np.float64)
    rec = np.mean(np.abs(xh - xs))
    zq, ze = enc.z_q.data.astype(np.float64), enc.z_e.data.astype(np.float64)
    commit = 2 * np.mean((zq - ze) ** 2)
    perc = sum(float(np.mean(np.abs(a.data.astype(np.float64) - b.data)))
               for a, b in zip(model.perceptual(x), model.perceptual(x_hat)))
    assert total.item() == pytest.approx(rec + 0.7 * commit + 1.3 * perc, rel=1e-6)
    assert rep.rec == pytest.approx(rec, rel=1e-6)


def vqvae_toy():
    model = VqGan(TINY, seed=9)
    x = Tensor(to_model_space(blobs(2, 8, seed=109), TINY.max_intensity)[:, None])

    def f():
        enc = encode_quantize(model, x)
        return vqvae_loss(x, model.decoder(enc.z_st), enc, TINY, model.perceptual)[0]

    return f, model.generator_parameters()


def test_vqvae_toy_is_smooth_at_step():
    # the network is piecewise linear; an eps step must not cross a kink for the check to be meaningful
    f, params = vqvae_toy()
    coarse = numeric_gradient(f, params, 1e-3, freeze_stop_gradient=True)
    fine = numeric_gradient(f, params, 2.5e-4, freeze_stop_gradient=True)
    assert relative_deviation(coarse, fine) < 1e-3


def test_vqvae_loss_gradcheck():
    f, params = vqvae_toy()
    assert grad_check(f, params, eps=1e-3, freeze_stop_gradient=True) < 1e-2


def test_disc_loss_half():
    d, g = spatial_disc_loss(Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros((2, 1, 3, 3))))
    assert d.item() == pytest.approx(2 * math.log(2), rel=1e-6)
    assert g.item() == pytest.approx(math.log(2), rel=1e-6)


def test_disc_loss_perfect_and_clamped():
    d, g = spatial_disc_loss(Tensor(np.full((1, 1, 2, 2), 50.0)), Tensor(np.full((1, 1, 2, 2), -50.0)))
    assert d.item() < 1e-6
    assert np.isfinite(g.item()) and g.item() == pytest.approx(-math.log(1e-7), rel=1e-4)


def test_gen_adv_gradient_sign():
    logits = Tensor(np.array([[-0.3, 0.2]]), requires_grad=True)
    _, g = spatial_disc_loss(Tensor(np.zeros((1, 2))), logits)
    (dl,) = grad(g, [logits])
    assert np.all(dl < 0)


def test_adaptive_weight_formula():
    assert gan_weight_from_norms(2.0, 1.0, 1e-6) == pytest.approx(2.0, rel=1e-5)
    assert gan_weight_from_norms(2.0, 0.0, 1e-6) == 1e4
    assert gan_weight_from_norms(0.0, 3.0) == 0.0


def test_adaptive_weight_matches_finite_differences():
    model = VqGan(TINY, seed=8)
    x = Tensor(to_model_space(blobs(2, 8, seed=9), TINY.max_intensity)[:, None])
    last = model.decoder.last_layer()

    def losses():
        enc = encode_quantize(model, x)
        x_hat = model.decoder(enc.z_st)
        return ag.l1_loss(x_hat, x), -ag.mean(ag.log(ag.sigmoid(model.disc(x_hat))))

    rec, gan = losses()
    lam = adaptive_gan_weight(rec, gan, last)

    def fd_norm(which):
        sq = 0.0
        for p in last:
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                vals = []
                for s in (1, -1):
                    flat[i] = orig + s * 1e-3
                    with ag.no_grad():
                        vals.append(losses()[which].item())
                flat[i] = orig
                sq += ((vals[0] - vals[1]) / 2e-3) ** 2
        return math.sqrt(sq)

    assert lam == pytest.approx(fd_norm(0) / (fd_norm(1) + 1e-6), rel=1e-2)


def test_gradient_routing_invariants():
    model = VqGan(TINY, seed=10)
    report = gradient_routing(model, to_model_space(blobs(2, 8), TINY.max_intensity))
    assert all(report.values()), report


def test_zero_steps_is_initialisation(tmp_path):
    res = train_vqgan(blobs(4, 8), TINY, steps=0, seed=3)
    init = VqGan(TINY, seed=3)
    for k, v in init.state_dict().items():
        assert np.array_equal(res.model.state_dict()[k], v)


def test_training_deterministic_with_gan_phase(tmp_path):
    cfg = VqGanConfig(codebook_size=8, code_dim=4, downsample_factor=2, channels=(3,), disc_channels=2,
                      gan_start_step=3, batch_size=2)
    a = train_vqgan(blobs(4, 8), cfg, steps=6, seed=1, loss_csv=tmp_path / "a.csv", check_every=2)
    b = train_vqgan(blobs(4, 8), cfg, steps=6, seed=1, loss_csv=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOSS_COLUMNS) and len(lines) == 7
    assert a.reports[2].lambda_gan == 0.0 and a.reports[3].gan_d > 0
    assert all(0 <= r.lambda_gan <= 1e4 for r in b.reports)


def test_nan_aborts():
    with pytest.raises(TrainingDivergedError, match="step 0"):
        train_vqgan(np.full((2, 8, 8), np.nan), TINY, steps=2)


def test_dead_codes_reseeded():
    cfg = VqGanConfig(codebook_size=16, code_dim=4, downsample_factor=2, channels=(3,), dead_code_steps=3,
                      batch_size=2)
    res = train_vqgan(blobs(4, 8), cfg, steps=8, seed=0)
    assert res.reseeded > 0


def test_checkpoint_roundtrip(tmp_path):
    model = VqGan(TINY, seed=11)
    save_vqgan(tmp_path / "v.ckpt", model)
    back = load_vqgan(tmp_path / "v.ckpt")
    frames = blobs(2, 8)
    assert np.array_equal(encode_tokens(back, frames), encode_tokens(model, frames))


@pytest.mark.slow
def test_overfit_single_sample():
    x = blobs(1, 16, seed=12)
    cfg = VqGanConfig(codebook_size=16, code_dim=8, downsample_factor=2, channels=(8,), batch_size=1,
                      perceptual_weight=0.0)
    res = train_vqgan(x, cfg, steps=400, seed=0)
    recon = decode_frames(res.model, encode_tokens(res.model, x))
    assert np.mean(np.abs(recon - x)) < 0.05 * np.ptp(x)
