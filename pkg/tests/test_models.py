import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedasd.datasets import Case, generate_synthetic
from fedasd.errors import EmptyDatasetError, ShapeError
from fedasd.models import (
    AutoEncoderSpec,
    VAESpec,
    ae_reconstruction_loss,
    init_model,
    kl_gaussian,
    loss_and_grad,
    reconstruct,
    sample_scores,
    score_dataset,
    vae_loss,
    zero_model,
)
from fedasd.nn import Activation, AdamState, adam_step, forward

from test_nn import numeric_grad, rel_err


def test_ae_architecture():
    spec = AutoEncoderSpec(19)
    dims = [(l.in_dim, l.out_dim) for l in spec.layers]
    assert dims == [(19, 64), (64, 64), (64, 64), (64, 19)]
    assert spec.layers[-1].activation is Activation.SIGMOID
    assert spec.layers[0].dropout_after == 0.2
    assert spec.layers[2].dropout_after == 0.2
    assert AutoEncoderSpec(19, decoder_dropout=False).layers[2].dropout_after == 0.0


def test_vae_architecture():
    spec = VAESpec(7, latent_dim=5)
    assert spec.mu_head[0].out_dim == spec.logvar_head[0].out_dim == 5
    assert spec.decoder[0].in_dim == 5 and spec.decoder[-1].out_dim == 7


def test_zero_model_scores_closed_form():
    spec = AutoEncoderSpec(6)
    x = np.linspace(0, 1, 6)
    assert abs(ae_reconstruction_loss(zero_model(spec), spec, x) - np.mean((x - 0.5) ** 2)) <= 1e-15


def test_overfit_single_point(rng):
    spec = AutoEncoderSpec(5, hidden_dim=16, dropout=0.0)
    x = rng.random(5)
    p = init_model(spec, rng)
    state = AdamState.fresh(len(p))
    for _ in range(1500):
        _, g = loss_and_grad(p, spec, x[None, :], rng)
        p, state = adam_step(p, g, state, 0.01)
    assert ae_reconstruction_loss(p, spec, x) < 1e-3


def test_trained_ae_separates_planted_anomalies(rng):
    ds = generate_synthetic(200, 40, 0, 10, 6.0, 1, rng)
    spec = AutoEncoderSpec(10)
    train = np.stack([c.features for c in ds.train_cases()])
    p = init_model(spec, rng)
    state = AdamState.fresh(len(p))
    for _ in range(30):
        for i in range(0, len(train), 32):
            _, g = loss_and_grad(p, spec, train[i : i + 32], rng)
            p, state = adam_step(p, g, state, 0.001)
    ev = ds.eval_cases()
    scores = sample_scores(p, spec, np.stack([c.features for c in ev]))
    t = np.array([c.target for c in ev])
    assert scores[t == 0].mean() < scores[t == 1].mean()


def test_ae_gradient_dropout_off(rng):
    spec = AutoEncoderSpec(4, hidden_dim=6, dropout=0.0)
    x = rng.random((3, 4))
    p = init_model(spec, rng)
    _, g = loss_and_grad(p, spec, x, rng, training=True)
    num = numeric_grad(lambda v: loss_and_grad(p.with_values(v), spec, x, rng)[0], p.values)
    assert rel_err(g, num) < 1e-4


@pytest.mark.parametrize("kl_weight", [1.0, 0.3])
def test_vae_gradient_fixed_noise(rng, kl_weight):
    spec = VAESpec(4, hidden_dim=5, dropout=0.0, latent_dim=3, kl_weight=kl_weight)
    x = rng.random((3, 4))
    eps = rng.standard_normal((3, 3))
    p = init_model(spec, rng)
    _, g = loss_and_grad(p, spec, x, None, eps=eps)
    num = numeric_grad(lambda v: vae_loss(p.with_values(v), spec, x, eps=eps)[0], p.values)
    assert rel_err(g, num) < 1e-4


def test_kl_examples(rng):
    assert kl_gaussian(np.zeros(4), np.zeros(4)) == 0.0
    assert kl_gaussian([1.0], [0.0]) == 0.5
    mu, lv = rng.normal(size=9), rng.normal(size=9)
    terms = [-0.5 * (1 + lv[i] - mu[i] ** 2 - np.exp(lv[i])) for i in range(9)]
    assert abs(kl_gaussian(mu, lv) - sum(terms)) <= 1e-12
    with pytest.raises(ShapeError):
        kl_gaussian([0.0], [0.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=8),
    st.lists(st.floats(-5, 5), min_size=8, max_size=8),
)
def test_kl_non_negative(mu, lv):
    assert kl_gaussian(mu, lv[: len(mu)]) >= -1e-12


def _vae_parts(p, spec):
    return p.split([len(b) for b in spec.blocks])


def test_vae_zero_noise_decodes_mu(rng):
    spec = VAESpec(5, hidden_dim=6, dropout=0.0, latent_dim=4)
    x = rng.random((2, 5))
    p = init_model(spec, rng)
    total, recon, kl = vae_loss(p, spec, x, eps=0.0)
    expected = np.mean((reconstruct(p, spec, x) - x) ** 2)
    assert abs(recon - expected) <= 1e-15
    assert abs(total - (recon + kl)) <= 1e-15


def test_vae_kl_weight_zero(rng):
    spec = VAESpec(5, hidden_dim=6, latent_dim=4, kl_weight=0.0)
    total, recon, _ = vae_loss(init_model(spec, rng), spec, rng.random((3, 5)), rng=rng)
    assert total == recon


def test_vae_kl_matches_heads(rng):
    spec = VAESpec(5, hidden_dim=6, dropout=0.0, latent_dim=4)
    p = init_model(spec, rng)
    enc, mu_p, lv_p, dec = _vae_parts(p, spec)
    lv_p = lv_p.with_values(np.zeros(len(lv_p)))
    p = type(p).concat([enc, mu_p, lv_p, dec])
    x = rng.random((3, 5))
    h, _ = forward(enc, spec.encoder, x)
    mu, _ = forward(mu_p, spec.mu_head, h)
    _, _, kl = vae_loss(p, spec, x, eps=0.0)
    assert abs(kl - kl_gaussian(mu, np.zeros_like(mu)) / 3) <= 1e-12


def _cases(x):
    return [Case(f"c{i}", "a", 0, row) for i, row in enumerate(x)]


@pytest.mark.parametrize("spec", [AutoEncoderSpec(4, hidden_dim=8), VAESpec(4, hidden_dim=8, latent_dim=3)])
def test_score_dataset_matches_per_sample(rng, spec):
    p = init_model(spec, rng)
    x = rng.random((6, 4))
    cases = _cases(x)
    batch = score_dataset(p, spec, cases)
    assert [cid for cid, _ in batch] == [c.case_id for c in cases]
    for (_, s), row in zip(batch, x):
        assert abs(s - ae_reconstruction_loss(p, spec, row)) <= 1e-12
    assert score_dataset(p, spec, cases) == batch


def test_score_dataset_singleton_and_duplicate(rng):
    spec = AutoEncoderSpec(3, hidden_dim=4)
    p = init_model(spec, rng)
    x = rng.random(3)
    [(cid, s)] = score_dataset(p, spec, [Case("only", "a", 0, x)])
    assert s == ae_reconstruction_loss(p, spec, x)
    dup = Case("d", "a", 0, x)
    (_, s1), (_, s2) = score_dataset(p, spec, [dup, dup])
    assert s1 == s2
    with pytest.raises(EmptyDatasetError):
        score_dataset(p, spec, [])
    with pytest.raises(ShapeError):
        ae_reconstruction_loss(p, spec, np.zeros(4))
