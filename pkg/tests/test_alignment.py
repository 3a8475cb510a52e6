import itertools
import math
import statistics
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from talbo.alignment import (
    AlignmentBatch,
    CoincidentLatentWarning,
    InversionConfig,
    design_distance,
    expected_normal_distance,
    importance_weights,
    invert_latent,
    invert_latents,
    inversion_loss,
    latent_scale_loss,
    lipschitz_loss,
)
from talbo.latent_model import DesignSequence, GRUDecoder, LatentModel, LatentModelConfig, train_latent_model


def seq(*t):
    return DesignSequence(t)


def brute_lipschitz(z, y, w):
    """Oracle: explicit enumeration over ordered pairs."""
    n = len(y)
    slopes = {}
    for i, j in itertools.permutations(range(n), 2):
        slopes[i, j] = abs(y[i] - y[j]) / math.dist(z[i], z[j])
    med = statistics.median(slopes.values())
    total = sum(math.sqrt(w[i] * w[j]) * max(0.0, s - med) for (i, j), s in slopes.items())
    return total / n**2


def levenshtein(a, b):
    """Oracle: textbook dynamic programme."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


# -- importance weights -------------------------------------------------------


def test_weight_at_quantile_is_half():
    y = np.array([0.0, 1.0, 2.0])
    assert importance_weights(y, 0.5, smoothing=0.7)[1] == pytest.approx(0.5, abs=1e-15)


def test_weight_one_sigma_above():
    y = np.array([0.0, 1.0, 2.0, 1.0 + 0.4])
    w = importance_weights(y, 0.5, smoothing=0.4)
    y_q = np.quantile(y, 0.5)
    expected = 1 - 0.5 * math.erfc(1 / math.sqrt(2))
    assert importance_weights(np.array([y_q + 0.4, y_q - 0.4, y_q]), 0.5, 0.4)[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.84134, abs=1e-5)
    assert np.all((w > 0) & (w < 1))


def test_weight_default_smoothing_and_errors():
    y = np.array([1.0, 2.0, 4.0])
    np.testing.assert_allclose(importance_weights(y), importance_weights(y, 0.5, np.std(y, ddof=1)))
    assert importance_weights(np.array([3.0, 3.0])).tolist() == [0.5, 0.5]
    with pytest.raises(ValueError):
        importance_weights(y, smoothing=0.0)
    with pytest.raises(ValueError):
        importance_weights([])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30))
def test_weights_monotone(values):
    y = np.array(values)
    w = importance_weights(y)
    order = np.argsort(y)
    assert np.all(np.diff(w[order]) >= -1e-15)


def test_alignment_batch_validation():
    with pytest.raises(ValueError):
        AlignmentBatch(np.zeros((2, 1)), np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        AlignmentBatch(np.zeros((2, 1)), np.zeros(2), np.array([1.0, 0.0]))


# -- Lipschitz loss -----------------------------------------------------------


def test_lipschitz_constant_values_zero(rng):
    z = rng.normal(size=(6, 3))
    assert lipschitz_loss(z, np.full(6, 2.0), np.ones(6)).item() == 0.0


def test_lipschitz_two_points_zero():
    assert lipschitz_loss([[0.0], [1.0]], [0.0, 5.0], [1.0, 1.0]).item() == 0.0


def test_lipschitz_three_point_example():
    z = [[0.0], [1.0], [3.0]]
    y = [0.0, 1.0, 1.0]
    # slopes {1, 1/3, 0} twice, median 1/3, two slopes of 1 exceed it by 2/3
    assert lipschitz_loss(z, y, [1, 1, 1]).item() == pytest.approx(4 / 27, abs=1e-15)
    assert brute_lipschitz(z, y, [1, 1, 1]) == pytest.approx(4 / 27, abs=1e-15)


def test_lipschitz_matches_brute_force(rng):
    for _ in range(20):
        n = int(rng.integers(2, 9))
        z = rng.normal(size=(n, 3))
        y = rng.normal(size=n)
        w = rng.uniform(0.05, 1.0, size=n)
        assert lipschitz_loss(z, y, w).item() == pytest.approx(brute_lipschitz(z, y, w), rel=1e-12, abs=1e-15)


def test_lipschitz_permutation_and_scaling(rng):
    z = rng.normal(size=(7, 2))
    y = rng.normal(size=7)
    w = rng.uniform(0.1, 1, size=7)
    base = lipschitz_loss(z, y, w).item()
    p = rng.permutation(7)
    assert lipschitz_loss(z[p], y[p], w[p]).item() == pytest.approx(base, rel=1e-12)
    assert lipschitz_loss(z, 3.5 * y, w).item() == pytest.approx(3.5 * base, rel=1e-12)
    assert base >= 0


def test_lipschitz_coincident_latents_warn():
    z = [[0.0], [0.0], [2.0]]
    y = [0.0, 1.0, 0.0]
    with pytest.warns(CoincidentLatentWarning):
        loss = lipschitz_loss(z, y, [1, 1, 1])
    # slopes: coincident pair -> largest finite slope 0.5; others 0.5, 0, 0.5 ... median 0.5
    assert loss.item() == pytest.approx(0.0, abs=1e-15)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        lipschitz_loss([[0.0], [0.0], [1.0]], [1.0, 1.0, 0.0], [1, 1, 1])


def test_lipschitz_needs_pairs():
    with pytest.raises(ValueError):
        lipschitz_loss([[0.0]], [1.0], [1.0])


# -- latent scale -------------------------------------------------------------


@pytest.mark.parametrize("d,expected", [(1, 2 / math.sqrt(math.pi)), (2, math.sqrt(math.pi)), (8, None)])
def test_expected_normal_distance(d, expected):
    c = expected_normal_distance(d)
    gamma_form = 2 * math.gamma((d + 1) / 2) / math.gamma(d / 2)
    assert c == pytest.approx(gamma_form, abs=1e-10)
    if expected is not None:
        assert c == pytest.approx(expected, abs=1e-10)
    rng = np.random.default_rng(d)
    dist = np.linalg.norm(rng.normal(size=(1_000_000, d)) - rng.normal(size=(1_000_000, d)), axis=1)
    assert abs(dist.mean() - c) < 3 * dist.std(ddof=1) / 1000


def test_latent_scale_identical_points():
    assert latent_scale_loss(np.ones((5, 3))).item() == pytest.approx(expected_normal_distance(3), abs=1e-15)


def test_latent_scale_includes_diagonal(rng):
    z = rng.normal(size=(6, 4))
    mean = sum(np.linalg.norm(a - b) for a in z for b in z) / 36
    assert latent_scale_loss(z).item() == pytest.approx(abs(mean - expected_normal_distance(4)), rel=1e-12)


def test_latent_scale_rotation_invariant(rng):
    z = rng.normal(size=(9, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    assert latent_scale_loss(z @ q).item() == pytest.approx(latent_scale_loss(z).item(), rel=1e-12)


def test_latent_scale_gradient_finite_with_duplicates():
    z = torch.tensor([[0.0, 1.0], [0.0, 1.0], [2.0, 0.0]], requires_grad=True)
    latent_scale_loss(z).backward()
    assert torch.isfinite(z.grad).all()


# -- distance -----------------------------------------------------------------


def test_design_distance_examples():
    assert design_distance(seq(0, 1, 2), seq(0, 1, 2)) == 0.0
    assert design_distance(seq(0, 1, 2), seq(0, 1, 3)) == pytest.approx(1 / 3)
    assert design_distance(DesignSequence(()), seq(0, 1, 2)) == 1.0
    assert design_distance(DesignSequence(()), DesignSequence(())) == 0.0


designs = st.lists(st.integers(0, 3), max_size=8).map(lambda t: DesignSequence(tuple(t)))


@given(designs, designs, designs)
def test_design_distance_properties(a, b, c):
    d = design_distance(a, b)
    assert d == design_distance(b, a)
    assert 0.0 <= d <= 1.0
    assert (d == 0) == (a == b)
    n = max(len(a), len(b))
    assert d == pytest.approx(levenshtein(a.tokens, b.tokens) / n if n else 0.0)
    assert levenshtein(a.tokens, c.tokens) <= levenshtein(a.tokens, b.tokens) + levenshtein(b.tokens, c.tokens)


# -- inversion ----------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(3)
    corpus = list({DesignSequence(tuple(rng.integers(0, 4, size=rng.integers(3, 7)))) for _ in range(40)})
    model = LatentModel.create(LatentModelConfig(include_time=False, latent_dim=4, num_features=8), seed=1)
    train_latent_model(model, corpus, steps=400, learning_rate=1e-2, batch_size=32)
    return model, corpus


def test_inversion_stops_immediately_when_decoded(trained):
    model, _ = trained
    z0 = np.random.default_rng(0).normal(size=4)
    x = model.decode(z0[None])[0]
    if len(x) == 0:
        pytest.skip("code decodes to an empty design")
    z, ok, steps = invert_latent(x, z0, model.decoder)
    assert ok and steps == 0
    np.testing.assert_array_equal(z, z0)


def test_inversion_zero_step_size(trained):
    model, corpus = trained
    z0 = np.random.default_rng(1).normal(size=(3, 4)) * 5
    z, _, steps = invert_latents(corpus[:3], z0, model.decoder, InversionConfig(step_size=0.0, max_steps=7, distance_tolerance=0.0))
    np.testing.assert_array_equal(z, z0)


def test_inversion_descends(trained):
    model, corpus = trained
    rng = np.random.default_rng(2)
    for x in corpus[:20]:
        z0 = rng.normal(size=4)
        z, ok, _ = invert_latent(x, z0, model.decoder, InversionConfig(step_size=1e-3, max_steps=20, distance_tolerance=0.0))
        with torch.no_grad():
            before = inversion_loss([x], torch.as_tensor(z0[None]), model.decoder).item()
            after = inversion_loss([x], torch.as_tensor(z[None]), model.decoder).item()
        assert after <= before + 1e-12
        if ok:
            assert model.decode(z[None])[0] == x


def test_inversion_converged_flag_is_honest(trained):
    model, corpus = trained
    z0 = np.random.default_rng(4).normal(size=(len(corpus), 4))
    cfg = InversionConfig(step_size=0.05, max_steps=200, distance_tolerance=0.05)
    z, ok, _ = invert_latents(corpus, z0, model.decoder, cfg)
    decoded = model.decode(z)
    for x, x_hat, flag in zip(corpus, decoded, ok):
        if flag:
            assert design_distance(x, x_hat) <= cfg.distance_tolerance
    assert ok.mean() > 0.5


def test_inversion_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    dec = GRUDecoder(3, 3, 4, eos_token=2, hidden_size=6, embedding_size=3)
    x = [seq(0, 1, 1)]
    z = torch.randn(1, 3, requires_grad=True)
    (g,) = torch.autograd.grad(inversion_loss(x, z, dec).sum(), z)
    eps = 1e-4
    for i in range(3):
        with torch.no_grad():
            zp, zm = z.clone(), z.clone()
            zp[0, i] += eps
            zm[0, i] -= eps
            fd = (inversion_loss(x, zp, dec) - inversion_loss(x, zm, dec)).item() / (2 * eps)
        assert abs(fd - g[0, i].item()) / max(abs(fd), 1e-6) < 1e-3


def test_inversion_config_validation():
    with pytest.raises(ValueError):
        InversionConfig(step_size=-1)
    with pytest.raises(ValueError):
        InversionConfig(distance_tolerance=1.5)
