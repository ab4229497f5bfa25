import math

import pytest
import torch

from ssgan.losses import (
    ConfigError,
    LossWeights,
    discriminator_loss,
    gan_value,
    generator_loss,
    gradient_penalty,
    rotation_term,
)


def test_gan_value_at_zero_logits():
    # an uninformative discriminator outputs probability 0.5 on both sides
    real = torch.zeros(16)
    fake = torch.zeros(16)
    v = gan_value(real, fake)
    assert torch.isclose(v, torch.tensor(2.0 * math.log(0.5)), atol=1e-12)


def test_gan_value_perfect_discriminator_limit():
    v = gan_value(torch.full((4,), 50.0), torch.full((4,), -50.0))
    assert abs(float(v)) < 1e-6


def test_gan_value_single_pair():
    # log sigmoid(1) + log(1 - sigmoid(-1)) == 2 log sigmoid(1)
    v = gan_value(torch.tensor([1.0]), torch.tensor([-1.0]))
    expected = 2.0 * math.log(1.0 / (1.0 + math.exp(-1.0)))
    assert torch.isclose(v, torch.tensor(expected), atol=1e-7)
    assert expected == pytest.approx(-0.6265, abs=1e-4)


def test_gan_value_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        gan_value(torch.zeros(0), torch.zeros(3))


def test_rotation_term_uniform():
    logits = torch.zeros(8, 4)
    labels = torch.arange(8) % 4
    t = rotation_term(logits, labels)
    assert torch.isclose(t, torch.tensor(math.log(0.25)), atol=1e-7)


def test_rotation_term_perfect_prediction_bound():
    labels = torch.tensor([0, 1, 2, 3])
    logits = torch.nn.functional.one_hot(labels).float() * 100.0
    t = rotation_term(logits, labels)
    assert float(t) <= 0.0
    assert float(t) > -1e-6


def test_rotation_term_direct_softmax():
    logits = torch.tensor([[1.0, 0.0, 0.0, 0.0]])
    t = rotation_term(logits, torch.tensor([0]))
    expected = 1.0 - math.log(math.e + 3.0)
    assert torch.isclose(t, torch.tensor(expected), atol=1e-7)
    assert expected == pytest.approx(-0.7437, abs=1e-4)


def test_rotation_term_rejects_bad_labels():
    with pytest.raises(ValueError, match="labels"):
        rotation_term(torch.zeros(2, 4), torch.tensor([0, 5]))


def test_rotation_term_maximized_only_at_true_label():
    labels = torch.tensor([2])
    sharp = torch.full((1, 4), -100.0)
    sharp[0, 2] = 100.0
    wrong = torch.full((1, 4), -100.0)
    wrong[0, 1] = 100.0
    assert float(rotation_term(sharp, labels)) == pytest.approx(0.0, abs=1e-6)
    assert float(rotation_term(wrong, labels)) < -10.0


def _random_inputs(seed, n=12):
    g = torch.Generator().manual_seed(seed)
    return {
        "real": torch.randn(n, generator=g),
        "fake": torch.randn(n, generator=g),
        "rot_logits": torch.randn(n, 4, generator=g),
        "rot_labels": torch.randint(0, 4, (n,), generator=g),
    }


def test_alpha_zero_is_plain_generator_loss():
    x = _random_inputs(0)
    w0 = LossWeights(alpha=0.0, beta=0.0)
    base = generator_loss(x["fake"], None, None, w0)
    with_head = generator_loss(x["fake"], x["rot_logits"], x["rot_labels"], w0)
    assert torch.equal(base, with_head)


def test_beta_zero_is_plain_discriminator_loss():
    x = _random_inputs(1)
    w0 = LossWeights(alpha=0.0, beta=0.0)
    base = discriminator_loss(x["real"], x["fake"], None, None, w0)
    with_head = discriminator_loss(x["real"], x["fake"], x["rot_logits"], x["rot_labels"], w0)
    assert torch.equal(base, with_head)


def test_generator_rotation_contribution():
    # uniform rotation logits contribute -alpha * log(1/4) = +0.27726 at alpha = 0.2
    x = _random_inputs(2)
    w = LossWeights(alpha=0.2, beta=1.0)
    plain = generator_loss(x["fake"], None, None, LossWeights(alpha=0.0))
    loss = generator_loss(x["fake"], torch.zeros(8, 4), torch.arange(8) % 4, w)
    assert float(loss - plain) == pytest.approx(0.2 * -math.log(0.25), abs=1e-6)
    assert float(loss - plain) == pytest.approx(0.27726, abs=1e-4)


def test_discriminator_rotation_contribution():
    x = _random_inputs(3)
    w = LossWeights(alpha=0.2, beta=1.0)
    plain = discriminator_loss(x["real"], x["fake"], None, None, w)
    loss = discriminator_loss(x["real"], x["fake"], torch.zeros(8, 4), torch.arange(8) % 4, w)
    assert float(loss - plain) == pytest.approx(-math.log(0.25), abs=1e-6)
    assert float(loss - plain) == pytest.approx(1.3863, abs=1e-4)


def test_perfect_rotation_prediction_adds_nothing():
    x = _random_inputs(4)
    labels = torch.arange(8) % 4
    sharp = torch.nn.functional.one_hot(labels).float() * 200.0
    w = LossWeights(alpha=0.2)
    plain = generator_loss(x["fake"], None, None, w)
    loss = generator_loss(x["fake"], sharp, labels, w)
    assert float(loss - plain) == pytest.approx(0.0, abs=1e-6)


def test_discriminator_loss_ignores_fake_rotations():
    # the rotation argument is the real-image one by contract; perturbing
    # anything else about fake rotations cannot enter the loss
    x = _random_inputs(5)
    w = LossWeights()
    loss = discriminator_loss(x["real"], x["fake"], x["rot_logits"], x["rot_labels"], w)
    loss2 = discriminator_loss(x["real"], x["fake"], x["rot_logits"], x["rot_labels"], w)
    assert torch.equal(loss, loss2)


def test_alpha_scaling_linearity():
    x = _random_inputs(6)
    a = 0.3

    def g_loss(alpha):
        return generator_loss(
            x["fake"], x["rot_logits"], x["rot_labels"], LossWeights(alpha=alpha)
        )

    base = g_loss(0.0)
    delta_a = g_loss(a) - base
    delta_2a = g_loss(2 * a) - base
    assert torch.isclose(delta_2a, 2 * delta_a, atol=1e-6)


def test_negative_weights_rejected():
    with pytest.raises(ConfigError):
        LossWeights(alpha=-0.1)
    with pytest.raises(ConfigError):
        LossWeights(beta=-1.0)
    with pytest.raises(ConfigError):
        gradient_penalty(torch.ones(3), -1.0)


def test_gradient_penalty_values():
    assert float(gradient_penalty(torch.ones(5), 10.0)) == 0.0
    assert float(gradient_penalty(torch.full((3,), 2.0), 10.0)) == pytest.approx(10.0)
    assert float(gradient_penalty(torch.zeros(4), 1.0)) == pytest.approx(1.0)


def test_hinge_loss_forms():
    real = torch.tensor([0.5, 2.0])
    fake = torch.tensor([-0.5, -2.0])
    d = discriminator_loss(real, fake, None, None, LossWeights(), kind="hinge")
    # relu(1-0.5)+relu(1-2) = 0.5; relu(1-0.5)+relu(1-2) on fake side: 0.5
    assert float(d) == pytest.approx(0.5 / 2 + 0.5 / 2)
    g = generator_loss(fake, None, None, LossWeights(alpha=0.0), kind="hinge")
    assert float(g) == pytest.approx(1.25)
