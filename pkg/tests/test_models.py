import numpy as np
import pytest
import torch
import torch.nn as nn

from ssgan.config import SsGANConfig
from ssgan.losses import ConfigError
from ssgan.models import (
    ConditionalBatchNorm,
    Discriminator,
    Generator,
    SpectralNormState,
    build_models,
    init_spectral_state,
    load_checkpoint,
    pcgan_logit,
    save_checkpoint,
    self_modulated_bn,
    spectral_normalize,
    state_dict_hash,
)

TINY = dict(gf_dim=16, df_dim=16, z_dim=8, sbn_hidden=8, batch_size=8)


def tiny_config(**kw):
    base = dict(TINY)
    base.update(kw)
    return SsGANConfig(total_steps=0, **base)


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------


def test_spectral_normalize_identity():
    w = torch.eye(4)
    state = init_spectral_state(w, torch.Generator().manual_seed(0))
    out, _ = spectral_normalize(w, state)
    assert torch.allclose(out, torch.eye(4), atol=1e-6)


def test_spectral_normalize_diag_converged():
    w = torch.diag(torch.tensor([3.0, 1.0]))
    # converged power-iteration state: singular vectors of the top value
    state = SpectralNormState(u=torch.tensor([1.0, 0.0]), v=torch.tensor([1.0, 0.0]))
    out, new_state = spectral_normalize(w, state)
    assert torch.allclose(out, torch.diag(torch.tensor([1.0, 1.0 / 3.0])), atol=1e-6)
    assert torch.allclose(new_state.u.norm(), torch.tensor(1.0))
    assert torch.allclose(new_state.v.norm(), torch.tensor(1.0))


def test_spectral_normalize_matches_svd_oracle():
    g = torch.Generator().manual_seed(42)
    w = torch.randn(8, 6, generator=g)
    state = init_spectral_state(w, g)
    state = SpectralNormState(u=state.u, v=state.v, n_power_iterations=50)
    _, state = spectral_normalize(w, state)
    sigma_hat = float(torch.dot(state.u, w.mv(state.v)))
    sigma_svd = float(np.linalg.svd(w.numpy(), compute_uv=False)[0])
    assert sigma_hat == pytest.approx(sigma_svd, abs=1e-4)


def test_spectral_normalize_zero_matrix():
    w = torch.zeros(3, 3)
    state = init_spectral_state(w, torch.Generator().manual_seed(1))
    out, _ = spectral_normalize(w, state)
    assert torch.isfinite(out).all()


def test_spectral_normalize_rejects_non_2d():
    with pytest.raises(ValueError, match="2-D"):
        spectral_normalize(torch.zeros(2, 2, 2), init_spectral_state(torch.zeros(2, 2)))


def test_sn_layers_reach_unit_norm():
    # after many training-mode forwards the effective weight has sigma ~= 1
    torch.manual_seed(0)
    disc = Discriminator(image_size=16, df_dim=8, use_sn=True)
    disc.train()
    x = torch.randn(4, 3, 16, 16)
    for _ in range(100):
        disc(x)
    for m in disc.modules():
        if hasattr(m, "spectral_weight"):
            w = m.spectral_weight().detach()
            sigma = np.linalg.svd(w.reshape(w.shape[0], -1).numpy(), compute_uv=False)[0]
            assert sigma == pytest.approx(1.0, abs=1e-3)


def test_sn_eval_mode_is_pure():
    torch.manual_seed(0)
    disc = Discriminator(image_size=16, df_dim=8, use_sn=True)
    disc.eval()
    x = torch.randn(4, 3, 16, 16)
    before = state_dict_hash(disc)
    a = disc(x).source
    b = disc(x).source
    assert torch.equal(a, b)
    assert state_dict_hash(disc) == before


# ---------------------------------------------------------------------------
# conditional batch norm
# ---------------------------------------------------------------------------


def test_sbn_reduces_to_plain_bn_at_identity_modulation():
    torch.manual_seed(1)
    sbn = ConditionalBatchNorm(6, "self_modulated_bn", z_dim=4, hidden_dim=8)
    plain = ConditionalBatchNorm(6, "plain_bn")
    h = torch.randn(8, 6, 5, 5)
    z = torch.randn(8, 4)
    # modulation MLP is initialized to emit gamma=1, beta=0
    assert torch.allclose(sbn(h, z=z), plain(h), atol=1e-6)


def test_sbn_normalizes_constant_channel_to_zero():
    sbn = ConditionalBatchNorm(3, "self_modulated_bn", z_dim=4, hidden_dim=8)
    nn.init.zeros_(sbn.to_beta.weight)
    h = torch.full((4, 3, 2, 2), 5.0)
    z = torch.zeros(4, 4)
    out = self_modulated_bn(h, z, sbn)
    assert torch.allclose(out, torch.zeros_like(out), atol=1e-4)


def test_sbn_output_moments():
    torch.manual_seed(2)
    sbn = ConditionalBatchNorm(4, "self_modulated_bn", z_dim=4, hidden_dim=8)
    h = torch.randn(512, 4, 8, 8, dtype=torch.float64)
    sbn.double()
    z = torch.randn(512, 4, dtype=torch.float64)
    out = sbn(h, z=z)  # identity modulation at init: moments are the BN moments
    mean = out.mean(dim=(0, 2, 3))
    var = out.var(dim=(0, 2, 3), unbiased=False)
    assert torch.allclose(mean, torch.zeros(4, dtype=torch.float64), atol=1e-5)
    assert torch.allclose(var, torch.ones(4, dtype=torch.float64), atol=1e-4)


def test_bn_rejects_batch_of_one():
    sbn = ConditionalBatchNorm(3, "plain_bn")
    with pytest.raises(ValueError, match="batch"):
        sbn(torch.randn(1, 3, 4, 4))


def test_self_modulated_bn_helper_rejects_other_modes():
    plain = ConditionalBatchNorm(3, "plain_bn")
    with pytest.raises(ConfigError):
        self_modulated_bn(torch.randn(2, 3, 4, 4), torch.randn(2, 4), plain)


# ---------------------------------------------------------------------------
# projection conditioning
# ---------------------------------------------------------------------------


def test_pcgan_logit_zero_embedding_is_unconditional():
    head = nn.Linear(3, 1)
    embed = nn.Embedding(2, 3)
    nn.init.zeros_(embed.weight)
    feats = torch.randn(5, 3)
    labels = torch.randint(0, 2, (5,))
    got = pcgan_logit(feats, labels, head, embed)
    assert torch.allclose(got, head(feats).squeeze(-1))


def test_pcgan_logit_symmetric_for_opposite_embeddings():
    head = nn.Linear(3, 1)
    embed = nn.Embedding(2, 3)
    with torch.no_grad():
        embed.weight[0] = torch.tensor([1.0, -2.0, 0.5])
        embed.weight[1] = -embed.weight[0]
    feats = torch.randn(4, 3)
    base = head(feats).squeeze(-1)
    l0 = pcgan_logit(feats, torch.zeros(4, dtype=torch.long), head, embed)
    l1 = pcgan_logit(feats, torch.ones(4, dtype=torch.long), head, embed)
    assert torch.allclose(l0 - base, -(l1 - base), atol=1e-6)


def test_pcgan_logit_hand_computed():
    head = nn.Linear(3, 1, bias=True)
    with torch.no_grad():
        head.weight[:] = torch.tensor([[1.0, 0.0, 2.0]])
        head.bias[:] = 0.5
    embed = nn.Embedding(2, 3)
    with torch.no_grad():
        embed.weight[0] = torch.tensor([0.0, 1.0, 0.0])
        embed.weight[1] = torch.tensor([1.0, 1.0, 1.0])
    feats = torch.tensor([[2.0, 3.0, -1.0]])
    # base = 2*1 + 3*0 + (-1)*2 + 0.5 = 0.5; dot(e0, f) = 3; dot(e1, f) = 4
    with torch.no_grad():
        assert float(pcgan_logit(feats, torch.tensor([0]), head, embed)) == pytest.approx(3.5)
        assert float(pcgan_logit(feats, torch.tensor([1]), head, embed)) == pytest.approx(4.5)


def test_pcgan_logit_rejects_out_of_range_label():
    head = nn.Linear(3, 1)
    embed = nn.Embedding(2, 3)
    with pytest.raises(ValueError, match="range"):
        pcgan_logit(torch.randn(2, 3), torch.tensor([0, 2]), head, embed)


# ---------------------------------------------------------------------------
# build_models
# ---------------------------------------------------------------------------


def test_sn_gan_has_no_rotation_head():
    _, disc = build_models(tiny_config(variant="sn_gan"))
    assert disc.rotation_head is None
    out = disc(torch.randn(4, 3, 32, 32))
    assert out.rotation is None


def test_ssgan_rotation_head_shape():
    _, disc = build_models(tiny_config(variant="ssgan"))
    out = disc(torch.randn(4, 3, 32, 32))
    assert out.rotation.shape == (4, 4)


def test_build_models_deterministic():
    a_gen, a_disc = build_models(tiny_config(variant="ssgan_sbn", seed=9))
    b_gen, b_disc = build_models(tiny_config(variant="ssgan_sbn", seed=9))
    assert state_dict_hash(a_gen) == state_dict_hash(b_gen)
    assert state_dict_hash(a_disc) == state_dict_hash(b_disc)
    c_gen, _ = build_models(tiny_config(variant="ssgan_sbn", seed=10))
    assert state_dict_hash(a_gen) != state_dict_hash(c_gen)


def test_pcgan_requires_num_classes():
    with pytest.raises(ConfigError, match="num_classes"):
        build_models(tiny_config(variant="pcgan"))
    gen, disc = build_models(tiny_config(variant="pcgan", num_classes=10))
    y = torch.randint(0, 10, (4,))
    x = gen(gen.latent.sample(4, generator=torch.Generator().manual_seed(0)), y)
    assert x.shape == (4, 3, 32, 32)
    assert disc(x, y).source.shape == (4,)


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError, match="variant"):
        build_models(tiny_config(variant="wgan"))


def test_generator_deterministic_given_z():
    gen, _ = build_models(tiny_config(variant="ssgan", seed=4))
    z = torch.randn(4, 8, generator=torch.Generator().manual_seed(5))
    assert torch.equal(gen(z), gen(z))


def test_generator_output_range():
    gen, _ = build_models(tiny_config(variant="ssgan"))
    x = gen(torch.randn(8, 8))
    assert float(x.min()) >= -1.0 and float(x.max()) <= 1.0


def test_trunk_sharing():
    _, disc = build_models(tiny_config(variant="ssgan", seed=7))
    disc.eval()
    x = torch.randn(4, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    base = disc(x)
    # perturbing a trunk weight moves both heads
    with torch.no_grad():
        disc.blocks["block0"].conv1.weight.add_(0.05)
    moved = disc(x)
    assert not torch.equal(moved.source, base.source)
    assert not torch.equal(moved.rotation, base.rotation)
    # perturbing the rotation head leaves source logits bit-identical
    with torch.no_grad():
        disc.rotation_head.weight.add_(1.0)
    after = disc(x)
    assert torch.equal(after.source, moved.source)
    assert not torch.equal(after.rotation, moved.rotation)


def test_block_feature_shapes_contract():
    _, disc = build_models(tiny_config(variant="ssgan"))
    x = torch.randn(2, 3, 32, 32)
    for name, shape in disc.block_feature_shapes.items():
        feats = disc.trunk_features(x, upto=name)
        assert feats.shape == (2, *shape), name


def test_unknown_block_error_lists_names():
    _, disc = build_models(tiny_config(variant="ssgan"))
    with pytest.raises(KeyError, match="block0"):
        disc.trunk_features(torch.randn(2, 3, 32, 32), upto="blockX")


def test_checkpoint_roundtrip(tmp_path):
    gen, disc = build_models(tiny_config(variant="ssgan", seed=2))
    manifest = {"variant": "ssgan", "step": 0, "seed": 2, "config_hash": "abc"}
    path = tmp_path / "ck.pt"
    save_checkpoint(path, gen, disc, manifest)
    payload = load_checkpoint(path)
    assert payload["manifest"]["variant"] == "ssgan"
    gen2, disc2 = build_models(tiny_config(variant="ssgan", seed=99))
    gen2.load_state_dict(payload["generator"])
    disc2.load_state_dict(payload["discriminator"])
    assert state_dict_hash(gen2) == state_dict_hash(gen)
    assert state_dict_hash(disc2) == state_dict_hash(disc)


def test_generator_norm_modes_run():
    z = torch.randn(4, 8)
    for variant, needs_y in [("sn_gan", False), ("ssgan_sbn", False), ("pcgan", True)]:
        cfg = tiny_config(variant=variant, num_classes=10 if needs_y else None)
        gen, _ = build_models(cfg)
        y = torch.randint(0, 10, (4,)) if needs_y else None
        assert gen(z, y).shape == (4, 3, 32, 32)
    gen, _ = build_models(tiny_config(variant="pcgan", num_classes=10))
    with pytest.raises(ValueError, match="labels"):
        gen(z)
