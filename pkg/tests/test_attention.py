import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from petdiff.network.attention import (
    AttentionError,
    DAAChannel,
    DAASpatial,
    DoseAdaptiveAttention,
    DoseEmbedding,
    SqueezeExcitation,
)


@pytest.fixture(autouse=True)
def seeded():
    torch.manual_seed(0)


def _gradcheck_parameters(module: nn.Module, loss_fn) -> None:
    """Central differences against autograd for every parameter tensor, float64"""
    module.double()
    for name, param in module.named_parameters():
        def f(p, name=name):
            params = dict(module.named_parameters())
            params[name] = p
            return loss_fn(lambda *args: torch.func.functional_call(module, params, args))

        assert torch.autograd.gradcheck(f, (param.detach().clone().requires_grad_(True),), eps=1e-6, atol=1e-5, rtol=1e-3), name


def test_se_weights_in_unit_interval():
    """Test SE gates lie strictly inside (0, 1)"""
    se = SqueezeExcitation(8, reduction=4)
    weights = se.weights(torch.randn(2, 8, 6, 6, 6) * 10)
    assert weights.shape == (2, 8)
    assert torch.all((weights > 0) & (weights < 1))


def test_se_zero_input_zero_bias_gives_half():
    """Test SE on zero input with zero bias gates at one half"""
    se = SqueezeExcitation(8)
    nn.init.zeros_(se.reduce.bias)
    nn.init.zeros_(se.expand.bias)
    weights = se.weights(torch.zeros(1, 8, 4, 4, 4))
    assert torch.all(weights == 0.5)


def test_se_permutation_invariant():
    """Test SE weights do not depend on voxel order"""
    se = SqueezeExcitation(4, reduction=2)
    x = torch.randn(1, 4, 6, 6, 6)
    perm = torch.randperm(6 * 6 * 6)
    shuffled = x.flatten(2)[:, :, perm].reshape_as(x)
    assert torch.allclose(se.weights(x), se.weights(shuffled), atol=1e-6)


def test_se_channel_mismatch():
    """Test SE rejects the wrong channel count"""
    with pytest.raises(AttentionError):
        SqueezeExcitation(8).weights(torch.zeros(1, 4, 4, 4, 4))
    with pytest.raises(AttentionError):
        SqueezeExcitation(6, reduction=4)


def test_dose_embedding_deterministic_and_dose_dependent():
    """Test the dose embedding is a function of the dose"""
    embed = DoseEmbedding(64)
    low, high = torch.tensor([0.02]), torch.tensor([0.50])
    assert torch.equal(embed(low), embed(low))
    assert (embed(low) - embed(high)).norm() > 0


def test_dose_embedding_zero_weights_gives_bias():
    """Test zero MLP weights leave only the bias"""
    embed = DoseEmbedding(16)
    nn.init.zeros_(embed.mlp[0].weight)
    nn.init.zeros_(embed.mlp[2].weight)
    out = embed(torch.tensor([0.3]))
    assert torch.allclose(out, embed.mlp[2].bias.detach()[None])


def test_dose_embedding_range():
    """Test dose fractions outside (0, 1] are rejected"""
    embed = DoseEmbedding(8)
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(AttentionError):
            embed(torch.tensor([bad]))


def test_daa_channel_zero_heads_is_standardisation():
    """Test zero scale and shift heads reduce the channel branch to instance norm"""
    block = DAAChannel(4, embed_dim=8)
    block.zero_init_heads()
    x = torch.randn(2, 4, 6, 6, 6) * 3 + 1
    emb = torch.randn(2, 8)
    out = block(x, emb)
    assert torch.equal(out, F.instance_norm(x, eps=1e-5))
    assert torch.allclose(out.mean(dim=(2, 3, 4)), torch.zeros(2, 4), atol=1e-4)
    assert torch.allclose(out.std(dim=(2, 3, 4), correction=0), torch.ones(2, 4), atol=1e-4)


def test_daa_channel_weights_and_dose_sensitivity():
    """Test channel weights are gates and follow the dose"""
    block = DAAChannel(4, embed_dim=8)
    embed = DoseEmbedding(8)
    x = torch.randn(1, 4, 6, 6, 6)
    weights, _, _ = block.modulation(x, embed(torch.tensor([0.1])))
    assert torch.all((weights > 0) & (weights < 1))
    a = block(x, embed(torch.tensor([0.02])))
    b = block(x, embed(torch.tensor([0.50])))
    assert (a - b).abs().max() > 0


def test_daa_channel_embedding_mismatch():
    """Test the channel branch rejects a wrong embedding width"""
    block = DAAChannel(4, embed_dim=8)
    with pytest.raises(AttentionError):
        block(torch.randn(1, 4, 6, 6, 6), torch.randn(1, 16))


def test_daa_spatial_zero_input():
    """Test the spatial branch maps zero to zero"""
    block = DAASpatial()
    assert torch.all(block(torch.zeros(1, 3, 8, 8, 8)) == 0)


def test_daa_spatial_map_range_and_shapes():
    """Test the spatial map is one channel in (0, 1)"""
    block = DAASpatial()
    for shape in ((1, 1, 8, 8, 8), (1, 4, 16, 16, 16)):
        x = torch.randn(*shape)
        amap = block.attention_map(x)
        assert amap.shape == (shape[0], 1, *shape[2:])
        assert torch.all((amap > 0) & (amap < 1))
        assert block(x).shape == x.shape


def test_daa_spatial_depends_on_mean_and_max_only():
    """Two inputs with the same channel mean and max maps share one attention map"""
    block = DAASpatial()
    x = torch.randn(1, 3, 8, 8, 8)
    y = x[:, [2, 0, 1]]
    assert torch.allclose(block.attention_map(x), block.attention_map(y), atol=1e-6)


def test_daa_spatial_too_small():
    """Test the spatial branch rejects extents below the minimum"""
    with pytest.raises(AttentionError):
        DAASpatial()(torch.randn(1, 2, 3, 8, 8))


def test_daa_zero_input_with_zero_beta_head():
    """Test DAA keeps zero input at zero without a shift"""
    block = DoseAdaptiveAttention(4, embed_dim=8)
    nn.init.zeros_(block.channel.beta_head.weight)
    nn.init.zeros_(block.channel.beta_head.bias)
    out = block(torch.zeros(1, 4, 8, 8, 8), torch.tensor([0.2]))
    assert torch.all(out == 0)


def test_daa_dose_changes_output():
    """Test DAA output follows the dose"""
    block = DoseAdaptiveAttention(4, embed_dim=8)
    x = torch.randn(1, 4, 8, 8, 8)
    assert (block(x, torch.tensor([0.02])) - block(x, torch.tensor([1.0]))).abs().max() > 0


def test_daa_branch_order_flag():
    """Test the two branch orders differ and unknown orders are rejected"""
    torch.manual_seed(3)
    first = DoseAdaptiveAttention(4, embed_dim=8, order="channel_first")
    torch.manual_seed(3)
    second = DoseAdaptiveAttention(4, embed_dim=8, order="spatial_first")
    x = torch.randn(1, 4, 8, 8, 8)
    dose = torch.tensor([0.1])
    assert not torch.allclose(first(x, dose), second(x, dose))
    with pytest.raises(AttentionError):
        DoseAdaptiveAttention(4, order="sideways")  # type: ignore[arg-type]


def test_se_gradients_match_finite_differences():
    """SE gradients agree with finite differences"""
    se = SqueezeExcitation(4, reduction=2)
    x = torch.randn(1, 4, 8, 8, 8, dtype=torch.float64)
    _gradcheck_parameters(se, lambda f: (f(x) ** 2).sum())


def test_daa_channel_gradients_match_finite_differences():
    """Channel branch gradients agree with finite differences"""
    block = DAAChannel(2, embed_dim=4)
    x = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)
    emb = torch.randn(1, 4, dtype=torch.float64)
    _gradcheck_parameters(block, lambda f: (f(x, emb) * torch.linspace(-1, 1, 2 * 512, dtype=torch.float64).reshape(1, 2, 8, 8, 8)).sum())


def test_daa_spatial_gradients_match_finite_differences():
    """Spatial branch gradients agree with finite differences"""
    block = DAASpatial()
    x = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)
    _gradcheck_parameters(block, lambda f: (f(x) ** 2).sum())


def test_daa_gradients_match_finite_differences():
    """Full DAA gradients agree with finite differences"""
    block = DoseAdaptiveAttention(2, embed_dim=4)
    x = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)
    dose = torch.tensor([0.3], dtype=torch.float64)
    _gradcheck_parameters(block, lambda f: (f(x, dose) ** 2).mean())
