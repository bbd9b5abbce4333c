import pytest
import torch

from clotvc import nets
from clotvc.nets import ARCH_KINDS, NetsConfig, build_discriminator, toy_nets_config

CONFIGS = {"toy": toy_nets_config(), "small": nets.small_nets_config(), "default": NetsConfig()}


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.mark.parametrize("name", CONFIGS)
def test_generator_shape(name):
    g = nets.Generator(CONFIGS[name].generator).eval()
    out = g(torch.randn(1, 2, 80, 64))
    assert out.shape == (1, 1, 80, 64) and torch.all(torch.isfinite(out))


@pytest.mark.parametrize("name", CONFIGS)
@pytest.mark.parametrize("kind", ARCH_KINDS)
def test_discriminator_contract(name, kind):
    d = build_discriminator(kind, CONFIGS[name]).eval()
    out = d(torch.randn(2, 1, 80, 64))
    assert out.embedding.shape[0] == 2 and out.embedding.shape[1] % 4 == 0
    assert out.embedding.shape[1] == d.embed_dim
    assert torch.all(torch.isfinite(out.realness)) and torch.all(torch.isfinite(out.embedding))
    expected = (2, 1, 8, 8) if kind == "dcnn" else (2, 1)
    assert tuple(out.realness.shape) == expected


@pytest.mark.parametrize("kind", ARCH_KINDS)
def test_discriminators_reject_wrong_shape(kind):
    d = build_discriminator(kind, toy_nets_config())
    with pytest.raises(ValueError):
        d(torch.randn(1, 2, 80, 64))
    with pytest.raises(ValueError):
        d(torch.randn(1, 1, 80, 32))


def test_generator_rejects_wrong_shape():
    with pytest.raises(ValueError):
        nets.Generator(toy_nets_config().generator)(torch.randn(1, 1, 80, 64))


def test_vit_token_count_and_patch_guard():
    d = build_discriminator("vit", toy_nets_config())
    assert d.tokens(torch.randn(1, 1, 80, 64)).shape[1] == 81
    with pytest.raises(ValueError):
        nets.ViTConfig(patch_size=7)


def test_vit_positions_matter():
    d = build_discriminator("vit", toy_nets_config()).eval()
    x = torch.randn(1, 1, 80, 64)
    swapped = x.clone()
    swapped[..., 0:8, 0:8], swapped[..., 72:80, 56:64] = x[..., 72:80, 56:64], x[..., 0:8, 0:8]
    assert not torch.allclose(d(x).realness, d(swapped).realness)


@pytest.mark.parametrize("kind", ARCH_KINDS)
def test_distinct_inputs_give_distinct_embeddings(kind):
    d = build_discriminator(kind, toy_nets_config()).eval()
    for _ in range(5):
        a, b = d(torch.randn(2, 1, 80, 64)).embedding
        assert not torch.allclose(a, b)


def test_eval_mode_is_deterministic():
    cfg = toy_nets_config()
    g = nets.Generator(cfg.generator).eval()
    z = torch.zeros(1, 2, 80, 64)
    assert torch.equal(g(z), g(z))
    for kind in ARCH_KINDS:
        d = build_discriminator(kind, cfg).eval()
        x = torch.randn(1, 1, 80, 64)
        assert torch.equal(d(x).embedding, d(x).embedding)


def test_same_seed_same_init():
    torch.manual_seed(3)
    a = nets.Generator(toy_nets_config().generator)
    torch.manual_seed(3)
    b = nets.Generator(toy_nets_config().generator)
    assert nets.param_digest(a) == nets.param_digest(b)


def test_arch_hash_tracks_config():
    assert toy_nets_config().arch_hash() == toy_nets_config().arch_hash()
    assert toy_nets_config().arch_hash() != NetsConfig().arch_hash()
    assert toy_nets_config(("dcnn",)).arch_hash() != toy_nets_config().arch_hash()


def test_spectral_norm_flag():
    cfg = nets.DCNNConfig(base_channels=4, spectral_norm=True)
    d = nets.DCNNDiscriminator(cfg)
    assert any("parametrizations" in n for n, _ in d.named_parameters())
    assert d(torch.randn(1, 1, 80, 64)).embedding.shape[1] % 4 == 0


@pytest.mark.parametrize("part", ["generator"] + list(ARCH_KINDS))
def test_every_parameter_receives_gradient(part):
    cfg = toy_nets_config()
    if part == "generator":
        m = nets.Generator(cfg.generator)
        y = m(torch.randn(2, 2, 80, 64))
        readout = (y * torch.randn_like(y)).sum()
    else:
        m = build_discriminator(part, cfg)
        out = m(torch.randn(2, 1, 80, 64))
        readout = out.realness.sum() + (out.embedding * torch.randn_like(out.embedding)).sum()
    readout.backward()
    dead = [n for n, p in m.named_parameters() if p.grad is None or torch.count_nonzero(p.grad) == 0]
    assert not dead


def _relative_error(a, b):
    return float((a - b).norm() / b.norm().clamp_min(1e-12))


def test_generator_parameter_finite_differences():
    g = nets.Generator(toy_nets_config().generator).double().eval()
    x = torch.randn(1, 2, 80, 64, dtype=torch.float64)
    w = torch.randn(1, 1, 80, 64, dtype=torch.float64)
    loss = lambda: float((g(x) * w).sum().detach())  # noqa: E731
    (g(x) * w).sum().backward()
    gen = torch.Generator().manual_seed(1)
    analytic, numeric = [], []
    params = [p for p in g.parameters()]
    h = 1e-6
    for p in params[:: max(1, len(params) // 8)]:
        for k in torch.randint(0, p.numel(), (3,), generator=gen).tolist():
            flat = p.data.view(-1)
            orig = flat[k].item()
            flat[k] = orig + h
            up = loss()
            flat[k] = orig - h
            down = loss()
            flat[k] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(p.grad.view(-1)[k].item())
    assert _relative_error(torch.tensor(analytic), torch.tensor(numeric)) <= 1e-3


def test_conformer_input_finite_differences():
    d = build_discriminator("conformer", toy_nets_config()).double().eval()
    x = torch.randn(1, 1, 80, 64, dtype=torch.float64, requires_grad=True)
    d(x).realness.sum().backward()
    gen = torch.Generator().manual_seed(2)
    idx = torch.randint(0, x.numel(), (40,), generator=gen).tolist()
    h = 1e-6
    numeric = []
    with torch.no_grad():
        for k in idx:
            xp, xm = x.detach().clone(), x.detach().clone()
            xp.view(-1)[k] += h
            xm.view(-1)[k] -= h
            numeric.append((float(d(xp).realness) - float(d(xm).realness)) / (2 * h))
    analytic = x.grad.view(-1)[idx]
    assert _relative_error(analytic, torch.tensor(numeric, dtype=torch.float64)) <= 1e-3
