import pytest
import torch
from hypothesis import given, strategies as st

from semtok.diffusion import (DiffusionConfig, DiffusionModel, SamplerConfig, VelocityNet, cfg_combine, euler_sample,
                              flow_matching_loss, interpolate_path, train_diffusion, velocity_target)
from semtok.errors import ConfigError, DomainError, ShapeError
from semtok.trainer import StageSchedule, TokenizerBundle, run_stage
from semtok.encoder import ToyEncoder


def test_path_endpoints_and_midpoint():
    z0, z1 = torch.randn(2, 3, 3, 4), torch.randn(2, 3, 3, 4)
    assert torch.equal(interpolate_path(z0, z1, 0.0), z0)
    assert torch.equal(interpolate_path(z0, z1, 1.0), z1)
    mid = interpolate_path(torch.zeros(1, 2, 2, 3), torch.ones(1, 2, 2, 3), 0.5)
    assert torch.equal(mid, torch.full((1, 2, 2, 3), 0.5))
    with pytest.raises(DomainError):
        interpolate_path(z0, z1, 1.5)
    with pytest.raises(DomainError):
        interpolate_path(z0, z1, torch.tensor([0.2, -0.1]))
    with pytest.raises(ShapeError):
        interpolate_path(z0, z1[:1], 0.3)


def test_velocity_examples():
    z = torch.randn(1, 2, 2, 3)
    assert torch.equal(velocity_target(z, z), torch.zeros_like(z))
    assert torch.equal(velocity_target(torch.zeros(1, 2, 2, 3), torch.ones(1, 2, 2, 3)), torch.ones(1, 2, 2, 3))
    with pytest.raises(ShapeError):
        velocity_target(z, z[..., :2])


@given(st.integers(0, 2 ** 31 - 1), st.floats(0, 1))
def test_path_identities(seed, t):
    g = torch.Generator().manual_seed(seed)
    z0, z1 = torch.randn(2, 2, 2, 3, generator=g), torch.randn(2, 2, 2, 3, generator=g)
    zt, u = interpolate_path(z0, z1, t), velocity_target(z0, z1)
    assert torch.allclose(zt, z0 + t * u, atol=1e-6)
    assert torch.allclose(zt + (1 - t) * u, z1, atol=1e-6)


def test_fm_loss_perfect_and_degenerate():
    z0 = torch.randn(4, 2, 2, 3)
    rng = torch.Generator().manual_seed(5)
    replay = torch.Generator().manual_seed(5)
    z1 = torch.randn(z0.shape, generator=replay)
    perfect = lambda z, t, c: z1 - z0  # noqa: E731
    assert flow_matching_loss(perfect, z0, torch.zeros(4, dtype=torch.long), rng, null_id=9).item() <= 1e-7
    zero = lambda z, t, c: torch.zeros_like(z)  # noqa: E731
    z0 = torch.zeros(3, 2, 2, 2)
    # with z1 drawn from N(0, 1) the target is z1 itself, so a zero model scores mean(z1^2)
    loss = flow_matching_loss(zero, z0, torch.zeros(3, dtype=torch.long), torch.Generator().manual_seed(1), null_id=1)
    ref_z1 = torch.randn(z0.shape, generator=torch.Generator().manual_seed(1))
    assert loss.item() == pytest.approx((ref_z1 ** 2).mean().item(), rel=1e-6)


def test_fm_loss_degenerate_zero_noise():
    # a model that always predicts the drawn noise with z0 = 0 has zero loss
    class Echo:
        null_id = 2

        def __call__(self, z, t, c):
            return z / t.reshape(-1, 1, 1, 1)

    z0 = torch.zeros(3, 2, 2, 2)
    loss = flow_matching_loss(Echo(), z0, torch.zeros(3, dtype=torch.long), torch.Generator().manual_seed(2))
    assert loss.item() < 1e-10


def test_label_dropout_rate():
    seen = []

    def model(z, t, c):
        seen.append(c.clone())
        return torch.zeros_like(z)

    model.null_id = 7
    rng = torch.Generator().manual_seed(0)
    for _ in range(50):
        flow_matching_loss(model, torch.zeros(64, 1, 1, 1), torch.zeros(64, dtype=torch.long), rng, null_prob=0.1)
    frac = (torch.cat(seen) == 7).float().mean().item()
    assert 0.07 < frac < 0.13


def test_cfg_examples():
    g = torch.Generator().manual_seed(0)
    vc, vu = torch.randn(2, 4, 4, 32, generator=g), torch.randn(2, 4, 4, 32, generator=g)
    assert cfg_combine(vc, vu, 1.0, "all") is vc
    assert cfg_combine(vc, vu, 1.0, 3) is vc
    assert torch.equal(cfg_combine(vc, vu, 0.0, "all"), vu)
    out = cfg_combine(vc, vu, 4.0, 3)
    assert torch.equal(out[..., 3:], vc[..., 3:])
    assert torch.allclose(out[..., :3], vu[..., :3] + 4.0 * (vc[..., :3] - vu[..., :3]))
    with pytest.raises(ShapeError):
        cfg_combine(vc, vu[..., :4], 2.0)
    with pytest.raises(ShapeError):
        cfg_combine(vc, vu, 2.0, 33)


@given(st.floats(0, 20), st.integers(0, 32), st.integers(0, 2 ** 31 - 1))
def test_cfg_gating_bit_exact(scale, k, seed):
    g = torch.Generator().manual_seed(seed)
    vc, vu = torch.randn(1, 2, 2, 32, generator=g), torch.randn(1, 2, 2, 32, generator=g)
    out = cfg_combine(vc, vu, scale, k)
    assert torch.equal(out[..., k:], vc[..., k:])


def test_sampler_config_validation():
    assert SamplerConfig().steps == 30 and SamplerConfig().cfg_channels == 3
    with pytest.raises(ConfigError):
        SamplerConfig(steps=0)
    with pytest.raises(ConfigError):
        SamplerConfig(cfg_scale=-1)


@pytest.mark.parametrize("scale", [1.0, 4.0])
def test_euler_exact_on_constant_field(scale):
    g = torch.Generator().manual_seed(3)
    z0, z1 = torch.randn(2, 4, 4, 8, generator=g), torch.randn(2, 4, 4, 8, generator=g)

    def field(z, t, c):
        return (z1 - z0).repeat(z.shape[0] // 2, 1, 1, 1)

    outs = [euler_sample(field, SamplerConfig(steps=s, cfg_scale=scale), 0, z0.shape, noise=z1, null_id=5).codes
            for s in (1, 7, 100)]
    for o in outs:
        assert (o - z0).abs().max() < 1e-5
    assert (outs[0] - outs[2]).abs().max() < 1e-5


def test_euler_single_step_and_determinism():
    torch.manual_seed(0)
    net = VelocityNet(4, 3, 16, 1, 2).eval()
    torch.nn.init.normal_(net.out.weight, std=0.2)
    sc = SamplerConfig(steps=1, cfg_scale=1.0, seed=11)
    z1 = torch.randn((2, 3, 3, 4), generator=torch.Generator().manual_seed(11))
    out = euler_sample(net, sc, 1, (2, 3, 3, 4))
    with torch.no_grad():
        expected = z1 - net(z1, torch.ones(2), torch.tensor([1, 1]))
    assert torch.allclose(out.codes, expected, atol=1e-6)
    assert out.normalized
    sc = SamplerConfig(steps=5, cfg_scale=3.0, seed=4)
    assert torch.equal(euler_sample(net, sc, 2, (2, 3, 3, 4)).codes, euler_sample(net, sc, 2, (2, 3, 3, 4)).codes)


@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.floats(0, 1))
def test_velocity_net_shape_contract(b, h, w, t):
    torch.manual_seed(0)
    net = VelocityNet(6, 4, 16, 1, 2, qk_norm=True)
    with torch.no_grad():
        out = net(torch.randn(b, h, w, 6), t, torch.zeros(b, dtype=torch.long))
    assert out.shape == (b, h, w, 6)


def test_velocity_net_zero_init_and_null_id():
    net = VelocityNet(4, 10, 16, 1, 2)
    assert net.null_id == 10
    with torch.no_grad():
        assert torch.equal(net(torch.randn(2, 2, 2, 4), 0.5, torch.tensor([3, 10])), torch.zeros(2, 2, 2, 4))
    with pytest.raises(ShapeError):
        net(torch.randn(2, 2, 2, 5), 0.5, torch.tensor([0, 1]))


@pytest.fixture(scope="module")
def trained_tokenizer(tiny_cfg, small_dataset):
    torch.manual_seed(0)
    b = TokenizerBundle(tiny_cfg, ToyEncoder.from_config(tiny_cfg))
    for s in (1, 2, 3):
        run_stage(b, StageSchedule.for_stage(s, tiny_cfg), small_dataset)
    return b


@pytest.mark.parametrize("num_classes", [4, 1])
def test_train_diffusion_contracts(trained_tokenizer, small_dataset, num_classes, tmp_path):
    before = trained_tokenizer.checksums()
    dcfg = DiffusionConfig(dim=16, depth=1, heads=2, batch_size=8, steps=40, lr=1e-3)
    model = DiffusionModel(dcfg, trained_tokenizer.cfg.d, trained_tokenizer.cfg.latent_size, num_classes)
    train_diffusion(model, trained_tokenizer, small_dataset, records_path=tmp_path / "r.jsonl", log_every=20)
    assert trained_tokenizer.checksums() == before
    assert model.step == 40
    assert model.history[-1][2] < model.history[0][2]
    assert (tmp_path / "r.jsonl").read_text().count("diffusion/fm_probe") == 2
    # the EMA shadow moved away from the initial weights
    assert any(not torch.equal(a, b) for a, b in zip(model.ema.parameters(), model.net.parameters()))
    imgs = model.generate(trained_tokenizer.inference(), SamplerConfig(steps=3, cfg_channels=2), 0, 2)
    assert imgs.shape == (2, 32, 32, 3)
    model.save(tmp_path / "d.ckpt")
    back = DiffusionModel.load(tmp_path / "d.ckpt")
    assert back.step == 40 and back.num_classes == num_classes
    assert torch.equal(back.stats.std, model.stats.std)
    for a, b in zip(back.ema.parameters(), model.ema.parameters()):
        assert torch.equal(a, b)


def test_train_diffusion_rejects_too_many_labels(trained_tokenizer, small_dataset):
    model = DiffusionModel(DiffusionConfig(dim=16, depth=1, heads=2), 8, 4, num_classes=2)
    with pytest.raises(ConfigError):
        train_diffusion(model, trained_tokenizer, small_dataset, steps=1)


def test_ema_warmup_decay():
    from semtok.diffusion import warmup_decay
    assert warmup_decay(0.999, 0) == pytest.approx(0.1)
    assert warmup_decay(0.999, 90) == pytest.approx(0.91)
    assert warmup_decay(0.999, 10**6) == 0.999
    seq = [warmup_decay(0.999, s) for s in range(0, 20000, 100)]
    assert all(a <= b for a, b in zip(seq, seq[1:]))
