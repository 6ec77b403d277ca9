"""Randomized oracle checks shared by the unit tests and the acceptance gate.

Each ``check_*`` is a hypothesis test body run for 100 examples.
"""

import numpy as np
import torch
from hypothesis import given, settings, strategies as st

import oracles
from semtok.diffusion import VelocityNet, flow_matching_loss
from semtok.encoder import PerceptualNet, ToyEncoder
from semtok.evaluation import frechet_from_features
from semtok.losses import (gan_discriminator_loss, gan_generator_loss, hinge_discriminator_loss,
                           hinge_generator_loss, l1_loss, perceptual_loss, pre_adapter_sp_loss,
                           semantic_preservation_loss)
from semtok.decoder import PatchDiscriminator

CASES = settings(max_examples=100, deadline=None, derandomize=True)
ELEMENTWISE_TOL = 1e-6
FRECHET_RTOL = 1e-3

seeds = st.integers(0, 2 ** 31 - 1)
shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 5))


def _pair(seed, shape, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g) * scale, torch.randn(shape, generator=g) * scale


_torch_state = {}


def _feat_net():
    if "feat" not in _torch_state:
        torch.manual_seed(123)
        _torch_state["feat"] = PerceptualNet(ToyEncoder(16, 8, 8, 16, 2, 2), layers=(0, 1, 2))
    return _torch_state["feat"]


def _velocity_net():
    if "vnet" not in _torch_state:
        torch.manual_seed(321)
        net = VelocityNet(d=4, num_classes=3, dim=16, depth=1, heads=2)
        torch.nn.init.normal_(net.out.weight, std=0.3)
        _torch_state["vnet"] = net.eval()
    return _torch_state["vnet"]


def _disc():
    if "disc" not in _torch_state:
        torch.manual_seed(7)
        _torch_state["disc"] = PatchDiscriminator(4, n_layers=2)
    return _torch_state["disc"]


@CASES
@given(seeds, shapes, st.floats(0.01, 10))
def check_l1(seed, shape, scale):
    x, y = _pair(seed, shape, scale)
    assert abs(l1_loss(x, y).item() - oracles.l1(x, y)) <= ELEMENTWISE_TOL * max(1.0, scale)


@CASES
@given(seeds, shapes, st.floats(0.01, 10))
def check_sp(seed, shape, scale):
    z, z_star = _pair(seed, shape, scale)
    ref = oracles.mse(z, z_star)
    tol = ELEMENTWISE_TOL * max(1.0, scale ** 2)
    assert abs(semantic_preservation_loss(z, z_star).item() - ref) <= tol
    assert abs(pre_adapter_sp_loss(z, z_star).item() - ref) <= tol


@CASES
@given(seeds, st.integers(1, 3))
def check_perceptual(seed, batch):
    g = torch.Generator().manual_seed(seed)
    x, y = torch.rand(batch, 16, 16, 3, generator=g), torch.rand(batch, 16, 16, 3, generator=g)
    net = _feat_net()
    with torch.no_grad():
        got = perceptual_loss(net, x, y).item()
    assert abs(got - oracles.perceptual(net, x, y)) <= ELEMENTWISE_TOL * max(1.0, abs(got))


@CASES
@given(seeds, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), st.floats(0.01, 5))
def check_hinge(seed, shape, scale):
    real, fake = _pair(seed, shape + (1,), scale)
    assert abs(hinge_generator_loss(fake).item() - oracles.hinge_generator(fake)) <= ELEMENTWISE_TOL * max(1, scale)
    assert abs(hinge_discriminator_loss(real, fake).item()
               - oracles.hinge_discriminator(real, fake)) <= ELEMENTWISE_TOL * max(1, scale)
    # the same through a discriminator network
    g = torch.Generator().manual_seed(seed)
    x, x_hat = torch.rand(2, 8, 8, 3, generator=g), torch.rand(2, 8, 8, 3, generator=g)
    disc = _disc()
    with torch.no_grad():
        lr, lf = disc(x), disc(x_hat)
        assert abs(gan_generator_loss(disc, x_hat).item() - oracles.hinge_generator(lf)) <= ELEMENTWISE_TOL
        assert abs(gan_discriminator_loss(disc, x, x_hat).item()
                   - oracles.hinge_discriminator(lr, lf)) <= ELEMENTWISE_TOL


@CASES
@given(seeds, st.integers(1, 4), st.floats(0.0, 1.0))
def check_flow_matching(seed, batch, null_prob):
    net = _velocity_net()
    g = torch.Generator().manual_seed(seed ^ 0x5A5A)
    z0 = torch.randn(batch, 2, 2, 4, generator=g)
    cond = torch.randint(0, 3, (batch,), generator=g)
    with torch.no_grad():
        got = flow_matching_loss(net, z0, cond, torch.Generator().manual_seed(seed), null_prob).item()
    ref = oracles.flow_matching(net, z0, cond, seed, null_prob, net.null_id)
    assert abs(got - ref) <= ELEMENTWISE_TOL * max(1.0, ref)


@CASES
@given(seeds, st.integers(3, 40), st.integers(1, 6), st.floats(0.1, 5), st.floats(-2, 2))
def check_frechet(seed, n, m, scale, shift):
    rng = np.random.default_rng(seed)
    mix = rng.normal(size=(m, m))
    fa = rng.normal(size=(n, m)) @ mix * scale
    fb = rng.normal(size=(n + 3, m)) @ (mix + 0.3 * rng.normal(size=(m, m))) + shift
    got = frechet_from_features(fa, fb)
    for ref in (oracles.frechet_sqrtm(fa, fb), oracles.frechet_eigvals(fa, fb)):
        assert abs(got - ref) <= FRECHET_RTOL * max(abs(ref), 1e-2), (got, ref)


ALL_LOSS_CHECKS = {
    "l1": check_l1, "sp": check_sp, "perceptual": check_perceptual, "hinge_gan": check_hinge,
    "flow_matching": check_flow_matching, "frechet": check_frechet,
}
