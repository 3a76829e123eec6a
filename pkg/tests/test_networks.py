import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcdut.errors import ConsistencyError, InvalidConfigError, InvalidInputError
from mcdut.multicrop import PatchIndexSet, sample_patch_ids
from mcdut.networks import (DomainHead, ModelConfig, PatchDiscriminator, PatchProjector, ResnetGenerator,
                            build_networks, gather_patches, min_disc_input, patch_grid_size, project_domain,
                            project_patches, receptive_field, tap_order)

from .conftest import toy_model


def gen(seed=0, **kw):
    torch.manual_seed(seed)
    return ResnetGenerator(toy_model(**kw)).eval()


class TestGenerator:
    def test_output_range_and_shape(self):
        G = gen()
        x = torch.rand(2, 3, 16, 24) * 2 - 1
        y = G(x)
        assert y.shape == x.shape
        assert y.min() >= -1 and y.max() <= 1

    @pytest.mark.parametrize("side", [128, 256])
    def test_output_size_matches_input(self, side):
        assert gen()(torch.rand(1, 3, side, side) * 2 - 1).shape == (1, 3, side, side)

    def test_encode_is_deterministic_in_eval_mode(self):
        G, x = gen(), torch.randn(2, 3, 16, 16)
        assert all(torch.equal(a, b) for a, b in zip(G.encode(x), G.encode(x)))

    def test_sides_must_divide_by_four(self):
        with pytest.raises(InvalidInputError):
            gen()(torch.zeros(1, 3, 18, 16))

    def test_wrong_channels(self):
        with pytest.raises(InvalidInputError):
            gen()(torch.zeros(1, 1, 16, 16))

    def test_tap_zero_is_input(self):
        x = torch.randn(1, 3, 16, 16)
        assert torch.equal(gen().encode(x)[0], x)

    def test_five_taps_with_expected_shapes(self):
        G = gen()
        feats = G.encode(torch.randn(2, 3, 16, 16))
        assert [tuple(f.shape) for f in feats] == [(2, 3, 16, 16), (2, 8, 8, 8), (2, 16, 4, 4),
                                                   (2, 16, 4, 4), (2, 16, 4, 4)]
        assert G.tap_channels() == [3, 8, 16, 16, 16]

    def test_encode_matches_trace(self):
        G = gen()
        x = torch.randn(1, 3, 16, 16)
        trace = G.trace(x)
        for name, feat in zip(G.cfg.taps, G.encode(x)):
            assert torch.equal(feat, trace[name])
        assert torch.equal(trace["out"], G(x))

    def test_taps_are_taken_after_attention(self):
        trace = gen().trace(torch.randn(1, 3, 16, 16))
        assert not torch.equal(trace["down1"], trace["down1_conv"])

    def test_dca_leaves_upstream_untouched(self):
        x = torch.randn(1, 3, 16, 16)
        with_dca, without = gen(attention="dca").trace(x), gen(attention="none").trace(x)
        # same seed gives the same conv weights; everything before the first attention block matches bitwise
        for name in ("rgb", "stem", "down1_conv"):
            assert torch.equal(with_dca[name], without[name])
        assert torch.equal(without["down1"], without["down1_conv"])
        assert not torch.equal(with_dca["down1"], with_dca["down1_conv"])

    @pytest.mark.parametrize("bad", [(), ("down1", "rgb"), ("block3",), ("rgb", "rgb"), ("mid",)])
    def test_bad_taps(self, bad):
        with pytest.raises(InvalidConfigError):
            tap_order(bad, 2)

    def test_shift_equivariance_away_from_borders(self):
        G = gen(seed=4)
        base = torch.zeros(1, 3, 128, 128)
        base[:, :, 52:62, 50:63] = torch.rand(3, 10, 13, generator=torch.Generator().manual_seed(1)) * 2 - 1
        shifted = torch.roll(base, shifts=(8, 8), dims=(-2, -1))
        for feat, moved in zip(G.encode(base), G.encode(shifted)):
            # zero-padded borders differ from the background, so compare the middle half only
            k = feat.shape[-1] // 4
            s = 8 * feat.shape[-1] // 128
            assert torch.allclose(moved[..., k + s:3 * k, k + s:3 * k], feat[..., k:3 * k - s, k:3 * k - s],
                                  atol=1e-5)


class TestDiscriminator:
    def test_thirty_by_thirty_on_256(self):
        torch.manual_seed(0)
        D = PatchDiscriminator(ModelConfig(ndf=4))
        assert D(torch.zeros(1, 3, 256, 256)).shape == (1, 1, 30, 30)
        assert patch_grid_size(256, 3) == 30 and receptive_field(3) == 70

    @pytest.mark.parametrize("side", [16, 24, 64])
    def test_grid_size_formula(self, side):
        torch.manual_seed(0)
        D = PatchDiscriminator(toy_model())
        assert D(torch.zeros(1, 3, side, side)).shape[-1] == patch_grid_size(side, 2)

    def test_stride_unit_shift_moves_logits_by_one(self):
        torch.manual_seed(2)
        D = PatchDiscriminator(ModelConfig(ndf=4)).eval()
        base = torch.zeros(1, 3, 128, 128)
        base[:, :, 56:70, 52:66] = torch.rand(3, 14, 14, generator=torch.Generator().manual_seed(0)) * 2 - 1
        shifted = torch.roll(base, shifts=(8, 8), dims=(-2, -1))  # total stride of three stride-2 convs
        a, b = D(base), D(shifted)
        assert torch.isfinite(a).all()
        assert torch.allclose(b[..., 5:-3, 5:-3], a[..., 4:-4, 4:-4], atol=1e-5)

    def test_too_small(self):
        D = PatchDiscriminator(ModelConfig(ndf=4))
        with pytest.raises(InvalidInputError):
            D(torch.zeros(1, 3, min_disc_input(3) - 1, min_disc_input(3) - 1))
        assert D(torch.zeros(1, 3, min_disc_input(3), min_disc_input(3))).shape[-1] == 1


class TestProjection:
    def test_default_config_gives_256_rows_on_five_taps(self):
        from mcdut.engine import TrainConfig

        torch.manual_seed(0)
        cfg = TrainConfig()
        nets = build_networks(cfg.model)
        feats = nets.G.encode(torch.rand(1, 3, 64, 64) * 2 - 1)
        rng = np.random.default_rng(0)
        ids = [sample_patch_ids(f.shape[-2:], cfg.num_patches, rng, l) for l, f in enumerate(feats)]
        out = project_patches(feats, ids, nets.F)
        assert [tuple(z.shape) for z in out] == [(1, 256, 256)] * 5
        assert len(project_domain(feats, nets.Hf)) == 5


    def test_gather_oracle(self, rng):
        feat = torch.randn(2, 5, 4, 6)
        ids = sample_patch_ids((4, 6), 7, rng)
        got = gather_patches(feat, ids)
        for b in range(2):
            for s, p in enumerate(ids.indices):
                assert torch.equal(got[b, s], feat[b, :, p // 6, p % 6])

    def test_gather_out_of_bounds(self):
        with pytest.raises(ConsistencyError):
            gather_patches(torch.randn(1, 2, 2, 2), PatchIndexSet(0, [4]))

    def test_unit_rows(self, rng):
        torch.manual_seed(0)
        G = gen()
        feats = G.encode(torch.randn(2, 3, 16, 16))
        head = PatchProjector(G.tap_channels(), 16)
        ids = [sample_patch_ids(f.shape[-2:], 6, rng, l) for l, f in enumerate(feats)]
        for z in project_patches(feats, ids, head):
            assert z.shape == (2, 6, 16)
            assert torch.allclose(z.norm(dim=-1), torch.ones(2, 6), atol=1e-5)
        for z in project_patches(feats, ids, None):
            assert torch.allclose(z.norm(dim=-1), torch.ones(2, 6), atol=1e-5)

    def test_layer_count_mismatch(self, rng):
        feats = [torch.randn(1, 3, 4, 4)]
        with pytest.raises(ConsistencyError):
            project_patches(feats, [], None)
        with pytest.raises(ConsistencyError):
            project_domain(feats, DomainHead([3, 3], 4, 4))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 6), w=st.integers(1, 6))
def test_domain_pooling_is_permutation_invariant(seed, h, w):
    torch.manual_seed(0)
    head = DomainHead([3], hidden=6, style_dim=4).double()
    conv_out = torch.randn(2, 6, h, w, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    perm = torch.from_numpy(np.random.default_rng(seed).permutation(h * w))
    shuffled = conv_out.flatten(2)[..., perm].view(2, 6, h, w)
    assert torch.allclose(head.pool_stage(0, shuffled), head.pool_stage(0, conv_out), atol=1e-12)


def test_domain_heads_share_no_parameters():
    torch.manual_seed(0)
    nets = build_networks(toy_model())
    hf = {id(p) for p in nets.Hf.parameters()}
    hr = {id(p) for p in nets.Hr.parameters()}
    assert hf and hr and not hf & hr
    assert not any(torch.equal(a, b) for a, b in zip(nets.Hf.parameters(), nets.Hr.parameters()) if a.abs().sum() > 0)
    styles = project_domain(nets.G.encode(torch.randn(2, 3, 16, 16)), nets.Hf)
    assert [tuple(s.shape) for s in styles] == [(2, 8)] * 5


def test_reference_parameter_counts():
    counts = build_networks(ModelConfig(attention="none")).parameter_counts()
    assert counts == {"G": 11_378_179, "D": 2_764_737, "F": 560_384, "Hf": 1_283_968, "Hr": 1_283_968}
    # the two attention blocks: 128 -> 8 -> 128 and 256 -> 16 -> 256 bottlenecks with biases
    assert build_networks(ModelConfig()).parameter_counts()["G"] == 11_378_179 + 2184 + 8464


def test_toy_build_is_seed_deterministic():
    torch.manual_seed(3)
    a = build_networks(toy_model())
    torch.manual_seed(3)
    b = build_networks(toy_model())
    for (_, ma), (_, mb) in zip(a.items(), b.items()):
        assert all(torch.equal(p, q) for p, q in zip(ma.parameters(), mb.parameters()))
