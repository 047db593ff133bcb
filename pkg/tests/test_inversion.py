import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from refsketch.errors import CapabilityError, DomainError, NumericError, ShapeError
from refsketch.inversion import (InversionTrace, SamplerSchedule, cache_attention_features,
                                 ddpm_invert, load_trace, replay_reconstruct, sampler_step,
                                 save_trace)


def latent(diffusion, seed):
    return np.random.default_rng(seed).standard_normal(diffusion.capabilities.latent_shape)


def test_schedule_create_bookkeeping():
    s = SamplerSchedule.create(100, 30)
    assert s.total_steps == 100 and s.skip_steps == 30
    assert len(s.noise_levels) == 100
    assert (np.diff(s.noise_levels) < 0).all()
    assert s.timestep(1) == 999 and s.timestep(100) == 9
    assert 0 < s.final_noise_level < s.noise_levels[-1]


@pytest.mark.parametrize("T, skip", [(0, 0), (-3, 0), (10, 10), (10, -1)])
def test_schedule_rejects_degenerate(T, skip):
    with pytest.raises(DomainError):
        SamplerSchedule.create(T, skip)


def test_schedule_rejects_non_monotone_levels():
    with pytest.raises(DomainError):
        SamplerSchedule(total_steps=2, skip_steps=0, noise_levels=(0.5, 0.6),
                        final_noise_level=0.1)


def test_schedule_dict_round_trip():
    s = SamplerSchedule.create(17, 4)
    assert SamplerSchedule.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_posterior_matches_closed_form():
    s = SamplerSchedule.create(10)
    x, eps = np.array([0.3, -1.2]), np.array([0.5, 0.1])
    step = 4
    a, ap = 1 - s.noise_levels[3] ** 2, 1 - s.noise_levels[4] ** 2
    x0 = (x - np.sqrt(1 - a) * eps) / np.sqrt(a)
    var = (1 - ap) / (1 - a) * (1 - a / ap)
    mu, sigma = s.posterior(x, eps, step)
    assert np.allclose(mu, np.sqrt(ap) * x0 + np.sqrt(1 - ap - var) * eps, atol=1e-12)
    assert sigma == pytest.approx(np.sqrt(var))


@pytest.mark.parametrize("T", [1, 2, 10, 50])
def test_trace_lengths(diffusion, T):
    trace = ddpm_invert(latent(diffusion, 0), SamplerSchedule.create(T), diffusion)
    assert len(trace.latents) == T + 1
    assert len(trace.per_step_noise) == T


@pytest.mark.parametrize("T", [1, 10])
def test_replay_is_exact(diffusion, T):
    z0 = latent(diffusion, 3)
    trace = ddpm_invert(z0, SamplerSchedule.create(T), diffusion, "a sketch of a dog", seed=5)
    assert np.abs(replay_reconstruct(trace, diffusion) - z0).max() < 1e-4
    assert np.array_equal(trace.z_0, z0)


def test_inversion_is_deterministic(diffusion):
    z0 = latent(diffusion, 1)
    s = SamplerSchedule.create(10)
    a, b = ddpm_invert(z0, s, diffusion, seed=9), ddpm_invert(z0, s, diffusion, seed=9)
    for x, y in zip(a.latents + a.per_step_noise, b.latents + b.per_step_noise):
        assert np.array_equal(x, y)


def test_zeroed_noise_map_breaks_replay(diffusion):
    z0 = latent(diffusion, 2)
    trace = ddpm_invert(z0, SamplerSchedule.create(10), diffusion, seed=1)
    noise = list(trace.per_step_noise)
    noise[4] = np.zeros_like(noise[4])
    broken = InversionTrace(latents=trace.latents, per_step_noise=tuple(noise),
                            schedule=trace.schedule)
    assert np.abs(replay_reconstruct(broken, diffusion) - z0).max() > 1e-2


def test_replay_shape_mismatch(diffusion):
    from refsketch.backends import ToyDiffusionBackend
    trace = ddpm_invert(latent(diffusion, 0), SamplerSchedule.create(2), diffusion)
    with pytest.raises(ShapeError):
        replay_reconstruct(trace, ToyDiffusionBackend(latent_size=8))


def test_non_finite_input_reports_step(diffusion):
    z0 = latent(diffusion, 0)
    z0[0, 0, 0] = np.inf
    with pytest.raises(NumericError) as info:
        ddpm_invert(z0, SamplerSchedule.create(3), diffusion)
    assert info.value.step == 0


def test_trace_arrays_are_read_only(diffusion):
    trace = ddpm_invert(latent(diffusion, 0), SamplerSchedule.create(2), diffusion)
    with pytest.raises(ValueError):
        trace.latents[0][0, 0, 0] = 1.0


# -- feature caching -----------------------------------------------------------------

def _captured(diffusion, role, T=5, layer="self_lo"):
    s = SamplerSchedule.create(T)
    return ddpm_invert(latent(diffusion, 0), s, diffusion, role=role,
                       capture={layer: range(1, T + 1)})


def test_content_role_keeps_queries_only(diffusion):
    trace = cache_attention_features(_captured(diffusion, "content"), {"content"})
    assert trace.count("Q") == 5
    assert trace.count("K") == 0 and trace.count("V") == 0


def test_reference_role_keeps_keys_and_values(diffusion):
    trace = cache_attention_features(_captured(diffusion, "reference", T=3, layer="self_hi"),
                                     {"reference"})
    assert trace.count("Q") == 0 and trace.count("K") == 3 and trace.count("V") == 3
    side = diffusion.capabilities.layer("self_hi").resolution
    assert trace.feature("K", "self_hi", 1).shape[0] == side * side


def test_contour_role_keeps_queries(diffusion):
    trace = cache_attention_features(_captured(diffusion, "contour", T=2), {"contour"})
    assert trace.count("Q") == 2 and trace.count("K") == 0


def test_empty_role_set_empties_cache(diffusion):
    trace = cache_attention_features(_captured(diffusion, "content"), set())
    assert dict(trace.cached_features) == {}


def test_cached_shapes_follow_layer_declarations(diffusion):
    trace = _captured(diffusion, "content", T=2)
    spec = diffusion.capabilities.layer("self_lo")
    for kind in ("Q", "K", "V"):
        assert trace.feature(kind, "self_lo", 1).shape == (spec.tokens, diffusion.dim)


def test_missing_feature_names_layer_and_step(diffusion):
    trace = _captured(diffusion, "content", T=2)
    with pytest.raises(CapabilityError, match="self_hi.*step=1"):
        trace.feature("Q", "self_hi", 1)


def test_capture_on_undeclared_layer(diffusion):
    with pytest.raises(CapabilityError):
        ddpm_invert(latent(diffusion, 0), SamplerSchedule.create(2), diffusion,
                    capture={"mid_block": [1]})


def test_capture_does_not_change_noise_maps(diffusion):
    z0 = latent(diffusion, 0)
    s = SamplerSchedule.create(4)
    plain = ddpm_invert(z0, s, diffusion, seed=2)
    tapped = ddpm_invert(z0, s, diffusion, seed=2, capture={"self_lo": [1, 2], "self_hi": [3]})
    for a, b in zip(plain.per_step_noise, tapped.per_step_noise):
        assert np.array_equal(a, b)


def test_disk_round_trip(tmp_path, diffusion):
    trace = cache_attention_features(_captured(diffusion, "reference", T=3), {"reference"})
    save_trace(trace, tmp_path / "ref")
    files = sorted(p.name for p in (tmp_path / "ref").iterdir())
    assert "meta.json" in files and "K_self_lo_2.f32" in files
    raw = np.frombuffer((tmp_path / "ref" / "K_self_lo_2.f32").read_bytes(), dtype="<f4")
    assert np.allclose(raw, trace.feature("K", "self_lo", 2).ravel(), atol=1e-6)
    back = load_trace(tmp_path / "ref")
    assert back.source_role == "reference" and back.schedule == trace.schedule
    assert np.allclose(back.feature("V", "self_lo", 3), trace.feature("V", "self_lo", 3),
                       atol=1e-5)
    assert np.allclose(back.z_T, trace.z_T, atol=1e-5)


@given(st.integers(0, 2**20), st.integers(1, 6))
def test_round_trip_property(seed, T):
    from refsketch.backends import ToyDiffusionBackend
    backend = ToyDiffusionBackend(latent_size=4)
    z0 = np.random.default_rng(seed).standard_normal(backend.capabilities.latent_shape)
    trace = ddpm_invert(z0, SamplerSchedule.create(T), backend, seed=seed)
    assert np.abs(replay_reconstruct(trace, backend) - z0).max() < 1e-4


def test_sampler_step_is_mean_plus_scaled_noise():
    s = SamplerSchedule.create(5)
    x, eps, n = np.ones(3), np.zeros(3), np.full(3, 2.0)
    mu, sigma = s.posterior(x, eps, 2)
    assert np.allclose(sampler_step(s, x, eps, 2, n), mu + 2 * sigma)
