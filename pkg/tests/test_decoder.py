import math

import numpy as np
import pytest

from dextts.errors import ConfigError, ContractError, DimensionError, ExtentError
from dextts.layers.decoder import (
    ConvFreqEmbedding,
    Decoder,
    DiTBlock,
    Patchify,
    PosFreqEmbedding,
    SinCosEmbedding,
    TimeFreqEmbedding,
    Unpatchify,
    denoise,
    diffusion_loss,
    edm_coefficients,
    freq_patches,
    loss_weight,
    patch_grid,
    sample_euler,
    sampling_steps,
    sincos_grid,
)
from dextts.layers.styles import StyleEncoder
from dextts.models import NoiseSchedule
from dextts.numerics import ParamStore, Tensor, grad_check, grad_check_params, no_grad, pad_reflect
from dextts.utils import read_csv_rows

SCHEDULE = NoiseSchedule()


def test_edm_coefficients_closed_form():
    coef = edm_coefficients(1.0, 0.5)
    assert coef.c_skip == pytest.approx(0.2, abs=1e-12)
    assert coef.c_out == pytest.approx(0.5 / math.sqrt(1.25), abs=1e-12)
    assert coef.c_in == pytest.approx(1.0 / math.sqrt(1.25), abs=1e-12)
    assert coef.c_noise == pytest.approx(0.0, abs=1e-12)
    assert loss_weight(1.0, 0.5) == pytest.approx(5.0, abs=1e-12)
    assert coef.c_out == pytest.approx(0.4472, abs=1e-4)
    assert coef.c_in == pytest.approx(0.8944, abs=1e-4)


def test_edm_coefficients_at_zero_and_negative():
    coef = edm_coefficients(0.0, 0.5)
    assert coef.c_skip == 1.0 and coef.c_out == 0.0
    assert coef.c_noise == -math.inf
    with pytest.raises(ContractError):
        edm_coefficients(-0.1, 0.5)


def test_sampling_steps():
    steps = sampling_steps(SCHEDULE, 5)
    assert len(steps) == 6 and steps[-1] == 0.0
    assert steps[0] == pytest.approx(SCHEDULE.sigma_max)
    assert np.all(np.diff(steps) < 0)
    one = sampling_steps(SCHEDULE, 1)
    assert one[0] == pytest.approx(80.0) and one[1] == 0.0
    with pytest.raises(ContractError):
        sampling_steps(SCHEDULE, 0)


def test_patch_grid_padding():
    grid = patch_grid(16, 17, 2, factor=2)
    assert (grid.freq_pad, grid.time_pad) == (0, 3)
    assert (grid.freq_patches, grid.time_patches) == (4, 5)
    assert freq_patches(16, 2) == 4
    assert freq_patches(80, 4) == 10


@pytest.mark.parametrize("p", [1, 2, 4])
def test_patchify_layer_geometry(p, rng):
    layer = Patchify(ParamStore(), "patch", 2, p, overlap=True, rng=rng)
    assert layer.kernel == 2 * p - 1
    assert layer.stride == p
    flat = Patchify(ParamStore(), "patch", 2, p, overlap=False, rng=rng)
    assert flat.kernel == p


@pytest.mark.parametrize("p", [1, 2, 4])
def test_patchify_impulse_footprint(p, rng):
    store = ParamStore()
    layer = Patchify(store, "patch", 1, p, overlap=True, rng=rng)
    store.set_value("patch.conv.weight", np.ones_like(layer.conv.weight.data))
    size = 4 * p
    r, c = p + 1, 2 * p
    x = np.zeros((1, size, size))
    x[0, r, c] = 1.0
    out = layer(Tensor(x)).data[0]
    assert out.shape == (4, 4)
    expected = np.zeros((4, 4))
    for a in range(4):
        for b in range(4):
            if abs(r - a * p) <= p - 1 and abs(c - b * p) <= p - 1:
                expected[a, b] = 1.0
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("frames", [17, 32, 33])
@pytest.mark.parametrize("p", [1, 2, 4])
def test_patchify_shape_after_padding(frames, p, rng):
    grid = patch_grid(8, frames, p)
    layer = Patchify(ParamStore(), "patch", 2, p, overlap=True, rng=rng)
    h = pad_reflect(pad_reflect(Tensor(rng.normal(size=(2, 8, frames))), 1, 0, grid.freq_pad), 2, 0, grid.time_pad)
    out = layer(h)
    assert out.shape == (2, grid.padded_freq // p, grid.padded_time // p)
    assert out.shape[2] == math.ceil(frames / p)


def test_patchify_rejects_indivisible_input(rng):
    with pytest.raises(DimensionError):
        Patchify(ParamStore(), "patch", 2, 2, overlap=True, rng=rng)(Tensor(np.zeros((2, 4, 5))))


@pytest.mark.parametrize("overlap", [True, False])
def test_unpatchify_restores_extent(overlap, rng):
    store = ParamStore()
    patch = Patchify(store, "p", 3, 2, overlap, rng)
    unpatch = Unpatchify(store, "u", 3, 2, overlap, rng)
    out = unpatch(patch(Tensor(rng.normal(size=(3, 6, 10)))))
    assert out.shape == (3, 6, 10)


def test_sincos_grid_layout():
    grid = sincos_grid(6, 3, 5)
    assert grid.shape == (6, 3, 5)
    np.testing.assert_array_equal(grid[:3, :, 0], grid[:3, :, 4])
    np.testing.assert_array_equal(grid[3:, 0, :], grid[3:, 2, :])


def test_embeddings_shapes_and_extents(rng):
    h = Tensor(rng.normal(size=(4, 2, 5)))
    for layer in (
        ConvFreqEmbedding(ParamStore(), "e", 4, 2, rng),
        TimeFreqEmbedding(ParamStore(), "e", 4, 2, 6, rng),
        PosFreqEmbedding(ParamStore(), "e", 4, 2, rng),
        SinCosEmbedding(ParamStore(), "e", 4),
    ):
        assert layer(h).shape == (4, 2, 5)

    with pytest.raises(ExtentError):
        TimeFreqEmbedding(ParamStore(), "e", 4, 2, 4, rng)(h)
    long = Tensor(rng.normal(size=(4, 2, 40)))
    assert ConvFreqEmbedding(ParamStore(), "e", 4, 2, rng)(long).shape == (4, 2, 40)
    with pytest.raises(ConfigError):
        ConvFreqEmbedding(ParamStore(), "e", 4, 3, rng)(h)


def test_conv_freq_time_encoding_is_constant_over_frequency(rng):
    layer = ConvFreqEmbedding(ParamStore(), "e", 4, 3, rng)
    pe_t = layer.time_encoding(Tensor(rng.normal(size=(4, 3, 7))))
    assert pe_t.shape == (4, 1, 7)


def test_dit_block_is_identity_at_init(rng):
    block = DiTBlock(ParamStore(), "dit", 8, 2, 4, rng)
    seq = Tensor(rng.normal(size=(6, 8)))
    np.testing.assert_array_equal(block(seq, Tensor(rng.normal(size=8))).data, seq.data)
    _, weights = block.attention(seq, return_weights=True)
    assert weights.shape == (2, 6, 6)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)


def test_dit_block_gradient_after_modulation_is_trained(rng):
    store = ParamStore()
    block = DiTBlock(store, "dit", 4, 2, 2, rng)
    store.set_value("dit.modulation.weight", rng.normal(size=(4, 24)) * 0.5)
    t_emb = Tensor(rng.normal(size=4))
    assert grad_check(lambda s: block(s, t_emb), rng.normal(size=(3, 4))) <= 1e-5


@pytest.mark.parametrize("frames", [17, 32, 33, 60])
def test_decoder_output_shape(frames, tiny_gedex_config, rng):
    decoder = Decoder(ParamStore(), "decoder", tiny_gedex_config, rng)
    assert decoder.tiv is None and decoder.tv is None
    f = tiny_gedex_config.n_mels
    out = decoder(Tensor(rng.normal(size=(f, frames))), Tensor(rng.normal(size=(f, frames))), 0.3)
    assert out.shape == (f, frames)


def test_decoder_with_styles(tiny_config, rng):
    store = ParamStore()
    style = StyleEncoder(store, "style", tiny_config, rng)
    decoder = Decoder(store, "decoder", tiny_config, rng)
    f = tiny_config.n_mels
    with no_grad():
        styles = style(rng.normal(size=(f, 9)), rng.normal(size=9))
    out = decoder(Tensor(rng.normal(size=(f, 11))), Tensor(rng.normal(size=(f, 11))), 0.1, styles)
    assert out.shape == (f, 11)
    with pytest.raises(DimensionError):
        decoder(Tensor(np.zeros((f, 4))), Tensor(np.zeros((f, 5))), 0.1)


def test_denoiser_at_zero_noise_is_identity(tiny_gedex_config, rng):
    decoder = Decoder(ParamStore(), "decoder", tiny_gedex_config, rng)
    x = Tensor(rng.normal(size=(8, 10)))
    out = denoise(decoder, x, Tensor(np.zeros((8, 10))), 0.0, SCHEDULE)
    np.testing.assert_array_equal(out.data, x.data)


def test_full_denoiser_gradient(tiny_gedex_config, rng):
    decoder = Decoder(ParamStore(), "decoder", tiny_gedex_config, rng)
    h_mel = Tensor(rng.normal(size=(8, 16)))
    x = rng.normal(size=(8, 16))
    assert grad_check(lambda t: denoise(decoder, t, h_mel, 0.7, SCHEDULE), x) <= 1e-4


def test_diffusion_loss_parameter_gradients(tiny_config, rng):
    store = ParamStore()
    style = StyleEncoder(store, "style", tiny_config, rng)
    decoder = Decoder(store, "decoder", tiny_config, rng)
    with no_grad():
        styles = style(rng.normal(size=(8, 6)), rng.normal(size=6))
    x = rng.normal(size=(8, 6))
    h_mel = Tensor(rng.normal(size=(8, 6)))
    noise = rng.normal(size=(8, 6))
    params = [(n, t) for n, t in store.parameters() if n.startswith("decoder.")]

    def loss():
        return diffusion_loss(decoder, x, h_mel, SCHEDULE, rng, styles, t=0.4, noise=noise)

    errors = grad_check_params(loss, params, max_coords=2)
    assert max(errors.values()) <= 1e-4


def test_diffusion_loss_is_seeded_and_non_negative(tiny_gedex_config):
    decoder = Decoder(ParamStore(), "decoder", tiny_gedex_config, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(8, 8))
    h_mel = Tensor(np.zeros((8, 8)))
    a = diffusion_loss(decoder, x, h_mel, SCHEDULE, np.random.default_rng(5)).item()
    b = diffusion_loss(decoder, x, h_mel, SCHEDULE, np.random.default_rng(5)).item()
    assert a == b and a >= 0


def test_single_step_sampler_equals_one_denoiser_call(tiny_gedex_config, rng, tmp_path):
    decoder = Decoder(ParamStore(), "decoder", tiny_gedex_config, rng)
    h_mel = Tensor(rng.normal(size=(8, 12)))
    x_start = SCHEDULE.sigma_max * np.random.default_rng(9).standard_normal((8, 12))
    with no_grad():
        expected = denoise(decoder, Tensor(x_start), h_mel, float(sampling_steps(SCHEDULE, 1)[0]), SCHEDULE).data
    got = sample_euler(decoder, h_mel, SCHEDULE, 1, np.random.default_rng(9), trace_path=tmp_path / "trace.csv")
    np.testing.assert_array_equal(got, expected)
    rows = read_csv_rows(tmp_path / "trace.csv")
    assert len(rows) == 1 and float(rows[0]["t"]) == pytest.approx(80.0)


def test_prior_mean_start(tiny_gedex_config, rng):
    decoder = Decoder(ParamStore(), "decoder", tiny_gedex_config, rng)
    h_mel = Tensor(rng.normal(size=(8, 12)))
    x_start = SCHEDULE.sigma_max * np.random.default_rng(3).standard_normal((8, 12)) + h_mel.data
    with no_grad():
        expected = denoise(decoder, Tensor(x_start), h_mel, float(sampling_steps(SCHEDULE, 1)[0]), SCHEDULE).data
    got = sample_euler(decoder, h_mel, SCHEDULE, 1, np.random.default_rng(3), prior_mean=True)
    np.testing.assert_array_equal(got, expected)


def test_sampler_is_seeded(tiny_gedex_config, rng):
    decoder = Decoder(ParamStore(), "decoder", tiny_gedex_config, rng)
    h_mel = Tensor(rng.normal(size=(8, 9)))
    a = sample_euler(decoder, h_mel, SCHEDULE, 3, np.random.default_rng(0))
    b = sample_euler(decoder, h_mel, SCHEDULE, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (8, 9)
