import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dextts.errors import ContractError, DimensionError, InfeasibleAlignmentError, NumericError
from dextts.layers.aligner import (
    MAX_TOKEN_FRAMES,
    Aligner,
    DurationPredictor,
    duration_loss,
    durations_to_path,
    length_regulate,
    mas_align,
    mas_likelihoods,
    path_matrix,
    path_score,
    predicted_durations,
    prior_loss,
    write_alignment_csv,
)
from dextts.models import AlignmentPath
from dextts.numerics import ParamStore, Tensor
from dextts.utils import read_csv_rows


def compositions(total, parts):
    """Every way to split `total` frames into `parts` positive durations."""
    for cuts in itertools.combinations(range(1, total), parts - 1):
        bounds = (0,) + cuts + (total,)
        yield [bounds[i + 1] - bounds[i] for i in range(parts)]


def brute_force_best(ll):
    n_tokens, n_frames = ll.shape
    return max(path_score(ll, AlignmentPath(durations=d)) for d in compositions(n_frames, n_tokens))


def test_mas_matches_brute_force_on_every_small_shape():
    rng = np.random.default_rng(0)
    checked = 0
    for n_tokens in range(1, 5):
        for n_frames in range(n_tokens, 8):
            for _ in range(8):
                ll = rng.normal(size=(n_tokens, n_frames))
                path = mas_align(ll)
                assert path.total == n_frames
                assert min(path.durations) >= 1
                assert path_score(ll, path) == pytest.approx(brute_force_best(ll), abs=1e-12)
                checked += 1
    assert checked >= 100


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 2 ** 32 - 1))
def test_mas_is_optimal_for_random_matrices(n_tokens, extra, seed):
    ll = np.random.default_rng(seed).normal(size=(n_tokens, n_tokens + extra))
    assert path_score(ll, mas_align(ll)) == pytest.approx(brute_force_best(ll), abs=1e-12)


def test_mas_square_matrix_is_diagonal():
    path = mas_align(np.random.default_rng(1).normal(size=(4, 4)))
    assert path.durations == [1, 1, 1, 1]


def test_mas_single_token_takes_all_frames():
    assert mas_align(np.zeros((1, 5))).durations == [5]


def test_mas_ties_prefer_staying():
    path = mas_align(np.zeros((2, 4)))
    assert path.durations == [1, 3]


def test_mas_errors():
    with pytest.raises(InfeasibleAlignmentError):
        mas_align(np.zeros((3, 2)))
    ll = np.zeros((2, 3))
    ll[0, 1] = np.nan
    with pytest.raises(NumericError):
        mas_align(ll)


def test_mas_likelihoods_formula():
    mu = np.array([[0.0, 1.0], [2.0, 0.0]])
    x = np.array([[0.0, 2.0, 1.0], [1.0, 0.0, 1.0]])
    ll = mas_likelihoods(mu, x)
    assert ll.shape == (2, 3)
    assert ll[0, 0] == 0.0
    assert ll[1, 1] == 0.0
    assert ll[0, 2] == pytest.approx(-0.5)
    with pytest.raises(DimensionError):
        mas_likelihoods(np.zeros((2, 3)), x)


def test_length_regulate_repeats_rows():
    h = Tensor(np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]))
    out = length_regulate(h, AlignmentPath(durations=[2, 0, 3]))
    assert out.shape == (2, 5)
    np.testing.assert_array_equal(out.data[0], [1, 1, 3, 3, 3])
    with pytest.raises(ContractError):
        length_regulate(h, AlignmentPath(durations=[0, 0, 0]))
    with pytest.raises(DimensionError):
        length_regulate(h, AlignmentPath(durations=[1, 1]))


def test_length_regulate_gradient_sums_over_frames():
    h = Tensor(np.zeros((2, 3)), requires_grad=True)
    length_regulate(h, AlignmentPath(durations=[3, 1])).sum().backward()
    np.testing.assert_array_equal(h.grad, [[3, 3, 3], [1, 1, 1]])


def test_path_matrix_and_helpers():
    path = durations_to_path([2, 1])
    np.testing.assert_array_equal(path_matrix(path), [[1, 1, 0], [0, 0, 1]])
    np.testing.assert_array_equal(path.frame_tokens(), [0, 0, 1])


def test_prior_loss_zero_iff_equal():
    x = np.random.default_rng(2).normal(size=(4, 6))
    assert prior_loss(Tensor(x), x).item() == 0.0
    assert prior_loss(Tensor(x + 0.1), x).item() > 0.0


def test_duration_loss_zero_at_targets_and_rejects_zero_durations():
    path = AlignmentPath(durations=[2, 5, 1])
    assert duration_loss(Tensor(np.log([2.0, 5.0, 1.0])), path).item() == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ContractError):
        duration_loss(Tensor(np.zeros(2)), AlignmentPath(durations=[0, 3]))


def test_predicted_durations_round_half_up_with_floor_of_one():
    log_d = np.log([0.2, 1.6, 2.49, 3.0])
    assert predicted_durations(log_d).durations == [1, 2, 2, 3]


def test_predicted_durations_stay_bounded_for_huge_log_durations():
    with np.errstate(over="raise"):
        durations = predicted_durations(np.array([800.0, np.inf, -np.inf, 1.0])).durations
    assert durations == [MAX_TOKEN_FRAMES, MAX_TOKEN_FRAMES, 1, 3]
    with pytest.raises(NumericError):
        predicted_durations(np.array([0.0, np.nan]))


def test_duration_predictor_does_not_backpropagate_into_text(rng):
    dp = DurationPredictor(ParamStore(), "dp", 4, 6, rng)
    h = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    out = dp(h)
    assert out.shape == (5,)
    (out * out).sum().backward()
    assert h.grad is None
    assert dp.proj.weight.grad is not None


def test_aligner_forward_train_and_infer(rng, tiny_config):
    aligner = Aligner(ParamStore(), "aligner", tiny_config, rng)
    h_text = Tensor(rng.normal(size=(3, tiny_config.text.hidden)))
    mel = rng.normal(size=(tiny_config.n_mels, 9))
    out = aligner.forward_train(h_text, mel)
    assert out.h_mel.shape == (tiny_config.n_mels, 9)
    assert out.path.total == 9 and len(out.path.durations) == 3
    assert out.dur_loss.item() >= 0 and out.prior_loss.item() >= 0

    h_mel, path = aligner.infer(h_text)
    assert h_mel.shape == (tiny_config.n_mels, path.total)
    h_mel, path = aligner.infer(h_text, durations=[1, 2, 4])
    assert h_mel.shape[1] == 7 and path.durations == [1, 2, 4]


def test_alignment_dump(tmp_path):
    path = write_alignment_csv(tmp_path / "align.csv", [("utt0000", AlignmentPath(durations=[2, 3]))])
    rows = read_csv_rows(path)
    assert rows == [
        {"utterance": "utt0000", "token": "0", "duration": "2"},
        {"utterance": "utt0000", "token": "1", "duration": "3"},
    ]
