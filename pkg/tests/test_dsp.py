import numpy as np
import pytest

from eegtcav.dsp import (
    Window,
    apply_filter,
    auto_num_taps,
    design_firwin,
    epoch_and_scale,
    preprocess,
    resample,
    scale_window,
    stack_windows,
)
from eegtcav.edf import CANONICAL_CHANNELS, AnnotationSpan, EegRecording
from eegtcav.errors import DataError, FilterDesignError, ShapeError
from eegtcav.inverse import FrequencyBand


def _dtft(taps, f, fs):
    # independent oracle: plain complex exponential sum
    n = np.arange(len(taps))
    return abs(np.sum(taps * np.exp(-2j * np.pi * f / fs * n)))


def _rec(x, fs, sid="r"):
    x = np.atleast_2d(x)
    names = CANONICAL_CHANNELS[: x.shape[0]] if x.shape[0] <= 19 else [f"c{i}" for i in range(x.shape[0])]
    return EegRecording(sid, tuple(names), float(fs), x)


# -- design ------------------------------------------------------------------


def test_lowpass_unit_dc_gain():
    fir = design_firwin("lowpass", 100.0, 256.0, num_taps=129)
    assert fir.taps.sum() == pytest.approx(1.0, abs=1e-9)


def test_highpass_dc_null():
    fir = design_firwin("highpass", 0.1, 256.0)
    assert _dtft(fir.taps, 0.0, 256.0) == pytest.approx(0.0, abs=1e-9)
    assert fir.num_taps % 2 == 1


def test_bandpass_alpha_response():
    fir = design_firwin("bandpass", (8.0, 12.0), 256.0, num_taps=257)
    assert _dtft(fir.taps, 10.0, 256.0) >= 0.95
    assert _dtft(fir.taps, 40.0, 256.0) <= 0.01


def test_frequency_response_matches_oracle():
    fir = design_firwin("bandstop", (58.0, 62.0), 256.0, transition_hz=2.0)
    for f in (0.0, 10.0, 60.0, 100.0):
        assert abs(fir.response([f])[0]) == pytest.approx(_dtft(fir.taps, f, 256.0), abs=1e-12)


@pytest.mark.parametrize(
    "kind,cut", [("lowpass", 30.0), ("highpass", 1.0), ("bandpass", (4.0, 8.0)), ("bandstop", (58.0, 62.0))]
)
def test_taps_exactly_symmetric(kind, cut):
    taps = design_firwin(kind, cut, 256.0).taps
    assert np.array_equal(taps, taps[::-1])
    assert np.all(np.isfinite(taps))


def test_design_errors():
    with pytest.raises(FilterDesignError):
        design_firwin("lowpass", 128.0, 256.0)
    with pytest.raises(FilterDesignError):
        design_firwin("highpass", 1.0, 256.0, num_taps=64)
    with pytest.raises(FilterDesignError):
        design_firwin("bandstop", (58.0, 62.0), 256.0, num_taps=100)
    with pytest.raises(FilterDesignError):
        design_firwin("lowpass", 10.0, 256.0, num_taps=2)


def test_auto_num_taps_is_odd():
    for kind, cut in [("lowpass", 100.0), ("highpass", 0.1), ("bandstop", (58.0, 62.0))]:
        assert auto_num_taps(kind, cut, 256.0) % 2 == 1


# -- application -------------------------------------------------------------


def test_constant_through_lowpass():
    fir = design_firwin("lowpass", 30.0, 256.0)
    y = apply_filter(np.full(2000, 3.5), fir)
    assert np.max(np.abs(y - 3.5)) <= 1e-6


def test_notch_attenuates_60hz():
    fs = 256.0
    t = np.arange(int(20 * fs)) / fs
    x = np.sin(2 * np.pi * 60.0 * t)
    fir = design_firwin("bandstop", (58.0, 62.0), fs, transition_hz=2.0)
    y = apply_filter(x, fir)
    core = slice(fir.num_taps, len(x) - fir.num_taps)
    assert np.sqrt(np.mean(y[core] ** 2)) <= 0.01 * np.sqrt(np.mean(x[core] ** 2))


def test_impulse_response_symmetric_about_impulse():
    fir = design_firwin("lowpass", 20.0, 256.0, num_taps=51)
    x = np.zeros(301)
    x[150] = 1.0
    y = apply_filter(x, fir)
    assert np.allclose(y[150 - 40 : 150], y[151 : 191][::-1], atol=1e-12)
    assert np.argmax(y) == 150


def test_apply_filter_linear():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 1000))
    fir = design_firwin("bandpass", (8.0, 12.0), 256.0)
    lhs = apply_filter(2.0 * a - 3.0 * b, fir)
    rhs = 2.0 * apply_filter(a, fir) - 3.0 * apply_filter(b, fir)
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * np.max(np.abs(rhs))


def test_apply_filter_output_length_and_too_short():
    fir = design_firwin("lowpass", 20.0, 256.0, num_taps=101)
    assert apply_filter(np.zeros((3, 500)), fir).shape == (3, 500)
    with pytest.raises(ShapeError):
        apply_filter(np.zeros(50), fir)


# -- resampling --------------------------------------------------------------


def test_resample_constant_halves_length():
    out = resample(_rec(np.full((2, 1024), 7.0), 512), 256)
    assert out.n_samples == 512
    assert np.allclose(out.samples, 7.0, atol=1e-9)


def test_resample_preserves_10hz_peak():
    fs = 512.0
    t = np.arange(int(8 * fs)) / fs
    out = resample(_rec(np.sin(2 * np.pi * 10.0 * t), fs), 256)
    spec = np.abs(np.fft.rfft(out.samples[0]))
    freqs = np.fft.rfftfreq(out.n_samples, 1 / 256.0)
    assert abs(freqs[np.argmax(spec)] - 10.0) <= 0.25


def test_resample_upsampling_doubles():
    out = resample(_rec(np.zeros((1, 300)), 128), 256)
    assert out.n_samples == 600


def test_resample_rejects_bad_target():
    with pytest.raises(DataError):
        resample(_rec(np.zeros((1, 10)), 128), 0)


# -- preprocessing -----------------------------------------------------------


def test_preprocess_band_limits_white_noise():
    fs = 1024.0
    x = np.random.default_rng(1).standard_normal((2, int(60 * fs)))
    out = preprocess(_rec(x, fs))
    assert out.sampling_rate_hz == 256
    # the output's spectrum above 110 Hz (down to Nyquist)
    spec = np.abs(np.fft.rfft(out.samples, axis=1)) ** 2
    freqs = np.fft.rfftfreq(out.n_samples, 1 / 256.0)
    assert spec[:, freqs > 110].sum() <= 0.01 * spec.sum()


def test_preprocess_removes_dc():
    fs = 256.0
    x = 100.0 + np.random.default_rng(2).standard_normal((2, int(120 * fs)))
    out = preprocess(_rec(x, fs))
    core = out.samples[:, 20 * 256 : -20 * 256]
    assert np.all(np.abs(core.mean(axis=1)) <= 1e-3 * 100.0 + 0.05)


def test_preprocess_identity_rate():
    x = np.random.default_rng(0).standard_normal((1, 256 * 60))
    out = preprocess(_rec(x, 256))
    assert out.n_samples == x.shape[1]


def test_preprocess_skip_signal():
    # shorter than the 0.1 Hz highpass: excluded, not a crash
    assert preprocess(_rec(np.zeros((1, 500)), 256)) is None


def test_preprocess_low_rate_skips_stages_above_nyquist():
    x = np.random.default_rng(0).standard_normal((1, 160 * 120))
    out = preprocess(_rec(x, 160))
    assert out is not None and out.sampling_rate_hz == 256


def test_band_split_completeness():
    fs = 256.0
    x = np.random.default_rng(4).standard_normal(int(120 * fs))
    core = slice(2000, -2000)
    total = apply_filter(x, design_firwin("bandpass", (0.5, 70.0), fs))[core]
    parts = [apply_filter(x, design_firwin("bandpass", (b.low, b.high), fs))[core] for b in FrequencyBand]
    assert sum(np.mean(p**2) for p in parts) >= 0.9 * np.mean(total**2)


# -- windows -----------------------------------------------------------------


def test_scale_hand_example():
    eeg = np.zeros((19, 1024))
    eeg[4, 10] = -50.0
    eeg[2, 20] = 25.0
    data, scale = scale_window(eeg, reference_uv=100.0)
    assert np.max(np.abs(data[:19])) == 1.0
    assert np.all(data[19] == 0.0)
    assert scale == 50.0


def test_all_zero_window():
    data, scale = scale_window(np.zeros((19, 256)))
    assert scale == 1.0
    assert np.all(data[:19] == 0) and np.all(data[19] == -1.0)


def test_amplitude_clamps():
    data, _ = scale_window(np.full((19, 8), 400.0))
    assert np.all(data[19] == 1.0)


def test_epoch_tiling_and_invariants():
    rng = np.random.default_rng(0)
    rec = _rec(30 * rng.standard_normal((19, 256 * 30)), 256)
    windows = epoch_and_scale(rec, window_len_s=4.0)
    assert len(windows) == 7
    for w in windows:
        w.validate()
        assert w.data.shape == (20, 1024)
        assert np.allclose(w.eeg_uv, rec.samples[:, int(w.start_s * 256) : int(w.start_s * 256) + 1024], atol=1e-3)


def test_epoch_from_spans_takes_labels():
    rec = _rec(np.ones((19, 256 * 20)), 256)
    spans = [AnnotationSpan("T1", 1.0, 9.0), AnnotationSpan("T2", 12.0, 3.0)]
    windows = epoch_and_scale(rec, spans, window_len_s=4.0)
    assert [w.label for w in windows] == ["T1", "T1"]
    assert [w.start_s for w in windows] == [1.0, 5.0]


def test_epoch_stride_overlap():
    rec = _rec(np.ones((19, 256 * 8)), 256)
    assert len(epoch_and_scale(rec, stride_s=2.0, window_len_s=4.0)) == 3


def test_window_validation():
    with pytest.raises(ShapeError):
        Window(np.zeros((19, 256), np.float32), 256.0, 1.0).validate()
    with pytest.raises(DataError):
        Window(np.full((20, 256), 2.0, np.float32), 256.0, 1.0).validate()


def test_stack_windows_mixed_lengths():
    a = Window(np.zeros((20, 256), np.float32), 256.0, 1.0)
    b = Window(np.zeros((20, 512), np.float32), 256.0, 2.0)
    with pytest.raises(ShapeError):
        stack_windows([a, b])
