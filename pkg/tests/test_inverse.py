import numpy as np
import pytest

from eegtcav.dsp import apply_filter
from eegtcav.errors import ConfigError, FormatError, NumericError, ProtocolError, ShapeError
from eegtcav.inverse import (
    STD_FLOOR,
    FrequencyBand,
    InverseOperator,
    LeadField,
    Normalization,
    ParcelPowerProfile,
    SessionBaseline,
    _band_filter,
    band_parcel_power,
    decode_lead_field,
    eloreta,
    encode_lead_field,
    label_window_anatomy,
    load_lead_field,
    save_lead_field,
    session_baseline,
    slots,
    synthetic_lead_field,
)

ALPHA = FrequencyBand.ALPHA


# -- eLORETA -----------------------------------------------------------------


@pytest.mark.parametrize("m,n", [(8, 20), (8, 50), (16, 20), (16, 50)])
def test_exact_localization(m, n):
    for seed in range(5):
        lf = synthetic_lead_field(m, n, seed=seed)
        inv = eloreta(lf, alpha=1e-4)
        assert inv.converged
        recovered = np.argmax(np.abs(inv.resolvent @ lf.gain), axis=0)
        assert np.array_equal(recovered, np.arange(n))


def test_weights_are_a_fixed_point():
    lf = synthetic_lead_field(8, 20, seed=3)
    inv = eloreta(lf)
    k, w = lf.gain, inv.weights
    h = np.eye(8) - 1.0 / 8
    c = np.linalg.pinv((k / w) @ k.T + 1e-4 * h)
    assert np.allclose(np.sqrt(np.einsum("mi,mn,ni->i", k, c, k)), w, rtol=1e-5)
    assert np.allclose(inv.resolvent, (k / w).T @ c, atol=1e-8 * np.abs(inv.resolvent).max())


def test_identity_lead_field_symmetry():
    lf = LeadField(np.eye(6), [f"S{i}" for i in range(6)], [(i, "L") for i in range(6)])
    inv = eloreta(lf)
    assert np.allclose(inv.weights, inv.weights[0], rtol=1e-9)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal(6)
        assert np.argmax(inv.resolvent @ x) == np.argmax(x)


def test_convergence_contract():
    inv = eloreta(synthetic_lead_field(8, 20), tol=1e-6, max_iter=100)
    assert inv.converged and 1 <= inv.iterations_used <= 100
    capped = eloreta(synthetic_lead_field(8, 20), tol=1e-15, max_iter=2)
    assert not capped.converged and capped.iterations_used == 2
    assert np.all(np.isfinite(capped.resolvent))


def test_alpha_must_be_positive():
    with pytest.raises(ConfigError):
        eloreta(synthetic_lead_field(8, 20), alpha=0.0)


def test_lead_field_invariants():
    with pytest.raises(ShapeError):
        LeadField(np.ones((1, 3)), ["a"], [(0, "L")] * 3)
    with pytest.raises(ShapeError):
        LeadField(np.ones((2, 2)), ["a", "b"], [(0, "L"), (23, "R")])
    with pytest.raises(NumericError):
        LeadField(np.array([[1.0, 0.0], [1.0, 0.0]]), ["a", "b"], [(0, "L"), (1, "L")])


# -- band power --------------------------------------------------------------


@pytest.fixture(scope="module")
def lf_inv():
    lf = synthetic_lead_field(19, 92, seed=0)
    return lf, eloreta(lf)


def test_all_zero_window_has_zero_power(lf_inv):
    lf, inv = lf_inv
    prof = band_parcel_power((np.zeros((19, 1024)), 256.0), inv, lf)
    assert len(prof.power) == 46 * 5
    assert all(v == 0.0 for v in prof.power.values())


def test_injected_alpha_source(lf_inv):
    lf, inv = lf_inv
    fs = 256.0
    t = np.arange(1024) / fs
    j = 17
    s = np.zeros((92, 1024))
    s[j] = np.sin(2 * np.pi * 10.0 * t)
    prof = band_parcel_power((lf.gain @ s, fs), inv, lf)
    p, h = lf.parcel_of[j]
    assert prof.power[(p, h, ALPHA)] >= 100 * prof.power[(p, h, FrequencyBand.GAMMA)]
    assert all(v >= 0 for v in prof.power.values())


def test_parcel_power_is_mean_of_sources():
    # 47 sources round-robin over 46 slots: slot (0, L) owns sources 0 and 46
    lf = synthetic_lead_field(4, 47, seed=1)
    assert list(lf.sources_in(0, "L")) == [0, 46]
    resolvent = np.zeros((47, 4))
    resolvent[0, 0] = 1.0
    resolvent[46, 1] = 1.0
    inv = InverseOperator(resolvent, 1e-4, 1, True)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 1024))
    prof = band_parcel_power((x, 256.0), inv, lf, bands=[ALPHA])
    fir = _band_filter(ALPHA, 256.0, 1024)
    p1 = np.mean(apply_filter(x[0], fir) ** 2)
    p2 = np.mean(apply_filter(x[1], fir) ** 2)
    assert prof.power[(0, "L", ALPHA)] == pytest.approx((p1 + p2) / 2, rel=1e-12)
    assert prof.power[(1, "L", ALPHA)] == 0.0


def test_channel_mismatch(lf_inv):
    lf, inv = lf_inv
    with pytest.raises(ShapeError):
        band_parcel_power((np.zeros((18, 512)), 256.0), inv, lf)


def test_bands_disjoint_and_ordered():
    bands = list(FrequencyBand)
    for a, b in zip(bands, bands[1:]):
        assert a.high == b.low
    assert FrequencyBand.parse("theta") is FrequencyBand.THETA
    with pytest.raises(ConfigError):
        FrequencyBand.parse("mu")


# -- baselines and labels ----------------------------------------------------


def _profile(values, band=ALPHA, session="s"):
    return ParcelPowerProfile({(p, h, band): v for (p, h), v in zip(slots(), values)}, session)


def test_baseline_hand_example():
    base = session_baseline([_profile([1.0]), _profile([3.0])])
    key = (0, "L", ALPHA)
    assert base.mean[key] == 2.0 and base.std[key] == 1.0


def test_baseline_constant_powers_hit_floor():
    base = session_baseline([_profile([5.0, 1.0]), _profile([5.0, 2.0])])
    assert base.std[(0, "L", ALPHA)] == STD_FLOOR
    assert np.isfinite(label_window_anatomy(_profile([5.0, 1.0]), base, ALPHA)[2])


def test_baseline_errors():
    with pytest.raises(ProtocolError):
        session_baseline([_profile([1.0])])
    with pytest.raises(ProtocolError):
        session_baseline([_profile([1.0], session="a"), _profile([2.0], session="b")])


def _unit_baseline(n):
    keys = [(p, h, ALPHA) for p, h in slots()[:n]]
    return SessionBaseline({k: 0.0 for k in keys}, {k: 1.0 for k in keys})


def test_label_hand_example():
    assert label_window_anatomy(_profile([1.0, -3.0, 2.0]), _unit_baseline(3), ALPHA) == (1, "L", -3.0)


def test_label_tie_break_prefers_lower_slot():
    # slot 23 is (0, R); slot 0 is (0, L)
    values = [0.0] * 46
    values[0] = 2.0
    values[23] = -2.0
    assert label_window_anatomy(_profile(values), _unit_baseline(46), ALPHA)[:2] == (0, "L")
    values[0] = 0.0
    values[5] = 2.0
    assert label_window_anatomy(_profile(values), _unit_baseline(46), ALPHA)[:2] == (5, "L")


def test_label_floor_slot_never_beats_nonzero():
    base = SessionBaseline(
        {(0, "L", ALPHA): 4.0, (1, "L", ALPHA): 0.0},
        {(0, "L", ALPHA): STD_FLOOR, (1, "L", ALPHA): 1.0},
    )
    parcel, hemi, z = label_window_anatomy(_profile([4.0, 0.01]), base, ALPHA)
    assert (parcel, hemi) == (1, "L") and z == pytest.approx(0.01)


def test_label_band_missing():
    with pytest.raises(ConfigError):
        label_window_anatomy(_profile([1.0]), _unit_baseline(1), FrequencyBand.BETA)


def test_label_invariant_to_joint_scaling():
    rng = np.random.default_rng(0)
    profiles = [_profile(rng.uniform(0.5, 2.0, 46)) for _ in range(10)]
    base = session_baseline(profiles)
    for c in (1e-3, 2.5, 1e4):
        scaled = [ParcelPowerProfile({k: c * v for k, v in p.power.items()}, "s") for p in profiles]
        sbase = session_baseline(scaled)
        for p, sp in zip(profiles, scaled):
            a = label_window_anatomy(p, base, ALPHA)
            b = label_window_anatomy(sp, sbase, ALPHA)
            assert a[:2] == b[:2] and a[2] == pytest.approx(b[2], rel=1e-9)


def test_alternative_normalizations():
    base = session_baseline([_profile([1.0]), _profile([3.0])])
    assert label_window_anatomy(_profile([4.0]), base, ALPHA, Normalization.SUBTRACT_MEAN)[2] == 2.0
    assert label_window_anatomy(_profile([4.0]), base, ALPHA, Normalization.DIVIDE_MEAN)[2] == 2.0


# -- lead-field files --------------------------------------------------------


def test_lead_field_round_trip(tmp_path):
    lf = synthetic_lead_field(8, 30, seed=2)
    path = tmp_path / "lf.ldfd"
    save_lead_field(path, lf)
    back = load_lead_field(path)
    assert np.array_equal(back.gain, lf.gain.astype(np.float32).astype(np.float64))
    assert back.parcel_of == lf.parcel_of and back.sensor_names == lf.sensor_names


@pytest.mark.parametrize(
    "mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-4], lambda b: b[:8] + b"]" + b[9:]], ids=["magic", "short", "json"]
)
def test_lead_field_corruption(mutate):
    with pytest.raises(FormatError):
        decode_lead_field(mutate(encode_lead_field(synthetic_lead_field(4, 10))))
