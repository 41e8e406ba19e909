import math
import numpy as np
import pytest
from scipy.io import wavfile
from scipy.signal import correlate

from esfe.scene import (SampledSignal, SensorDef, NearFieldError, SceneError, WavFormatError,
    UnsupportedFormatError, CalibrationError, load_wav, save_wav, parse_signal_spec, synth_source,
    propagate, probe_point, calibrate_snr, source_signals, mix_scene, preroll_samples, random_scene)
from esfe.utils import ParameterError, distance

from conftest import make_scene


def test_load_wav_header(tmp_path):
    path = tmp_path / 'a.wav'
    wavfile.write(path, 16000, np.zeros(48000, dtype=np.int16))

    sig = load_wav(path)
    assert len(sig.samples) == 48000
    assert sig.sample_rate == 16000


def test_load_wav_scaling(tmp_path):
    path = tmp_path / 'a.wav'
    wavfile.write(path, 16000, np.array([16384], dtype=np.int16))
    np.testing.assert_array_equal(load_wav(path).samples, [0.5])


def test_load_wav_rejects_stereo(tmp_path):
    path = tmp_path / 'stereo.wav'
    wavfile.write(path, 16000, np.zeros((100, 2), dtype=np.int16))
    with pytest.raises(UnsupportedFormatError):
        load_wav(path)


def test_load_wav_rejects_float(tmp_path):
    path = tmp_path / 'float.wav'
    wavfile.write(path, 16000, np.zeros(100, dtype=np.float32))
    with pytest.raises(UnsupportedFormatError):
        load_wav(path)


def test_load_wav_malformed(tmp_path):
    path = tmp_path / 'bad.wav'
    path.write_bytes(b'definitely not a RIFF header')
    with pytest.raises(WavFormatError):
        load_wav(path)


def test_save_wav(tmp_path):
    path = tmp_path / 'out.wav'
    save_wav(path, SampledSignal(np.array([0.0, 0.5, -0.5, 2.0]), 8000))

    rate, data = wavfile.read(path)
    assert rate == 8000
    assert data.dtype == np.int16
    assert data[1] == 16384 and data[2] == -16384
    assert data[3] == 32767


def test_parse_signal_spec():
    assert parse_signal_spec('clips/speaker.wav') == ('file', 'clips/speaker.wav', {})

    spec = parse_signal_spec('synth:burst_train:period=0.5,duty=0.25')
    assert spec.kind == 'burst_train'
    assert spec.params == {'period': 0.5, 'duty': 0.25}

    assert parse_signal_spec('synth:white').params == {}

    with pytest.raises(ParameterError):
        parse_signal_spec('synth:pink')
    with pytest.raises(ParameterError):
        parse_signal_spec('synth:tone:freq')


def test_synth_tone_unit_rms():
    sig = synth_source('tone', 1.0, 16000, 0, {'freq': 1000.0})
    assert len(sig.samples) == 16000
    assert np.sqrt(np.mean(sig.samples ** 2)) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize('kind', ['white', 'tone', 'am_noise', 'burst_train'])
def test_synth_deterministic(kind):
    a = synth_source(kind, 3.0, 16000, 7)
    b = synth_source(kind, 3.0, 16000, 7)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert np.sqrt(np.mean(a.samples ** 2)) == pytest.approx(1.0, rel=1e-9)


def test_synth_burst_train_is_gated():
    x = synth_source('burst_train', 1.0, 16000, 3, {'period': 0.25, 'duty': 0.5}).samples
    assert np.mean(x == 0) == pytest.approx(0.5, abs=0.01)


def test_synth_unknown_kind():
    with pytest.raises(ParameterError):
        synth_source('pink', 1.0, 16000, 0)


def test_propagate_delay():
    src = SampledSignal(np.r_[1.0, np.zeros(999)], 16000)
    out = propagate(src, (3.43, 0.0), SensorDef('S0', (0.0, 0.0), 1.0), 343.0)
    assert np.argmax(out.samples) == 160


def test_propagate_attenuation():
    src = SampledSignal(np.ones(100), 16000)

    out = propagate(src, (2.0, 0.0), SensorDef('S0', (0.0, 0.0), 1.0), 1e9)
    np.testing.assert_allclose(out.samples, 0.5)

    out = propagate(src, (2.0, 0.0), SensorDef('S0', (0.0, 0.0), 4.0), 1e9)
    np.testing.assert_allclose(out.samples, 1.0)


def test_propagate_near_field():
    with pytest.raises(NearFieldError, match='S7'):
        propagate(SampledSignal(np.ones(10), 16000), (0.05, 0.0), SensorDef('S7', (0.0, 0.0), 1.0), 343.0)


def test_probe_point():
    assert probe_point((5.0, 5.0), (10.0, 5.0)) == pytest.approx((6.0, 5.0))
    assert probe_point((5.0, 5.0), (5.0, 5.0)) == pytest.approx((6.0, 5.0))


def _unit(n=1000):
    return SampledSignal(np.ones(n), 16000)


def test_calibrate_snr_symmetric():
    # Probe at (6, 5), one unit-power noise source 1 m away from it
    beta = calibrate_snr(_unit(), [_unit()], [(7.0, 5.0)], (5.0, 5.0), 0.0, center=(10.0, 5.0))
    assert beta == pytest.approx(1.0, rel=0.01)

    beta = calibrate_snr(_unit(), [_unit()], [(7.0, 5.0)], (5.0, 5.0), 20.0, center=(10.0, 5.0))
    assert beta == pytest.approx(0.1, rel=0.01)


def test_calibrate_snr_power_additivity():
    beta = calibrate_snr(_unit(), [_unit(), _unit()], [(7.0, 5.0), (6.0, 6.0)], (5.0, 5.0), 0.0, center=(10.0, 5.0))
    assert beta == pytest.approx(1 / math.sqrt(2), rel=0.01)


def test_calibrate_snr_noiseless_and_errors():
    assert calibrate_snr(_unit(), [_unit()], [(7.0, 5.0)], (5.0, 5.0), math.inf, center=(10.0, 5.0)) == 0.0

    with pytest.raises(CalibrationError):
        calibrate_snr(_unit(), [], [], (5.0, 5.0), 0.0)
    with pytest.raises(CalibrationError):
        calibrate_snr(SampledSignal(np.zeros(10), 16000), [_unit()], [(7.0, 5.0)], (5.0, 5.0), 0.0, center=(10.0, 5.0))


def test_source_signals_calibrated(square_scene):
    signals = source_signals(square_scene)
    preroll = preroll_samples(square_scene)

    for sig in signals.values():
        assert len(sig.samples) == square_scene.n_samples + preroll

    probe = probe_point(square_scene.target.position, square_scene.center)
    target_power = np.mean(signals['target'].samples[preroll:] ** 2)
    noise_power = sum(np.mean(signals[s.id].samples[preroll:] ** 2) / distance(s.position, probe) ** 2
        for s in square_scene.noise_sources)
    assert target_power / noise_power == pytest.approx(1.0, rel=0.01)


def test_mix_single_source_equals_propagation():
    scene = make_scene([(1, 1)], [('target', (4, 5), 'target', 'synth:white')])
    signals = source_signals(scene)
    preroll = preroll_samples(scene)

    trace, = mix_scene(scene, signals)
    expected = propagate(signals['target'], (4, 5), scene.sensors[0], scene.speed_of_sound).samples
    np.testing.assert_array_equal(trace.samples, expected[preroll:preroll + scene.n_samples])


def test_mix_components_sum(square_scene):
    for trace in mix_scene(square_scene):
        total = sum(trace.components.values())
        np.testing.assert_allclose(total, trace.samples, rtol=1e-9, atol=1e-12)
        assert len(trace.samples) == square_scene.n_samples


def test_mix_linearity():
    single = make_scene([(5, 1)], [('target', (2, 5), 'target', 'synth:tone')])
    double = make_scene([(5, 1)], [('target', (2, 5), 'target', 'synth:tone'), ('twin', (8, 5), 'noise', 'synth:tone')],
        snr_db=0.0)
    signals = source_signals(double)
    signals['twin'] = signals['target']

    one, = mix_scene(single)
    two, = mix_scene(double, signals)
    np.testing.assert_allclose(two.samples, 2 * one.samples, rtol=1e-9, atol=1e-12)


def test_mix_deterministic(square_scene):
    a = mix_scene(square_scene)
    b = mix_scene(square_scene)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.samples, tb.samples)


def test_energy_decay():
    scene = make_scene([(0, 5), (2, 5), (8, 5)], [('target', (4, 5), 'target', 'synth:white')], duration=3.0)
    traces = mix_scene(scene)

    near = np.mean(traces[1].samples ** 2)   # 2 m
    far = np.mean(traces[0].samples ** 2)    # 4 m
    assert near / far == pytest.approx(4.0, rel=0.05)
    assert np.mean(traces[2].samples ** 2) == pytest.approx(far, rel=0.05)


def test_delay_between_sensors():
    scene = make_scene([(0, 0), (0, 3.43)], [('target', (0, 6.86), 'target', 'synth:white')], duration=0.25)
    first, second = mix_scene(scene)

    xc = correlate(first.samples, second.samples, mode='full')
    lag = np.argmax(xc) - (len(second.samples) - 1)
    # The sensor at 6.86 m hears the source 160 samples after the one at 3.43 m
    assert lag == 160


def test_scene_validation():
    with pytest.raises(SceneError):
        make_scene([(1, 1)], [('a', (2, 2), 'target', 'synth:white'), ('b', (3, 3), 'target', 'synth:white')]).validate()
    with pytest.raises(SceneError):
        make_scene([(11, 1)], [('a', (2, 2), 'target', 'synth:white')]).validate()
    with pytest.raises(SceneError):
        make_scene([], [('a', (2, 2), 'target', 'synth:white')]).validate()


def test_random_scene():
    scene = random_scene('kitchen', 12, 3)
    scene.validate()

    assert (scene.width, scene.height) == (7.0, 7.0)
    assert scene.L == 12
    assert len(scene.sources) == 6
    assert scene.target.signal == 'synth:burst_train'
    for src in scene.sources:
        assert min(distance(src.position, s.position) for s in scene.sensors) >= 0.5

    assert random_scene('kitchen', 12, 3) == scene
    with pytest.raises(ParameterError):
        random_scene('forest', 12, 3)
