'''Acoustic scenes: source signals, free-field propagation to the sensors, SNR
calibration and per-sensor traces.
'''
import math
import logging
import dataclasses
import numpy as np
from collections import namedtuple
from dataclasses import dataclass
from pathlib import Path
from typing import List, Dict, Sequence, Tuple, Union
from scipy.io import wavfile

from .utils import EsfeError, ParameterError, D_MIN, distance

logger = logging.getLogger('scene')

SYNTH_KINDS = ('white', 'tone', 'am_noise', 'burst_train')

# Largest scene dimension for each preset, as in the Park and Kitchen scenes
PRESETS = {
    'park'   : 20.0,
    'kitchen': 7.0,
}

SensorDef     = namedtuple('SensorDef', ('id', 'position', 'gain'))
SourceDef     = namedtuple('SourceDef', ('id', 'position', 'role', 'signal', 'level'))
SampledSignal = namedtuple('SampledSignal', ('samples', 'sample_rate'))
SignalSpec    = namedtuple('SignalSpec', ('kind', 'path', 'params'))


class SensorTrace(namedtuple('SensorTrace', ('sensor_id', 'samples', 'sample_rate', 'components'))):
    '''Waveform observed at one sensor. `components` maps each source id to its
    contribution (oracle mode) or is None.
    '''
    __slots__ = ()

    @property
    def signal(self) -> SampledSignal:
        return SampledSignal(self.samples, self.sample_rate)


class WavFormatError(EsfeError):
    '''Raised when a WAV file header cannot be parsed.'''
    pass


class UnsupportedFormatError(EsfeError):
    '''Raised when a WAV file is valid but not 16-bit PCM mono.'''
    pass


class NearFieldError(EsfeError):
    '''Raised when a source is closer than D_MIN to a sensor.'''
    pass


class CalibrationError(EsfeError):
    '''Raised when the noise scale for the requested SNR cannot be computed.'''
    pass


class SceneError(EsfeError):
    '''Raised when a scene violates its invariants.'''
    pass


@dataclass
class Scene:
    name: str
    width: float
    height: float
    sensors: List[SensorDef]
    sources: List[SourceDef]
    snr_db: float
    seed: int
    speed_of_sound: float = 343.0
    sample_rate: int = 16000
    duration: float = 3.0

    @property
    def v(self) -> float:
        return max(self.width, self.height)

    @property
    def L(self) -> int:
        return len(self.sensors)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def bounds(self) -> Tuple[float,float,float,float]:
        return (0.0, self.width, 0.0, self.height)

    @property
    def center(self) -> Tuple[float,float]:
        return (self.width / 2, self.height / 2)

    @property
    def target(self) -> SourceDef:
        return next(s for s in self.sources if s.role == 'target')

    @property
    def noise_sources(self) -> List[SourceDef]:
        return [s for s in self.sources if s.role == 'noise']

    def replace(self, **changes) -> 'Scene':
        return dataclasses.replace(self, **changes)

    def validate(self):
        if not (self.width > 0 and self.height > 0):
            raise SceneError(f'scene {self.name!r}: width and height must be positive')
        if self.sample_rate <= 0 or self.duration <= 0 or self.speed_of_sound <= 0:
            raise SceneError(f'scene {self.name!r}: sample_rate, duration and speed_of_sound must be positive')
        if not self.sensors:
            raise SceneError(f'scene {self.name!r}: at least one sensor is required')

        roles = [s.role for s in self.sources]
        if roles.count('target') != 1:
            raise SceneError(f'scene {self.name!r}: exactly one target source is required, found {roles.count("target")}')

        for s in self.sources:
            if s.role not in ('target', 'noise'):
                raise SceneError(f'source {s.id!r}: unknown role {s.role!r}')
            if s.level < 0:
                raise SceneError(f'source {s.id!r}: level must be >= 0')

        for s in self.sensors:
            if s.gain <= 0:
                raise SceneError(f'sensor {s.id!r}: gain must be > 0')

        ids = [s.id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise SceneError(f'scene {self.name!r}: duplicate sensor ids')

        for obj in self.sensors + self.sources:
            x, y = obj.position
            if not (0 <= x <= self.width and 0 <= y <= self.height):
                raise SceneError(f'{obj.id!r} at ({x}, {y}) lies outside the {self.width}x{self.height} scene')


################################################################################


def load_wav(path: Union[str,Path]) -> SampledSignal:
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as e:
        raise WavFormatError(f'{path}: {e}') from e

    if data.dtype != np.int16:
        raise UnsupportedFormatError(f'{path}: expected 16-bit PCM, got {data.dtype}')
    if data.ndim != 1:
        raise UnsupportedFormatError(f'{path}: expected mono, got {data.shape[1]} channels')

    return SampledSignal(data.astype(np.float64) / 32768.0, int(rate))


def save_wav(path: Union[str,Path], signal: SampledSignal):
    pcm = np.clip(np.round(np.asarray(signal.samples) * 32768.0), -32768, 32767)
    wavfile.write(path, int(signal.sample_rate), pcm.astype(np.int16))


def parse_signal_spec(spec: str) -> SignalSpec:
    '''Parse a source signal descriptor: either a WAV file path or
    `synth:<kind>[:key=value,key=value...]`.
    '''
    if not spec.startswith('synth:'):
        return SignalSpec('file', spec, {})

    _, _, rest = spec.partition(':')
    kind, _, args = rest.partition(':')

    if kind not in SYNTH_KINDS:
        raise ParameterError(f'unknown synthetic source kind {kind!r} in {spec!r}')

    params = {}
    for item in filter(None, args.split(',')):
        key, sep, value = item.partition('=')
        if not sep:
            raise ParameterError(f'malformed synth parameter {item!r} in {spec!r}')
        try:
            params[key.strip()] = float(value)
        except ValueError:
            raise ParameterError(f'synth parameter {key!r} is not a number in {spec!r}') from None

    return SignalSpec(kind, None, params)


def synth_source(kind: str, duration: float, rate: int, seed: int, params: Dict[str,float] = None) -> SampledSignal:
    '''Synthesize a unit-RMS stand-in for a recorded source.

    white       -- Gaussian white noise (quasi-stationary sources, e.g. waterfall)
    tone        -- sinusoid at `freq` Hz
    am_noise    -- white noise times a slow log-normal envelope whose knots are
                   1/(2*bandwidth) s apart, `depth` sets the modulation strength
    burst_train -- white noise gated on for `duty`*`period` s at a random offset
                   inside every `period` s slot
    '''
    if duration <= 0 or rate <= 0:
        raise ParameterError('duration and rate must be positive')

    params = dict(params or {})
    n = int(round(duration * rate))
    rng = np.random.default_rng(seed)

    if kind == 'white':
        x = rng.standard_normal(n)

    elif kind == 'tone':
        freq = params.get('freq', 1000.0)
        phase = params.get('phase', 0.0)
        x = np.sin(2 * np.pi * freq * np.arange(n) / rate + phase)

    elif kind == 'am_noise':
        bandwidth = params.get('bandwidth', 4.0)
        depth = params.get('depth', 1.5)
        if bandwidth <= 0:
            raise ParameterError('am_noise bandwidth must be positive')

        spacing = 1.0 / (2 * bandwidth)
        knots = np.arange(0, duration + 2 * spacing, spacing)
        envelope = np.exp(depth * np.interp(np.arange(n) / rate, knots, rng.standard_normal(len(knots))))
        x = rng.standard_normal(n) * envelope

    elif kind == 'burst_train':
        period = params.get('period', 0.25)
        duty = params.get('duty', 0.5)
        if period <= 0 or not 0 < duty <= 1:
            raise ParameterError('burst_train needs period > 0 and 0 < duty <= 1')

        slot = int(round(period * rate))
        on = max(1, int(round(duty * period * rate)))
        gate = np.zeros(n)
        for start in range(0, n, slot):
            offset = start + int(rng.integers(0, slot - on + 1))
            gate[offset:offset + on] = 1.0
        x = rng.standard_normal(n) * gate

    else:
        raise ParameterError(f'unknown synthetic source kind {kind!r}')

    rms = np.sqrt(np.mean(x ** 2))
    if not rms > 0:
        raise ParameterError(f'{kind} source with parameters {params} is silent')

    return SampledSignal(x / rms, rate)


def propagate(src: SampledSignal, src_pos: Tuple[float,float], sensor: SensorDef, c: float) -> SampledSignal:
    '''Free-field propagation: sqrt(g) * src(n - tau) / d with an integer-sample
    delay, zero-padded at the start, same length as the input.
    '''
    d = distance(src_pos, sensor.position)
    if d < D_MIN:
        raise NearFieldError(f'source at {tuple(src_pos)} is {d:.3f} m from sensor {sensor.id!r} (minimum {D_MIN} m)')

    samples = np.asarray(src.samples, dtype=np.float64)
    delay = int(round(d / c * src.sample_rate))
    out = np.zeros(len(samples))
    if delay < len(samples):
        out[delay:] = samples[:len(samples) - delay] * (math.sqrt(sensor.gain) / d)

    return SampledSignal(out, src.sample_rate)


def probe_point(target_position: Tuple[float,float], center: Tuple[float,float]) -> Tuple[float,float]:
    '''Point 1 m from the target toward the scene center (+x when the target is
    at the center).'''
    dx, dy = center[0] - target_position[0], center[1] - target_position[1]
    norm = math.hypot(dx, dy)
    if norm == 0:
        dx, dy, norm = 1.0, 0.0, 1.0
    return (target_position[0] + dx / norm, target_position[1] + dy / norm)


def calibrate_snr(target: SampledSignal, noises: Sequence[SampledSignal],
        noise_positions: Sequence[Tuple[float,float]], target_position: Tuple[float,float],
        snr_db: float, center: Tuple[float,float] = (0.0, 0.0)) -> float:
    '''Scale factor beta for the noise sources so that the target-to-noise power
    ratio at the probe point equals snr_db. Noise powers add at the probe point.
    '''
    if len(noises) == 0:
        raise CalibrationError('at least one noise source is needed to calibrate the SNR')
    if len(noises) != len(noise_positions):
        raise ParameterError('one position per noise source is required')

    if math.isinf(snr_db) and snr_db > 0:
        return 0.0

    probe = probe_point(target_position, center)
    target_power = float(np.mean(np.square(target.samples)))
    if target_power <= 0:
        raise CalibrationError('target source has zero power')

    noise_power = 0.0
    for noise, pos in zip(noises, noise_positions):
        d = distance(pos, probe)
        if d < D_MIN:
            raise CalibrationError(f'noise source at {tuple(pos)} sits on the SNR probe point {probe}')
        noise_power += float(np.mean(np.square(noise.samples))) / d ** 2

    if noise_power <= 0:
        raise CalibrationError('noise sources have zero power')

    # The target is 1 m away from the probe point
    return math.sqrt(target_power / (10 ** (snr_db / 10) * noise_power))


################################################################################


def source_seed(scene: Scene, index: int) -> int:
    return int(np.random.SeedSequence([scene.seed, index]).generate_state(1)[0])


def preroll_samples(scene: Scene) -> int:
    '''Largest propagation delay in the scene, in samples.'''
    far = max(distance(src.position, s.position) for src in scene.sources for s in scene.sensors)
    return int(round(far / scene.speed_of_sound * scene.sample_rate))


def load_source(source: SourceDef, scene: Scene, n: int, seed: int) -> SampledSignal:
    spec = parse_signal_spec(source.signal)

    if spec.kind != 'file':
        return synth_source(spec.kind, n / scene.sample_rate, scene.sample_rate, seed, spec.params)

    sig = load_wav(spec.path)
    if sig.sample_rate != scene.sample_rate:
        raise ParameterError(f'{spec.path}: sample rate {sig.sample_rate} Hz differs from the scene rate {scene.sample_rate} Hz')

    samples = sig.samples
    if len(samples) < n:
        logger.warning('%s has %d samples, %d needed: repeating it', spec.path, len(samples), n)
        samples = np.resize(samples, n)

    return SampledSignal(samples[:n], sig.sample_rate)


def source_signals(scene: Scene) -> Dict[str,SampledSignal]:
    '''Level-scaled, SNR-calibrated source waveforms, each preroll_samples(scene)
    samples longer than the observation window.
    '''
    scene.validate()
    preroll = preroll_samples(scene)
    n = scene.n_samples + preroll

    signals = {}
    for i, src in enumerate(scene.sources):
        sig = load_source(src, scene, n, source_seed(scene, i))
        signals[src.id] = SampledSignal(sig.samples * src.level, sig.sample_rate)

    target = scene.target
    noises = scene.noise_sources

    if noises:
        def observed(s):
            return SampledSignal(signals[s.id].samples[preroll:], scene.sample_rate)

        beta = calibrate_snr(observed(target), [observed(s) for s in noises],
            [s.position for s in noises], target.position, scene.snr_db, scene.center)
        logger.debug('Scene %s: noise scale %.6g for %.1f dB', scene.name, beta, scene.snr_db)

        for s in noises:
            signals[s.id] = SampledSignal(signals[s.id].samples * beta, scene.sample_rate)

    return signals


def mix_scene(scene: Scene, signals: Dict[str,SampledSignal] = None) -> List[SensorTrace]:
    '''Sum every source's propagated contribution at every sensor. Summation runs
    in source order so traces are bit-identical for identical scenes.
    '''
    if signals is None:
        signals = source_signals(scene)

    preroll = preroll_samples(scene)
    n = scene.n_samples
    traces = []

    for sensor in scene.sensors:
        samples = np.zeros(n)
        components = {}

        for src in scene.sources:
            try:
                contrib = propagate(signals[src.id], src.position, sensor, scene.speed_of_sound)
            except NearFieldError as e:
                raise NearFieldError(f'sensor {sensor.id!r} / source {src.id!r}: {e}') from e

            components[src.id] = contrib.samples[preroll:preroll + n]
            samples = samples + components[src.id]

        traces.append(SensorTrace(sensor.id, samples, scene.sample_rate, components))

    logger.debug('Mixed scene %s: %d sensors, %d sources, %d samples', scene.name, len(traces), len(scene.sources), n)
    return traces


def random_scene(preset: str, sensors: int, seed: int, target_kind: str = 'burst_train',
        noise_kind: str = 'white', noise_sources: int = 5, snr_db: float = 0.0,
        duration: float = 3.0, sample_rate: int = 16000) -> Scene:
    '''Scene with sensors and sources placed uniformly at random in a square
    preset area, keeping every source at least 5*D_MIN from every sensor.
    '''
    if preset not in PRESETS:
        raise ParameterError(f'unknown scene preset {preset!r}, choose from {", ".join(PRESETS)}')
    if sensors < 1:
        raise ParameterError('a scene needs at least one sensor')

    side = PRESETS[preset]
    rng = np.random.default_rng(seed)
    def point():
        return (round(float(rng.uniform(0, side)), 3), round(float(rng.uniform(0, side)), 3))

    sensor_defs = [SensorDef(f'S{i}', point(), 1.0) for i in range(sensors)]
    source_defs = []

    for i in range(noise_sources + 1):
        while True:
            pos = point()
            if all(distance(pos, s.position) >= 5 * D_MIN for s in sensor_defs):
                break

        if i == 0:
            source_defs.append(SourceDef('target', pos, 'target', f'synth:{target_kind}', 1.0))
        else:
            source_defs.append(SourceDef(f'noise{i}', pos, 'noise', f'synth:{noise_kind}', 1.0))

    return Scene(preset, side, side, sensor_defs, source_defs, snr_db, seed,
        sample_rate=sample_rate, duration=duration)
