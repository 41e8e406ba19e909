'''Index of non-stationarity: the time-frequency dispersion of a signal compared
with the dispersion of phase-randomized (stationary) surrogates, over several
time scales.
'''
import hashlib
import logging
import numpy as np
from collections import namedtuple
from pathlib import Path
from typing import List, Dict, Sequence, Union
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats
from scipy.signal import get_window

from .scene import SampledSignal, SensorTrace
from .utils import EsfeError, ParameterError, save_object, restore_object

logger = logging.getLogger('stationarity')

EPS = 1e-12

DEFAULT_SCALES = (0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4)
DEFAULT_SURROGATES = 50

STATIONARY = 'stationary'
NONSTATIONARY = 'nonstationary'
HIGHLY_NONSTATIONARY = 'highly_nonstationary'

# INS_max above which a nonstationary signal is highly nonstationary
HIGHLY_NONSTATIONARY_INS = 100.0

Spectrogram = namedtuple('Spectrogram', ('frames', 'window_len', 'hop'))
INSProfile  = namedtuple('INSProfile', ('scales', 'ins_values', 'thresholds', 'ins_max', 'classification'))


class DegenerateSpectrumError(EsfeError):
    '''Raised when a spectrum has no positive entry.'''
    pass


class DegenerateSignalError(EsfeError):
    '''Raised when the stationarity test is run on a constant signal.'''
    pass


def _frames(x: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    '''Hann-windowed STFT magnitudes, one row per frame.'''
    windows = sliding_window_view(x, window_len)[::hop]
    return np.abs(np.fft.rfft(windows * get_window('hann', window_len), axis=-1))


def spectrogram(signal: SampledSignal, window_len: int) -> Spectrogram:
    n = len(signal.samples)
    if window_len < 16 or window_len > n / 2:
        raise ParameterError(f'window length {window_len} outside [16, {n // 2}] for a {n}-sample signal')

    hop = max(1, window_len // 8)
    frames = _frames(np.asarray(signal.samples, dtype=np.float64), window_len, hop)
    return Spectrogram(frames, window_len, hop)


def make_surrogates(signal: SampledSignal, count: int, seed: int) -> List[SampledSignal]:
    '''Stationary references: same magnitude spectrum as the signal, uniformly
    random phases. DC and Nyquist bins keep their original (real) values.
    '''
    if count < 2:
        raise ParameterError(f'at least 2 surrogates are needed, got {count}')

    x = np.asarray(signal.samples, dtype=np.float64)
    n = len(x)
    spectrum = np.fft.rfft(x)
    rng = np.random.default_rng(seed)

    phases = np.exp(1j * rng.uniform(0, 2 * np.pi, (count, len(spectrum))))
    randomized = np.abs(spectrum) * phases
    randomized[:, 0] = spectrum[0]
    if n % 2 == 0:
        randomized[:, -1] = spectrum[-1]

    surrogates = np.fft.irfft(randomized, n=n, axis=-1)
    return [SampledSignal(s, signal.sample_rate) for s in surrogates]


def _symmetric_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = p + EPS
    q = q + EPS
    p = p / p.sum(axis=-1, keepdims=True)
    q = q / q.sum(axis=-1, keepdims=True)
    return np.sum((p - q) * (np.log(p) - np.log(q)), axis=-1)


def spectral_distance(frame: Sequence[float], global_mean: Sequence[float]) -> float:
    '''Symmetrized Kullback-Leibler divergence between two spectra, each floored
    at EPS and normalized to unit sum.
    '''
    p = np.asarray(frame, dtype=np.float64)
    q = np.asarray(global_mean, dtype=np.float64)

    if p.shape != q.shape:
        raise ParameterError(f'spectra have different lengths: {p.shape} vs {q.shape}')
    if not (np.any(p > 0) and np.any(q > 0)):
        raise DegenerateSpectrumError('spectral distance needs at least one positive entry in each spectrum')

    return float(_symmetric_kl(p, q))


def frame_distances(power: np.ndarray, lsd_weight: float = 1.0) -> np.ndarray:
    '''Distance of every frame power spectrum to the time-averaged spectrum:
    KL * (1 + lsd_weight * LSD), where LSD is the mean absolute log-spectral
    deviation and carries the level changes KL is blind to.
    '''
    mean = power.mean(axis=0)
    kl = _symmetric_kl(power, mean[None, :])
    if lsd_weight == 0:
        return kl

    lsd = np.mean(np.abs(np.log(power + EPS) - np.log(mean + EPS)[None, :]), axis=-1)
    return kl * (1 + lsd_weight * lsd)


def _dispersion(x: np.ndarray, window_len: int, hop: int, lsd_weight: float) -> float:
    return float(np.var(frame_distances(_frames(x, window_len, hop) ** 2, lsd_weight)))


def classify(profile: INSProfile, rule: str = 'majority') -> str:
    '''Stationarity verdict from per-scale INS values and thresholds.

    rule='majority': nonstationary when INS exceeds its threshold on at least
    half of the scales. rule='every': stationary only if INS stays under its
    threshold on every scale.
    '''
    ins_values = np.asarray(profile.ins_values)
    violations = int(np.sum(ins_values > np.asarray(profile.thresholds)))

    if rule == 'majority':
        nonstationary = 2 * violations >= len(ins_values)
    elif rule == 'every':
        nonstationary = violations > 0
    else:
        raise ParameterError(f'unknown classification rule {rule!r}')

    if not nonstationary:
        return STATIONARY
    if profile.ins_max > HIGHLY_NONSTATIONARY_INS:
        return HIGHLY_NONSTATIONARY
    return NONSTATIONARY


def ins(signal: SampledSignal, scales: Sequence[float] = DEFAULT_SCALES,
        surrogate_count: int = DEFAULT_SURROGATES, seed: int = 0,
        lsd_weight: float = 1.0, rule: str = 'majority') -> INSProfile:
    '''Index of non-stationarity of `signal` at each time scale (window length as
    a fraction of the signal length), with the 95% threshold derived from a Gamma
    distribution moment-fitted to the surrogate dispersions.
    '''
    x = np.asarray(signal.samples, dtype=np.float64)
    n = len(x)
    scales = tuple(float(s) for s in scales)

    if not scales or any(not 0 < s < 1 for s in scales) or any(a >= b for a, b in zip(scales, scales[1:])):
        raise ParameterError(f'scales must be strictly increasing values in (0, 1), got {scales}')
    if surrogate_count < 10:
        raise ParameterError(f'at least 10 surrogates are needed, got {surrogate_count}')
    if n == 0 or np.ptp(x) == 0:
        raise DegenerateSignalError('stationarity test on a constant signal')

    surrogates = np.array([s.samples for s in make_surrogates(signal, surrogate_count, seed)])
    ins_values = []
    thresholds = []

    for scale in scales:
        window_len = int(round(scale * n))
        if window_len < 16 or window_len > n / 2:
            raise ParameterError(f'scale {scale} gives a {window_len}-sample window, outside [16, {n // 2}]')

        hop = max(1, window_len // 8)
        theta = _dispersion(x, window_len, hop, lsd_weight)
        thetas = np.sort([_dispersion(s, window_len, hop, lsd_weight) for s in surrogates])

        mean = float(np.mean(thetas))
        var = float(np.var(thetas, ddof=1))
        if not mean > 0:
            raise DegenerateSignalError(f'surrogates show no spectral dispersion at scale {scale}')

        if var > 0:
            q95 = float(stats.gamma.ppf(0.95, mean ** 2 / var, scale=var / mean))
        else:
            q95 = mean

        ins_values.append(np.sqrt(theta / mean))
        thresholds.append(np.sqrt(q95 / mean))
        logger.debug('Scale %.3f: window %d, INS %.3f, threshold %.3f', scale, window_len, ins_values[-1], thresholds[-1])

    ins_values = np.array(ins_values)
    thresholds = np.array(thresholds)
    profile = INSProfile(np.array(scales), ins_values, thresholds, float(ins_values.max()), None)
    return profile._replace(classification=classify(profile, rule))


def _cache_key(traces: Sequence[SensorTrace], scales: Sequence[float], surrogate_count: int, seed: int,
        lsd_weight: float, rule: str) -> tuple:
    '''Everything a set of profiles depends on; sample contents enter as digests.'''
    digests = tuple((t.sensor_id, t.sample_rate, hashlib.sha1(np.ascontiguousarray(t.samples, dtype=np.float64)).hexdigest())
        for t in traces)
    return (tuple(float(s) for s in scales), int(surrogate_count), int(seed), float(lsd_weight), rule, digests)


def sensor_profiles(traces: Sequence[SensorTrace], scales: Sequence[float] = DEFAULT_SCALES,
        surrogate_count: int = DEFAULT_SURROGATES, seed: int = 0, lsd_weight: float = 1.0,
        rule: str = 'majority', cache_fname: Union[str,Path] = None) -> Dict[str,INSProfile]:
    '''INS profile of every trace. A cache file is only reused when it was written
    for the same traces and INS settings.'''
    key = None
    if cache_fname is not None:
        key = _cache_key(traces, scales, surrogate_count, seed, lsd_weight, rule)
        cached = restore_object(cache_fname)
        if isinstance(cached, dict) and cached.get('key') == key:
            logger.debug('Restored INS profiles from cache: %s', cache_fname)
            return cached['profiles']
        if cached is not None:
            logger.info('Cache %s was written for other traces or settings, recomputing', cache_fname)

    res = {}
    for i, trace in enumerate(traces, 1):
        res[trace.sensor_id] = ins(trace.signal, scales, surrogate_count, seed, lsd_weight, rule)
        logger.debug('[%d/%d] Sensor %s: INS_max %.3f (%s)', i, len(traces), trace.sensor_id,
            res[trace.sensor_id].ins_max, res[trace.sensor_id].classification)

    if cache_fname is not None:
        save_object({'key': key, 'profiles': res}, cache_fname)

    return res
