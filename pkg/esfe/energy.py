'''Block energies, noise statistics (mean, deviation and Hurst exponent of the
fGn noise model) and normalized energy vectors.
'''
import logging
import numpy as np
from collections import namedtuple
from typing import List, Sequence

from .scene import SensorTrace
from .utils import EsfeError, ParameterError

logger = logging.getLogger('energy')

BLOCK_SIZE = 1024
STD_FLOOR = 1e-12
MIN_HURST_LEN = 32
MIN_BLOCKS = 8

EnergySeries = namedtuple('EnergySeries', ('sensor_id', 'block_energies', 'block_size'))
NoiseStats   = namedtuple('NoiseStats', ('mean', 'std', 'hurst', 'mode'))
ZVector      = namedtuple('ZVector', ('entries', 'sensor_ids'))


class InsufficientDataError(EsfeError):
    '''Raised when a series is too short for the requested estimate.'''
    pass


class DegenerateSeriesError(EsfeError):
    '''Raised when the Hurst exponent is requested for a constant series.'''
    pass


class FgnSynthesisError(EsfeError):
    '''Raised when the circulant embedding of the fGn autocovariance is not
    positive semi-definite.'''
    pass


class InvalidStatsError(EsfeError):
    '''Raised when normalizing with a non-positive noise deviation.'''
    pass


def block_energies(trace: SensorTrace, M: int = BLOCK_SIZE) -> EnergySeries:
    '''Mean square of every complete M-sample block; the trailing partial block
    is dropped.'''
    if M < 1:
        raise ParameterError(f'block size must be positive, got {M}')

    x = np.asarray(trace.samples, dtype=np.float64)
    Q = len(x) // M
    if Q < 1:
        raise InsufficientDataError(f'sensor {trace.sensor_id!r}: {len(x)} samples, a block needs {M}')

    return EnergySeries(trace.sensor_id, np.mean(x[:Q * M].reshape(Q, M) ** 2, axis=1), M)


def oracle_series(trace: SensorTrace, M: int, target_id: str, method: str = 'hml') -> EnergySeries:
    '''Ground-truth noise energy series of a trace with oracle components.

    hml -- residual u - energy(A), keeping the target/noise cross term
    ml  -- energy of the noise part W alone (cross term taken as zero)
    '''
    if trace.components is None or target_id not in trace.components:
        raise ParameterError(f'sensor {trace.sensor_id!r}: no oracle component for target {target_id!r}')

    target = np.asarray(trace.components[target_id], dtype=np.float64)
    u = block_energies(trace, M)
    a = block_energies(trace._replace(samples=target), M)

    if method == 'hml':
        energies = u.block_energies - a.block_energies
    elif method == 'ml':
        noise = np.asarray(trace.samples, dtype=np.float64) - target
        energies = block_energies(trace._replace(samples=noise), M).block_energies
    else:
        raise ParameterError(f'unknown localization method {method!r}')

    return EnergySeries(trace.sensor_id, energies, M)


def _aggregated_variances(x: np.ndarray):
    n = len(x)
    sizes = []
    m = 2
    while m <= n // 8:
        sizes.append(m)
        m *= 2

    counts = np.array([n // m for m in sizes], dtype=np.float64)
    variances = np.array([np.var(x[:(n // m) * m].reshape(-1, m).mean(axis=1)) for m in sizes])
    keep = variances > 0
    return np.array(sizes, dtype=np.float64)[keep], counts[keep], variances[keep]


def estimate_hurst(series: Sequence[float], corrected: bool = True) -> float:
    '''Aggregated-variance Hurst estimate.

    The variance of the m-sample block means scales as m^(2H-2). With
    corrected=True the block-mean variances are divided by 1 - k^(2H-2), the
    shrinkage of a k-block sample variance around its own mean, and H is
    iterated to a fixed point.
    '''
    x = np.asarray(series, dtype=np.float64)
    if len(x) < MIN_HURST_LEN:
        raise InsufficientDataError(f'Hurst estimation needs at least {MIN_HURST_LEN} values, got {len(x)}')
    if np.ptp(x) == 0:
        raise DegenerateSeriesError('Hurst exponent of a constant series')

    sizes, counts, variances = _aggregated_variances(x)
    if len(sizes) < 2:
        raise DegenerateSeriesError('block-mean variances vanish at every aggregation level')

    def fit(v):
        slope = np.polyfit(np.log(sizes), np.log(v), 1)[0]
        return float(np.clip(1 + slope / 2, 0.01, 0.99))

    H = fit(variances)
    if not corrected:
        return H

    for _ in range(50):
        prev = H
        H = fit(variances / (1 - counts ** (2 * H - 2)))
        if abs(H - prev) < 1e-6:
            break

    return H


def synth_fgn(H: float, n: int, seed: int) -> np.ndarray:
    '''Zero-mean unit-variance fractional Gaussian noise by circulant embedding
    (Davies-Harte).'''
    if not 0 < H < 1:
        raise ParameterError(f'Hurst exponent must lie in (0, 1), got {H}')
    if n < 2:
        raise ParameterError(f'fGn length must be at least 2, got {n}')

    k = np.arange(n + 1, dtype=np.float64)
    gamma = 0.5 * (np.abs(k + 1) ** (2 * H) - 2 * k ** (2 * H) + np.abs(k - 1) ** (2 * H))
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    eigenvalues = np.fft.fft(row).real

    if np.any(eigenvalues < -1e-10 * np.abs(eigenvalues).max()):
        raise FgnSynthesisError(f'circulant embedding for H={H}, n={n} has negative eigenvalue {eigenvalues.min():.3g}')

    rng = np.random.default_rng(seed)
    size = len(row)
    w = np.sqrt(np.clip(eigenvalues, 0, None) / size) * (rng.standard_normal(size) + 1j * rng.standard_normal(size))
    return np.fft.fft(w).real[:n]


def _hurst_or_default(values: np.ndarray, fallback: np.ndarray) -> float:
    for candidate in (values, fallback):
        if len(candidate) >= MIN_HURST_LEN:
            try:
                return estimate_hurst(candidate)
            except DegenerateSeriesError:
                break

    logger.warning('Hurst exponent not estimable from %d values, using 0.5', len(values))
    return 0.5


def estimate_noise_stats(series: EnergySeries, mode: str = 'blind', oracle_noise: EnergySeries = None) -> NoiseStats:
    '''Noise mean, deviation and Hurst exponent for one sensor.

    blind  -- the lowest quartile of the block energies (noise floor)
    oracle -- the whole ground-truth noise series `oracle_noise`
    '''
    u = np.asarray(series.block_energies, dtype=np.float64)
    if mode in ('blind', 'oracle') and len(u) < MIN_BLOCKS:
        raise InsufficientDataError(f'sensor {series.sensor_id!r}: noise statistics need {MIN_BLOCKS} blocks, got {len(u)}')

    if mode == 'blind':
        selected = np.sort(u)[:len(u) // 4]
        full = u
    elif mode == 'oracle':
        if oracle_noise is None:
            raise ParameterError(f'sensor {series.sensor_id!r}: oracle mode needs the noise energy series')
        selected = np.asarray(oracle_noise.block_energies, dtype=np.float64)
        full = selected
    else:
        raise ParameterError(f'unknown noise statistics mode {mode!r}')

    if len(selected) < 2:
        raise InsufficientDataError(f'sensor {series.sensor_id!r}: {len(selected)} blocks in the estimation set')

    mean = float(np.mean(selected))
    std = max(float(np.std(selected, ddof=1)), STD_FLOOR)
    return NoiseStats(mean, std, _hurst_or_default(selected, full), mode)


def normalize(series: Sequence[EnergySeries], stats: Sequence[NoiseStats], q: int) -> ZVector:
    if len(series) != len(stats):
        raise ParameterError(f'{len(series)} energy series but {len(stats)} noise statistics')
    if not series:
        raise ParameterError('no energy series to normalize')

    Q = len(series[0].block_energies)
    M = series[0].block_size
    if any(len(s.block_energies) != Q or s.block_size != M for s in series):
        raise ParameterError('energy series differ in block count or block size')
    if not 0 <= q < Q:
        raise ParameterError(f'block {q} outside [0, {Q})')

    entries = []
    for s, st in zip(series, stats):
        if not st.std > 0:
            raise InvalidStatsError(f'sensor {s.sensor_id!r}: noise deviation {st.std} is not positive')
        entries.append((s.block_energies[q] - st.mean) / st.std)

    return ZVector(np.array(entries), [s.sensor_id for s in series])


def denormalize(z: ZVector, stats: Sequence[NoiseStats]) -> np.ndarray:
    '''Block energies u = z * std + mean, inverse of normalize.'''
    if len(z.entries) != len(stats):
        raise ParameterError(f'{len(z.entries)} entries but {len(stats)} noise statistics')
    return np.array([e * st.std + st.mean for e, st in zip(z.entries, stats)])


def normalize_all(series: Sequence[EnergySeries], stats: Sequence[NoiseStats]) -> List[ZVector]:
    '''One ZVector per block.'''
    return [normalize(series, stats, q) for q in range(len(series[0].block_energies))]
