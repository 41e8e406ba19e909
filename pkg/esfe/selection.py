'''Sensor selection: ESFE (sensors whose INS_max is close to the largest one,
plus a search area shrunk around them), the SNR a posteriori baseline and the
Bhattacharyya distance used to check INS_max as a selection parameter.
'''
import math
import logging
import numpy as np
from collections import namedtuple
from typing import List, Dict, Sequence, Tuple
from scipy import stats as sps

from .energy import block_energies, BLOCK_SIZE
from .localizer import SearchArea, scene_area
from .scene import SampledSignal, SensorDef, SensorTrace
from .stationarity import INSProfile, DegenerateSignalError
from .utils import ParameterError

logger = logging.getLogger('selection')

KAPPA = 0.087
MARGIN_FRACTION = 0.2
MIN_SELECTED = 4
RELAX_STEP = 0.05
EPS = 1e-12

SelectionResult = namedtuple('SelectionResult', ('selected_ids', 'alpha', 'area', 'method', 'scores'))


def compute_alpha(v: float, L: int, kappa: float = KAPPA, xi: float = 0.0) -> float:
    '''Measurements adjustment factor 1 / (kappa * (v + L)) + xi, clamped to
    [0.01, 0.99].'''
    if not v > 0 or L < 1 or not kappa > 0:
        raise ParameterError(f'alpha needs v > 0, L >= 1 and kappa > 0, got v={v}, L={L}, kappa={kappa}')
    if not -0.05 <= xi <= 0.05:
        raise ParameterError(f'xi must lie in [-0.05, 0.05], got {xi}')

    return min(0.99, max(0.01, 1 / (kappa * (v + L)) + xi))


def _within(ins_max: Dict[str,float], alpha: float) -> List[str]:
    top = max(ins_max.values())
    return sorted(i for i, value in ins_max.items() if abs(value - top) / top <= alpha + EPS)


def esfe_select(ins_max: Dict[str,float], alpha: float, min_selected: int = MIN_SELECTED,
        step: float = RELAX_STEP) -> Tuple[List[str],float]:
    '''Sensors whose INS_max lies within a relative distance alpha of the largest
    one. When fewer than `min_selected` qualify, alpha grows by `step` until
    enough do or every sensor is in.

    Returns the selected ids (sorted) and the alpha that produced them.
    '''
    if not ins_max:
        raise ParameterError('no sensors to select from')
    if any(not value > 0 for value in ins_max.values()):
        raise ParameterError('INS_max values must be positive')

    selected = _within(ins_max, alpha)
    need = min(min_selected, len(ins_max))
    k = 0
    while len(selected) < need:
        k += 1
        selected = _within(ins_max, alpha + k * step)

    if k:
        logger.debug('Relaxed alpha from %.3f to %.3f to select %d sensors', alpha, alpha + k * step, len(selected))

    return selected, alpha + k * step


def reduce_area(selected_positions: Sequence[Tuple[float,float]], v: float, margin_fraction: float,
        scene_bounds: Tuple[float,float,float,float], resolution: float) -> SearchArea:
    '''Bounding box of the selected sensors grown by margin_fraction * v on every
    side and clipped to the scene.'''
    if len(selected_positions) == 0:
        raise ParameterError('reduce_area needs at least one position')

    p = np.asarray(selected_positions, dtype=np.float64)
    margin = margin_fraction * v
    x0, x1, y0, y1 = scene_bounds

    return SearchArea(
        float(max(x0, p[:, 0].min() - margin)), float(min(x1, p[:, 0].max() + margin)),
        float(max(y0, p[:, 1].min() - margin)), float(min(y1, p[:, 1].max() + margin)),
        resolution)


def noise_variance(trace: SensorTrace, M: int = BLOCK_SIZE, mode: str = 'oracle', target_id: str = None) -> float:
    '''Noise power at a sensor.

    oracle -- variance of everything but the target component
    blind  -- mean of the lowest decile of block energies
    '''
    if mode == 'oracle':
        if trace.components is None or target_id not in trace.components:
            raise ParameterError(f'sensor {trace.sensor_id!r}: oracle noise needs the target component')
        return float(np.var(np.asarray(trace.samples) - np.asarray(trace.components[target_id])))

    if mode == 'blind':
        u = np.sort(block_energies(trace, M).block_energies)
        return float(np.mean(u[:max(1, len(u) // 10)]))

    raise ParameterError(f'unknown noise estimate mode {mode!r}')


def snr_posteriori(traces: Sequence[SensorTrace], noise_estimates: Dict[str,float]) -> Dict[str,float]:
    res = {}
    for trace in traces:
        noise = noise_estimates[trace.sensor_id]
        if not noise > 0:
            raise ParameterError(f'sensor {trace.sensor_id!r}: noise estimate must be positive, got {noise}')
        res[trace.sensor_id] = float(np.var(trace.samples)) / noise
    return res


def snr_select(traces: Sequence[SensorTrace], noise_estimates: Dict[str,float], L: int = None) -> List[str]:
    '''The ceil(L/2) sensors with the largest SNR a posteriori, ties by id.'''
    snr = snr_posteriori(traces, noise_estimates)
    if L is None:
        L = len(traces)

    ranked = sorted(snr, key=lambda i: (-snr[i], i))
    return sorted(ranked[:math.ceil(L / 2)])


def _positions(sensors: Sequence[SensorDef], ids: Sequence[str]) -> List[Tuple[float,float]]:
    by_id = {s.id: s.position for s in sensors}
    return [by_id[i] for i in ids]


def esfe_selection(profiles: Dict[str,INSProfile], sensors: Sequence[SensorDef],
        scene_bounds: Tuple[float,float,float,float], resolution: float, alpha: float = None,
        kappa: float = KAPPA, xi: float = 0.0, margin_fraction: float = MARGIN_FRACTION,
        min_selected: int = MIN_SELECTED) -> SelectionResult:
    x0, x1, y0, y1 = scene_bounds
    v = max(x1 - x0, y1 - y0)
    if alpha is None:
        alpha = compute_alpha(v, len(sensors), kappa, xi)

    ins_max = {i: p.ins_max for i, p in profiles.items()}
    selected, alpha_eff = esfe_select(ins_max, alpha, min_selected)
    area = reduce_area(_positions(sensors, selected), v, margin_fraction, scene_bounds, resolution)

    logger.debug('ESFE: alpha %.3f, selected %s, area x [%.2f, %.2f] y [%.2f, %.2f]',
        alpha_eff, ','.join(selected), *area[:4])
    return SelectionResult(selected, alpha_eff, area, 'esfe', ins_max)


def snr_selection(traces: Sequence[SensorTrace], noise_estimates: Dict[str,float],
        scene_bounds: Tuple[float,float,float,float], resolution: float) -> SelectionResult:
    scores = snr_posteriori(traces, noise_estimates)
    selected = snr_select(traces, noise_estimates)
    return SelectionResult(selected, None, scene_area(scene_bounds, resolution), 'snr', scores)


def all_selection(sensors: Sequence[SensorDef], scene_bounds: Tuple[float,float,float,float],
        resolution: float) -> SelectionResult:
    return SelectionResult(sorted(s.id for s in sensors), None, scene_area(scene_bounds, resolution), 'all', {})


def bhattacharyya(sig1: SampledSignal, sig2: SampledSignal, bins: int = 64) -> float:
    '''-ln of the Bhattacharyya coefficient between the amplitude histograms of
    two signals over their shared range.'''
    if bins < 8:
        raise ParameterError(f'at least 8 histogram bins are needed, got {bins}')

    x1 = np.asarray(sig1.samples, dtype=np.float64)
    x2 = np.asarray(sig2.samples, dtype=np.float64)
    if len(x1) == 0 or len(x2) == 0 or np.ptp(x1) == 0 or np.ptp(x2) == 0:
        raise DegenerateSignalError('Bhattacharyya distance of a constant signal')

    edges = np.linspace(min(x1.min(), x2.min()), max(x1.max(), x2.max()), bins + 1)

    def mass(x):
        p = np.histogram(x, edges)[0].astype(np.float64)
        p = np.maximum(p / p.sum(), EPS)
        return p / p.sum()

    return max(0.0, float(-np.log(np.sum(np.sqrt(mass(x1) * mass(x2))))))


def unit_rms(signal: SampledSignal) -> SampledSignal:
    x = np.asarray(signal.samples, dtype=np.float64)
    rms = np.sqrt(np.mean(x ** 2))
    if not rms > 0:
        raise DegenerateSignalError('cannot scale a silent signal to unit RMS')
    return SampledSignal(x / rms, signal.sample_rate)


def ins_bd_correlation(traces: Sequence[SensorTrace], target: SampledSignal, profiles: Dict[str,INSProfile],
        bins: int = 64) -> Tuple[Dict[str,float],float]:
    '''Bhattacharyya distance of every (unit-RMS) trace to the (unit-RMS) target
    signal, and its Spearman rank correlation with INS_max.'''
    reference = unit_rms(target)
    bd = {t.sensor_id: bhattacharyya(reference, unit_rms(t.signal), bins) for t in traces}

    ids = sorted(bd)
    rho, _ = sps.spearmanr([profiles[i].ins_max for i in ids], [bd[i] for i in ids])
    return bd, float(rho)
