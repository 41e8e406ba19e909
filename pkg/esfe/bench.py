'''Evaluation protocol: per (SNR, seed) scene synthesis, sensor selection and
per-block localization for every method and selector, with RMSE, CRLB and
timing per result row. Also energy maps and the CSV/PGM emitters.
'''
import csv
import math
import time
import logging
import numpy as np
from collections import namedtuple
from dataclasses import dataclass
from multiprocessing import Pool
from pathlib import Path
from typing import List, Sequence, Tuple, Union

from .energy import (NoiseStats, ZVector, BLOCK_SIZE, block_energies,
    estimate_noise_stats, oracle_series, normalize_all)
from .localizer import (COARSE, FINE, default_resolution, localize_blocks,
    evaluate, problem, crlb)
from .scene import Scene, SampledSignal, SensorTrace, source_signals, mix_scene, preroll_samples
from .selection import (KAPPA, MARGIN_FRACTION, MIN_SELECTED, SelectionResult, esfe_selection,
    snr_selection, all_selection, noise_variance, ins_bd_correlation)
from .stationarity import DEFAULT_SCALES, DEFAULT_SURROGATES, sensor_profiles
from .utils import EsfeError, ParameterError, cur_memory_usage, worker_count

logger = logging.getLogger('bench')

METHODS = ('ml', 'hml')
SELECTORS = ('all', 'esfe', 'snr')

CSV_COLUMNS = ('method', 'selector', 'scene', 'target', 'L', 'snr_db', 'rmse_m', 'crlb_m',
    'n_selected', 'evaluations', 'wall_ms', 'seed', 'status')
PROFILE_COLUMNS = ('select_ms', 'ins_ms', 'ins_bd_rho')

ResultRow = namedtuple('ResultRow', CSV_COLUMNS + PROFILE_COLUMNS, defaults=(None, None, None))
EnergyMap = namedtuple('EnergyMap', ('costs', 'near', 'x_centers', 'y_centers'))

# Everything the selectors and localizers need from one synthesized scene
Observation = namedtuple('Observation', ('scene', 'traces', 'energies', 'stats', 'target_energy',
    'profiles', 'ins_ms', 'ins_bd_rho'))


class EmitError(EsfeError):
    '''Raised when results cannot be written.'''
    pass


@dataclass
class ExperimentConfig:
    scene: Scene
    methods: Tuple[str,...] = METHODS
    selectors: Tuple[str,...] = SELECTORS
    snr_list: Tuple[float,...] = (0.0, 5.0, 10.0, 15.0)
    trials: int = 1
    block_size: int = BLOCK_SIZE
    resolution: float = None
    noise_mode: str = 'oracle'
    scales: Tuple[float,...] = DEFAULT_SCALES
    surrogates: int = DEFAULT_SURROGATES
    lsd_weight: float = 1.0
    alpha: float = None
    xi: float = 0.0
    kappa: float = KAPPA
    margin_fraction: float = MARGIN_FRACTION
    min_selected: int = MIN_SELECTED
    coarse: int = COARSE
    fine: int = FINE
    seed: int = None
    profile: bool = False

    def __post_init__(self):
        if self.resolution is None:
            self.resolution = default_resolution(self.scene.v)
        if self.seed is None:
            self.seed = self.scene.seed

    def validate(self):
        if not self.methods or not set(self.methods) <= set(METHODS):
            raise ParameterError(f'methods must be a non-empty subset of {METHODS}, got {self.methods}')
        if not self.selectors or not set(self.selectors) <= set(SELECTORS):
            raise ParameterError(f'selectors must be a non-empty subset of {SELECTORS}, got {self.selectors}')
        if not self.snr_list:
            raise ParameterError('snr_list must not be empty')
        if self.trials < 1:
            raise ParameterError(f'trials must be >= 1, got {self.trials}')
        if self.noise_mode not in ('blind', 'oracle'):
            raise ParameterError(f'noise_mode must be blind or oracle, got {self.noise_mode!r}')
        if not self.resolution > 0:
            raise ParameterError(f'resolution must be positive, got {self.resolution}')

    @property
    def bounds(self) -> Tuple[float,float,float,float]:
        return self.scene.bounds

    @property
    def coarse_cell(self) -> float:
        return self.scene.v / self.coarse


def rmse(estimates: Sequence[Tuple[float,float]], truth: Tuple[float,float]) -> float:
    if len(estimates) == 0:
        raise ParameterError('RMSE of no estimates')

    e = np.asarray(estimates, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum(e ** 2, axis=1))))


def observe(scene: Scene, cfg: ExperimentConfig) -> Observation:
    '''Synthesize the scene and derive the block energies, per-method noise
    statistics and (if ESFE is among the selectors) the INS profiles.'''
    signals = source_signals(scene)
    traces = mix_scene(scene, signals)
    target = scene.target
    M = cfg.block_size

    energies = [block_energies(t, M) for t in traces]
    stats = {}
    for method in cfg.methods:
        if cfg.noise_mode == 'oracle':
            stats[method] = [estimate_noise_stats(u, 'oracle', oracle_series(t, M, target.id, method))
                for u, t in zip(energies, traces)]
        else:
            stats[method] = [estimate_noise_stats(u, 'blind') for u in energies]

    # Source energy at 1 m, per block, over the observation window
    preroll = preroll_samples(scene)
    target_signal = SampledSignal(signals[target.id].samples[preroll:preroll + scene.n_samples], scene.sample_rate)
    target_energy = block_energies(SensorTrace(target.id, target_signal.samples, scene.sample_rate, None), M).block_energies

    profiles = None
    ins_ms = 0.0
    ins_bd_rho = None
    if 'esfe' in cfg.selectors:
        start = time.perf_counter()
        profiles = sensor_profiles(traces, cfg.scales, cfg.surrogates, scene.seed, cfg.lsd_weight)
        ins_ms = (time.perf_counter() - start) * 1000

        if cfg.profile:
            ins_bd_rho = _ins_bd_rho(traces, target_signal, profiles, scene)

    return Observation(scene, traces, energies, stats, target_energy, profiles, ins_ms, ins_bd_rho)


def _ins_bd_rho(traces: Sequence[SensorTrace], target_signal: SampledSignal, profiles, scene: Scene) -> float:
    '''Spearman correlation between INS_max and the Bhattacharyya distance to the
    target, NaN when it is undefined for this scene.'''
    try:
        bd, rho = ins_bd_correlation(traces, target_signal, profiles)
    except EsfeError as e:
        logger.warning('snr=%s seed=%d: INS/B_d correlation failed: %s', scene.snr_db, scene.seed, e)
        return math.nan

    logger.debug('snr=%s seed=%d: INS/B_d Spearman %.3f over %d sensors', scene.snr_db, scene.seed, rho, len(bd))
    return rho


def select(obs: Observation, selector: str, cfg: ExperimentConfig) -> SelectionResult:
    scene = obs.scene

    if selector == 'all':
        return all_selection(scene.sensors, scene.bounds, cfg.resolution)

    if selector == 'esfe':
        return esfe_selection(obs.profiles, scene.sensors, scene.bounds, cfg.resolution, cfg.alpha,
            cfg.kappa, cfg.xi, cfg.margin_fraction, cfg.min_selected)

    if selector == 'snr':
        noise = {t.sensor_id: noise_variance(t, cfg.block_size, cfg.noise_mode, scene.target.id) for t in obs.traces}
        return snr_selection(obs.traces, noise, scene.bounds, cfg.resolution)

    raise ParameterError(f'unknown selector {selector!r}')


def _subset(obs: Observation, method: str, ids: Sequence[str]):
    index = {s.id: i for i, s in enumerate(obs.scene.sensors)}
    chosen = [index[i] for i in ids]
    return ([obs.scene.sensors[i] for i in chosen],
            [obs.energies[i] for i in chosen],
            [obs.stats[method][i] for i in chosen])


def evaluate_row(obs: Observation, method: str, selector: str, cfg: ExperimentConfig) -> ResultRow:
    '''One result row; failures are recorded in the status field.'''
    scene = obs.scene
    target = scene.target
    profile = (None, None, None)
    if cfg.profile:
        if selector == 'esfe':
            profile = (-1.0, round(obs.ins_ms, 3), obs.ins_bd_rho)
        else:
            profile = (-1.0, 0.0, math.nan)

    row = ResultRow(method, selector, scene.name, target.id, scene.L, scene.snr_db,
        -1.0, -1.0, -1, -1, -1.0, scene.seed, 'ok', *profile)

    start = time.perf_counter()
    try:
        sel = select(obs, selector, cfg)
    except EsfeError as e:
        logger.warning('%s/%s snr=%s seed=%d: selection failed: %s', method, selector, scene.snr_db, scene.seed, e)
        return row._replace(status='selection-error')

    select_ms = (time.perf_counter() - start) * 1000
    if cfg.profile:
        row = row._replace(select_ms=round(select_ms, 3))

    sensors, energies, stats = _subset(obs, method, sel.selected_ids)
    row = row._replace(n_selected=len(sensors))

    try:
        zs = normalize_all(energies, stats)
        start = time.perf_counter()
        results = localize_blocks(zs, sel.area, sensors, stats, coarse=cfg.coarse, fine=cfg.fine,
            coarse_cell=cfg.coarse_cell)
        wall_ms = (time.perf_counter() - start) * 1000
    except EsfeError as e:
        logger.warning('%s/%s snr=%s seed=%d: search failed: %s', method, selector, scene.snr_db, scene.seed, e)
        return row._replace(status='search-error')

    row = row._replace(
        rmse_m=rmse([r.position for r in results], target.position),
        evaluations=sum(r.evaluations for r in results),
        wall_ms=round(wall_ms, 3))

    try:
        B = obs.target_energy[obs.target_energy > 0]
        if len(B) == 0:
            raise ParameterError('the target is silent in every block')
        row = row._replace(crlb_m=crlb(target.position, B, sensors, stats))
    except EsfeError as e:
        logger.warning('%s/%s snr=%s seed=%d: CRLB failed: %s', method, selector, scene.snr_db, scene.seed, e)
        return row._replace(status='crlb-error')

    return row


def _failed_rows(scene: Scene, cfg: ExperimentConfig, status: str) -> List[ResultRow]:
    extra = (-1.0, -1.0, math.nan) if cfg.profile else (None, None, None)
    return [ResultRow(m, s, scene.name, scene.target.id, scene.L, scene.snr_db, -1.0, -1.0, -1, -1, -1.0,
        scene.seed, status, *extra) for m in cfg.methods for s in cfg.selectors]


def run_task(task: Tuple[ExperimentConfig,float,int]) -> List[ResultRow]:
    cfg, snr, seed = task
    scene = cfg.scene.replace(snr_db=snr, seed=seed)

    try:
        obs = observe(scene, cfg)
    except EsfeError as e:
        logger.warning('snr=%s seed=%d: scene synthesis failed: %s', snr, seed, e)
        return _failed_rows(scene, cfg, 'scene-error')

    return [evaluate_row(obs, method, selector, cfg) for method in cfg.methods for selector in cfg.selectors]


def run_experiment(config: ExperimentConfig, workers: int = None) -> List[ResultRow]:
    '''Every (method, selector, snr, seed) combination, sorted in that order.
    (snr, seed) tasks run in a process pool of worker_count(workers) processes.
    '''
    config.validate()
    tasks = [(config, float(snr), config.seed + trial) for snr in config.snr_list for trial in range(config.trials)]
    n_workers = min(worker_count(workers), len(tasks))
    rows = []

    logger.info('Running %d scenes (%d rows) on %d worker(s)', len(tasks),
        len(tasks) * len(config.methods) * len(config.selectors), n_workers)

    if n_workers <= 1:
        for i, task in enumerate(tasks, 1):
            rows.extend(run_task(task))
            logger.info('[%d/%d] snr=%s seed=%d done', i, len(tasks), task[1], task[2])
    else:
        with Pool(n_workers) as pool:
            for i, res in enumerate(pool.imap_unordered(run_task, tasks), 1):
                rows.extend(res)
                logger.info('[%d/%d] snr=%s seed=%d done', i, len(tasks), res[0].snr_db, res[0].seed)

    if config.profile:
        logger.info('Resident memory after the sweep: %.0f MiB', cur_memory_usage() / 1024 / 1024)

    rows.sort(key=lambda r: (r.method, r.selector, r.snr_db, r.seed))
    return rows


def energy_map(z: ZVector, sensors, stats: Sequence[NoiseStats], scene_bounds: Tuple[float,float,float,float],
        cell: float) -> EnergyMap:
    '''Localization cost at the center of every cell; rows run along y.
    Cells in the near field of a sensor are flagged in `near` and hold NaN.'''
    if not cell > 0:
        raise ParameterError(f'cell size must be positive, got {cell}')

    x0, x1, y0, y1 = scene_bounds
    nx = max(1, math.ceil((x1 - x0) / cell - 1e-9))
    ny = max(1, math.ceil((y1 - y0) / cell - 1e-9))
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny

    gx, gy = np.meshgrid(xs, ys)
    cost, _, near = evaluate(np.column_stack([gx.ravel(), gy.ravel()]), problem(z, sensors, stats))
    return EnergyMap(cost.reshape(ny, nx), near.reshape(ny, nx), xs, ys)


def _format(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(rows: Sequence[ResultRow], f):
    columns = CSV_COLUMNS
    if rows and rows[0].select_ms is not None:
        columns = CSV_COLUMNS + PROFILE_COLUMNS

    w = csv.writer(f, lineterminator='\n')
    w.writerow(columns)
    for row in rows:
        w.writerow([_format(getattr(row, c)) for c in columns])


def _write_pgm(grid: EnergyMap, f):
    '''Plain PGM, lowest cost white. Near-field cells are black and counted in a
    comment line.'''
    costs = np.asarray(grid.costs, dtype=np.float64)
    near = np.asarray(grid.near, dtype=bool)
    valid = costs[~near]
    ny, nx = costs.shape

    pixels = np.full(costs.shape, 255, dtype=np.int64)
    if len(valid) and valid.max() > valid.min():
        scaled = (np.where(near, valid.max(), costs) - valid.min()) / (valid.max() - valid.min())
        pixels = np.rint(255 * (1 - scaled)).astype(np.int64)
    pixels[near] = 0

    f.write('P2\n')
    f.write(f'# near-field cells: {int(near.sum())}\n')
    f.write(f'{nx} {ny}\n255\n')
    # Image rows run top to bottom, i.e. from the largest y
    for line in pixels[::-1]:
        f.write(' '.join(str(v) for v in line) + '\n')


def emit(data: Union[Sequence[ResultRow],EnergyMap], path: Union[str,Path], fmt: str = 'csv'):
    if fmt not in ('csv', 'pgm'):
        raise ParameterError(f'unknown output format {fmt!r}')

    try:
        with open(path, 'w', newline='') as f:
            if fmt == 'csv':
                _write_csv(data, f)
            else:
                _write_pgm(data, f)
    except OSError as e:
        raise EmitError(f'cannot write {path}: {e}') from e

    logger.debug('Wrote %s', path)


def read_rows(path: Union[str,Path]) -> List[ResultRow]:
    '''Parse a CSV written by emit().'''
    ints = ('L', 'n_selected', 'evaluations', 'seed')
    floats = ('snr_db', 'rmse_m', 'crlb_m', 'wall_ms') + PROFILE_COLUMNS
    rows = []

    with open(path, newline='') as f:
        for record in csv.DictReader(f):
            values = {}
            for key, value in record.items():
                if key in ints:
                    values[key] = int(value)
                elif key in floats:
                    values[key] = float(value)
                else:
                    values[key] = value
            rows.append(ResultRow(**values))

    return rows
