'''Single-target maximum-likelihood localization from normalized block energies
and the Cramer-Rao lower bound on its position error.

The cost of a candidate position is the least-squares residual of the energy
model z = B * m(p), with m_i = g_i / (sigma_i * d_i^2); the source energy B has a
closed-form estimate for every candidate, so the search is over position only.
'''
import math
import logging
import numpy as np
from collections import namedtuple
from typing import List, Sequence, Tuple

from .energy import NoiseStats, ZVector
from .scene import SensorDef, NearFieldError
from .utils import EsfeError, ParameterError, D_MIN

logger = logging.getLogger('localizer')

COARSE = 16
FINE = 5
TIE_TOLERANCE = 1e-12
MAX_CONDITION = 1e12

LocalizationResult = namedtuple('LocalizationResult', ('position', 'source_energy', 'cost', 'evaluations', 'levels'))

# Sensor geometry, noise deviations and observations, sorted by sensor id
Problem = namedtuple('Problem', ('ids', 'positions', 'gains', 'sigmas', 'z'))


class SearchArea(namedtuple('SearchArea', ('x_min', 'x_max', 'y_min', 'y_max', 'target_resolution'))):
    __slots__ = ()

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def validate(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ParameterError(f'empty search area {tuple(self)}')
        if not self.target_resolution > 0:
            raise ParameterError(f'target resolution must be positive, got {self.target_resolution}')


class SearchFailedError(EsfeError):
    '''Raised when every candidate of the coarse grid is in the near field of a sensor.'''
    pass


class SingularFisherError(EsfeError):
    '''Raised when the Fisher information matrix cannot be inverted.'''
    pass


def default_resolution(v: float) -> float:
    '''Grid resolution for a scene whose largest dimension is v meters.'''
    return v / 200


def scene_area(bounds: Tuple[float,float,float,float], resolution: float) -> SearchArea:
    return SearchArea(*bounds, resolution)


def problem(z: ZVector, sensors: Sequence[SensorDef], stats: Sequence[NoiseStats]) -> Problem:
    '''Align z with the sensors by id and sort everything by sensor id.'''
    if not (len(z.entries) == len(sensors) == len(stats)):
        raise ParameterError(f'{len(z.entries)} observations, {len(sensors)} sensors, {len(stats)} noise statistics')

    observed = dict(zip(z.sensor_ids, z.entries))
    if set(observed) != {s.id for s in sensors}:
        raise ParameterError('observation sensor ids do not match the sensors')

    order = sorted(range(len(sensors)), key=lambda i: sensors[i].id)
    for i in order:
        if not stats[i].std > 0:
            raise ParameterError(f'sensor {sensors[i].id!r}: noise deviation must be positive')

    return Problem(
        [sensors[i].id for i in order],
        np.array([sensors[i].position for i in order], dtype=np.float64),
        np.array([sensors[i].gain for i in order], dtype=np.float64),
        np.array([stats[i].std for i in order], dtype=np.float64),
        np.array([observed[sensors[i].id] for i in order], dtype=np.float64))


def evaluate(points: np.ndarray, prob: Problem) -> Tuple[np.ndarray,np.ndarray,np.ndarray]:
    '''Cost and fitted source energy at every point (k x 2). Points in the near
    field of a sensor are flagged in the returned mask and carry NaN.'''
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = np.sqrt(np.sum((points[:, None, :] - prob.positions[None, :, :]) ** 2, axis=-1))
    near = np.any(d < D_MIN, axis=1)

    with np.errstate(divide='ignore', invalid='ignore'):
        m = prob.gains / (prob.sigmas * d ** 2)
        B = np.maximum(0.0, m @ prob.z / np.sum(m * m, axis=1))
        cost = np.sum((prob.z[None, :] - B[:, None] * m) ** 2, axis=1)

    cost[near] = np.nan
    B[near] = np.nan
    return cost, B, near


def model_vector(candidate: Tuple[float,float], sensors: Sequence[SensorDef], stats: Sequence[NoiseStats]) -> np.ndarray:
    '''m_i = g_i / (sigma_i * d_i^2), in the order of `sensors`.'''
    if len(sensors) != len(stats):
        raise ParameterError(f'{len(sensors)} sensors but {len(stats)} noise statistics')

    m = []
    for sensor, st in zip(sensors, stats):
        d = math.hypot(candidate[0] - sensor.position[0], candidate[1] - sensor.position[1])
        if d < D_MIN:
            raise NearFieldError(f'candidate {tuple(candidate)} is {d:.3f} m from sensor {sensor.id!r}')
        m.append(sensor.gain / (st.std * d ** 2))

    return np.array(m)


def score(candidate: Tuple[float,float], z: ZVector, sensors: Sequence[SensorDef], stats: Sequence[NoiseStats]) -> Tuple[float,float]:
    '''(cost, B) at a candidate position; B is the non-negative least-squares
    source energy.'''
    prob = problem(z, sensors, stats)
    cost, B, near = evaluate([candidate], prob)
    if near[0]:
        d = np.hypot(prob.positions[:, 0] - candidate[0], prob.positions[:, 1] - candidate[1])
        i = int(np.argmin(d))
        raise NearFieldError(f'candidate {tuple(candidate)} is {d[i]:.3f} m from sensor {prob.ids[i]!r}')
    return float(cost[0]), float(B[0])


def _best(points: np.ndarray, cost: np.ndarray, near: np.ndarray):
    '''Index of the minimum cost; ties go to the smaller x, then the smaller y.'''
    valid = np.flatnonzero(~near)
    if len(valid) == 0:
        return None

    cmin = np.min(cost[valid])
    tied = valid[cost[valid] <= cmin + TIE_TOLERANCE * max(cmin, 1.0)]
    return tied[np.lexsort((points[tied, 1], points[tied, 0]))[0]]


def _grid(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    gx, gy = np.meshgrid(xs, ys, indexing='ij')
    return np.column_stack([gx.ravel(), gy.ravel()])


def multires_search(z: ZVector, area: SearchArea, sensors: Sequence[SensorDef], stats: Sequence[NoiseStats],
        coarse: int = COARSE, fine: int = FINE, coarse_cell: float = None) -> LocalizationResult:
    '''Coarse-to-fine grid minimization of the cost over `area`.

    Level 0 scores the centers of a coarse x coarse grid (or of square-ish cells
    of side `coarse_cell`). Every further level scores a fine x fine grid spanning
    one parent cell on each side of the incumbent, until the cell spacing is at
    most area.target_resolution.
    '''
    area.validate()
    if len(sensors) < 3:
        raise ParameterError(f'localization needs at least 3 sensors, got {len(sensors)}')
    if coarse < 1 or fine < 2:
        raise ParameterError(f'grid sizes must be coarse >= 1 and fine >= 2, got {coarse} and {fine}')

    prob = problem(z, sensors, stats)

    if coarse_cell is None:
        nx = ny = coarse
    else:
        nx = max(1, math.ceil(area.width / coarse_cell - 1e-9))
        ny = max(1, math.ceil(area.height / coarse_cell - 1e-9))
    dx = area.width / nx
    dy = area.height / ny

    points = _grid(area.x_min + (np.arange(nx) + 0.5) * dx, area.y_min + (np.arange(ny) + 0.5) * dy)
    cost, B, near = evaluate(points, prob)
    evaluations = len(points)

    i = _best(points, cost, near)
    if i is None:
        raise SearchFailedError(f'every coarse candidate in {tuple(area)[:4]} is within {D_MIN} m of a sensor')

    best = (points[i], float(cost[i]), float(B[i]))
    levels = 1
    offsets = np.arange(fine) - (fine - 1) / 2

    while max(dx, dy) > area.target_resolution:
        dx *= 2 / fine
        dy *= 2 / fine
        points = _grid(best[0][0] + offsets * dx, best[0][1] + offsets * dy)
        inside = ((points[:, 0] >= area.x_min) & (points[:, 0] <= area.x_max) &
                  (points[:, 1] >= area.y_min) & (points[:, 1] <= area.y_max))
        points = points[inside]

        cost, B, near = evaluate(points, prob)
        evaluations += len(points)
        levels += 1

        i = _best(points, cost, near)
        if i is not None and cost[i] < best[1] - TIE_TOLERANCE * max(best[1], 1.0):
            best = (points[i], float(cost[i]), float(B[i]))

        logger.debug('Level %d: spacing %.4g x %.4g, incumbent (%.4f, %.4f) cost %.6g',
            levels, dx, dy, best[0][0], best[0][1], best[1])

    return LocalizationResult((float(best[0][0]), float(best[0][1])), best[2], best[1], evaluations, levels)


def fisher_matrix(position: Tuple[float,float], B: float, sensors: Sequence[SensorDef], stats: Sequence[NoiseStats]) -> np.ndarray:
    '''Fisher information of (x, y, B) for one block of unit-variance normalized
    energies: J^T J, where row i of J is g_i / sigma_i times the gradient of
    B / d_i^2.'''
    if len(sensors) != len(stats):
        raise ParameterError(f'{len(sensors)} sensors but {len(stats)} noise statistics')

    rho = np.asarray(position, dtype=np.float64)
    r = np.array([s.position for s in sensors], dtype=np.float64)
    d = np.sqrt(np.sum((rho - r) ** 2, axis=1))

    if np.any(d < D_MIN):
        raise NearFieldError(f'position {tuple(position)} is within {D_MIN} m of sensor {sensors[int(np.argmin(d))].id!r}')

    C = -2 * B * (rho - r) / d[:, None] ** 4
    D = 1 / d ** 2
    G = np.array([s.gain for s in sensors]) / np.array([st.std for st in stats])
    J = G[:, None] * np.column_stack([C, D])
    return J.T @ J


def crlb(true_position: Tuple[float,float], true_B_per_block: Sequence[float], sensors: Sequence[SensorDef],
        stats: Sequence[NoiseStats], Q: int = None) -> float:
    '''Root of the block-averaged position variance bound [F^-1]_xx + [F^-1]_yy.'''
    B = np.asarray(true_B_per_block, dtype=np.float64)
    if Q is None:
        Q = len(B)
    if Q < 1 or len(B) != Q:
        raise ParameterError(f'{len(B)} block energies for Q={Q} blocks')

    total = 0.0
    for q, b in enumerate(B):
        F = fisher_matrix(true_position, b, sensors, stats)
        if not np.all(np.isfinite(F)) or np.linalg.cond(F) > MAX_CONDITION:
            raise SingularFisherError(f'Fisher matrix of block {q} (B={b:.3g}) is singular')
        Finv = np.linalg.inv(F)
        total += Finv[0, 0] + Finv[1, 1]

    return math.sqrt(total / Q)


def localize_blocks(zs: Sequence[ZVector], area: SearchArea, sensors: Sequence[SensorDef], stats: Sequence[NoiseStats],
        **kwargs) -> List[LocalizationResult]:
    '''One independent search per block.'''
    res = []
    for q, z in enumerate(zs):
        res.append(multires_search(z, area, sensors, stats, **kwargs))
        logger.debug('Block %d: (%.3f, %.3f)', q, *res[-1].position)
    return res
