import math
import numpy as np
import pytest

from esfe.energy import NoiseStats, ZVector
from esfe.localizer import (SearchArea, SearchFailedError, SingularFisherError, default_resolution, scene_area,
    evaluate, problem, model_vector, score, multires_search, fisher_matrix, crlb, localize_blocks)
from esfe.scene import SensorDef, NearFieldError
from esfe.utils import ParameterError

SENSORS = [SensorDef('S0', (2.0, 2.0), 1.0), SensorDef('S1', (18.0, 3.0), 1.0), SensorDef('S2', (3.0, 17.0), 1.0),
           SensorDef('S3', (17.0, 18.0), 1.0), SensorDef('S4', (10.0, 1.0), 1.0), SensorDef('S5', (1.0, 10.0), 1.0)]
STATS = [NoiseStats(0.0, 1.0, 0.5, 'oracle')] * len(SENSORS)
AREA = SearchArea(0.0, 20.0, 0.0, 20.0, 0.1)


def _observe(position, B, sensors=SENSORS, stats=STATS, noise=None):
    m = model_vector(position, sensors, stats)
    entries = B * m if noise is None else B * m + noise
    return ZVector(entries, [s.id for s in sensors])


def test_search_area():
    area = scene_area((0.0, 7.0, 0.0, 5.0), default_resolution(7.0))
    assert area.width == 7.0 and area.height == 5.0
    assert area.target_resolution == pytest.approx(0.035)

    with pytest.raises(ParameterError):
        SearchArea(1.0, 1.0, 0.0, 1.0, 0.1).validate()
    with pytest.raises(ParameterError):
        SearchArea(0.0, 1.0, 0.0, 1.0, 0.0).validate()


def test_model_vector():
    m = model_vector((2.0, 4.0), SENSORS[:1], [NoiseStats(0.0, 2.0, 0.5, 'oracle')])
    np.testing.assert_allclose(m, [1 / (2.0 * 4.0)])

    with pytest.raises(NearFieldError, match='S0'):
        model_vector((2.05, 2.0), SENSORS, STATS)


def test_score_at_truth():
    z = _observe((9.0, 10.0), 50.0)
    cost, B = score((9.0, 10.0), z, SENSORS, STATS)
    assert cost == pytest.approx(0.0, abs=1e-12)
    assert B == pytest.approx(50.0)

    cost, B = score((4.0, 15.0), z, SENSORS, STATS)
    assert cost > 0


def test_score_near_field():
    z = _observe((9.0, 10.0), 50.0)
    with pytest.raises(NearFieldError, match="'S3'"):
        score((17.0, 17.95), z, SENSORS, STATS)


def test_score_negative_fit_clamps_energy():
    z = ZVector(-np.ones(len(SENSORS)), [s.id for s in SENSORS])
    cost, B = score((9.0, 10.0), z, SENSORS, STATS)
    assert B == 0.0
    assert cost == pytest.approx(len(SENSORS))


def test_problem_sorts_by_id():
    shuffled = [SENSORS[3], SENSORS[0], SENSORS[5], SENSORS[1], SENSORS[4], SENSORS[2]]
    z = _observe((9.0, 10.0), 50.0)
    prob = problem(ZVector(z.entries[[3, 0, 5, 1, 4, 2]], [s.id for s in shuffled]), shuffled, STATS)

    assert prob.ids == ['S0', 'S1', 'S2', 'S3', 'S4', 'S5']
    np.testing.assert_allclose(prob.z, z.entries)


def test_problem_mismatch():
    z = _observe((9.0, 10.0), 50.0)
    with pytest.raises(ParameterError):
        problem(z, SENSORS[:5], STATS[:5])
    with pytest.raises(ParameterError):
        problem(ZVector(z.entries, ['X0', 'S1', 'S2', 'S3', 'S4', 'S5']), SENSORS, STATS)


def test_evaluate_flags_near_field():
    prob = problem(_observe((9.0, 10.0), 50.0), SENSORS, STATS)
    cost, B, near = evaluate(np.array([[2.0, 2.05], [9.0, 10.0]]), prob)

    assert list(near) == [True, False]
    assert math.isnan(cost[0]) and math.isnan(B[0])
    assert cost[1] == pytest.approx(0.0, abs=1e-12)


def test_search_noiseless_recovery():
    z = _observe((9.3, 10.4), 50.0)
    res = multires_search(z, SearchArea(0.0, 20.0, 0.0, 20.0, 0.05), SENSORS, STATS)

    assert math.dist(res.position, (9.3, 10.4)) < 0.1
    assert res.source_energy == pytest.approx(50.0, rel=0.05)


def test_search_evaluation_count():
    res = multires_search(_observe((9.3, 10.4), 50.0), AREA, SENSORS, STATS)
    # Coarse spacing 1.25 m, refined to 0.5, 0.2 and 0.08
    assert res.levels == 4
    assert res.evaluations == 16 * 16 + 3 * 25


def test_search_smaller_area_fewer_evaluations():
    z = _observe((9.3, 10.4), 50.0)
    full = multires_search(z, AREA, SENSORS, STATS, coarse_cell=1.25)
    small = multires_search(z, SearchArea(5.0, 15.0, 5.0, 15.0, 0.1), SENSORS, STATS, coarse_cell=1.25)

    assert small.evaluations < full.evaluations
    assert math.dist(small.position, full.position) < 0.2


def test_search_tie_break():
    z = ZVector(np.zeros(3), ['S0', 'S1', 'S2'])
    sensors = [SensorDef('S0', (9.0, 9.0), 1.0), SensorDef('S1', (9.0, 1.0), 1.0), SensorDef('S2', (1.0, 9.0), 1.0)]
    res = multires_search(z, SearchArea(0.0, 10.0, 0.0, 10.0, 0.5), sensors, STATS[:3])

    assert res.position == pytest.approx((0.3125, 0.3125))
    assert res.cost == 0.0


def test_search_deterministic():
    z = _observe((4.0, 12.0), 20.0, noise=np.random.default_rng(0).standard_normal(len(SENSORS)))
    a = multires_search(z, AREA, SENSORS, STATS)
    b = multires_search(z, AREA, SENSORS, STATS)
    assert a == b


def test_search_sensor_order_irrelevant():
    z = _observe((4.0, 12.0), 20.0, noise=np.random.default_rng(3).standard_normal(len(SENSORS)))
    order = [4, 2, 0, 5, 3, 1]
    shuffled = multires_search(ZVector(z.entries[order], [SENSORS[i].id for i in order]), AREA,
        [SENSORS[i] for i in order], [STATS[i] for i in order])

    assert shuffled == multires_search(z, AREA, SENSORS, STATS)


def test_search_cost_never_increases_with_levels():
    z = _observe((6.3, 13.1), 15.0, noise=np.random.default_rng(5).standard_normal(len(SENSORS)))

    # Spacings run 1.25, 0.5, 0.2, 0.08, 0.032: each search repeats the levels of the previous one
    results = [multires_search(z, AREA._replace(target_resolution=r), SENSORS, STATS)
        for r in (2.0, 1.0, 0.3, 0.1, 0.05)]

    assert [r.levels for r in results] == [1, 2, 3, 4, 5]
    costs = [r.cost for r in results]
    assert all(b <= a for a, b in zip(costs, costs[1:]))


def test_search_errors():
    z = _observe((9.0, 10.0), 50.0)
    with pytest.raises(ParameterError):
        multires_search(ZVector(z.entries[:2], ['S0', 'S1']), AREA, SENSORS[:2], STATS[:2])

    # Every candidate within D_MIN of S0
    with pytest.raises(SearchFailedError):
        multires_search(z, SearchArea(1.95, 2.05, 1.95, 2.05, 0.01), SENSORS, STATS)


def test_localize_blocks():
    zs = [_observe((9.0, 10.0), 50.0), _observe((12.0, 5.0), 50.0)]
    res = localize_blocks(zs, SearchArea(0.0, 20.0, 0.0, 20.0, 0.05), SENSORS, STATS)

    assert len(res) == 2
    assert math.dist(res[0].position, (9.0, 10.0)) < 0.1
    assert math.dist(res[1].position, (12.0, 5.0)) < 0.1


def test_fisher_matches_finite_differences():
    position = (7.0, 11.0)
    B = 30.0
    stats = [NoiseStats(0.0, 0.5 + 0.1 * i, 0.5, 'oracle') for i in range(len(SENSORS))]

    def mu(theta):
        return theta[2] * model_vector((theta[0], theta[1]), SENSORS, stats)

    theta = np.array([position[0], position[1], B])
    h = 1e-5
    J = np.column_stack([(mu(theta + h * e) - mu(theta - h * e)) / (2 * h) for e in np.eye(3)])

    F = fisher_matrix(position, B, SENSORS, stats)
    np.testing.assert_allclose(F, J.T @ J, rtol=1e-4, atol=1e-6 * np.abs(F).max())


def test_crlb_scales_with_energy():
    one = crlb((9.0, 10.0), [1.0], SENSORS, STATS)
    two = crlb((9.0, 10.0), [2.0], SENSORS, STATS)
    assert two == pytest.approx(one / 2)

    # Averaging over blocks of equal energy changes nothing
    assert crlb((9.0, 10.0), [2.0, 2.0, 2.0], SENSORS, STATS) == pytest.approx(two)


def test_crlb_singular():
    collinear = [SensorDef('S0', (1.0, 5.0), 1.0), SensorDef('S1', (3.0, 5.0), 1.0), SensorDef('S2', (7.0, 5.0), 1.0)]
    with pytest.raises(SingularFisherError):
        crlb((5.0, 5.0), [10.0], collinear, STATS[:3])
    with pytest.raises(SingularFisherError):
        crlb((9.0, 10.0), [0.0], SENSORS, STATS)


def test_crlb_errors():
    with pytest.raises(ParameterError):
        crlb((9.0, 10.0), [1.0, 1.0], SENSORS, STATS, Q=3)
    with pytest.raises(NearFieldError):
        crlb((2.0, 2.0), [1.0], SENSORS, STATS)


@pytest.mark.slow
def test_search_error_close_to_crlb():
    truth = (9.0, 10.0)
    B = crlb(truth, [1.0], SENSORS, STATS) / 0.3
    bound = crlb(truth, [B], SENSORS, STATS)
    rng = np.random.default_rng(42)

    errors = []
    for _ in range(200):
        z = _observe(truth, B, noise=rng.standard_normal(len(SENSORS)))
        res = multires_search(z, SearchArea(0.0, 20.0, 0.0, 20.0, 0.05), SENSORS, STATS)
        errors.append(math.dist(res.position, truth) ** 2)

    ratio = math.sqrt(np.mean(errors)) / bound
    assert 0.8 <= ratio <= 10


@pytest.mark.parametrize('side, resolution', [(20.0, 0.1), (7.0, 0.035)])
def test_noiseless_lattice(side, resolution):
    corners = [0.1 * side, 0.9 * side]
    sensors = [SensorDef(f'S{i}', (x, y), 1.0) for i, (x, y) in enumerate((x, y) for x in corners for y in corners)]
    stats = [NoiseStats(0.0, 1.0, 0.5, 'oracle')] * 4
    area = SearchArea(0.0, side, 0.0, side, resolution)

    for fx in (0.25, 0.5, 0.75):
        for fy in (0.3, 0.5, 0.7):
            truth = (fx * side, fy * side)
            res = multires_search(_observe(truth, 100.0, sensors, stats), area, sensors, stats)
            assert math.dist(res.position, truth) <= resolution * math.sqrt(2)


def test_fisher_random_geometries():
    rng = np.random.default_rng(7)
    h = 1e-6

    for _ in range(10):
        sensors = [SensorDef(f'S{i}', tuple(rng.uniform(0, 20, 2)), float(rng.uniform(0.5, 2))) for i in range(6)]
        stats = [NoiseStats(0.0, float(rng.uniform(0.5, 2)), 0.5, 'oracle') for _ in sensors]
        while True:
            position = tuple(rng.uniform(0, 20, 2))
            if all(math.dist(position, s.position) > 1.0 for s in sensors):
                break
        theta = np.array([*position, float(rng.uniform(10, 100))])

        def mu(t):
            return t[2] * model_vector((t[0], t[1]), sensors, stats)

        J = np.column_stack([(mu(theta + h * e) - mu(theta - h * e)) / (2 * h) for e in np.eye(3)])
        F = fisher_matrix(position, theta[2], sensors, stats)
        np.testing.assert_allclose(F, J.T @ J, rtol=1e-4, atol=1e-6 * np.abs(F).max())


def test_crlb_doubles_with_noise_deviation():
    doubled = [NoiseStats(0.0, 2.0, 0.5, 'oracle')] * len(SENSORS)
    assert crlb((9.0, 10.0), [30.0], SENSORS, doubled) == pytest.approx(2 * crlb((9.0, 10.0), [30.0], SENSORS, STATS), rel=1e-12)
