import pytest

from esfe.scene import Scene, SensorDef, SourceDef


def make_scene(sensors, sources, width=10.0, height=10.0, snr_db=0.0, seed=1, duration=1.0, name='test'):
    return Scene(name, width, height,
        [SensorDef(f'S{i}', tuple(p), 1.0) for i, p in enumerate(sensors)],
        [SourceDef(sid, tuple(p), role, signal, 1.0) for sid, p, role, signal in sources],
        snr_db, seed, duration=duration)


@pytest.fixture
def square_scene():
    '''Four sensors in a 10 m square, a burst train target and two white noise sources.'''
    return make_scene(
        [(1, 1), (9, 1), (1, 9), (9, 9)],
        [('target', (3, 6), 'target', 'synth:burst_train'),
         ('noise1', (8, 4), 'noise', 'synth:white'),
         ('noise2', (5, 9.5), 'noise', 'synth:white')],
        duration=1.0)
