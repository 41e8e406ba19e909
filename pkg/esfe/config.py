'''Scene and experiment files.

A scene file is TOML:

    name = "park"
    width_m = 20.0
    height_m = 20.0
    speed_of_sound = 343.0      # optional
    sample_rate = 16000         # optional
    duration_s = 3.0            # optional
    snr_db = 0.0                # "inf" for a noiseless scene
    seed = 1

    [[sensors]]
    id = "S0"
    x = 1.0
    y = 2.5
    gain = 1.0

    [[sources]]
    id = "target"
    x = 10.0
    y = 4.0
    role = "target"
    signal = "synth:burst_train:period=0.25,duty=0.5"   # or a WAV path
    level = 1.0

An optional [experiment] table configures `bench run`, see load_experiment().
'''
import math
import logging
import toml
from pathlib import Path
from typing import Any, Dict, Union

from .bench import ExperimentConfig
from .scene import Scene, SensorDef, SourceDef, parse_signal_spec
from .utils import EsfeError, ParameterError

logger = logging.getLogger('config')

EXPERIMENT_KEYS = {
    'methods'        : list,
    'selectors'      : list,
    'snr_list'       : list,
    'trials'         : int,
    'block_size'     : int,
    'resolution'     : float,
    'noise_mode'     : str,
    'scales'         : list,
    'surrogates'     : int,
    'lsd_weight'     : float,
    'alpha'          : float,
    'xi'             : float,
    'kappa'          : float,
    'margin_fraction': float,
    'min_selected'   : int,
    'coarse'         : int,
    'fine'           : int,
    'seed'           : int,
}


class ConfigError(EsfeError):
    '''Raised when a configuration file is missing fields or holds invalid values.'''
    pass


def _require(table: Dict[str,Any], key: str, where: str) -> Any:
    try:
        return table[key]
    except KeyError:
        raise ConfigError(f'{where}: missing field {key!r}') from None


def scene_from_dict(data: Dict[str,Any]) -> Scene:
    try:
        sensors = [
            SensorDef(str(_require(s, 'id', 'sensor')), (float(_require(s, 'x', 'sensor')), float(_require(s, 'y', 'sensor'))),
                float(s.get('gain', 1.0)))
            for s in data.get('sensors', [])
        ]

        sources = []
        for s in data.get('sources', []):
            where = f'source {s.get("id", "?")!r}'
            signal = str(_require(s, 'signal', where))
            parse_signal_spec(signal)
            sources.append(SourceDef(str(_require(s, 'id', 'source')),
                (float(_require(s, 'x', where)), float(_require(s, 'y', where))),
                str(_require(s, 'role', where)), signal, float(s.get('level', 1.0))))

        scene = Scene(
            name=str(_require(data, 'name', 'scene')),
            width=float(_require(data, 'width_m', 'scene')),
            height=float(_require(data, 'height_m', 'scene')),
            sensors=sensors,
            sources=sources,
            snr_db=float(_require(data, 'snr_db', 'scene')),
            seed=int(_require(data, 'seed', 'scene')),
            speed_of_sound=float(data.get('speed_of_sound', 343.0)),
            sample_rate=int(data.get('sample_rate', 16000)),
            duration=float(data.get('duration_s', 3.0)))

    except (TypeError, ValueError, ParameterError) as e:
        raise ConfigError(f'invalid scene description: {e}') from e

    return scene


def scene_to_dict(scene: Scene) -> Dict[str,Any]:
    return {
        'name'          : scene.name,
        'width_m'       : float(scene.width),
        'height_m'      : float(scene.height),
        'speed_of_sound': float(scene.speed_of_sound),
        'sample_rate'   : int(scene.sample_rate),
        'duration_s'    : float(scene.duration),
        'snr_db'        : float(scene.snr_db) if math.isfinite(scene.snr_db) else str(scene.snr_db),
        'seed'          : int(scene.seed),
        'sensors'       : [{'id': s.id, 'x': float(s.position[0]), 'y': float(s.position[1]), 'gain': float(s.gain)} for s in scene.sensors],
        'sources'       : [{'id': s.id, 'x': float(s.position[0]), 'y': float(s.position[1]), 'role': s.role,
                            'signal': s.signal, 'level': float(s.level)} for s in scene.sources],
    }


def _load(path: Union[str,Path]) -> Dict[str,Any]:
    try:
        return toml.load(path)
    except FileNotFoundError:
        raise ConfigError(f'{path}: no such file') from None
    except toml.TomlDecodeError as e:
        raise ConfigError(f'{path}: {e}') from e


def load_scene(path: Union[str,Path]) -> Scene:
    scene = scene_from_dict(_load(path))
    scene.validate()
    logger.debug('Loaded scene %s from %s: %d sensors, %d sources', scene.name, path, scene.L, len(scene.sources))
    return scene


def dump_scene(scene: Scene, path: Union[str,Path], experiment: Dict[str,Any] = None):
    data = scene_to_dict(scene)
    if experiment:
        data['experiment'] = experiment

    with open(path, 'w') as f:
        toml.dump(data, f)


def load_experiment(path: Union[str,Path], **overrides) -> ExperimentConfig:
    '''ExperimentConfig for the scene in `path` from its [experiment] table.
    Keyword arguments that are not None take precedence over the file.
    '''
    data = _load(path)
    scene = scene_from_dict(data)
    table = data.get('experiment', {})

    kwargs = {}
    for key, value in table.items():
        if key not in EXPERIMENT_KEYS:
            raise ConfigError(f'{path}: unknown experiment field {key!r}')

        kind = EXPERIMENT_KEYS[key]
        if kind is list:
            if not isinstance(value, list):
                raise ConfigError(f'{path}: experiment field {key!r} must be a list')
            if key in ('snr_list', 'scales'):
                value = [float(v) for v in value]
            kwargs[key] = tuple(value)
        else:
            try:
                kwargs[key] = kind(value)
            except (TypeError, ValueError):
                raise ConfigError(f'{path}: experiment field {key!r} must be {kind.__name__}') from None

    kwargs.update({k: v for k, v in overrides.items() if v is not None})

    try:
        config = ExperimentConfig(scene=scene, **kwargs)
        config.validate()
    except (TypeError, ParameterError) as e:
        raise ConfigError(f'{path}: {e}') from e

    return config
