import os
import pickle
import logging
import psutil
from pathlib import Path
from typing import Union, Any, Tuple

logger = logging.getLogger('utils')

# Closest a source may get to a sensor (meters), below which 1/d blows up
D_MIN = 0.1


class EsfeError(Exception):
    '''Base class for all errors raised by this package.'''
    pass


class ParameterError(EsfeError):
    '''Raised when a function is called with parameters outside its domain.'''
    pass


def distance(a: Tuple[float,float], b: Tuple[float,float]) -> float:
    return float(((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2) ** 0.5)


def save_object(obj: Any, fname: Union[Path,str]):
    with open(fname, 'wb') as f:
        pickle.dump(obj, f)


def restore_object(fname: Union[Path,str]) -> Any:
    try:
        with open(fname, 'rb') as f:
            return pickle.load(f)
    except FileNotFoundError:
        return None
    except EOFError:
        return None


def cur_memory_usage(pid: int=0):
    if pid == 0:
        pid = os.getpid()
    return psutil.Process(pid).memory_info().rss


def worker_count(requested: int = None) -> int:
    '''Number of worker processes to use: the explicit request if any, else the
    ESFE_THREADS environment variable, where 0 (or unset) means one per physical
    core.
    '''
    if requested is None:
        env = os.environ.get('ESFE_THREADS', '0').strip() or '0'
        try:
            requested = int(env)
        except ValueError:
            logger.warning('Ignoring invalid ESFE_THREADS=%r', env)
            requested = 0

    if requested < 0:
        raise ParameterError(f'worker count must be >= 0, got {requested}')

    if requested == 0:
        requested = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1

    return requested
