import sys
import time
import argparse
import logging
import numpy as np
from pathlib import Path

from .bench import ExperimentConfig, observe, select, run_experiment, energy_map, emit
from .config import load_experiment, dump_scene
from .energy import normalize_all
from .localizer import LocalizationResult, multires_search
from .scene import PRESETS, SYNTH_KINDS, load_wav, mix_scene, parse_signal_spec, synth_source, random_scene
from .stationarity import DEFAULT_SCALES, DEFAULT_SURROGATES, ins, sensor_profiles
from .selection import noise_variance, esfe_selection, snr_selection
from .utils import EsfeError


logger = logging.getLogger('main')


def parse_arguments():
    parser = argparse.ArgumentParser(prog='esfe')
    parser.add_argument('-v', '--verbose', action='store_true', help='enable verbose logging')

    sub = parser.add_subparsers(dest='subcommand', required=True)
    ins_ = sub.add_parser('ins', description='Compute the index of non-stationarity of a WAV file or synthetic signal')
    ins_.add_argument('--scales'    , metavar='RATIO', type=float, nargs='+', default=list(DEFAULT_SCALES), help='window lengths as fractions of the signal length')
    ins_.add_argument('--surrogates', metavar='J', type=int, default=DEFAULT_SURROGATES, help=f'number of surrogates (default: {DEFAULT_SURROGATES})')
    ins_.add_argument('--seed'      , metavar='N', type=int, default=0, help='seed for surrogates and synthetic signals')
    ins_.add_argument('--rule'      , choices=('majority', 'every'), default='majority', help='classification rule (default: majority)')
    ins_.add_argument('--lsd-weight', metavar='W', type=float, default=1.0, help='weight of the log-spectral term in the frame distance (0: pure KL)')
    ins_.add_argument('--duration'  , metavar='SECONDS', type=float, default=3.0, help='duration of synthetic signals (default: 3 s)')
    ins_.add_argument('--rate'      , metavar='HZ', type=int, default=16000, help='sample rate of synthetic signals (default: 16000)')
    ins_.add_argument('signal'      , metavar='SIGNAL', help='WAV file path or synth:KIND[:key=value,...]')

    localize = sub.add_parser('localize', description='Localize the target source in every block of a scene')
    localize.add_argument('--config'      , metavar='FILE', required=True, help='scene file (TOML)')
    localize.add_argument('--method'      , choices=('ml', 'hml'), default='hml', help='noise model (default: hml)')
    group = localize.add_mutually_exclusive_group()
    group.add_argument('--esfe'           , dest='selector', action='store_const', const='esfe', help='select sensors and area with ESFE')
    group.add_argument('--snr-select'     , dest='selector', action='store_const', const='snr', help='select sensors by SNR a posteriori')
    group.add_argument('--all-sensors'    , dest='selector', action='store_const', const='all', help='use every sensor (default)')
    localize.add_argument('--noise-mode'  , choices=('oracle', 'blind'), help='noise statistics source (default: oracle)')
    localize.add_argument('--resolution'  , metavar='METERS', type=float, help='target grid resolution (default: largest scene side / 200)')
    localize.add_argument('--alpha'       , metavar='A', type=float, help='ESFE selection threshold (default: computed from the scene)')
    localize.add_argument('--surrogates'  , metavar='J', type=int, help=f'number of surrogates (default: {DEFAULT_SURROGATES})')

    select_ = sub.add_parser('select', description='Select sensors of a scene with ESFE or by SNR a posteriori')
    select_.add_argument('--config'    , metavar='FILE', required=True, help='scene file (TOML)')
    select_.add_argument('--method'    , choices=('esfe', 'snr'), default='esfe', help='selection method (default: esfe)')
    select_.add_argument('--alpha'     , metavar='A', type=float, help='ESFE selection threshold (default: computed from the scene)')
    select_.add_argument('--xi'        , metavar='X', type=float, help='offset added to the computed threshold, within +-0.05')
    select_.add_argument('--noise-mode', choices=('oracle', 'blind'), help='SNR noise estimate (default: oracle)')
    select_.add_argument('--surrogates', metavar='J', type=int, help=f'number of surrogates (default: {DEFAULT_SURROGATES})')
    select_.add_argument('--cache'     , metavar='FILE', help='pickle cache for the per-sensor INS profiles')

    bench = sub.add_parser('bench', description='Run experiments, energy maps and random scenes')
    bench_sub = bench.add_subparsers(dest='bench_command', required=True)

    run = bench_sub.add_parser('run', description='Run the experiment described by a scene file')
    run.add_argument('--config' , metavar='FILE', required=True, help='scene file with an optional [experiment] table')
    run.add_argument('--out'    , metavar='CSV', required=True, help='output CSV file')
    run.add_argument('--trials' , metavar='N', type=int, help='number of seeds per SNR')
    run.add_argument('--seed'   , metavar='S', type=int, help='first seed (default: scene seed)')
    run.add_argument('--workers', metavar='N', type=int, help='worker processes (default: $ESFE_THREADS, 0 = one per core)')
    run.add_argument('--profile', action='store_true', help='add selection and INS timings, the INS/B_d correlation and report memory usage')

    map_ = bench_sub.add_parser('map', description='Write the localization cost over the scene as a PGM image')
    map_.add_argument('--config', metavar='FILE', required=True, help='scene file (TOML)')
    map_.add_argument('--cell'  , metavar='METERS', type=float, default=0.1, help='cell size (default: 0.1 m)')
    map_.add_argument('--method', choices=('ml', 'hml'), default='hml', help='noise model (default: hml)')
    map_.add_argument('--block' , metavar='Q', type=int, help='block to map (default: the loudest target block)')
    map_.add_argument('--out'   , metavar='PGM', required=True, help='output PGM file')

    scene = bench_sub.add_parser('scene', description='Write a scene with randomly placed sensors and sources')
    scene.add_argument('--preset' , choices=tuple(PRESETS), default='park', help='scene area (default: park)')
    scene.add_argument('--sensors', metavar='L', type=int, default=12, help='number of sensors (default: 12)')
    scene.add_argument('--seed'   , metavar='N', type=int, default=0, help='placement and signal seed')
    scene.add_argument('--target' , choices=SYNTH_KINDS, default='burst_train', help='target signal kind (default: burst_train)')
    scene.add_argument('--snr'    , metavar='DB', type=float, default=0.0, help='SNR at 1 m from the target (default: 0 dB)')
    scene.add_argument('--out'    , metavar='TOML', required=True, help='output scene file')

    return parser.parse_args()


def setup_logging(level):
    orig_factory = logging.getLogRecordFactory()

    if sys.stderr.isatty():
        fmt = '%(asctime)s %(color)s[%(levelname)s:%(name)s] %(message)s%(color_reset)s'
        level_colors = {
            logging.CRITICAL: '\x1b[1;31m',
            logging.ERROR   : '\x1b[31m',
            logging.WARNING : '\x1b[33m',
            logging.INFO    : '\x1b[32m',
            logging.DEBUG   : '\x1b[34m',
        }

        def record_factory(*args, **kwargs):
            record = orig_factory(*args, **kwargs)
            lvl = record.levelno
            record.color = level_colors.get(lvl, '')
            record.color_reset = '\x1b[0m'
            record.levelname = 'FATAL' if lvl == logging.CRITICAL else record.levelname
            return record
    else:
        fmt = '%(asctime)s [%(levelname)s:%(name)s] %(message)s'

        def record_factory(*args, **kwargs):
            record = orig_factory(*args, **kwargs)
            record.levelname = 'FATAL' if record.levelno == logging.CRITICAL else record.levelname
            return record

    log = logging.getLogger()
    for h in log.handlers[:]:
        log.removeHandler(h)

    logging.basicConfig(level=level, format=fmt, datefmt='%Y-%m-%d %H:%M:%S')
    logging.setLogRecordFactory(record_factory)


def ins_report(signal_spec, scales, surrogates, seed, rule, lsd_weight, duration, rate):
    spec = parse_signal_spec(signal_spec)
    if spec.kind == 'file':
        signal = load_wav(spec.path)
    else:
        signal = synth_source(spec.kind, duration, rate, seed, spec.params)

    profile = ins(signal, scales, surrogates, seed, lsd_weight, rule)

    print('{:>8s} {:>10s} {:>10s}  {}'.format('Scale', 'INS', 'Threshold', 'Verdict'))
    for scale, value, threshold in zip(profile.scales, profile.ins_values, profile.thresholds):
        verdict = 'nonstationary' if value > threshold else 'stationary'
        print('{:8.3f} {:10.3f} {:10.3f}  {}'.format(scale, value, threshold, verdict))

    print(f'INS_max {profile.ins_max:.3f} {profile.classification}')


def localize_scene(cfg: ExperimentConfig, method: str, selector: str):
    obs = observe(cfg.scene, cfg)
    sel = select(obs, selector, cfg)
    index = {s.id: i for i, s in enumerate(cfg.scene.sensors)}
    chosen = [index[i] for i in sel.selected_ids]

    sensors = [cfg.scene.sensors[i] for i in chosen]
    stats = [obs.stats[method][i] for i in chosen]
    zs = normalize_all([obs.energies[i] for i in chosen], stats)

    logger.info('Localizing %d blocks with %d sensors (%s)', len(zs), len(sensors), ','.join(sel.selected_ids))
    target = cfg.scene.target.position
    errors = []
    start = time.perf_counter()

    print('{:>5s} {:>9s} {:>9s} {:>10s} {:>12s} {:>6s}'.format('Block', 'x', 'y', 'Energy', 'Cost', 'Evals'))
    for q, z in enumerate(zs):
        res: LocalizationResult = multires_search(z, sel.area, sensors, stats, cfg.coarse, cfg.fine, cfg.coarse_cell)
        errors.append(np.hypot(res.position[0] - target[0], res.position[1] - target[1]))
        print('{:5d} {:9.3f} {:9.3f} {:10.4g} {:12.6g} {:6d}'.format(q, *res.position, res.source_energy, res.cost, res.evaluations))

    elapsed = time.perf_counter() - start
    print(f'RMSE {np.sqrt(np.mean(np.square(errors))):.3f} m over {len(zs)} blocks, {elapsed * 1000:.1f} ms')


def select_scene(cfg: ExperimentConfig, method: str, cache):
    scene = cfg.scene
    traces = mix_scene(scene)

    if method == 'esfe':
        profiles = sensor_profiles(traces, cfg.scales, cfg.surrogates, scene.seed, cfg.lsd_weight, cache_fname=cache)
        sel = esfe_selection(profiles, scene.sensors, scene.bounds, cfg.resolution, cfg.alpha,
            cfg.kappa, cfg.xi, cfg.margin_fraction, cfg.min_selected)
        label = 'INS_max'
    else:
        noise = {t.sensor_id: noise_variance(t, cfg.block_size, cfg.noise_mode, scene.target.id) for t in traces}
        sel = snr_selection(traces, noise, scene.bounds, cfg.resolution)
        label = 'SNR_post'

    print('{:10s} {:>12s}  {}'.format('Sensor', label, 'Selected'))
    for sensor_id in sorted(sel.scores):
        print('{:10s} {:12.4f}  {}'.format(sensor_id, sel.scores[sensor_id], '*' if sensor_id in sel.selected_ids else ''))

    if sel.alpha is not None:
        print(f'Threshold alpha {sel.alpha:.3f}')
    print('Selected', ','.join(sel.selected_ids))
    print('Area x [{:.3f}, {:.3f}] y [{:.3f}, {:.3f}]'.format(*sel.area[:4]))


def map_scene(cfg: ExperimentConfig, method: str, block, cell, out):
    obs = observe(cfg.scene, cfg)
    stats = obs.stats[method]
    zs = normalize_all(obs.energies, stats)

    if block is None:
        block = int(np.argmax(obs.target_energy))
    if not 0 <= block < len(zs):
        raise EsfeError(f'block {block} outside [0, {len(zs)})')

    grid = energy_map(zs[block], cfg.scene.sensors, stats, cfg.scene.bounds, cell)
    emit(grid, out, 'pgm')
    print(f'Energy map of block {block} ({grid.costs.shape[1]}x{grid.costs.shape[0]} cells) written to {out}')


def run_bench(cfg: ExperimentConfig, out, workers):
    rows = run_experiment(cfg, workers)
    emit(rows, out, 'csv')

    failed = [r for r in rows if r.status != 'ok']
    print(f'{len(rows)} rows written to {out}, {len(failed)} failed')
    return 2 if failed else 0


def main():
    args = parse_arguments()
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    code = 0

    try:
        if args.subcommand == 'ins':
            ins_report(args.signal, args.scales, args.surrogates, args.seed, args.rule,
                args.lsd_weight, args.duration, args.rate)

        elif args.subcommand == 'localize':
            selector = args.selector or 'all'
            cfg = load_experiment(args.config, methods=(args.method,), selectors=(selector,),
                noise_mode=args.noise_mode, resolution=args.resolution, alpha=args.alpha,
                surrogates=args.surrogates)
            localize_scene(cfg, args.method, selector)

        elif args.subcommand == 'select':
            cfg = load_experiment(args.config, alpha=args.alpha, xi=args.xi,
                noise_mode=args.noise_mode, surrogates=args.surrogates)
            select_scene(cfg, args.method, args.cache)

        elif args.bench_command == 'run':
            cfg = load_experiment(args.config, trials=args.trials, seed=args.seed,
                profile=args.profile or None)
            code = run_bench(cfg, Path(args.out), args.workers)

        elif args.bench_command == 'map':
            cfg = load_experiment(args.config, methods=(args.method,), selectors=('all',))
            map_scene(cfg, args.method, args.block, args.cell, Path(args.out))

        else:
            scene = random_scene(args.preset, args.sensors, args.seed, args.target, snr_db=args.snr)
            dump_scene(scene, args.out)
            print(f'Scene {scene.name} with {scene.L} sensors written to {args.out}')

    except EsfeError as e:
        logger.critical('%s', e)
        sys.exit(1)

    sys.exit(code)


if __name__ == '__main__':
    main()
