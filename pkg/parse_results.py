#!/usr/bin/env python3
#
# Parse a results CSV written by "bench run" and report interesting statistics.
#

import sys
import csv
from pathlib import Path
from statistics import median
from collections import defaultdict

if len(sys.argv) != 2:
	sys.exit(f'Usage: {sys.argv[0]} RESULTS_CSV')

res_file = Path(sys.argv[1])

class Res:
	method: str
	selector: str
	snr: float
	rmse: float
	crlb: float
	n_selected: int
	evaluations: int
	wall_ms: float
	status: str
	rho: float
	__slots__ = (
		'method',
		'selector',
		'snr',
		'rmse',
		'crlb',
		'n_selected',
		'evaluations',
		'wall_ms',
		'status',
		'rho',
	)

rows = []

with res_file.open(newline='') as f:
	for record in csv.DictReader(f):
		cur = Res()
		cur.method      = record['method']
		cur.selector    = record['selector']
		cur.snr         = float(record['snr_db'])
		cur.rmse        = float(record['rmse_m'])
		cur.crlb        = float(record['crlb_m'])
		cur.n_selected  = int(record['n_selected'])
		cur.evaluations = int(record['evaluations'])
		cur.wall_ms     = float(record['wall_ms'])
		cur.status      = record['status']
		cur.rho         = float(record.get('ins_bd_rho') or 'nan')
		rows.append(cur)

if not rows:
	print('Nothing to do here...')
	sys.exit(0)

total   = len(rows)
ok      = [r for r in rows if r.status == 'ok']
failed  = defaultdict(int) # failure status -> count

for r in rows:
	if r.status != 'ok':
		failed[r.status] += 1

print(f'''\
Total rows            {total}
  Ok                  {len(ok)} ({len(ok) / total:.2%})
  Failed              {total - len(ok)} ({(total - len(ok)) / total:.2%})''')

for status, count in sorted(failed.items()):
	print(f'    {status:18s}{count}')

# Median RMSE and CRLB per (method, selector, snr)
groups = defaultdict(list)
for r in ok:
	groups[r.method, r.selector, r.snr].append(r)

print()
print('{:8s} {:8s} {:>7s} {:>6s} {:>10s} {:>10s} {:>9s} {:>11s}'.format(
	'Method', 'Selector', 'SNR', 'Runs', 'RMSE (m)', 'CRLB (m)', 'Sensors', 'Evaluations'))

for (method, selector, snr), subset in sorted(groups.items()):
	print('{:8s} {:8s} {:7.1f} {:6d} {:10.3f} {:10.3f} {:9.1f} {:11.0f}'.format(
		method, selector, snr, len(subset),
		median(r.rmse for r in subset),
		median(r.crlb for r in subset),
		sum(r.n_selected for r in subset) / len(subset),
		sum(r.evaluations for r in subset) / len(subset)))

# Mean localization time per (method, selector), normalized to ESFE
times = defaultdict(list)
for r in ok:
	times[r.method, r.selector].append(r.wall_ms)

print()
print('{:8s} {:8s} {:>12s} {:>11s}'.format('Method', 'Selector', 'Time (ms)', 'Normalized'))

for (method, selector), subset in sorted(times.items()):
	mean = sum(subset) / len(subset)
	ref = times.get((method, 'esfe'))
	if ref:
		norm = f'{mean / (sum(ref) / len(ref)):11.2f}'
	else:
		norm = f'{"-":>11s}'
	print(f'{method:8s} {selector:8s} {mean:12.2f} {norm}')

# INS_max against the Bhattacharyya distance to the target (bench run --profile)
rhos = defaultdict(list)
for r in ok:
	if r.selector == 'esfe' and r.rho == r.rho:
		rhos[r.snr].append(r.rho)

if rhos:
	print()
	print('{:>7s} {:>6s} {:>16s} {:>12s}'.format('SNR', 'Runs', 'Median Spearman', 'rho <= -0.5'))
	for snr, subset in sorted(rhos.items()):
		strong = sum(1 for rho in subset if rho <= -0.5)
		print(f'{snr:7.1f} {len(subset):6d} {median(subset):16.3f} {strong / len(subset):12.2%}')
