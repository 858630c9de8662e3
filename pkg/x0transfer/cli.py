"""Command line interface.

Settings come from command line flags, then an optional JSON config file
(``--config``), then the built-in defaults. Config file keys are the flag names
with dashes replaced by underscores.

Exit codes: 0 on success, 1 if a run failed, 2 on invalid configuration.
"""

import sys
import logging
import argparse
from pathlib import Path
from collections import ChainMap

from . import __version__
from .cache import TrajectoryCache
from .errors import X0TransferError, ConfigError, EvaluationError, StageError
from .evaluation import MockEmbedder, ClipEmbedder, evaluate_directory
from .io import read_json
from .pipeline import RunConfig, TransferPipeline, run_transfer, sweep_end_steps, save_image, DEFAULT_CONFIG


logger = logging.getLogger(__name__)


def _add_run_flags(parser):
	parser.add_argument('--config', type=Path, help='JSON config file.')

	g = parser.add_argument_group('inputs')
	g.add_argument('--source', help='Source image (appearance is changed).')
	g.add_argument('--target', help='Target image (appearance is taken from).')
	g.add_argument('--source-prompt')
	g.add_argument('--target-prompt')
	g.add_argument('--object-word', help='Word of the source prompt naming the object.')
	g.add_argument('--mask', dest='mask_path', help='Mask image to use instead of the attention mask.')

	g = parser.add_argument_group('transfer')
	g.add_argument('--delta', type=float)
	g.add_argument('--lambda', dest='lambda', type=float)
	g.add_argument('--gamma', type=float)
	g.add_argument('--start-step', type=int)
	g.add_argument('--end-step', type=int)
	g.add_argument('--matching', choices=['progressive', 'initial'])
	g.add_argument('--mask-threshold', type=float)
	g.add_argument('--match-threshold', type=float)
	g.add_argument('--no-semantic-matching', dest='semantic_matching', action='store_const', const=False,
	               help='Use the target at the same locations instead of matching.')
	g.add_argument('--no-latent-deviation', dest='latent_deviation', action='store_const', const=False,
	               help='Step with the transferred x0 directly, without blending latents and noise.')

	g = parser.add_argument_group('model')
	g.add_argument('--backend', choices=['mock', 'diffusion'])
	g.add_argument('--model-id')
	g.add_argument('--device')
	g.add_argument('--guidance-scale', type=float)
	g.add_argument('--dift-layer')
	g.add_argument('--dift-timestep', type=int)
	g.add_argument('--attention-resolution', type=int)
	g.add_argument('--num-sample-steps', type=int)
	g.add_argument('--null-text-iterations', type=int)
	g.add_argument('--null-text-learning-rate', type=float)
	g.add_argument('--null-text-epsilon', type=float)
	g.add_argument('--fixed-point-iterations', type=int)

	g = parser.add_argument_group('output')
	g.add_argument('--cache-dir')
	g.add_argument('--no-cache', dest='use_cache', action='store_const', const=False)
	g.add_argument('--out-dir')
	g.add_argument('--seed', type=int)
	g.add_argument('--dump-diagnostics', action='store_const', const=True)
	g.add_argument('--export-mask', action='store_const', const=True)


def _end_steps(value):
	try:
		return [int(v) for v in value.replace(',', ' ').split()]
	except ValueError:
		raise argparse.ArgumentTypeError('Expected a list of integers, got %r' % value) from None


def make_parser():
	common = argparse.ArgumentParser(add_help=False)
	verbosity = common.add_mutually_exclusive_group()
	verbosity.add_argument('-v', '--verbose', action='store_true', help='Log debug messages.')
	verbosity.add_argument('-q', '--quiet', action='store_true', help='Only log warnings and errors.')

	parser = argparse.ArgumentParser(prog='x0transfer', description=__doc__.split('\n')[0])
	parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
	commands = parser.add_subparsers(dest='command', metavar='COMMAND')
	commands.required = True

	p = commands.add_parser('invert', parents=[common], help='Invert and reconstruct the source image.')
	_add_run_flags(p)
	p.set_defaults(func=cmd_invert)

	p = commands.add_parser('transfer', parents=[common], help='Transfer appearance from target to source.')
	_add_run_flags(p)
	p.add_argument('--end-steps', type=_end_steps, help='Sweep over these end steps (comma separated).')
	p.set_defaults(func=cmd_transfer)

	p = commands.add_parser('match-debug', parents=[common], help='Dump the semantic matching of one step.')
	_add_run_flags(p)
	p.add_argument('--step', type=int, help='Sampling step index (default: start step).')
	p.set_defaults(func=cmd_match_debug)

	p = commands.add_parser('evaluate', parents=[common], help='Compute CLIP scores of outputs.')
	p.add_argument('--manifest', type=Path, required=True, help='JSON list of {output, prompt, source}.')
	p.add_argument('--embedder', choices=['mock', 'clip'], default='clip')
	p.add_argument('--clip-model', default='openai/clip-vit-base-patch32')
	p.add_argument('--device')
	p.add_argument('--out-dir', type=Path, default=Path('.'))
	only = p.add_mutually_exclusive_group()
	only.add_argument('--csv-only', action='store_true')
	only.add_argument('--json-only', action='store_true')
	p.set_defaults(func=cmd_evaluate)

	p = commands.add_parser('cache', parents=[common], help='Manage the trajectory cache.')
	p.add_argument('action', choices=['list', 'clear'])
	p.add_argument('--cache-dir')
	p.set_defaults(func=cmd_cache)

	return parser


def load_config(args):
	"""Layer command line flags over the config file.

	Returns
	-------
	.RunConfig

	Raises
	------
	.ConfigError
	"""
	file_config = {}
	if args.config is not None:
		try:
			file_config = read_json(args.config)
		except (OSError, ValueError) as exc:
			raise ConfigError('Cannot read config file %s: %s' % (args.config, exc)) from None
		if not isinstance(file_config, dict):
			raise ConfigError('Config file %s must hold a JSON object' % args.config)

	flags = {k: v for k, v in vars(args).items() if k in DEFAULT_CONFIG and v is not None}
	cfg = RunConfig.from_mapping(ChainMap(flags, file_config))
	logger.debug('Configuration: %r', cfg.to_dict())
	return cfg


def cmd_invert(args):
	cfg = load_config(args)
	cfg.validate(target=False, object_word=False)
	pipeline = TransferPipeline(cfg, progress=not args.quiet)
	image = pipeline.reconstruct()

	cfg.out_dir.mkdir(parents=True, exist_ok=True)
	path = cfg.out_dir / 'reconstruction.png'
	save_image(path, image)

	traj = pipeline.trajectories['source']
	print('Source trajectory: %s' % ('cache hit' if pipeline.cache_hits.get('source') else 'computed'))
	print('%5s %9s %12s' % ('step', 'timestep', 'residual'))
	for i, t in enumerate(traj.timesteps):
		residual = traj.residuals[i] if traj.residuals else float('nan')
		print('%5d %9d %12.3e' % (i, t, residual))
	print('Wrote %s' % path)
	return 0


def cmd_transfer(args):
	cfg = load_config(args)
	progress = not args.quiet

	if args.end_steps:
		for result in sweep_end_steps(cfg, args.end_steps, progress=progress):
			print('Wrote %s' % (result.out_dir / 'output.png'))
	else:
		result = run_transfer(cfg, progress=progress)
		print('Wrote %s' % (result.out_dir / 'output.png'))
	return 0


def cmd_match_debug(args):
	cfg = load_config(args)
	cfg.validate(object_word=False)
	step = cfg.params.start_step if args.step is None else args.step
	pipeline = TransferPipeline(cfg, progress=not args.quiet)
	for path in pipeline.match_debug(step, cfg.out_dir / 'match_debug'):
		print('Wrote %s' % path)
	return 0


def cmd_evaluate(args):
	if args.embedder == 'mock':
		embedder = MockEmbedder()
	else:
		embedder = ClipEmbedder(args.clip_model, args.device)

	report = evaluate_directory(args.manifest, embedder)
	args.out_dir.mkdir(parents=True, exist_ok=True)

	if not args.csv_only:
		report.write_json(args.out_dir / 'report.json')
	if not args.json_only:
		report.write_csv(args.out_dir / 'report.csv')

	print('%d pairs scored, CLIP-T2I %.4f, CLIP-I2I %.4f' % (report.count, report.mean_t2i, report.mean_i2i))
	return 0


def cmd_cache(args):
	cache = TrajectoryCache(args.cache_dir)
	if args.action == 'list':
		keys = list(cache)
		for key in keys:
			print(key.dirname)
		print('%d entries in %s' % (len(keys), cache.cache_dir))
	else:
		n = len(cache)
		cache.clear()
		print('Removed %d entries from %s' % (n, cache.cache_dir))
	return 0


def _exit_code(exc):
	if isinstance(exc, (ConfigError, EvaluationError)):
		return 2
	if isinstance(exc, StageError) and isinstance(exc.cause, ConfigError):
		return 2
	return 1


def main(argv=None):
	"""Run the command line interface.

	Returns
	-------
	int
		Exit code.
	"""
	args = make_parser().parse_args(argv)

	level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
	logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')

	try:
		return args.func(args)
	except X0TransferError as exc:
		print('Error: %s' % exc, file=sys.stderr)
		return _exit_code(exc)
