"""Test x0transfer.cli"""

import json

import pytest

from x0transfer.cli import main, make_parser
from x0transfer.io import read_json


@pytest.fixture()
def config_file(tmp_path, run_mapping):
	path = tmp_path / 'run.json'
	path.write_text(json.dumps(run_mapping))
	return path


def run(capsys, *argv):
	code = main(list(argv))
	out, err = capsys.readouterr()
	return code, out, err


def test_parser():
	args = make_parser().parse_args(['transfer', '--lambda', '0.3', '--no-cache', '--end-steps', '8,10', '-v'])
	assert vars(args)['lambda'] == 0.3
	assert args.use_cache is False
	assert args.end_steps == [8, 10]
	assert args.verbose
	assert args.delta is None

	with pytest.raises(SystemExit):
		make_parser().parse_args([])


def test_transfer(capsys, config_file, tmp_path):
	code, out, err = run(capsys, 'transfer', '--config', str(config_file), '-q', '--delta', '0.5')
	assert code == 0
	assert str(tmp_path / 'out' / 'output.png') in out

	manifest = read_json(tmp_path / 'out' / 'manifest.json')
	assert manifest['config']['delta'] == 0.5
	assert manifest['config']['end_step'] == 12


def test_transfer_sweep(capsys, config_file, tmp_path):
	code, out, err = run(capsys, 'transfer', '--config', str(config_file), '-q', '--end-steps', '8 10')
	assert code == 0
	assert (tmp_path / 'out' / 'end_step_08' / 'manifest.json').is_file()
	assert (tmp_path / 'out' / 'end_step_10' / 'manifest.json').is_file()


def test_config_errors(capsys, config_file, tmp_path):
	missing = str(tmp_path / 'missing.png')
	code, out, err = run(capsys, 'transfer', '--config', str(config_file), '-q', '--source', missing)
	assert code == 2
	assert err.startswith('Error:')
	assert missing in err

	code, out, err = run(capsys, 'transfer', '--config', str(tmp_path / 'nothing.json'), '-q')
	assert code == 2

	bad = tmp_path / 'bad.json'
	bad.write_text(json.dumps({'colour': 'red'}))
	code, out, err = run(capsys, 'transfer', '--config', str(bad), '-q')
	assert code == 2
	assert 'colour' in err


def test_invert(capsys, config_file, tmp_path):
	code, out, err = run(capsys, 'invert', '--config', str(config_file), '-q')
	assert code == 0
	assert 'Source trajectory: computed' in out
	rows = [line for line in out.splitlines() if line.split() and line.split()[0].isdigit()]
	assert len(rows) == 25
	assert (tmp_path / 'out' / 'reconstruction.png').is_file()

	code, out, err = run(capsys, 'invert', '--config', str(config_file), '-q')
	assert 'Source trajectory: cache hit' in out

	code, out, err = run(capsys, 'invert', '--config', str(config_file), '-q', '--no-cache')
	assert 'Source trajectory: computed' in out


def test_match_debug(capsys, config_file, tmp_path):
	code, out, err = run(capsys, 'match-debug', '--config', str(config_file), '-q', '--step', '3')
	assert code == 0
	assert (tmp_path / 'out' / 'match_debug' / 'similarity_03.x0ta').is_file()

	code, out, err = run(capsys, 'match-debug', '--config', str(config_file), '-q', '--step', '40')
	assert code == 2


def test_evaluate(capsys, tmp_path, image_files):
	manifest = tmp_path / 'eval.json'
	manifest.write_text(json.dumps([
		{'output': image_files['target'].name, 'prompt': 'a dog', 'source': image_files['source'].name},
	]))
	out_dir = tmp_path / 'report'

	code, out, err = run(capsys, 'evaluate', '--manifest', str(manifest), '--embedder', 'mock',
	                     '--out-dir', str(out_dir), '--csv-only')
	assert code == 0
	assert '1 pairs scored' in out
	assert (out_dir / 'report.csv').is_file()
	assert not (out_dir / 'report.json').exists()

	code, out, err = run(capsys, 'evaluate', '--manifest', str(manifest), '--embedder', 'mock',
	                     '--out-dir', str(out_dir))
	assert read_json(out_dir / 'report.json')['count'] == 1

	manifest.write_text('[]')
	code, out, err = run(capsys, 'evaluate', '--manifest', str(manifest), '--embedder', 'mock',
	                     '--out-dir', str(out_dir))
	assert code == 2
	assert 'empty' in err


def test_cache(capsys, config_file, tmp_path):
	cache_dir = str(tmp_path / 'cache')
	run(capsys, 'transfer', '--config', str(config_file), '-q')

	code, out, err = run(capsys, 'cache', 'list', '--cache-dir', cache_dir)
	assert code == 0
	assert '2 entries' in out
	assert any(line.startswith('source-') for line in out.splitlines())

	code, out, err = run(capsys, 'cache', 'clear', '--cache-dir', cache_dir)
	assert 'Removed 2 entries' in out

	code, out, err = run(capsys, 'cache', 'list', '--cache-dir', cache_dir)
	assert '0 entries' in out


def test_ablation_flags(capsys, config_file, tmp_path):
	args = make_parser().parse_args(['transfer', '--no-semantic-matching', '--no-latent-deviation'])
	assert args.semantic_matching is False
	assert args.latent_deviation is False
	assert make_parser().parse_args(['transfer']).semantic_matching is None

	code, out, err = run(capsys, 'transfer', '--config', str(config_file), '-q', '--no-semantic-matching',
	                     '--no-latent-deviation')
	assert code == 0
	config = read_json(tmp_path / 'out' / 'manifest.json')['config']
	assert config['semantic_matching'] is False
	assert config['latent_deviation'] is False


def test_evaluate_unreadable(capsys, tmp_path, image_files):
	broken = tmp_path / 'broken.png'
	broken.write_bytes(b'not an image')
	manifest = tmp_path / 'eval.json'
	manifest.write_text(json.dumps([
		{'output': broken.name, 'prompt': 'a dog', 'source': image_files['source'].name},
	]))

	code, out, err = run(capsys, 'evaluate', '--manifest', str(manifest), '--embedder', 'mock',
	                     '--out-dir', str(tmp_path / 'report'))
	assert code == 2
	assert 'Error: No manifest entry could be scored' in err
