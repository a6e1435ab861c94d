"""Tests for the vblab command line."""

import json
import math

import pytest

from vblab.cli import EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from vblab.config import CONFIG_ENV, SEED_ENV, reset_config


def run_json(capsys, argv):
    assert main(argv) == EXIT_OK
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def config_file(tmp_path, blob_config):
    path = tmp_path / 'exp.json'
    path.write_text(json.dumps(blob_config))
    return path


class TestTopLevel:
    """Tests for listing options and argument errors."""

    def test_help(self, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(['--help'])
        assert exc_info.value.code == 0
        assert 'analyze' in capsys.readouterr().out

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc_info:
            main(['--version'])
        assert exc_info.value.code == 0
        assert 'vblab' in capsys.readouterr().out

    def test_list_losses(self, capsys):
        assert main(['--list-losses']) == EXIT_OK
        out = capsys.readouterr().out
        assert 'vce' in out and 'combined' in out

    def test_list_presets(self, capsys):
        assert main(['--list-presets']) == EXIT_OK
        assert 'nce+vsl-c100' in capsys.readouterr().out

    def test_init_config(self, tmp_path, monkeypatch):
        target = tmp_path / 'user.toml'
        monkeypatch.setenv(CONFIG_ENV, str(target))
        assert main(['--init-config']) == EXIT_OK
        assert '[run]' in target.read_text()

    def test_missing_command(self):
        with pytest.raises(SystemExit) as exc_info:
            main([])
        assert exc_info.value.code == 2


class TestAnalyze:
    """Tests for the analyze command."""

    def test_vce_ratio(self, capsys):
        report = run_json(capsys, ['analyze', '--loss', 'vce', '--a', '4'])
        assert report['variation_ratio'] == pytest.approx(1.25)
        assert report['grad_abs_min'] == pytest.approx(0.2)
        assert report['method'] == 'closed_form'

    def test_unbounded_prints_inf(self, capsys):
        report = run_json(capsys, ['analyze', '--loss', 'ce'])
        assert report['variation_ratio'] == 'inf'

    def test_numeric_estimator(self, capsys):
        report = run_json(capsys, ['analyze', '--loss', 'vel', '--a', '2',
                                   '--grid-steps', '1000'])
        assert report['variation_ratio'] == pytest.approx(2.0, rel=1e-6)
        assert report['method'] == 'numeric_grid'

    def test_noise_certificate(self, capsys):
        report = run_json(capsys, ['analyze', '--loss', 'mae', '--noise', 'symmetric',
                                   '--eta', '0.8', '--k', '10'])
        assert report['asymmetry_threshold'] == pytest.approx(2.25)
        assert report['certificate'] == 'certified'
        kinds = {b['kind']: b for b in report['bounds']}
        assert kinds['symmetric_noise']['risk_gap_bound'] == pytest.approx(0.0)

    def test_unbounded_loss_skips_bounds(self, capsys):
        report = run_json(capsys, ['analyze', '--loss', 'ce', '--noise', 'asym',
                                   '--eta', '0.2', '--k', '4'])
        assert report['bounds'] == []
        assert report['certificate'] == 'not_certified'

    def test_preset_combined(self, capsys):
        report = run_json(capsys, ['analyze', '--preset', 'nce+vce-c10'])
        assert report['combined']['family'] == 'combined'
        assert report['loss'] == 'VCE(a=4)'

    def test_weights_and_verify(self, capsys):
        report = run_json(capsys, ['analyze', '--loss', 'mae',
                                   '--weights', '0.6,0.4,0', '--verify'])
        assert report['weights_certificate'] == 'certified_by_concavity'
        assert report['bruteforce_argmin'] == [1.0, 0.0, 0.0]

    def test_defect(self, capsys):
        report = run_json(capsys, ['analyze', '--loss', 'vce', '--a', '1', '--k', '3',
                                   '--defect-pairs', '500', '--seed', '3'])
        assert 0.0 <= report['defect'] <= report['defect_bound'] + 1e-9

    def test_curve(self, tmp_path, capsys):
        curve = tmp_path / 'grad.csv'
        run_json(capsys, ['analyze', '--loss', 'vsl', '--a', '0.5',
                          '--curve', str(curve), '--curve-points', '20'])
        assert len(curve.read_text().splitlines()) == 21

    def test_bad_hyperparameter(self, capsys):
        assert main(['analyze', '--loss', 'vel', '--a', '0.5']) == EXIT_USAGE
        assert 'a > 1' in capsys.readouterr().err

    def test_instance_noise_rejected(self, capsys):
        code = main(['analyze', '--loss', 'mae', '--noise', 'instance',
                     '--eta', '0.2', '--k', '3'])
        assert code == EXIT_USAGE
        assert 'corrupt' in capsys.readouterr().err

    def test_needs_loss(self, capsys):
        assert main(['analyze']) == EXIT_USAGE


class TestCorrupt:
    """Tests for the corrupt command."""

    def test_label_file(self, tmp_path, capsys):
        labels = tmp_path / 'labels.txt'
        labels.write_text('\n'.join(str(i % 5) for i in range(20_000)) + '\n')
        out = tmp_path / 'corrupted.csv'
        report = run_json(capsys, ['corrupt', '--kind', 'symmetric', '--eta', '0.3',
                                   '--k', '5', '--seed', '7', '--labels', str(labels),
                                   '--out', str(out), '--stats'])
        band = 4 * math.sqrt(0.3 * 0.7 / 20_000)
        assert abs(report['flip_rate'] - 0.3) <= band
        assert report['n'] == 20_000
        assert report['seed'] == 7
        assert len(report['transition_matrix']) == 5
        assert len(out.read_text().splitlines()) == 20_001

    def test_same_seed_same_output(self, tmp_path, capsys):
        labels = tmp_path / 'labels.txt'
        labels.write_text('0\n1\n2\n' * 100)
        argv = ['corrupt', '--eta', '0.4', '--k', '3', '--seed', '1',
                '--labels', str(labels)]
        assert run_json(capsys, argv) == run_json(capsys, argv)

    def test_dataset_instance_noise(self, tmp_path, capsys):
        data = tmp_path / 'blobs.csv'
        assert main(['dataset', 'gen', '--k', '3', '--per-class', '50', '--d', '4',
                     '--out', str(data), '--seed', '1']) == EXIT_OK
        capsys.readouterr()
        report = run_json(capsys, ['corrupt', '--kind', 'instance', '--eta', '0.2',
                                   '--dataset', str(data), '--stats'])
        assert report['n'] == 150
        assert 'mean_realized_rate' in report

    def test_out_writes_resolved_sidecar(self, tmp_path, capsys):
        labels = tmp_path / 'labels.txt'
        labels.write_text('0\n1\n2\n' * 10)
        out = tmp_path / 'corrupted.csv'
        run_json(capsys, ['corrupt', '--kind', 'asymmetric', '--eta', '0.2', '--k', '3',
                          '--seed', '7', '--jobs', '2', '--labels', str(labels),
                          '--out', str(out)])
        resolved = json.loads((tmp_path / 'corrupted.resolved.json').read_text())
        assert resolved['command'] == 'corrupt'
        assert resolved['noise']['kind'] == 'asymmetric'
        assert resolved['noise']['eta'] == 0.2
        assert resolved['K'] == 3
        assert resolved['seed'] == 7
        assert resolved['jobs'] == 2
        assert resolved['inputs']['labels'] == str(labels)
        assert resolved['inputs']['dataset'] is None

    def test_sidecar_records_environment_seed(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv(SEED_ENV, '31')
        reset_config()
        labels = tmp_path / 'labels.txt'
        labels.write_text('0\n1\n' * 10)
        out = tmp_path / 'noisy.csv'
        report = run_json(capsys, ['corrupt', '--eta', '0.1', '--k', '2',
                                   '--labels', str(labels), '--out', str(out)])
        resolved = json.loads((tmp_path / 'noisy.resolved.json').read_text())
        assert report['seed'] == resolved['seed'] == 31

    def test_no_sidecar_without_out(self, tmp_path, capsys):
        labels = tmp_path / 'labels.txt'
        labels.write_text('0\n1\n')
        run_json(capsys, ['corrupt', '--eta', '0.1', '--k', '2', '--labels', str(labels)])
        assert not list(tmp_path.glob('*.resolved.json'))

    def test_label_file_needs_k(self, tmp_path):
        labels = tmp_path / 'labels.txt'
        labels.write_text('0\n1\n')
        assert main(['corrupt', '--eta', '0.1', '--labels', str(labels)]) == EXIT_USAGE

    def test_missing_file(self, tmp_path, capsys):
        code = main(['corrupt', '--eta', '0.1', '--k', '2',
                     '--labels', str(tmp_path / 'none.txt')])
        assert code == EXIT_USAGE
        assert 'none.txt' in capsys.readouterr().err


class TestDataset:
    """Tests for the dataset command."""

    def test_gen_and_split(self, tmp_path, capsys):
        data = tmp_path / 'blobs.csv'
        summary = run_json(capsys, ['dataset', 'gen', '--k', '4', '--per-class', '10',
                                    '--d', '3', '--out', str(data)])
        assert summary['class_counts'] == [10] * 4
        split = run_json(capsys, ['dataset', 'split', '--dataset', str(data),
                                  '--test-fraction', '0.2', '--standardize',
                                  '--train-out', str(tmp_path / 'train.csv'),
                                  '--test-out', str(tmp_path / 'test.csv')])
        assert split['test']['class_counts'] == [2] * 4
        assert split['train']['n'] == 32

    def test_gen_and_split_sidecars(self, tmp_path, capsys):
        data = tmp_path / 'blobs.csv'
        run_json(capsys, ['dataset', 'gen', '--k', '3', '--per-class', '10', '--d', '2',
                          '--separation', '5', '--seed', '9', '--out', str(data)])
        gen = json.loads((tmp_path / 'blobs.resolved.json').read_text())
        assert gen['command'] == 'dataset gen'
        assert (gen['K'], gen['per_class'], gen['d']) == (3, 10, 2)
        assert gen['separation'] == 5.0
        assert gen['seed'] == 9

        run_json(capsys, ['dataset', 'split', '--dataset', str(data), '--seed', '4',
                          '--train-out', str(tmp_path / 'train.csv'),
                          '--test-out', str(tmp_path / 'test.csv')])
        split = json.loads((tmp_path / 'train.resolved.json').read_text())
        assert split['command'] == 'dataset split'
        assert split['dataset'] == str(data)
        assert split['test_fraction'] == 0.2
        assert split['standardize'] is False
        assert split['seed'] == 4
        assert split['test_out'] == str(tmp_path / 'test.csv')

    def test_missing_flags(self):
        with pytest.raises(SystemExit) as exc_info:
            main(['dataset', 'gen', '--k', '3'])
        assert exc_info.value.code == 2


class TestTrainAndSweep:
    """Tests for the train and sweep commands."""

    def test_train_writes_outputs(self, config_file, capsys):
        report = run_json(capsys, ['train', '--config', str(config_file)])
        outputs = report['outputs']
        assert set(outputs) == {'metrics', 'summary', 'sidecar'}
        metrics = config_file.with_name('exp.metrics.csv')
        assert metrics.read_text().startswith('epoch,train_loss,test_acc,test_ece,lr')
        resolved = json.loads(config_file.with_name('exp.resolved.json').read_text())
        assert resolved['training']['seed'] == 5

    def test_train_is_reproducible(self, config_file, capsys):
        metrics = config_file.with_name('exp.metrics.csv')
        assert main(['train', '--config', str(config_file)]) == EXIT_OK
        first = metrics.read_bytes()
        assert main(['train', '--config', str(config_file)]) == EXIT_OK
        assert metrics.read_bytes() == first

    def test_seed_flag_overrides_file(self, config_file, capsys):
        assert main(['train', '--config', str(config_file), '--seed', '42']) == EXIT_OK
        resolved = json.loads(config_file.with_name('exp.resolved.json').read_text())
        assert resolved['training']['seed'] == 42

    def test_deterministic_flag_is_recorded(self, config_file, capsys):
        resolved_path = config_file.with_name('exp.resolved.json')
        assert main(['train', '--config', str(config_file)]) == EXIT_OK
        assert json.loads(resolved_path.read_text())['training']['deterministic'] is True
        assert main(['train', '--config', str(config_file), '--no-deterministic']) == EXIT_OK
        assert json.loads(resolved_path.read_text())['training']['deterministic'] is False

    def test_deterministic_flags_conflict(self, config_file):
        with pytest.raises(SystemExit):
            main(['train', '--config', str(config_file), '--deterministic',
                  '--no-deterministic'])

    def test_checkpoint(self, config_file, tmp_path, capsys):
        checkpoint = tmp_path / 'model.json'
        report = run_json(capsys, ['train', '--config', str(config_file),
                                   '--checkpoint', str(checkpoint)])
        assert report['outputs']['checkpoint'] == str(checkpoint)
        assert json.loads(checkpoint.read_text())['layer_dims'] == [4, 16, 3]

    def test_missing_config(self, tmp_path, capsys):
        missing = tmp_path / 'absent.json'
        assert main(['train', '--config', str(missing)]) == EXIT_USAGE
        assert 'absent.json' in capsys.readouterr().err

    def test_divergence_exit_code(self, tmp_path, blob_config, capsys):
        blob_config['optimizer'].update(lr=1e300, schedule='constant')
        path = tmp_path / 'wild.json'
        path.write_text(json.dumps(blob_config))
        assert main(['train', '--config', str(path)]) == EXIT_DIVERGED
        assert 'diverged' in capsys.readouterr().err
        assert path.with_name('wild.summary.json').exists()

    def test_sweep_stdout(self, config_file, capsys):
        assert main(['sweep', '--config', str(config_file), '--param', 'loss.a',
                     '--values', '1,4']) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == 'loss.a,seed,best_acc,last_acc,gap'
        assert [line.split(',')[:2] for line in lines[1:]] == [['1.0', '5'], ['4.0', '1005']]

    def test_sweep_file(self, config_file, tmp_path):
        out = tmp_path / 'sweep.csv'
        assert main(['sweep', '--config', str(config_file), '--param', 'noise.eta',
                     '--values', '0.1', '--out', str(out)]) == EXIT_OK
        assert out.read_text().startswith('noise.eta,seed')
        assert (tmp_path / 'sweep.resolved.json').exists()

    def test_sweep_bad_parameter(self, config_file):
        with pytest.raises(SystemExit):
            main(['sweep', '--config', str(config_file), '--param', 'loss.gamma',
                  '--values', '1'])
