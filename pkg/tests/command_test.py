"""Test commands."""

import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

from wavedistill import __min_python_version__, __project_name__
from wavedistill.cli import first_run, locate_storage_file, python_version_warning, setup_logger_verbose
from wavedistill.command import ExperimentCommand
from wavedistill.config import CommandConfig
from wavedistill.main import Experiment, ablation_variants, sweep_variants
from wavedistill.storage import YamlConfigStorage
from wavedistill.tensor import load

here = Path(__file__).parent
config_dir = here.joinpath('data')
config_file = config_dir.joinpath('config.yaml')


@pytest.fixture(scope='module')
def out_dir(tmp_path_factory):
    """One output directory per module, so teacher, amplifier and datasets are trained once."""
    return tmp_path_factory.mktemp('out')


def prepare_command(out: Path, *args: str) -> ExperimentCommand:
    command_config = CommandConfig(__project_name__, config_dir, config_file, args=[*args, '--out', str(out)])
    return ExperimentCommand(Experiment(command_config, YamlConfigStorage(config_file)))


def read_rows(path: Path):
    with open(path, newline='') as fp:
        return list(csv.DictReader(fp))


def test_python_version_warning(capsys):
    """Test issuance of deprecation warning message when running on minimum version supported."""
    if sys.version_info[0:2] == __min_python_version__:
        with pytest.warns(PendingDeprecationWarning, match='Support for Python'):
            python_version_warning()
        assert capsys.readouterr().out.startswith('WARNING: Support for Python')
    else:
        with warnings.catch_warnings():
            warnings.simplefilter('error')
            python_version_warning()
        assert not capsys.readouterr().out


def test_locate_storage_file(tmp_path):
    tmp_path.joinpath('custom.yaml').write_text('seeds: [0]\n')
    assert locate_storage_file(Path('custom'), tmp_path, '.yaml') == tmp_path.joinpath('custom.yaml')
    assert locate_storage_file(config_file, tmp_path, '.yaml') == config_file
    assert locate_storage_file(Path('missing.yaml'), tmp_path, '.yaml') == Path('missing.yaml')


def test_first_run(capsys, tmp_path):
    """Test creation of the default config file at first run."""
    config_file2 = tmp_path.joinpath('sub', 'config.yaml')
    assert first_run(CommandConfig(__project_name__, tmp_path, config_file2)) is None
    assert config_file2.is_file()
    assert 'Created default config file at ' in capsys.readouterr().out


def test_setup_logger_verbose():
    setup_logger_verbose(logging.INFO)
    package_logger = logging.getLogger(__project_name__)
    assert package_logger.level == logging.INFO
    package_logger.handlers.pop()
    package_logger.setLevel(logging.NOTSET)


def test_show_features(capsys, out_dir):
    command = prepare_command(out_dir, '--features')
    with pytest.raises(SystemExit) as pytest_wrapped_e:
        command.run()
    assert pytest_wrapped_e.value.code == 0
    message = capsys.readouterr().out
    assert '  * haar - Haar, 2 taps' in message
    assert '  * retinanet-dior' in message
    assert '  * stdout - ' in message


def test_gen_data(capsys, out_dir):
    command = prepare_command(out_dir, 'gen-data', '--split', 'val')
    assert command.gen_data() == 0
    assert 'Generated <SceneDataset val of 2 scenes 16x16>' in capsys.readouterr().out
    assert out_dir.joinpath('data', 'val.msgpack').is_file()
    assert not out_dir.joinpath('data', 'train.msgpack').is_file()


def test_train_teacher(out_dir):
    assert prepare_command(out_dir, 'train-teacher').train_teacher() == 0
    assert out_dir.joinpath('checkpoints', 'teacher', 'manifest.json').is_file()
    rows = read_rows(out_dir.joinpath('teacher', 'trace.csv'))
    assert len(rows) == 1 and rows[0]['val_ap50'] != ''
    summary = json.loads(out_dir.joinpath('teacher', 'summary.json').read_text())
    assert summary['spec']['backbone_widths'] == [4, 4, 4]


def test_train_amplifier(capsys, out_dir):
    assert prepare_command(out_dir, 'train-amplifier').train_amplifier() == 0
    assert out_dir.joinpath('checkpoints', 'amplifier-haar', 'manifest.json').is_file()
    assert out_dir.joinpath('amplifier-haar', 'trace.csv').is_file()
    assert 'Trained high-frequency amplifier' in capsys.readouterr().out


def test_distill(out_dir):
    command = prepare_command(out_dir, 'distill', '--dump-features')
    assert command.distill() == 0
    rows = read_rows(out_dir.joinpath('distill.csv'))
    assert [(r['variant'], r['seed'], r['status']) for r in rows] == [('distill', '0', 'ok')]
    run_dir = out_dir.joinpath('runs', 'distill', 'distill', 'seed-0')
    trace = read_rows(run_dir.joinpath('trace.csv'))
    assert all(float(trace[0][term]) > 0 for term in ('ex_low', 'ex_high', 'im_full', 'im_high'))
    features = run_dir.joinpath('features')
    assert load(features.joinpath('teacher_p4.tensor')).shape == (4, 4, 4)
    assert load(features.joinpath('student_p8_high.tensor')).shape == (4, 3, 1, 1)
    assert load(features.joinpath('student_p8_low.tensor')).shape == (4, 1, 1)


def test_distill_reruns_are_bit_identical(tmp_path):
    artifacts = []
    for name in ('first', 'second'):
        out = tmp_path.joinpath(name)
        assert prepare_command(out, 'distill').distill() == 0
        files = (path for path in out.rglob('*') if path.is_file())
        artifacts.append({path.relative_to(out).as_posix(): path.read_bytes() for path in files})
    first, second = artifacts
    assert {'distill.csv', 'distill.json', 'runs/distill/distill/seed-0/trace.csv'} <= set(first)
    assert set(first) == set(second)
    for path in first:
        assert first[path] == second[path], path
    for manifest in ('checkpoints/teacher/manifest.json', 'runs/distill/distill/seed-0/student/manifest.json'):
        assert json.loads(first[manifest])['sha256'] == json.loads(second[manifest])['sha256']


def test_ablate(out_dir):
    assert prepare_command(out_dir, 'ablate').ablate() == 0
    rows = read_rows(out_dir.joinpath('ablation.csv'))
    assert [r['variant'] for r in rows] == [v.name for v in ablation_variants()]
    assert len(rows) == 16
    summary = json.loads(out_dir.joinpath('ablation.json').read_text())
    assert set(summary['mean_final_ap50']) == {v.name for v in ablation_variants()}
    assert summary['variants']['explicit-low-nodisw']['settings'] == {
        'explicit': True,
        'implicit': False,
        'band': 'low',
        'disw': False,
    }


def test_sweep_gamma(out_dir):
    assert prepare_command(out_dir, 'sweep-gamma').sweep_gamma() == 0
    rows = read_rows(out_dir.joinpath('sweep.csv'))
    assert [r['variant'] for r in rows] == [v.name for v in sweep_variants()]
    assert {r['gamma_mode'] for r in rows} == {'spectral', 'stream'}
    summary = json.loads(out_dir.joinpath('sweep.json').read_text())
    assert summary['checks'] == {'gamma-1-identity': True}
    reference = summary['reference']['0']['final_ap50']
    for row in rows:
        if row['gamma'] == '1.0':
            assert float(row['final_ap50']) == reference
            if reference:
                assert float(row['ap50_ratio']) == 1.0


def test_gradcheck(capsys, out_dir):
    assert prepare_command(out_dir, 'gradcheck').gradcheck() == 0
    report = json.loads(out_dir.joinpath('gradcheck.json').read_text())
    assert report['passed'] is True
    assert report['max_error'] <= 1e-5
    assert report['basis'] == 'haar' and report['scene_size'] == 16
    assert {name.split('/')[0] for name in report['max_errors']} == {'detection', 'objective', 'explicit', 'implicit'}
    assert all(np.isfinite(error) and error <= 1e-5 for error in report['oracles'].values())
    assert capsys.readouterr().out.strip().endswith('passed')
