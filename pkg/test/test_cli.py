import importlib.machinery
import importlib.util
import json
import os
import time
import numpy as np
import pytest

from conftest import TINY_DATA, TINY_TRAIN

_BIN = os.path.join(os.path.dirname(__file__), '..', 'bin', 'impact')

def _load_cli():
  loader = importlib.machinery.SourceFileLoader('impact_cli', _BIN)
  spec = importlib.util.spec_from_loader('impact_cli', loader)
  mod = importlib.util.module_from_spec(spec)
  loader.exec_module(mod)
  return mod

cli = _load_cli()

def _write_config(path, **overrides):
  defaults = {**TINY_DATA, **TINY_TRAIN, 'n_labeled': 2, 'contamination_rate': 0.05}
  defaults['anomaly_classes'] = list(defaults['anomaly_classes'])
  defaults.update(overrides)
  path.write_text(json.dumps({'defaults': defaults}))
  return str(path)

def _read(path):
  with open(path) as F:
    return json.load(F)

@pytest.fixture(scope='module')
def workdir(tmp_path_factory):
  root = tmp_path_factory.mktemp('cli')
  config = _write_config(root / 'tiny.json')
  data, model = str(root / 'data'), str(root / 'model')
  assert cli.main(['gen-data', '--config', config, '--seed', '0', '--out', data]) == 0
  assert cli.main(['train', '--config', config, '--data', data, '--out', model, '--quiet']) == 0
  return {'root': root, 'config': config, 'data': data, 'model': model}

def test_gen_data_deterministic(tmp_path, workdir):
  A, B = str(tmp_path / 'a'), str(tmp_path / 'b')
  for out in (A, B):
    assert cli.main(['gen-data', '--config', workdir['config'], '--seed', '7', '--out', out]) == 0
  for fn in ('dataset.json', 'split.json'):
    with open(os.path.join(A, fn), 'rb') as F, open(os.path.join(B, fn), 'rb') as G:
      assert F.read() == G.read()
  manifest = _read(os.path.join(A, 'manifest.json'))
  assert manifest['command'] == 'gen-data' and manifest['seed'] == 7
  assert manifest['artifacts'] == ['dataset.json', 'split.json']

def test_missing_config(tmp_path, capsys):
  missing = str(tmp_path / 'nowhere.json')
  assert cli.main(['gen-data', '--config', missing, '--out', str(tmp_path / 'out')]) == 1
  assert missing in capsys.readouterr().err

def test_unknown_config_key(tmp_path, capsys):
  config = _write_config(tmp_path / 'bad.json', wibble=3)
  assert cli.main(['gen-data', '--config', config, '--out', str(tmp_path / 'out')]) == 1
  assert 'wibble' in capsys.readouterr().err

def test_settings_fix_seen_classes(tmp_path, workdir):
  general = _read(os.path.join(workdir['data'], 'split.json'))
  assert len(general['seen_classes']) == 3
  hard = str(tmp_path / 'hard')
  assert cli.main(['gen-data', '--config', workdir['config'], '--setting', 'hard', '--out', hard]) == 0
  assert len(_read(os.path.join(hard, 'split.json'))['seen_classes']) == 1

def test_clean_validation_flag(tmp_path, workdir):
  out = str(tmp_path / 'clean')
  assert cli.main(['gen-data', '--config', workdir['config'], '--clean-validation', '--out', out]) == 0
  split = _read(os.path.join(out, 'split.json'))
  assert not set(split['injected']) & set(split['validation'])

def test_train_report(workdir):
  report = _read(os.path.join(workdir['model'], 'report.json'))
  assert report['run_tag'] == 'impact'
  assert report['config']['k'] == TINY_TRAIN['k']
  assert report['config']['alpha'] == 0.02 and report['config']['lam'] == 1.0
  split = _read(os.path.join(workdir['data'], 'split.json'))
  assert sum(report['partition_counts'].values()) == len(split['d_n']) + len(split['d_a'])
  for fn in ('model.ckpt', 'trained.zip', 'manifest.json'):
    assert os.path.exists(os.path.join(workdir['model'], fn))

def test_train_ablation_tag(tmp_path, workdir):
  out = str(tmp_path / 'noflip')
  assert cli.main(['train', '--config', workdir['config'], '--data', workdir['data'], '--ablate', 'no_flip', '--out', out, '--quiet']) == 0
  assert _read(os.path.join(out, 'report.json'))['run_tag'] == 'impact+no_flip'

def test_train_diverges(tmp_path, workdir, capsys):
  config = _write_config(tmp_path / 'hot.json', learning_rate=1e300)
  out = str(tmp_path / 'hot')
  assert cli.main(['train', '--config', config, '--data', workdir['data'], '--out', out, '--quiet']) == 2
  assert 'numerical failure' in capsys.readouterr().err
  assert not os.path.exists(os.path.join(out, 'manifest.json'))

def test_evaluate(tmp_path, workdir):
  outs = [str(tmp_path / name) for name in ('e1', 'e2')]
  for out in outs:
    assert cli.main(['evaluate', '--model', workdir['model'], '--data', workdir['data'], '--out', out]) == 0
  reports = [_read(os.path.join(out, 'eval.json')) for out in outs]
  assert reports[0] == reports[1]
  assert 0 <= reports[0]['auc_overall'] <= 1
  assert reports[0]['run_tag'] == 'impact'

def test_evaluate_several_seeds(tmp_path, workdir):
  second = str(tmp_path / 'seed1')
  assert cli.main(['train', '--config', workdir['config'], '--data', workdir['data'], '--seed', '1', '--out', second, '--quiet']) == 0
  out = str(tmp_path / 'eval')
  assert cli.main(['evaluate', '--model', workdir['model'], '--model', second, '--data', workdir['data'], '--out', out]) == 0
  table = _read(os.path.join(out, 'eval.json'))
  assert [row['seed'] for row in table['per_seed']] == [0, 1]
  assert os.path.exists(os.path.join(out, 'per_seed.csv'))

def test_audit_influence(tmp_path, workdir):
  out = str(tmp_path / 'audit')
  assert cli.main(['audit-influence', '--model', workdir['model'], '--data', workdir['data'], '--out', out]) == 0
  audit = _read(os.path.join(out, 'audit.json'))
  split = _read(os.path.join(workdir['data'], 'split.json'))
  assert sorted(E['id'] for E in audit) == sorted(split['d_n'] + split['d_a'])
  infl = [E['influence'] for E in audit]
  assert infl == sorted(infl, reverse=True)
  summary = _read(os.path.join(out, 'audit_summary.json'))
  assert summary['n_pool'] == len(split['d_n'])
  assert summary['n_injected'] == len(set(split['injected']) & set(split['d_n']))
  assert summary['stest_residual'] < 1
  if summary['n_injected'] > 0:
    assert 0 <= summary['top_injected_rate'] <= 1
    assert summary['base_rate'] == pytest.approx(summary['n_injected'] / summary['n_pool'])

def test_score(tmp_path, workdir):
  out = str(tmp_path / 'scores')
  dataset = os.path.join(workdir['data'], 'dataset.json')
  assert cli.main(['score', '--model', workdir['model'], '--dataset', dataset, '--out', out]) == 0
  scores = _read(os.path.join(out, 'scores.json'))['scores']
  assert len(scores) == len(_read(dataset)['windows'])

  T = 40
  csvfn = tmp_path / 'series.csv'
  rng = np.random.default_rng(0)
  csvfn.write_text('t,dim_0,label\n' + ''.join('%s,%.5f,0\n' % (t, V) for t, V in enumerate(rng.normal(size=T))))
  out = str(tmp_path / 'points')
  assert cli.main(['score', '--model', workdir['model'], '--csv', str(csvfn), '--out', out]) == 0
  assert len(_read(os.path.join(out, 'point_scores.json'))['point_scores']) == T

  assert cli.main(['score', '--model', workdir['model'], '--out', str(tmp_path / 'neither')]) == 1

@pytest.mark.slow
def test_default_pipeline_is_deterministic_and_fast(tmp_path):
  config = os.path.join(os.path.dirname(__file__), '..', 'example', 'synth_general.json')
  reports = []
  for run in ('first', 'second'):
    root = tmp_path / run
    data, model, out = str(root / 'data'), str(root / 'model'), str(root / 'eval')
    started = time.time()
    assert cli.main(['gen-data', '--config', config, '--out', data]) == 0
    assert cli.main(['train', '--config', config, '--data', data, '--out', model, '--quiet']) == 0
    assert cli.main(['evaluate', '--model', model, '--data', data, '--out', out]) == 0
    assert time.time() - started < 300
    reports.append(_read(os.path.join(out, 'eval.json')))
  assert reports[0] == reports[1]
