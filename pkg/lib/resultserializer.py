import zipfile
import io
import os
import json
import datetime
import subprocess
import numpy as np

from common import Arch, ModelState, PriorStats, InfluenceEntry, InfluenceReport, TrainedModel, UserError
import util

_PAYLOAD_DTYPE = '<f8'

def write_checkpoint(model, fn):
  '''One JSON header line, then the raw little-endian float64 parameters.'''
  header = {
    'arch': model.arch._asdict(),
    'seed': model.seed,
    'offsets': {K: list(V) for K, V in model.offsets.items()},
    'n_params': len(model.params),
    'dtype': _PAYLOAD_DTYPE,
  }
  with open(fn, 'wb') as F:
    F.write((json.dumps(util.to_jsonable(header)) + '\n').encode('utf-8'))
    F.write(np.asarray(model.params, dtype=_PAYLOAD_DTYPE).tobytes())

def read_checkpoint(fn):
  try:
    with open(fn, 'rb') as F:
      header = json.loads(F.readline().decode('utf-8'))
      payload = F.read()
  except OSError as E:
    raise UserError('Cannot read checkpoint %s: %s' % (fn, E.strerror))
  except (json.JSONDecodeError, UnicodeDecodeError):
    raise UserError('%s is not a model checkpoint' % fn)

  if header.get('dtype') != _PAYLOAD_DTYPE:
    raise UserError('Checkpoint %s has payload type %s, expected %s' % (fn, header.get('dtype'), _PAYLOAD_DTYPE))
  params = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).astype(np.float64)
  if len(params) != header['n_params']:
    raise UserError('Checkpoint %s is truncated: %s of %s parameters present' % (fn, len(params), header['n_params']))
  arch = header['arch']
  arch['dilations'] = tuple(arch['dilations'])
  return ModelState(
    arch = Arch(**arch),
    params = params,
    offsets = {K: tuple(V) for K, V in header['offsets'].items()},
    seed = header['seed'],
  )

class Results:
  # An LZMA-compressed zip archive in which each member is either JSON- or
  # NumPy-encoded. Zip, unlike tar, allows seeking to one member without
  # decompressing the others. Pickle is never used, so archives are safe to
  # exchange.

  def __init__(self, fn):
    self._fn = fn
    self._to_add = {}
    self._compress_type = zipfile.ZIP_LZMA

    if self._file_exists():
      with self._open() as F:
        self._names = set([self._resolve_name(fullname) for fullname in F.namelist()])
    else:
      self._names = set()

  def _resolve_name(self, fullname):
    return fullname.rsplit('.', 1)[0]

  def _file_exists(self):
    return os.path.exists(self._fn)

  def _open(self, mode='r'):
    assert mode in ('r', 'w')
    return zipfile.ZipFile(self._fn, mode, compression=self._compress_type)

  def has(self, name):
    return name in self._names

  def save(self):
    if self._file_exists():
      with self._open() as F:
        for zi in F.infolist():
          name = self._resolve_name(zi.filename)
          if name in self._to_add:
            continue
          with F.open(zi) as G:
            self._to_add[name] = {
              'full_name': zi.filename,
              'bytes': G.read(),
              'timestamp': zi.date_time,
            }

    with self._open('w') as F:
      # Sorted members keep the archive layout independent of insertion order.
      for name in sorted(self._to_add.keys()):
        data = self._to_add[name]
        zi = zipfile.ZipInfo(filename=data['full_name'], date_time=data['timestamp'])
        F.writestr(zi, data['bytes'], compress_type=self._compress_type)
    self._to_add = {}

  def add(self, name, data):
    if isinstance(data, np.ndarray):
      output = io.BytesIO()
      np.save(output, data)
      output = output.getvalue()
      data_type = 'npy'
    else:
      output = (json.dumps(util.to_jsonable(data)) + '\n').encode('utf-8')
      data_type = 'json'

    self._to_add[name] = {
      'full_name': '%s.%s' % (name, data_type),
      # Fixed timestamps make two saves of the same content byte-identical.
      'timestamp': (1980, 1, 1, 0, 0, 0),
      'bytes': output,
    }
    self._names.add(name)

  def _load(self, full_name, data_type, F):
    data = F.read(full_name)
    if data_type == 'npy':
      return np.load(io.BytesIO(data), allow_pickle=False)
    elif data_type == 'json':
      return json.loads(data.decode('utf-8'))
    else:
      raise Exception('Unknown data type: %s' % data_type)

  def get(self, name):
    return self.get_many((name,))[name]

  def get_many(self, names):
    results = {}
    with self._open() as F:
      present = set(F.namelist())
      for name in names:
        for data_type in ('npy', 'json'):
          full_name = '%s.%s' % (name, data_type)
          if full_name in present:
            results[name] = self._load(full_name, data_type, F)
            break
        else:
          raise UserError(f'{name} is not present in {self._fn}')
    return results

def _report_to_json(report):
  return {
    'entries': [E._asdict() for E in report.entries],
    'stest_residual': report.stest_residual,
    'damping': report.damping,
    'validation_size': report.validation_size,
    'flags': report.flags,
  }

def _report_from_json(raw):
  return InfluenceReport(
    entries = [InfluenceEntry(**E) for E in raw['entries']],
    stest_residual = raw['stest_residual'],
    damping = raw['damping'],
    validation_size = raw['validation_size'],
    flags = raw['flags'],
  )

def save_trained(tm, ckpt_fn, archive_fn):
  write_checkpoint(tm.model, ckpt_fn)
  if os.path.exists(archive_fn):
    os.unlink(archive_fn)
  results = Results(archive_fn)
  results.add('ref_feature_mean', np.asarray(tm.ref_feature_mean))
  results.add('pseudo_features', np.asarray(tm.pseudo_features))
  results.add('prior', {
    'mu_r': tm.prior.mu_r,
    'sigma_r': tm.prior.sigma_r,
    'sample_count': tm.prior.sample_count,
    'source_sigma': tm.prior.source_sigma,
  })
  results.add('config', tm.config)
  results.add('audit', _report_to_json(tm.audit))
  results.add('ref_score_stats', tm.ref_score_stats)
  results.add('run_tag', tm.run_tag)
  results.add('summary', tm.summary)
  results.save()

def load_trained(ckpt_fn, archive_fn):
  model = read_checkpoint(ckpt_fn)
  if not os.path.exists(archive_fn):
    raise UserError('Trained-model archive %s does not exist' % archive_fn)
  data = Results(archive_fn).get_many(('ref_feature_mean', 'pseudo_features', 'prior', 'config', 'audit', 'ref_score_stats', 'run_tag', 'summary'))
  prior = data['prior']
  return TrainedModel(
    model = model,
    ref_feature_mean = data['ref_feature_mean'],
    prior = PriorStats(
      mu_r = np.array(prior['mu_r']),
      sigma_r = np.array(prior['sigma_r']),
      sample_count = prior['sample_count'],
      source_sigma = prior['source_sigma'],
    ),
    config = data['config'],
    audit = _report_from_json(data['audit']),
    pseudo_features = data['pseudo_features'],
    ref_score_stats = data['ref_score_stats'],
    run_tag = data['run_tag'],
    summary = data['summary'],
  )

def write_json(obj, fn):
  with open(fn, 'w') as F:
    json.dump(util.to_jsonable(obj), F, indent=2, sort_keys=True)
    F.write('\n')

def version_string():
  here = os.path.dirname(os.path.abspath(__file__))
  try:
    out = subprocess.run(
      ('git', 'describe', '--always', '--dirty', '--tags'),
      cwd = here,
      capture_output = True,
      text = True,
      timeout = 5,
    )
  except (OSError, subprocess.SubprocessError):
    return 'unknown'
  return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else 'unknown'

def write_manifest(outdir, command, config_fn, seed, started_at, artifacts):
  '''Written after every other artifact, so its presence marks a finished run.'''
  manifest = {
    'command': command,
    'config': config_fn,
    'seed': seed,
    'output_dir': os.path.abspath(outdir),
    'started_at': started_at,
    'finished_at': datetime.datetime.now().isoformat(),
    'version': version_string(),
    'artifacts': sorted(artifacts),
  }
  write_json(manifest, os.path.join(outdir, 'manifest.json'))
  return manifest
