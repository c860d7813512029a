import csv
import json
import numpy as np
import common
from common import SeriesWindow, OpenSetSplit, Provenance, UserError
import util

def _parse_header(header, fn):
  if header is None:
    raise UserError('%s is empty' % fn)
  header = [H.strip() for H in header]
  if len(header) < 3 or header[0] != 't' or header[-1] != 'label':
    raise UserError('%s: header must be t,dim_0,...,dim_{D-1},label, got %s' % (fn, ','.join(header)))
  dims = header[1:-1]
  expected = ['dim_%s' % idx for idx in range(len(dims))]
  if dims != expected:
    raise UserError('%s: header must name dimensions %s, got %s' % (fn, ','.join(expected), ','.join(dims)))
  return len(dims)

def load_series_csv(fn):
  '''Returns `(t, series, labels)`, where `series` is T x D.'''
  times = []
  rows = []
  labels = []

  try:
    F = open(fn, newline='')
  except OSError as E:
    raise UserError('Cannot read %s: %s' % (fn, E.strerror))
  with F:
    reader = csv.reader(F)
    D = _parse_header(next(reader, None), fn)
    # Row 1 is the header.
    for rowidx, row in enumerate(reader, start=2):
      if len(row) == 0:
        continue
      if len(row) != D + 2:
        raise UserError('%s row %s: expected %s cells, got %s' % (fn, rowidx, D + 2, len(row)))
      try:
        vals = [float(C) for C in row]
      except ValueError:
        raise UserError('%s row %s: non-numeric cell' % (fn, rowidx))
      if not np.all(np.isfinite(vals)):
        raise UserError('%s row %s: non-finite cell' % (fn, rowidx))
      if vals[-1] not in (0., 1.):
        raise UserError('%s row %s: label must be 0 or 1, got %s' % (fn, rowidx, row[-1]))
      if len(times) > 0 and vals[0] <= times[-1]:
        raise UserError('%s row %s: rows must be ordered by increasing t' % (fn, rowidx))
      times.append(vals[0])
      rows.append(vals[1:-1])
      labels.append(int(vals[-1]))

  if len(rows) == 0:
    raise UserError('%s has no data rows' % fn)
  return (np.array(times), np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64))

def load_csv(fn, dims, length, stride):
  if length < 1 or stride < 1:
    raise UserError('Window length and stride must be positive')
  _, series, labels = load_series_csv(fn)
  T, D = series.shape
  if D != dims:
    raise UserError('%s has %s dimensions, but %s expected' % (fn, D, dims))
  if T < length:
    raise UserError('%s has %s rows, fewer than window length %s' % (fn, T, length))

  values = util.sliding_windows(series, length, stride)
  label_windows = util.sliding_windows(labels[:,None], length, stride)
  windows = []
  for idx in range(len(values)):
    # A window is anomalous iff any timestep inside it is.
    label = int(np.any(label_windows[idx] == 1))
    windows.append(SeriesWindow(
      id = idx,
      values = values[idx].astype(np.float64),
      label = label,
      # CSV labels carry no class, so every anomaly lands in class 0.
      class_id = 0 if label == 1 else None,
      provenance = Provenance.original,
    ))
  return windows

def write_dataset(windows, fn):
  out = {
    'classes': list(common.ANOMALY_CLASSES),
    'windows': [{
      'id': W.id,
      'label': W.label,
      'class_id': W.class_id,
      'provenance': W.provenance,
      'values': W.values,
    } for W in windows],
  }
  with open(fn, 'w') as F:
    json.dump(util.to_jsonable(out), F)
    F.write('\n')

def load_dataset(fn):
  try:
    with open(fn) as F:
      raw = json.load(F)
  except OSError as E:
    raise UserError('Cannot read %s: %s' % (fn, E.strerror))
  except json.JSONDecodeError as E:
    raise UserError('%s is not valid JSON: %s' % (fn, E))

  if 'windows' not in raw:
    raise UserError('%s has no windows' % fn)
  windows = []
  for W in raw['windows']:
    windows.append(SeriesWindow(
      id = int(W['id']),
      values = np.array(W['values'], dtype=np.float64),
      label = int(W['label']),
      class_id = None if W['class_id'] is None else int(W['class_id']),
      provenance = W['provenance'],
    ))
  if len(windows) > 0:
    dims, length = windows[0].values.shape
    for W in windows:
      if W.values.shape != (dims, length):
        raise UserError('%s: window %s has shape %s, expected %s' % (fn, W.id, W.values.shape, (dims, length)))
  common.index_by_id(windows)
  return windows

def write_split(split, fn):
  injected = [W.id for W in split.d_n + split.validation if W.provenance == Provenance.injected]
  out = {
    'setting': split.setting,
    'seen_classes': sorted(split.seen_classes),
    'd_n': common.extract_ids(split.d_n),
    'd_a': common.extract_ids(split.d_a),
    'validation': common.extract_ids(split.validation),
    'test': common.extract_ids(split.test),
    # Validation windows keep their own label; record which ones are
    # injected so the split can be rebuilt exactly.
    'validation_labels': {str(W.id): W.label for W in split.validation},
    'd_n_labels': {str(W.id): W.label for W in split.d_n},
    'injected': sorted(injected),
  }
  with open(fn, 'w') as F:
    json.dump(util.to_jsonable(out), F, indent=2)
    F.write('\n')

def load_split(fn, windows):
  '''Rebuild an `OpenSetSplit` from its id lists and the dataset windows.'''
  try:
    with open(fn) as F:
      raw = json.load(F)
  except OSError as E:
    raise UserError('Cannot read %s: %s' % (fn, E.strerror))

  by_id = common.index_by_id(windows)
  injected = set(raw.get('injected', []))
  def _lookup(ids, labels=None):
    out = []
    for id in ids:
      if id not in by_id:
        raise UserError('%s refers to window %s, absent from the dataset' % (fn, id))
      W = by_id[id]
      if id in injected:
        W = W._replace(provenance=Provenance.injected)
      if labels is not None:
        W = common.relabel(W, labels[str(id)])
      out.append(W)
    return out

  return OpenSetSplit(
    d_n = _lookup(raw['d_n'], raw['d_n_labels']),
    d_a = _lookup(raw['d_a']),
    validation = _lookup(raw['validation'], raw['validation_labels']),
    test = _lookup(raw['test']),
    setting = raw['setting'],
    seen_classes = set(raw['seen_classes']),
  )

def load_params(paramsfn):
  if paramsfn is None:
    return {}
  try:
    with open(paramsfn) as P:
      return json.load(P)
  except OSError as E:
    raise UserError('Cannot read config %s: %s' % (paramsfn, E.strerror))
  except json.JSONDecodeError as E:
    raise UserError('Config %s is not valid JSON: %s' % (paramsfn, E))

def load_config(paramsfn, known_keys):
  '''Read the flat `defaults` section of a run config, rejecting keys not in
  `known_keys`.'''
  params = load_params(paramsfn)
  if not isinstance(params, dict):
    raise UserError('Config %s must be a JSON object' % paramsfn)
  extra = set(params.keys()) - set(('defaults',))
  if len(extra) > 0:
    raise UserError('Config %s has unknown sections: %s' % (paramsfn, ', '.join(sorted(extra))))
  config = params.get('defaults', {})
  unknown = set(config.keys()) - set(known_keys)
  if len(unknown) > 0:
    raise UserError('Config %s has unknown keys: %s' % (paramsfn, ', '.join(sorted(unknown))))
  return dict(config)
