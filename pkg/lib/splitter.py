import logging
import numpy as np
from sklearn.model_selection import train_test_split

import common
from common import OpenSetSplit, Provenance, Settings, UserError
import util

logger = logging.getLogger(__name__)

DEFAULTS = {
  'setting': Settings.general,
  'n_labeled': 10,
  'contamination_rate': 0.02,
  'val_fraction': 0.2,
  'test_fraction': 0.3,
  'clean_validation': False,
}

def _check_args(setting, n_labeled, contamination_rate, val_fraction, test_fraction):
  if setting not in Settings:
    raise UserError('Unknown setting %s (expected one of %s)' % (setting, ', '.join(Settings)))
  if n_labeled < 1:
    raise UserError('n_labeled must be at least 1, got %s' % n_labeled)
  if not (0 <= contamination_rate <= 0.1):
    raise UserError('contamination_rate must lie in [0, 0.1], got %s' % contamination_rate)
  if not (0 < val_fraction < 0.5):
    raise UserError('val_fraction must lie in (0, 0.5), got %s' % val_fraction)
  if not (0 < test_fraction < 1):
    raise UserError('test_fraction must lie in (0, 1), got %s' % test_fraction)

def _split_seed(rng):
  return int(rng.integers(2**31 - 1))

def _inject(windows):
  return [W._replace(label=0, provenance=Provenance.injected) for W in windows]

def _by_id(windows):
  return sorted(windows, key=lambda W: W.id)

def make_openset_split(
  dataset,
  setting = DEFAULTS['setting'],
  n_labeled = DEFAULTS['n_labeled'],
  contamination_rate = DEFAULTS['contamination_rate'],
  val_fraction = DEFAULTS['val_fraction'],
  seed = 0,
  test_fraction = DEFAULTS['test_fraction'],
  clean_validation = DEFAULTS['clean_validation'],
):
  _check_args(setting, n_labeled, contamination_rate, val_fraction, test_fraction)
  rng = util.make_rng(seed)

  normals = _by_id([W for W in dataset if W.label == 0])
  anomalies = _by_id([W for W in dataset if W.label == 1])
  classes = sorted(set(W.class_id for W in anomalies))
  if len(normals) < 2:
    raise UserError('Dataset has %s normal windows; at least 2 are needed' % len(normals))
  if setting == Settings.hard and len(classes) < 2:
    raise UserError('The hard setting needs at least 2 anomaly classes, but the dataset has %s' % len(classes))
  if len(classes) == 0:
    raise UserError('Dataset has no anomalies')

  # Shuffle each class once; every later draw takes from the front.
  pools = {}
  for C in classes:
    members = [W for W in anomalies if W.class_id == C]
    pools[C] = [members[idx] for idx in rng.permutation(len(members))]

  if setting == Settings.hard:
    seen_classes = set([classes[rng.integers(len(classes))]])
  else:
    seen_classes = set(classes)

  try:
    train_idxs, test_idxs = train_test_split(np.arange(len(normals)), test_size=test_fraction, random_state=_split_seed(rng))
    dn_idxs, val_idxs = train_test_split(train_idxs, test_size=val_fraction, random_state=_split_seed(rng))
  except ValueError:
    raise UserError('Too few normal windows (%s) to fill training, validation and test pools' % len(normals))
  test_normals = [normals[idx] for idx in sorted(test_idxs)]
  dn_normals = [normals[idx] for idx in sorted(dn_idxs)]
  val_normals = [normals[idx] for idx in sorted(val_idxs)]
  if len(dn_normals) == 0 or len(val_normals) == 0:
    raise UserError('Too few normal windows (%s) to fill training, validation and test pools' % len(normals))

  n_val_labeled = max(1, int(np.round(val_fraction * n_labeled)))
  n_con_dn = int(np.ceil(contamination_rate * len(dn_normals)))
  n_con_val = 0 if clean_validation else int(np.ceil(contamination_rate * len(val_normals)))
  # Unseen classes stay in the test set only, so in the hard setting they
  # can't contaminate training either.
  con_classes = sorted(seen_classes) if setting == Settings.hard else classes

  shortfall = []
  for C in sorted(seen_classes):
    # One anomaly of every class is held back for the test set.
    needed = n_labeled + n_val_labeled + 1
    if len(pools[C]) < needed:
      shortfall.append('class %s needs %s anomalies (%s labelled, %s validation, 1 test) but has %s' % (
        common.ANOMALY_CLASSES[C] if C < len(common.ANOMALY_CLASSES) else C,
        needed,
        n_labeled,
        n_val_labeled,
        len(pools[C]),
      ))
  if len(shortfall) > 0:
    raise UserError('Insufficient anomalies: ' + '; '.join(shortfall))

  d_a, val_anomalies = [], []
  for C in sorted(seen_classes):
    d_a += pools[C][:n_labeled]
    val_anomalies += pools[C][n_labeled:n_labeled + n_val_labeled]
    pools[C] = pools[C][n_labeled + n_val_labeled:]

  # Contaminants come from everything but the first remaining window of each
  # class, which is reserved for testing.
  con_pool = _by_id([W for C in con_classes for W in pools[C][1:]])
  n_con = n_con_dn + n_con_val
  if len(con_pool) < n_con:
    raise UserError('Insufficient anomalies: contamination needs %s (%s training, %s validation) but only %s remain after labelling and test reservation' % (
      n_con,
      n_con_dn,
      n_con_val,
      len(con_pool),
    ))
  chosen = [con_pool[idx] for idx in sorted(rng.choice(len(con_pool), size=n_con, replace=False))]
  chosen_order = rng.permutation(n_con)
  con_dn = [chosen[idx] for idx in chosen_order[:n_con_dn]]
  con_val = [chosen[idx] for idx in chosen_order[n_con_dn:]]
  chosen_ids = set(W.id for W in chosen)
  test_anomalies = [W for C in classes for W in pools[C] if W.id not in chosen_ids]

  d_n = _by_id(list(dn_normals) + _inject(con_dn))
  d_a = _by_id(d_a)
  if len(d_a) > len(d_n) / 10:
    raise UserError('Labelled anomalies (%s) must not exceed a tenth of the unlabelled pool (%s)' % (len(d_a), len(d_n)))

  split = OpenSetSplit(
    d_n = d_n,
    d_a = d_a,
    validation = _by_id(list(val_normals) + _inject(con_val) + val_anomalies),
    test = _by_id(list(test_normals) + test_anomalies),
    setting = setting,
    seen_classes = seen_classes,
  )
  check_split(split)
  logger.info('Split %s: |d_n|=%s (%s injected), |d_a|=%s, |validation|=%s, |test|=%s, seen=%s',
    setting,
    len(split.d_n),
    n_con_dn,
    len(split.d_a),
    len(split.validation),
    len(split.test),
    sorted(seen_classes),
  )
  return split

def check_split(split):
  pools = [set(W.id for W in P) for P in (split.d_n, split.d_a, split.validation, split.test)]
  for idx in range(len(pools)):
    for jdx in range(idx + 1, len(pools)):
      assert len(pools[idx] & pools[jdx]) == 0
  assert all(W.label == 1 and W.class_id in split.seen_classes for W in split.d_a)
  assert all(W.label == 0 for W in split.d_n)
  if split.setting == Settings.hard:
    assert len(split.seen_classes) == 1
    unseen = set(W.class_id for W in split.test if W.label == 1) - split.seen_classes
    assert len(unseen) > 0
    train = split.d_n + split.d_a + split.validation
    assert not any(W.class_id is not None and W.class_id not in split.seen_classes for W in train)
