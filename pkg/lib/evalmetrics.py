import csv
import logging
import numpy as np
import scipy.stats
from numba import njit

from common import Partitions, Provenance, UserError
import deviation
import influence
import model as modelmod
import radg
import trainer
import util

logger = logging.getLogger(__name__)

_VAR_FLOOR = 1e-6
DIAGNOSTIC_CAP = 256
METRICS = (
  'auc_overall',
  'auc_seen',
  'auc_unseen',
  'kld_perturbed_vs_unseen',
  'kld_random_vs_unseen',
  'kld_seen_vs_unseen',
  'decon_precision',
  'decon_recall',
)

def _check_binary(scores, labels):
  scores = np.asarray(scores, dtype=np.float64)
  labels = np.asarray(labels)
  assert scores.shape == labels.shape
  npos = np.sum(labels == 1)
  nneg = np.sum(labels == 0)
  if npos == 0 or nneg == 0:
    raise UserError('AUC needs both normal and anomalous samples, got %s and %s' % (nneg, npos))
  return (scores, labels, npos, nneg)

def auc(scores, labels):
  '''Mann-Whitney AUC. Tied scores get their mean rank, so each tied
  normal/anomaly pair counts one half.'''
  scores, labels, npos, nneg = _check_binary(scores, labels)
  ranks = scipy.stats.rankdata(scores)
  U = np.sum(ranks[labels == 1]) - npos*(npos + 1)/2
  return (U / (npos*nneg)).item()

@njit
def _count_pairs(pos, neg):
  total = 0.
  for P in pos:
    for N in neg:
      if P > N:
        total += 1.
      elif P == N:
        total += 0.5
  return total

def auc_pairwise(scores, labels):
  scores, labels, npos, nneg = _check_binary(scores, labels)
  return _count_pairs(scores[labels == 1], scores[labels == 0]) / (npos*nneg)

def seen_unseen_auc(scores, labels, class_ids, seen_classes):
  '''Returns `(auc_seen, auc_unseen, flags)`; an AUC is None when its anomaly
  family has no test members.'''
  scores = np.asarray(scores, dtype=np.float64)
  labels = np.asarray(labels)
  normal = labels == 0
  seen = np.array([L == 1 and C in seen_classes for L, C in zip(labels, class_ids)], dtype=bool)
  unseen = np.array([L == 1 and C not in seen_classes for L, C in zip(labels, class_ids)], dtype=bool)

  out = []
  flags = []
  for name, family in (('seen', seen), ('unseen', unseen)):
    if not np.any(family):
      flags.append('no_%s_anomalies' % name)
      out.append(None)
      continue
    keep = normal | family
    out.append(auc(scores[keep], labels[keep]))
  return (out[0], out[1], flags)

def gaussian_kld(features_a, features_b):
  '''KL(a || b) between diagonal Gaussians fitted to each set.'''
  A = np.asarray(features_a, dtype=np.float64)
  B = np.asarray(features_b, dtype=np.float64)
  assert A.ndim == B.ndim == 2 and A.shape[1] == B.shape[1]
  d = A.shape[1]
  for name, X in (('first', A), ('second', B)):
    if len(X) < d + 2:
      raise UserError('KL divergence needs at least %s vectors in the %s set, got %s' % (d + 2, name, len(X)))
  mu_a, mu_b = np.mean(A, axis=0), np.mean(B, axis=0)
  var_a = np.maximum(np.var(A, axis=0), _VAR_FLOOR)
  var_b = np.maximum(np.var(B, axis=0), _VAR_FLOOR)
  kld = 0.5*np.sum(np.log(var_b/var_a) + (var_a + (mu_a - mu_b)**2)/var_b - 1)
  # Rounding can leave a tiny negative value for identical fits.
  return max(kld.item(), 0.)

def decon_metrics(report, provenance=None):
  '''Returns `(precision, recall, flags)`. `provenance` maps sample id to
  provenance and overrides what the report's entries carry.'''
  dn = [E for E in report.entries if E.partition != Partitions.labeled_anomaly]
  prov = {E.id: E.provenance for E in dn}
  if provenance is not None:
    prov.update({id: provenance[id] for id in prov if id in provenance})
  flipped = set(E.id for E in dn if E.partition == Partitions.contaminated)
  injected = set(id for id, P in prov.items() if P == Provenance.injected)
  hits = len(flipped & injected)

  flags = []
  if len(flipped) == 0:
    precision = None
    flags.append('precision_undefined')
  else:
    precision = hits / len(flipped)
  if len(injected) == 0:
    recall = None
    flags.append('recall_undefined')
  else:
    recall = hits / len(injected)
  return (precision, recall, flags)

def harmful_enrichment(report):
  '''How strongly injected contaminants concentrate at the harmful end of an
  audit. The top list holds as many unlabelled entries as there are injected
  ones, ranked by decreasing influence (ties by id).'''
  pool = sorted([E for E in report.entries if E.partition != Partitions.labeled_anomaly], key=lambda E: (-E.influence, E.id))
  injected = np.array([E.provenance == Provenance.injected for E in pool], dtype=bool)
  n_injected = np.sum(injected).item()
  out = {
    'n_pool': len(pool),
    'n_injected': n_injected,
    'top_harmful': max(1, n_injected) if len(pool) > 0 else 0,
    'top_injected_rate': None,
    'base_rate': None,
    'flags': [],
  }
  if n_injected == 0:
    out['flags'].append('no_injected_contaminants')
    return out
  out['top_injected_rate'] = np.mean(injected[:n_injected]).item()
  out['base_rate'] = n_injected / len(pool)
  return out

def _try_kld(A, B, name, flags):
  try:
    return gaussian_kld(A, B)
  except UserError as E:
    flags.append('%s_skipped' % name)
    logger.info('Skipping %s: %s', name, E)
    return None

def diagnostic_perturbed_features(tm, split):
  '''Pseudo-anomaly features for the final model, built from the unlabelled
  normals the audit did not flag as contaminated (lowest ids first, at most
  DIAGNOSTIC_CAP). Returns `(perturbed, randomized)`, where `randomized`
  moves each feature along a random direction of the same norm instead.'''
  d = tm.model.arch.feature_dim
  flagged = set(E.id for E in tm.audit.entries if E.partition == Partitions.contaminated)
  candidates = sorted([W for W in split.d_n if W.id not in flagged], key=lambda W: W.id)[:DIAGNOSTIC_CAP]
  if len(candidates) == 0 or len(split.validation) == 0:
    return (np.zeros((0, d)), np.zeros((0, d)))
  loss_cfg = deviation.make_loss_config(tm.prior, tm.config['margin'], tm.config['signed_dev'])
  feats = influence.feature_samples(tm.model, candidates)
  values = {F.id: F.values for F in feats}
  directions = radg.compute_directions(tm.model, feats, split.validation, loss_cfg, influence.solver_config(tm.config))
  randomized = radg.randomize_directions(directions, util.make_rng((tm.config['seed'], 3)))

  out = []
  for D in (directions, randomized):
    perturbed = radg.apply_directions(values, D, tm.config['alpha'])
    out.append(np.array([P.values for P in perturbed]).reshape((-1, d)))
  return tuple(out)

def _seen_anomalies(split):
  '''Every seen-class anomaly window in the split, labelled or hidden.'''
  by_id = {}
  for W in split.d_a + split.d_n + split.validation + split.test:
    if W.class_id is not None and W.class_id in split.seen_classes:
      by_id[W.id] = W
  return [by_id[id] for id in sorted(by_id.keys())]

def evaluate_model(tm, split):
  test = split.test
  if len(test) == 0:
    raise UserError('Evaluation needs a non-empty test set')
  labels = np.array([W.label for W in test])
  class_ids = [W.class_id for W in test]
  s_m, s_f, s = trainer.score_samples(tm, test)

  flags = []
  auc_seen, auc_unseen, su_flags = seen_unseen_auc(s, labels, class_ids, split.seen_classes)
  flags += su_flags

  unseen = [W for W in test if W.label == 1 and W.class_id not in split.seen_classes]
  kld_pert = kld_rand = kld_seen = None
  if len(unseen) > 0:
    unseen_feats = modelmod.extract_features_batch(tm.model, unseen)
    seen = _seen_anomalies(split)
    seen_feats = modelmod.extract_features_batch(tm.model, seen) if len(seen) > 0 else np.zeros((0, unseen_feats.shape[1]))
    perturbed, randomized = diagnostic_perturbed_features(tm, split)
    kld_pert = _try_kld(perturbed, unseen_feats, 'kld_perturbed_vs_unseen', flags)
    kld_rand = _try_kld(randomized, unseen_feats, 'kld_random_vs_unseen', flags)
    kld_seen = _try_kld(seen_feats, unseen_feats, 'kld_seen_vs_unseen', flags)

  precision, recall, decon_flags = decon_metrics(tm.audit)
  flags += decon_flags

  report = {
    'run_tag': tm.run_tag,
    'setting': split.setting,
    'seen_classes': sorted(split.seen_classes),
    'auc_overall': auc(s, labels),
    'auc_seen': auc_seen,
    'auc_unseen': auc_unseen,
    'auc_abnormality_only': auc(s_m, labels),
    'auc_feature_only': auc(s_f, labels),
    'kld_perturbed_vs_unseen': kld_pert,
    'kld_random_vs_unseen': kld_rand,
    'kld_seen_vs_unseen': kld_seen,
    'decon_precision': precision,
    'decon_recall': recall,
    'mean_score_normal': np.mean(s[labels == 0]).item(),
    'mean_score_anomaly': np.mean(s[labels == 1]).item(),
    'n_test': len(test),
    'summary': tm.summary,
    'flags': flags,
    'config': tm.config,
  }
  for K in ('auc_overall', 'auc_seen', 'auc_unseen'):
    assert report[K] is None or 0 <= report[K] <= 1
  return report

def summarize_seeds(reports):
  '''Per-seed table plus the mean of each metric over seeds that report it.
  `reports` maps seed to an evaluation report.'''
  rows = []
  for seed in sorted(reports.keys()):
    R = reports[seed]
    rows.append({'seed': seed, 'run_tag': R.get('run_tag'), **{K: R.get(K) for K in METRICS}})
  means = {}
  for K in METRICS:
    vals = [row[K] for row in rows if row[K] is not None]
    means[K] = np.mean(vals).item() if len(vals) > 0 else None
  return {'per_seed': rows, 'mean': means}

def write_seed_csv(table, fn):
  fields = ('seed', 'run_tag') + METRICS
  with open(fn, 'w', newline='') as F:
    writer = csv.DictWriter(F, fieldnames=fields)
    writer.writeheader()
    for row in table['per_seed']:
      writer.writerow({K: ('' if row[K] is None else row[K]) for K in fields})

def sweep(make_split, axes, seeds, **base):
  '''One-at-a-time hyperparameter sensitivity. `axes` maps a config field to
  the values it takes while every other field keeps its `base` value (or the
  default); `make_split(seed)` builds the data for one seed. Returns one row
  per (field, value) with the per-seed table and metric means.'''
  if len(seeds) == 0:
    raise UserError('A sweep needs at least one seed')
  for K in axes.keys():
    if K not in trainer.TrainConfig._fields:
      raise UserError('Cannot sweep unknown config field %s' % K)
  splits = {seed: make_split(seed) for seed in seeds}

  rows = []
  for K, values in axes.items():
    for V in values:
      reports = {}
      for seed in seeds:
        cfg = trainer.make_config(**{**base, K: V, 'seed': seed})
        reports[seed] = evaluate_model(trainer.impact_train(splits[seed], cfg), splits[seed])
      table = summarize_seeds(reports)
      logger.info('Sweep %s=%s: mean AUC %s', K, V, table['mean']['auc_overall'])
      rows.append({'param': K, 'value': V, **table})
  return rows
