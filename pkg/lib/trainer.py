import logging
import numpy as np
import torch
from collections import namedtuple

import common
from common import TrainedModel, InfluenceEntry, InfluenceReport, Partitions, Heads, UserError, NumericalError
import deviation
import hyperparams
import influence
import model as modelmod
import radg
import util
from progressbar import progressbar

logger = logging.getLogger(__name__)

TrainConfig = namedtuple('TrainConfig', sorted(hyperparams.defaults.keys()))

_SD_FLOOR = 1e-12

def make_config(**overrides):
  unknown = set(overrides.keys()) - set(hyperparams.defaults.keys())
  if len(unknown) > 0:
    raise UserError('Unknown training options: %s' % ', '.join(sorted(unknown)))
  params = {**hyperparams.defaults, **overrides}
  params['dilations'] = tuple(params['dilations'])
  params['ablations'] = tuple(sorted(set(params['ablations'])))
  cfg = TrainConfig(**params)
  check_config(cfg)
  return cfg

def check_config(cfg):
  if not (0 <= cfg.epochs_initial < cfg.epochs_total):
    raise UserError('epochs_initial (%s) must be non-negative and below epochs_total (%s)' % (cfg.epochs_initial, cfg.epochs_total))
  for K in ('learning_rate', 'batch_size', 'k', 'channels', 'margin', 'damping', 'cg_tol', 'cg_max_iter', 'hessian_cap'):
    if not getattr(cfg, K) > 0:
      raise UserError('%s must be positive, got %s' % (K, getattr(cfg, K)))
  if cfg.lam < 0 or cfg.alpha < 0 or cfg.weight_decay < 0:
    raise UserError('lam, alpha and weight_decay must be non-negative')
  unknown = set(cfg.ablations) - set(common.ABLATIONS)
  if len(unknown) > 0:
    raise UserError('Unknown ablations: %s (expected any of %s)' % (', '.join(sorted(unknown)), ', '.join(common.ABLATIONS)))
  if 'no_flip' in cfg.ablations and 'keep_con_unflipped' in cfg.ablations:
    raise UserError('Ablations no_flip and keep_con_unflipped are mutually exclusive')

def run_tag(cfg):
  return '+'.join(('impact',) + tuple(sorted(cfg.ablations)))

def config_dict(cfg):
  return util.to_jsonable(cfg._asdict())

def arch_for(cfg, dims, length):
  return modelmod.default_arch(
    dims,
    length,
    hidden = cfg.hidden,
    feature_dim = cfg.feature_dim,
    channels = cfg.channels,
    kernel_size = cfg.kernel_size,
    dilations = tuple(cfg.dilations),
    head_hidden = cfg.head_hidden,
  )

def _tensors(samples):
  X, y, is_feature = deviation.stack_samples(samples)
  return (modelmod.to_tensor(X), modelmod.to_tensor(y), is_feature)

def _sgd_step(theta, loss, cfg, mask):
  if not torch.isfinite(loss):
    raise NumericalError('Training loss became %s; try a lower learning rate' % loss.item())
  g, = torch.autograd.grad(loss, theta)
  with torch.no_grad():
    theta -= cfg.learning_rate * mask * (g + cfg.weight_decay*theta)

def _mask(model, segments):
  mask = torch.zeros(len(model.params), dtype=modelmod.DTYPE)
  for seg in segments:
    start, end = model.offsets[seg]
    mask[start:end] = 1
  return mask

def train_initial(model, d, cfg, loss_cfg, epochs=None, quiet=True):
  '''SGD on the deviation loss through the extractor and seen head. The unseen
  head is left untouched.'''
  if len(d) == 0:
    raise UserError('Initial training needs a non-empty training set')
  epochs = cfg.epochs_initial if epochs is None else epochs
  rng = util.make_rng(cfg.seed)
  theta = modelmod.to_tensor(model.params).clone().requires_grad_(True)
  mask = _mask(model, ('extractor', Heads.seen))
  nbatches = int(np.ceil(len(d) / cfg.batch_size))

  with progressbar(total=epochs*nbatches, desc='Initial training', unit='batch', quiet=quiet) as pbar:
    for epoch in range(epochs):
      order = rng.permutation(len(d))
      epoch_loss = 0.
      for idxs in util.chunks(order, cfg.batch_size):
        X, y, is_feature = _tensors([d[idx] for idx in idxs])
        loss = deviation.losses_t(model, theta, X, y, loss_cfg, Heads.seen, is_feature).mean()
        _sgd_step(theta, loss, cfg, mask)
        epoch_loss += loss.item() * len(idxs)
        pbar.update()
        pbar.set_postfix(loss=loss.item())
      logger.debug('Initial epoch %s: mean loss %.4f', epoch + 1, epoch_loss / len(d))

  return modelmod.with_params(model, theta.detach().numpy().copy())

def _pick_random(rng, ids, count):
  ids = sorted(ids)
  count = min(count, len(ids))
  return sorted(ids[idx] for idx in rng.choice(len(ids), size=count, replace=False))

def _select_partitions(ids, infl, cfg, rng):
  '''Influence-based roles for the unlabelled members of one batch, after
  applying the random ablations. Returns `(partitions, con, ref, per, flags)`:
  `partitions` is what influence alone decides and goes into the audit, while
  `con`, `ref` and `per` are the ids training actually uses.'''
  partitions, flags = influence.partition_influences(ids, infl, cfg.k)
  con = [id for id in ids if partitions[id] == Partitions.contaminated]
  ref = [id for id in ids if partitions[id] == Partitions.reference]
  if 'random_flip' in cfg.ablations:
    con = _pick_random(rng, ids, len(con))
  if 'random_ref' in cfg.ablations:
    ref = _pick_random(rng, set(ids) - set(con), cfg.k)
  if 'random_flip' in cfg.ablations or 'random_ref' in cfg.ablations:
    taken = set(con) | set(ref)
    left = [(id, I) for id, I in zip(ids, infl) if id not in taken and I < 0]
    per = util.select_extreme([I for _, I in left], [id for id, _ in left], cfg.k, largest=True)
  else:
    per = [id for id in ids if partitions[id] == Partitions.perturb_candidate]
  return (partitions, con, ref, per, flags)

def _loss_terms(model, theta, terms, loss_cfg):
  total = 0.
  for samples, head, weight in terms:
    if len(samples) == 0 or weight == 0:
      continue
    X, y, is_feature = _tensors(samples)
    total = total + weight * deviation.losses_t(model, theta, X, y, loss_cfg, head, is_feature).sum()
  return total

def _solve_caches(model, validation, loss_cfg, solver, use_unseen):
  stest = influence.compute_stest(model, validation, loss_cfg, solver)
  head_cache = influence.head_stest(model, validation, loss_cfg, solver) if use_unseen else None
  return (stest, head_cache)

def _retrain_epoch(model, split, cfg, loss_cfg, state, rng, pbar):
  use_unseen = 'no_unseen_head' not in cfg.ablations
  solver = influence.solver_config(cfg)
  by_id = common.index_by_id(split.d_n + split.d_a)
  dn_ids = set(W.id for W in split.d_n)
  pool = split.d_n + split.d_a
  order = rng['shuffle'].permutation(len(pool))
  theta = modelmod.to_tensor(model.params).clone().requires_grad_(True)

  caches = None
  entries = []
  for idxs in util.chunks(order, cfg.batch_size):
    current = modelmod.with_params(model, theta.detach().numpy().copy())
    if caches is None or cfg.refresh_per_batch:
      caches = _solve_caches(current, split.validation, loss_cfg, solver, use_unseen)
      state['residuals'].append(caches[0].residual)
      state['dampings'].append(caches[0].damping)
      state['flags'].update(caches[0].flags)
    stest, head_cache = caches

    batch = [pool[idx] for idx in idxs]
    batch_dn = sorted([W for W in batch if W.id in dn_ids], key=lambda W: W.id)
    batch_da = sorted([W for W in batch if W.id not in dn_ids], key=lambda W: W.id)
    ids = [W.id for W in batch_dn]
    infl = influence.influence_from_grads(deviation.per_sample_grads(current, batch_dn, loss_cfg), stest.x) if len(batch_dn) > 0 else np.zeros(0)
    partitions, con, ref, per, flags = _select_partitions(ids, infl, cfg, rng['ablate'])
    state['flags'].update(flags)

    con_set, per_set = set(con), set(per)
    entries += [InfluenceEntry(id=W.id, influence=I.item(), partition=partitions[W.id], provenance=W.provenance) for W, I in zip(batch_dn, infl)]
    if len(batch_da) > 0:
      da_infl = influence.influence_from_grads(deviation.per_sample_grads(current, batch_da, loss_cfg), stest.x)
      entries += [InfluenceEntry(id=W.id, influence=I.item(), partition=Partitions.labeled_anomaly, provenance=W.provenance) for W, I in zip(batch_da, da_infl)]

    for id in ref:
      state['ref'][id] = by_id[id]
    helpful = [W for W in batch_dn if W.id not in con_set]
    if len(helpful) == 0:
      logger.warning('Every unlabelled sample in a batch was judged contaminated')
      state['flags'].add('degenerate_batch')

    con_windows = [by_id[id] for id in con]
    if 'no_flip' in cfg.ablations:
      con_used = []
    elif 'keep_con_unflipped' in cfg.ablations:
      con_used = con_windows
    else:
      con_used = radg.flip_labels(con_windows)
      state['flipped'].update(con)
      if 'random_flip' in cfg.ablations:
        state['random_flipped'].update(con)
    d_s = helpful + batch_da + con_used

    terms = [(d_s, Heads.seen, 1.)]
    if use_unseen and cfg.lam > 0:
      d_h = [W for W in helpful if W.id not in per_set]
      pseudo = []
      if len(per) > 0:
        feats = influence.feature_samples(current, [by_id[id] for id in per])
        directions = radg.compute_directions(current, feats, split.validation, loss_cfg, solver, head_cache)
        if 'random_perturb' in cfg.ablations:
          directions = radg.randomize_directions(directions, rng['ablate'])
        pseudo = radg.apply_directions({F.id: F.values for F in feats}, directions, cfg.alpha)
        state['pseudo'] += pseudo
      terms.append((d_h, Heads.seen, cfg.lam))
      if cfg.unseen_both_heads:
        terms.append((d_h, Heads.unseen, cfg.lam))
      terms.append((radg.as_feature_samples(pseudo), Heads.unseen, cfg.lam))

    loss = _loss_terms(current, theta, terms, loss_cfg)
    if torch.is_tensor(loss):
      loss = loss / len(batch)
      _sgd_step(theta, loss, cfg, torch.ones(len(model.params), dtype=modelmod.DTYPE))
      pbar.set_postfix(loss=loss.item(), flipped=len(con))
    pbar.update()

  return (modelmod.with_params(model, theta.detach().numpy().copy()), entries)

def _ref_score_stats(s_m, s_f):
  return {
    's_m_mean': np.mean(s_m).item(),
    's_m_sd': max(np.std(s_m).item(), _SD_FLOOR),
    's_f_mean': np.mean(s_f).item(),
    's_f_sd': max(np.std(s_f).item(), _SD_FLOOR),
  }

def _setup_training(split, cfg):
  if len(split.validation) == 0:
    raise UserError('Training needs a non-empty validation set')
  if len(split.d_n) == 0:
    raise UserError('Training needs a non-empty unlabelled pool')
  dims, length = split.d_n[0].values.shape
  model = modelmod.init_model(arch_for(cfg, dims, length), cfg.seed)
  prior = deviation.prior_stats(cfg.channels, cfg.prior_samples, cfg.prior_sigma, cfg.seed)
  return (model, prior, deviation.make_loss_config(prior, cfg.margin, cfg.signed_dev))

def deviation_train(split, cfg, quiet=True):
  '''Plain deviation training for all `epochs_total` epochs, with no influence
  pass and the whole unlabelled pool as reference. This is what the full
  pipeline reduces to without contamination or the unseen objective.'''
  model, prior, loss_cfg = _setup_training(split, cfg)
  model = train_initial(model, split.d_n + split.d_a, cfg, loss_cfg, epochs=cfg.epochs_total, quiet=quiet)
  audit = InfluenceReport(
    entries = [],
    stest_residual = 0.,
    damping = cfg.damping,
    validation_size = len(split.validation),
    flags = ['no_influence_pass'],
  )
  tm = TrainedModel(
    model = model,
    ref_feature_mean = np.mean(modelmod.extract_features_batch(model, split.d_n), axis=0),
    prior = prior,
    config = config_dict(cfg),
    audit = audit,
    pseudo_features = np.zeros((0, model.arch.feature_dim)),
    ref_score_stats = None,
    run_tag = 'deviation',
    summary = {
      'final_validation_risk': deviation.risk(model, split.validation, loss_cfg),
      'flags': ['no_influence_pass'],
    },
  )
  s_m, s_f, _ = score_samples(tm, split.d_n)
  return tm._replace(ref_score_stats=_ref_score_stats(s_m, s_f))

def impact_train(split, cfg, quiet=True):
  model, prior, loss_cfg = _setup_training(split, cfg)
  model = train_initial(model, split.d_n + split.d_a, cfg, loss_cfg, quiet=quiet)
  initial_risk = deviation.risk(model, split.validation, loss_cfg)
  logger.info('Initial training done: training risk %.4f, validation risk %.4f', deviation.risk(model, split.d_n + split.d_a, loss_cfg), initial_risk)

  state = {
    'ref': {},
    'flipped': set(),
    'random_flipped': set(),
    'pseudo': [],
    'residuals': [],
    'dampings': [],
    'flags': set(),
  }
  rng = {
    'shuffle': util.make_rng((cfg.seed, 1)),
    'ablate': util.make_rng((cfg.seed, 2)),
  }
  epochs = cfg.epochs_total - cfg.epochs_initial
  nbatches = int(np.ceil((len(split.d_n) + len(split.d_a)) / cfg.batch_size))
  with progressbar(total=epochs*nbatches, desc='Retraining', unit='batch', quiet=quiet) as pbar:
    for epoch in range(epochs):
      # Only the last epoch's pseudo-anomalies describe the final model.
      state['pseudo'] = []
      model, entries = _retrain_epoch(model, split, cfg, loss_cfg, state, rng, pbar)

  audit = InfluenceReport(
    entries = sorted(entries, key=lambda E: (-E.influence, E.id)),
    stest_residual = max(state['residuals']),
    damping = max(state['dampings']),
    validation_size = len(split.validation),
    flags = sorted(state['flags']),
  )

  ref_windows = [state['ref'][id] for id in sorted(state['ref'].keys())]
  if len(ref_windows) == 0:
    logger.warning('No reference normals were selected; using the whole unlabelled pool')
    ref_windows = split.d_n
    state['flags'].add('empty_reference_set')
  ref_feats = modelmod.extract_features_batch(model, ref_windows)
  ref_feature_mean = np.mean(ref_feats, axis=0)

  N = len(split.d_n) + len(split.d_a)
  delta_flip, flip_flags = radg.predicted_risk_delta_flip(audit, N)
  delta_perturb, perturb_flags = radg.predicted_risk_delta_perturb(state['pseudo'], cfg.alpha, N)
  tm = TrainedModel(
    model = model,
    ref_feature_mean = ref_feature_mean,
    prior = prior,
    config = config_dict(cfg),
    audit = audit,
    pseudo_features = np.array([P.values for P in state['pseudo']]).reshape((-1, model.arch.feature_dim)),
    ref_score_stats = None,
    run_tag = run_tag(cfg),
    summary = {
      'n_flipped': len(state['flipped']),
      'randomly_flipped': sorted(state['random_flipped']),
      'n_reference': len(ref_windows),
      'n_pseudo': len(state['pseudo']),
      'predicted_risk_delta_flip': delta_flip,
      'predicted_risk_delta_perturb': delta_perturb,
      'initial_validation_risk': initial_risk,
      'final_validation_risk': deviation.risk(model, split.validation, loss_cfg),
      'flags': sorted(state['flags'] | set(flip_flags) | set(perturb_flags)),
    },
  )
  s_m, s_f, _ = score_samples(tm, ref_windows)
  tm = tm._replace(ref_score_stats=_ref_score_stats(s_m, s_f))
  logger.info('%s: flipped %s, %s reference normals, %s pseudo-anomalies', tm.run_tag, len(state['flipped']), len(ref_windows), len(state['pseudo']))
  return tm

def _combine(tm, s_m, s_f):
  ablations = tm.config.get('ablations', ())
  if 'no_feature_score' in ablations:
    return s_m
  if tm.config.get('zscore_combine', False) and tm.ref_score_stats is not None:
    S = tm.ref_score_stats
    return (s_m - S['s_m_mean'])/S['s_m_sd'] + (s_f - S['s_f_mean'])/S['s_f_sd']
  return s_m + s_f

def score_samples(tm, windows):
  '''Returns `(s_m, s_f, s)` arrays, one entry per window.'''
  model = tm.model
  phi = modelmod.extract_features_batch(model, windows)
  seen = modelmod.head_scores(model, phi, Heads.seen)
  if 'no_unseen_head' in tm.config.get('ablations', ()):
    s_m = np.max(seen, axis=1)
  else:
    s_m = np.max(seen + modelmod.head_scores(model, phi, Heads.unseen), axis=1)
  s_f = np.sum((phi - tm.ref_feature_mean)**2, axis=1)
  return (s_m, s_f, _combine(tm, s_m, s_f))

def score_sample(tm, x):
  s_m, s_f, s = score_samples(tm, [x])
  return (s_m[0].item(), s_f[0].item(), s[0].item())

def point_scores(tm, series, L=None):
  series = np.asarray(series, dtype=np.float64)
  L = tm.model.arch.length if L is None else L
  if L != tm.model.arch.length:
    raise UserError('Window length %s does not match the model window length %s' % (L, tm.model.arch.length))
  if series.ndim != 2 or series.shape[0] < L:
    raise UserError('Series of shape %s is shorter than the window length %s' % (series.shape, L))
  windows = util.sliding_windows(series, L, 1)
  _, _, s = score_samples(tm, list(windows))
  return util.backfill_point_scores(s, L)
