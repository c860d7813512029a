import logging
import numpy as np
import torch
from collections import namedtuple
from torch.func import grad

import common
from common import InfluenceEntry, InfluenceReport, PerturbDirection, FeatureSample
from common import Partitions, Heads, Segments, UserError, NumericalError
import deviation
import hyperparams
import model as modelmod
import util

logger = logging.getLogger(__name__)

# Directions shorter than this carry no risk signal.
ZERO_DIRECTION = 1e-10
# Oracles retrain from scratch, so keep them small.
ORACLE_MAX_SAMPLES = 500
ORACLE_MAX_PARAMS = 1000
# A Hessian solve that meets non-positive curvature is retried with this much
# more damping, at most MAX_DAMPING_RAISES times. Zero damping is first raised
# to DAMPING_FLOOR.
DAMPING_GROWTH = 10.
DAMPING_FLOOR = 1e-3
MAX_DAMPING_RAISES = 12

SolverConfig = namedtuple('SolverConfig', (
  'damping',
  'tol',
  'max_iter',
  'hessian_cap',
))

Solve = namedtuple('Solve', (
  'x',
  'residual',
  'iterations',
  'flags',
  'damping',
), defaults=(None,))

def solver_config(cfg=None):
  cfg = hyperparams.defaults if cfg is None else cfg
  get = cfg.get if isinstance(cfg, dict) else lambda K: getattr(cfg, K)
  return SolverConfig(
    damping = get('damping'),
    tol = get('cg_tol'),
    max_iter = get('cg_max_iter'),
    hessian_cap = get('hessian_cap'),
  )

def conjugate_gradient(apply_A, b, tol, max_iter):
  '''Solve `A x = b` for a symmetric operator `apply_A` using only products
  with it. CG stops at the first direction with non-positive curvature and
  raises a flag; the iterate with the smallest residual seen so far is
  returned.'''
  if not tol > 0:
    raise UserError('CG tolerance must be positive, got %s' % tol)
  b = np.asarray(b, dtype=np.float64)
  if not np.all(np.isfinite(b)):
    raise NumericalError('Right-hand side of the Hessian solve is not finite')
  flags = []
  bnorm = np.linalg.norm(b)
  x = np.zeros_like(b)
  if bnorm == 0:
    return Solve(x=x, residual=0., iterations=0, flags=flags)

  r = b.copy()
  p = r.copy()
  rr = np.dot(r, r)
  best_x, best_rr = x.copy(), rr
  iterations = 0
  for iterations in range(1, max_iter + 1):
    Ap = apply_A(p)
    curv = np.dot(p, Ap)
    if not np.isfinite(curv):
      raise NumericalError('Hessian-vector product is not finite; try a higher damping')
    if curv <= 0:
      flags.append('negative_curvature')
      break
    alpha = rr / curv
    x += alpha*p
    r -= alpha*Ap
    rr_new = np.dot(r, r)
    if not np.isfinite(rr_new):
      raise NumericalError('Conjugate gradient diverged at iteration %s; try a higher damping' % iterations)
    if rr_new < best_rr:
      best_x, best_rr = x.copy(), rr_new
    if np.sqrt(rr_new) / bnorm <= tol:
      break
    p = r + (rr_new / rr)*p
    rr = rr_new

  # The recursive residual drifts, so report the true one.
  residual = np.linalg.norm(apply_A(best_x) - b) / bnorm
  if not np.isfinite(residual):
    raise NumericalError('Conjugate gradient produced a non-finite solution')
  if residual > tol:
    flags.append('cg_not_converged')
  return Solve(x=best_x, residual=residual, iterations=iterations, flags=flags)

def inverse_hvp(model, hessian_samples, b, cfg, damping, tol, max_iter, segment=Segments.all, head=Heads.seen):
  '''CG on `H + damping*I`. While CG meets non-positive curvature, or ends no
  closer to `b` than the zero vector does, damping grows by `DAMPING_GROWTH`
  and the solve is repeated. The damping actually used is returned with the
  solve.'''
  flags = []
  for raises in range(MAX_DAMPING_RAISES + 1):
    apply_A = deviation.make_hvp(model, hessian_samples, cfg, damping, segment, head)
    solve = conjugate_gradient(apply_A, b, tol, max_iter)
    flags += [F for F in solve.flags if F not in flags]
    if 'negative_curvature' not in solve.flags and solve.residual < 1:
      break
    if raises == MAX_DAMPING_RAISES:
      raise NumericalError('Hessian solve failed even with damping %.3g (residual %.3g)' % (damping, solve.residual))
    raised = max(DAMPING_GROWTH*damping, DAMPING_FLOOR)
    logger.info('Raising damping from %.3g to %.3g (residual %.3g, flags %s)', damping, raised, solve.residual, solve.flags)
    damping = raised

  if raises > 0:
    flags.append('damping_raised')
  if 'cg_not_converged' in solve.flags:
    logger.warning('CG stopped after %s iterations with relative residual %.3g > %.3g', solve.iterations, solve.residual, tol)
  return solve._replace(flags=flags, damping=damping)

def hessian_subsample(samples, cap, seed=0):
  if len(samples) <= cap:
    return list(samples)
  rng = util.make_rng(seed)
  return [samples[idx] for idx in sorted(rng.choice(len(samples), size=cap, replace=False))]

def compute_stest(model, validation, cfg, solver, segment=Segments.all, head=Heads.seen, seed=0):
  '''Solve `(H + damping*I) s = sum of validation gradients`, with H formed
  over (a capped subsample of) the validation set.'''
  if len(validation) == 0:
    raise UserError('Influence scoring needs a non-empty validation set')
  b = np.sum(deviation.per_sample_grads(model, validation, cfg, segment, head), axis=0)
  hsamples = hessian_subsample(validation, solver.hessian_cap, seed)
  solve = inverse_hvp(model, hsamples, b, cfg, solver.damping, solver.tol, solver.max_iter, segment, head)
  logger.debug('s_test solved in %s iterations, residual %.3g', solve.iterations, solve.residual)
  return solve

def influence_from_grads(grads, stest):
  return -(np.asarray(grads) @ stest)

def influence_score(model, z, validation, cfg, cache=None, solver=None):
  if cache is None:
    if validation is None or len(validation) == 0:
      raise UserError('Influence needs either a cached s_test or a validation set')
    cache = compute_stest(model, validation, cfg, solver_config() if solver is None else solver)
  stest = cache.x if isinstance(cache, Solve) else cache
  return influence_from_grads(deviation.grad_params(model, z, cfg), stest).item()

def flip_influence(i_l):
  return -2*i_l

def partition_influences(ids, influences, k):
  '''Assign each unlabelled-pool sample to a partition. Returns
  `(partitions, flags)` with `partitions` mapping id to partition name.'''
  ids = np.asarray(ids)
  influences = np.asarray(influences, dtype=np.float64)
  flags = []
  partitions = {id.item(): Partitions.clean for id in ids}

  for id, I in zip(ids, influences):
    if I > 0:
      partitions[id.item()] = Partitions.contaminated

  neg = influences < 0
  if np.sum(neg) < k:
    flags.append('fewer_than_k_negatives')
  reference = util.select_extreme(influences[neg], ids[neg], k, largest=False)
  for id in reference:
    partitions[id] = Partitions.reference

  remaining = np.array([I < 0 and partitions[id.item()] == Partitions.clean for id, I in zip(ids, influences)], dtype=bool)
  candidates = util.select_extreme(influences[remaining], ids[remaining], k, largest=True)
  for id in candidates:
    partitions[id] = Partitions.perturb_candidate
  return (partitions, flags)

def batch_influence(model, d_n, d_a, validation, cfg, k, solver=None, cache=None):
  if k < 1:
    raise UserError('k must be at least 1, got %s' % k)
  solver = solver_config() if solver is None else solver
  if cache is None:
    cache = compute_stest(model, validation, cfg, solver)

  dn_infl = influence_from_grads(deviation.per_sample_grads(model, d_n, cfg), cache.x) if len(d_n) > 0 else np.zeros(0)
  partitions, flags = partition_influences([W.id for W in d_n], dn_infl, k)
  entries = [InfluenceEntry(
    id = W.id,
    influence = I.item(),
    partition = partitions[W.id],
    provenance = W.provenance,
  ) for W, I in zip(d_n, dn_infl)]

  if len(d_a) > 0:
    da_infl = influence_from_grads(deviation.per_sample_grads(model, d_a, cfg), cache.x)
    entries += [InfluenceEntry(
      id = W.id,
      influence = I.item(),
      partition = Partitions.labeled_anomaly,
      provenance = W.provenance,
    ) for W, I in zip(d_a, da_infl)]

  for F in flags:
    logger.warning('Influence scoring: %s', F)
  return InfluenceReport(
    entries = entries,
    stest_residual = cache.residual,
    damping = solver.damping if cache.damping is None else cache.damping,
    validation_size = len(validation),
    flags = list(cache.flags) + flags,
  )

def partition_ids(report, partition):
  return [E.id for E in report.entries if E.partition == partition]

def feature_samples(model, windows):
  '''Feature-space copies of `windows`, keeping ids and labels.'''
  phis = modelmod.extract_features_batch(model, windows)
  return [FeatureSample(id=W.id, values=phi, label=W.label) for W, phi in zip(windows, phis)]

def head_stest(model, validation, cfg, solver, head=Heads.seen):
  '''`s_test` restricted to the head segment, computed from validation
  features so the extractor is held fixed.'''
  if len(validation) == 0:
    raise UserError('Perturbation directions need a non-empty validation set')
  if not common.is_feature_sample(validation[0]):
    validation = feature_samples(model, validation)
  return compute_stest(model, validation, cfg, solver, Segments.head_only, head)

def perturb_direction(model, w, validation, cfg, solver=None, cache=None, head=Heads.seen):
  if w.label != 0:
    raise UserError('Perturbation candidates must be labelled normal')
  if cache is None:
    cache = head_stest(model, validation, cfg, solver_config() if solver is None else solver, head)
  cross = deviation.grad_feat_cross(model, w, cfg, head)
  direction = -(cross.T @ cache.x)
  return PerturbDirection(id=w.id, direction=direction, norm_sq=np.dot(direction, direction).item())

def rank1_determinant(u, v, alpha):
  '''`det(I + alpha*u v^T/|v|^2)` through its single non-unit eigenvalue.'''
  u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
  return 1 + alpha*np.dot(v, u)/np.dot(v, v)

def kl_lower_bound(alpha, beta, phi_norm_sq):
  assert phi_norm_sq > 0
  return alpha*beta/phi_norm_sq

def _check_oracle(spec, samples):
  start, end = modelmod.segment_range(spec.model, spec.segment, spec.head)
  if len(samples) > ORACLE_MAX_SAMPLES or end - start > ORACLE_MAX_PARAMS:
    raise UserError('Retraining oracles take at most %s samples and %s parameters, got %s and %s' % (
      ORACLE_MAX_SAMPLES,
      ORACLE_MAX_PARAMS,
      len(samples),
      end - start,
    ))

def oracle_fit(spec, samples, weights=None):
  '''Full-batch gradient descent on `(1/N) sum_i w_i L_i + wd/2 |theta|^2`
  over `spec.segment`, starting from `spec.model`. Every weight defaults to 1;
  a zero weight removes a sample while keeping N fixed.'''
  _check_oracle(spec, samples)
  N = len(samples)
  weights = np.ones(N) if weights is None else np.asarray(weights, dtype=np.float64)
  assert weights.shape == (N,)
  X, y, is_feature = deviation.stack_samples(samples)
  X, y, Wt = modelmod.to_tensor(X), modelmod.to_tensor(y), modelmod.to_tensor(weights)
  embed, theta = deviation.embed_fn(spec.model, spec.segment, spec.head)
  def f(theta_seg):
    L = deviation.losses_t(spec.model, embed(theta_seg), X, y, spec.loss_cfg, spec.head, is_feature)
    return torch.sum(Wt*L)/N + 0.5*spec.weight_decay*torch.dot(theta_seg, theta_seg)

  grad_f = grad(f)
  for _ in range(spec.steps):
    theta = theta - spec.learning_rate*grad_f(theta)
  if not torch.all(torch.isfinite(theta)):
    raise NumericalError('Oracle retraining diverged; lower its learning rate')
  return modelmod.with_params(spec.model, embed(theta).detach().numpy())

def _oracle_risk(spec, model, validation):
  R = deviation.risk(model, validation, spec.loss_cfg, spec.head)
  if not np.isfinite(R):
    raise NumericalError('Oracle validation risk is not finite')
  return R

def loo_oracle(spec, dataset, target_id, validation, mode='discard'):
  '''Actual change in validation risk from discarding or label-flipping one
  sample and retraining from the same initialisation.'''
  by_id = common.index_by_id(dataset)
  if target_id not in by_id:
    raise UserError('Sample %s is not in the oracle dataset' % target_id)
  baseline = oracle_fit(spec, dataset)

  if mode == 'discard':
    weights = [0. if S.id == target_id else 1. for S in dataset]
    variant = oracle_fit(spec, dataset, weights)
  elif mode == 'flip':
    flipped = [common.relabel(S, 1 - S.label) if S.id == target_id else S for S in dataset]
    variant = oracle_fit(spec, flipped)
  else:
    raise Exception('Unknown oracle mode: %s' % mode)
  return _oracle_risk(spec, variant, validation) - _oracle_risk(spec, baseline, validation)

def flip_oracle(spec, dataset, target_ids, validation):
  '''Actual validation-risk change from flipping every sample in `target_ids`.'''
  target_ids = set(target_ids)
  baseline = oracle_fit(spec, dataset)
  flipped = [common.relabel(S, 1 - S.label) if S.id in target_ids else S for S in dataset]
  variant = oracle_fit(spec, flipped)
  return _oracle_risk(spec, variant, validation) - _oracle_risk(spec, baseline, validation)

def perturb_oracle(spec, dataset, directions, alpha, validation):
  '''Actual validation-risk change from moving each candidate's feature by
  `alpha*direction`. Both runs hold the candidates at label 1, so only the
  move itself is measured.'''
  assert all(common.is_feature_sample(S) for S in dataset)
  moves = {D.id: alpha*D.direction for D in directions}
  unmoved = [common.relabel(S, 1) if S.id in moves else S for S in dataset]
  moved = [S._replace(values=S.values + moves[S.id]) if S.id in moves else S for S in unmoved]
  baseline = oracle_fit(spec, unmoved)
  variant = oracle_fit(spec, moved)
  return _oracle_risk(spec, variant, validation) - _oracle_risk(spec, baseline, validation)
