import logging
import numpy as np

import common
from common import PerturbedFeature, PerturbDirection, FeatureSample, UserError
import influence

logger = logging.getLogger(__name__)

def flip_labels(d_con):
  bad = [W.id for W in d_con if W.label != 0]
  if len(bad) > 0:
    raise UserError('Only normal-labelled samples can be flipped; %s already have label 1' % bad)
  return [common.relabel(W, 1) for W in d_con]

def randomize_directions(directions, rng):
  '''Replace each direction by a Gaussian one of the same norm.'''
  out = []
  for D in directions:
    R = rng.normal(size=len(D.direction))
    R *= np.sqrt(D.norm_sq) / np.linalg.norm(R)
    out.append(PerturbDirection(id=D.id, direction=R, norm_sq=np.dot(R, R).item()))
  return out

def compute_directions(model, candidates, validation, cfg, solver=None, cache=None):
  '''Perturbation directions for `candidates`, which may be windows or
  feature samples; windows are mapped to features first.'''
  if len(candidates) == 0:
    return []
  if not common.is_feature_sample(candidates[0]):
    candidates = influence.feature_samples(model, candidates)
  solver = influence.solver_config() if solver is None else solver
  if cache is None:
    cache = influence.head_stest(model, validation, cfg, solver)
  return [influence.perturb_direction(model, C, validation, cfg, solver, cache) for C in candidates]

def apply_directions(features, directions, alpha):
  '''`features` maps source id to its feature vector.'''
  if alpha < 0:
    raise UserError('Perturbation strength must be non-negative, got %s' % alpha)
  perturbed = []
  for D in directions:
    if D.norm_sq < influence.ZERO_DIRECTION**2:
      continue
    perturbed.append(PerturbedFeature(
      source_id = D.id,
      values = features[D.id] + alpha*D.direction,
      label = 1,
      alpha = alpha,
      direction_norm_sq = D.norm_sq,
    ))
  if len(directions) > 0 and len(perturbed) == 0:
    logger.warning('Every perturbation direction was zero; no pseudo-anomalies generated')
  return perturbed

def perturb_features(model, perturb_candidates, validation, alpha, cfg, solver=None, cache=None, rng=None):
  '''Pseudo-anomalies built by moving each candidate's feature along its
  risk-increasing direction. With `rng` set, directions are replaced by random
  ones of the same norm.'''
  if len(perturb_candidates) == 0:
    return []
  feats = perturb_candidates
  if not common.is_feature_sample(feats[0]):
    feats = influence.feature_samples(model, feats)
  directions = compute_directions(model, feats, validation, cfg, solver, cache)
  if rng is not None:
    directions = randomize_directions(directions, rng)
  return apply_directions({F.id: F.values for F in feats}, directions, alpha)

def as_feature_samples(perturbed):
  return [FeatureSample(id=P.source_id, values=P.values, label=P.label) for P in perturbed]

def predicted_risk_delta_flip(report, N):
  '''Returns `(delta, flags)`. Only contaminated entries with positive
  influence count.'''
  con = [E.influence for E in report.entries if E.partition == common.Partitions.contaminated and E.influence > 0]
  if len(con) == 0:
    return (0., ['empty_contaminated_set'])
  delta = -(2/(N*len(con))) * np.sum(con)
  if not delta < 0:
    logger.warning('Predicted flip risk change %.3g is not negative', delta)
    return (delta.item(), ['nonnegative_flip_delta'])
  return (delta.item(), [])

def predicted_risk_delta_perturb(directions, alpha, N):
  '''Returns `(delta, flags)`. Accepts directions or perturbed features.'''
  if len(directions) == 0:
    return (0., ['empty_perturbation_set'])
  norms = [D.norm_sq if isinstance(D, PerturbDirection) else D.direction_norm_sq for D in directions]
  delta = -(alpha/(N*len(norms))) * np.sum(norms)
  if delta > 0:
    logger.warning('Predicted perturbation risk change %.3g is positive', delta)
    return (float(delta), ['positive_perturb_delta'])
  return (float(delta), [])
