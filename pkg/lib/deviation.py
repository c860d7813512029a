import logging
import numpy as np
import scipy.stats
import torch
from torch.func import grad, jvp, jacfwd, vmap

import common
from common import PriorStats, LossConfig, Heads, Segments, UserError, NumericalError
import hyperparams
import model as modelmod
import util

logger = logging.getLogger(__name__)

_MIN_PRIOR_SAMPLES = 100

def prior_stats(r, l=hyperparams.defaults['prior_samples'], sigma=hyperparams.defaults['prior_sigma'], seed=0):
  if l < _MIN_PRIOR_SAMPLES:
    raise UserError('Prior needs at least %s samples per channel, got %s' % (_MIN_PRIOR_SAMPLES, l))
  if not sigma > 0:
    raise UserError('Prior standard deviation must be positive, got %s' % sigma)
  rng = util.make_rng(seed)
  draws = rng.normal(0, sigma, size=(l, r))
  prior = PriorStats(
    mu_r = np.mean(draws, axis=0),
    sigma_r = np.std(draws, axis=0),
    sample_count = l,
    source_sigma = sigma,
  )
  assert np.all(prior.sigma_r > 0)
  return prior

def make_loss_config(prior, margin=hyperparams.defaults['margin'], signed_dev=hyperparams.defaults['signed_dev']):
  if not margin > 0:
    raise UserError('Deviation margin must be positive, got %s' % margin)
  return LossConfig(margin=margin, channels=len(prior.mu_r), prior=prior, signed_dev=signed_dev)

def deviation(scores, prior):
  scores = np.asarray(scores, dtype=np.float64)
  assert scores.shape[-1] == len(prior.mu_r)
  return np.abs(scores - prior.mu_r) / prior.sigma_r

def losses_from_scores_t(scores, y, cfg):
  '''Per-sample deviation loss from `N x r` head scores and `N` labels.'''
  mu = torch.as_tensor(cfg.prior.mu_r, dtype=modelmod.DTYPE)
  sigma = torch.as_tensor(cfg.prior.sigma_r, dtype=modelmod.DTYPE)
  z = (scores - mu) / sigma
  dev = torch.abs(z)
  # `abs` and `relu` both have gradient 0 at their kinks in torch, which gives
  # the zero subgradient at dev = 0 and dev = margin.
  pushed = z if cfg.signed_dev else dev
  y = y.unsqueeze(-1)
  per_channel = (1 - y)*dev + y*torch.relu(cfg.margin - pushed)
  return per_channel.mean(dim=-1)

def stack_samples(samples):
  '''Returns `(X, y, is_feature)` for a homogeneous list of windows or feature
  samples.'''
  assert len(samples) > 0
  is_feature = common.is_feature_sample(samples[0])
  assert all(common.is_feature_sample(S) == is_feature for S in samples), 'Cannot mix windows and feature samples'
  X = np.array([S.values for S in samples], dtype=np.float64)
  y = np.array([S.label for S in samples], dtype=np.float64)
  return (X, y, is_feature)

def losses_t(model, theta, X, y, cfg, head=Heads.seen, is_feature=False):
  '''Per-sample losses as a torch function of the full parameter vector.'''
  assert cfg.channels == model.arch.channels
  parts = modelmod.split_theta(model, theta)
  phi = X if is_feature else modelmod.features_t(parts['extractor'], model.arch, X)
  scores = modelmod.head_t(parts[head], model.arch, phi, head)
  return losses_from_scores_t(scores, y, cfg)

def embed_fn(model, segment, head=Heads.seen):
  '''Returns `(embed, theta0)`: `embed` places a segment vector back into the
  full parameter vector, and `theta0` is the current segment value.'''
  start, end = modelmod.segment_range(model, segment, head)
  base = modelmod.to_tensor(model.params)
  def embed(theta_seg):
    return torch.cat((base[:start], theta_seg, base[end:]))
  return (embed, base[start:end].clone())

def objective(model, samples, cfg, segment=Segments.all, head=Heads.seen):
  '''Mean loss over `samples` as a function of the chosen parameter segment.'''
  X, y, is_feature = stack_samples(samples)
  X, y = modelmod.to_tensor(X), modelmod.to_tensor(y)
  embed, theta0 = embed_fn(model, segment, head)
  def f(theta_seg):
    return losses_t(model, embed(theta_seg), X, y, cfg, head, is_feature).mean()
  return (f, theta0)

def single_objective(model, cfg, is_feature, segment=Segments.all, head=Heads.seen):
  '''Loss of one sample as a function of `(theta_seg, x, y)`, for `vmap`.'''
  embed, theta0 = embed_fn(model, segment, head)
  def f(theta_seg, x, y):
    return losses_t(model, embed(theta_seg), x.unsqueeze(0), y.unsqueeze(0), cfg, head, is_feature)[0]
  return (f, theta0)

def sample_losses(model, samples, cfg, head=Heads.seen):
  if len(samples) == 0:
    return np.zeros(0)
  X, y, is_feature = stack_samples(samples)
  with torch.no_grad():
    L = losses_t(model, modelmod.to_tensor(model.params), modelmod.to_tensor(X), modelmod.to_tensor(y), cfg, head, is_feature)
  return L.numpy().copy()

def sample_loss(model, z, cfg, head=Heads.seen):
  return sample_losses(model, [z], cfg, head)[0].item()

def risk(model, samples, cfg, head=Heads.seen):
  if len(samples) == 0:
    raise UserError('Cannot compute risk over an empty sample set')
  return np.mean(sample_losses(model, samples, cfg, head)).item()

def grad_params(model, z, cfg, segment=Segments.all, head=Heads.seen):
  f, theta0 = objective(model, [z], cfg, segment, head)
  return grad(f)(theta0).detach().numpy().copy()

def per_sample_grads(model, samples, cfg, segment=Segments.all, head=Heads.seen, chunk_size=128):
  '''`N x P` matrix of per-sample gradients over the chosen segment.'''
  if len(samples) == 0:
    start, end = modelmod.segment_range(model, segment, head)
    return np.zeros((0, end - start))
  _, _, is_feature = stack_samples(samples)
  f, theta0 = single_objective(model, cfg, is_feature, segment, head)
  batched = vmap(grad(f), in_dims=(None, 0, 0))
  out = []
  for chunk in util.chunks(samples, chunk_size):
    X, y, _ = stack_samples(chunk)
    out.append(batched(theta0, modelmod.to_tensor(X), modelmod.to_tensor(y)).detach().numpy())
  return np.concatenate(out, axis=0)

def make_hvp(model, samples, cfg, damping, segment=Segments.all, head=Heads.seen):
  '''Returns a function computing `(H + damping*I) v` by forward-over-reverse
  differentiation, where H is the Hessian of the mean loss over `samples`.'''
  if len(samples) == 0:
    raise UserError('Cannot form Hessian-vector products over an empty sample set')
  f, theta0 = objective(model, samples, cfg, segment, head)
  grad_f = grad(f)
  def hvp_fn(v):
    v = modelmod.to_tensor(v)
    assert v.shape == theta0.shape
    _, Hv = jvp(grad_f, (theta0,), (v,))
    Hv = Hv.detach().numpy() + damping*v.numpy()
    if not np.all(np.isfinite(Hv)):
      raise NumericalError('Hessian-vector product is not finite; try a lower learning rate or a higher damping')
    return Hv
  return hvp_fn

def hvp(model, samples, v, cfg, damping=hyperparams.defaults['damping'], segment=Segments.all, head=Heads.seen):
  return make_hvp(model, samples, cfg, damping, segment, head)(v)

def grad_feat_cross(model, w, cfg, head=Heads.seen):
  '''Mixed derivative of one feature sample's head loss: the parameter
  gradient over the head, differentiated in the input feature. Returns an
  `m x d` matrix, `m` being the head's parameter count.'''
  assert common.is_feature_sample(w)
  embed, theta0 = embed_fn(model, Segments.head_only, head)
  y = modelmod.to_tensor([w.label])
  def head_grad(phi):
    def f(theta_h):
      return losses_t(model, embed(theta_h), phi.unsqueeze(0), y, cfg, head, is_feature=True)[0]
    return grad(f)(theta0)
  cross = jacfwd(head_grad)(modelmod.to_tensor(w.values))
  return cross.detach().numpy().copy()

def gaussian_entropy(r, sigma2):
  if not sigma2 > 0:
    raise UserError('Gaussian variance must be positive, got %s' % sigma2)
  return 0.5 * r * (1 + np.log(2*np.pi*sigma2))

def entropy_mc(samples):
  '''Resubstitution estimate of differential entropy: the mean negative
  log-density of `N x r` samples under their fitted isotropic Gaussian.'''
  samples = np.asarray(samples, dtype=np.float64)
  assert samples.ndim == 2 and len(samples) > 1
  mu = np.mean(samples, axis=0)
  sd = np.sqrt(np.mean((samples - mu)**2))
  logpdf = scipy.stats.norm.logpdf(samples, loc=mu, scale=sd)
  return -np.mean(np.sum(logpdf, axis=1))
