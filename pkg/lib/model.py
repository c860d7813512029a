import numpy as np
import torch
import torch.nn.functional as F

import common
from common import Arch, ModelState, Heads, Segments, UserError
import hyperparams
import util

DTYPE = torch.float64
SEGMENTS = ('extractor', Heads.seen, Heads.unseen)

def default_arch(dims, length, **overrides):
  arch = Arch(
    dims = dims,
    length = length,
    hidden = hyperparams.defaults['hidden'],
    feature_dim = hyperparams.defaults['feature_dim'],
    channels = hyperparams.defaults['channels'],
    kernel_size = hyperparams.defaults['kernel_size'],
    dilations = tuple(hyperparams.defaults['dilations']),
    head_hidden = hyperparams.defaults['head_hidden'],
  )
  return arch._replace(**overrides)

def check_arch(arch):
  for K in ('dims', 'length', 'hidden', 'feature_dim', 'channels', 'kernel_size'):
    if getattr(arch, K) < 1:
      raise UserError('Architecture %s must be positive, got %s' % (K, getattr(arch, K)))
  if arch.head_hidden < 0:
    raise UserError('Architecture head_hidden must be non-negative')
  if len(arch.dilations) != 2 or min(arch.dilations) < 1:
    raise UserError('Architecture needs two positive dilations, got %s' % (arch.dilations,))

def _head_shapes(arch):
  d, r, H = arch.feature_dim, arch.channels, arch.head_hidden
  if H == 0:
    return [('W', (r, d)), ('b', (r,))]
  return [('W1', (H, d)), ('b1', (H,)), ('W2', (r, H)), ('b2', (r,))]

def param_shapes(arch):
  '''Ordered `(segment, name, shape)` triples. The flat parameter vector
  concatenates them in this order.'''
  K = arch.kernel_size
  shapes = [
    ('extractor', 'conv1_W', (arch.hidden, arch.dims, K)),
    ('extractor', 'conv1_b', (arch.hidden,)),
    ('extractor', 'conv2_W', (arch.feature_dim, arch.hidden, K)),
    ('extractor', 'conv2_b', (arch.feature_dim,)),
  ]
  for head in (Heads.seen, Heads.unseen):
    shapes += [(head, name, shape) for name, shape in _head_shapes(arch)]
  return shapes

def _make_offsets(arch):
  offsets = {}
  pos = 0
  for seg, name, shape in param_shapes(arch):
    size = int(np.prod(shape))
    start, _ = offsets.get(seg, (pos, pos))
    pos += size
    offsets[seg] = (start, pos)
  return offsets

def check_offsets(model):
  pos = 0
  for seg in SEGMENTS:
    start, end = model.offsets[seg]
    assert start == pos and end >= start
    pos = end
  assert pos == len(model.params)

def n_params(arch):
  return sum(int(np.prod(shape)) for _, _, shape in param_shapes(arch))

def init_model(arch, seed):
  check_arch(arch)
  rng = util.make_rng(seed)
  chunks = []
  for seg, name, shape in param_shapes(arch):
    if len(shape) == 1:
      chunks.append(np.zeros(shape))
    else:
      fan_in = int(np.prod(shape[1:]))
      bound = 1 / np.sqrt(fan_in)
      chunks.append(rng.uniform(-bound, bound, size=shape))
  params = np.concatenate([C.ravel() for C in chunks]).astype(np.float64)
  model = ModelState(arch=arch, params=params, offsets=_make_offsets(arch), seed=seed)
  check_offsets(model)
  return model

def segment_range(model, segment, head=Heads.seen):
  '''Half-open range of the flat vector that `segment` differentiates.'''
  if segment == Segments.all:
    return (0, len(model.params))
  elif segment == Segments.head_only:
    return model.offsets[head]
  else:
    raise Exception('Unknown segment: %s' % segment)

def get_segment(model, name):
  start, end = model.offsets[name]
  return model.params[start:end].copy()

def set_segment(model, name, values):
  start, end = model.offsets[name]
  values = np.asarray(values, dtype=np.float64)
  assert values.shape == (end - start,)
  params = model.params.copy()
  params[start:end] = values
  return model._replace(params=params)

def with_params(model, params):
  params = np.asarray(params, dtype=np.float64)
  assert params.shape == model.params.shape
  return model._replace(params=params)

def to_tensor(A):
  return torch.as_tensor(np.asarray(A), dtype=DTYPE)

def _unflatten(theta, arch, seg):
  # `theta` holds only the segment `seg`.
  views = {}
  pos = 0
  for S, name, shape in param_shapes(arch):
    if S != seg:
      continue
    size = int(np.prod(shape))
    views[name] = theta[pos:pos + size].reshape(shape)
    pos += size
  assert pos == theta.shape[0]
  return views

def _causal_conv(X, W, b, dilation):
  pad = dilation * (W.shape[-1] - 1)
  return F.conv1d(F.pad(X, (pad, 0)), W, b, dilation=dilation)

def features_t(theta_ext, arch, X):
  '''Torch forward of the extractor. `X` is `B x D x L` or `D x L`.'''
  single = X.dim() == 2
  if single:
    X = X.unsqueeze(0)
  P = _unflatten(theta_ext, arch, 'extractor')
  H = torch.relu(_causal_conv(X, P['conv1_W'], P['conv1_b'], arch.dilations[0]))
  H = _causal_conv(H, P['conv2_W'], P['conv2_b'], arch.dilations[1])
  phi = H.mean(dim=-1)
  return phi[0] if single else phi

def head_t(theta_head, arch, phi, head=Heads.seen):
  '''Torch forward of either head. The two heads share a shape, so `head` only
  picks which names to read.'''
  P = _unflatten(theta_head, arch, head)
  if arch.head_hidden == 0:
    return phi @ P['W'].T + P['b']
  hidden = torch.relu(phi @ P['W1'].T + P['b1'])
  return hidden @ P['W2'].T + P['b2']

def split_theta(model, theta):
  '''Slice a full torch parameter vector into its three segments.'''
  return {seg: theta[start:end] for seg, (start, end) in model.offsets.items()}

def _window_values(model, x):
  values = x.values if isinstance(x, common.SeriesWindow) else np.asarray(x, dtype=np.float64)
  arch = model.arch
  if values.shape[-2:] != (arch.dims, arch.length):
    raise UserError('Input has shape %s, but the model expects %s x %s windows' % (values.shape, arch.dims, arch.length))
  return values

def extract_features(model, x):
  values = _window_values(model, x)
  theta = to_tensor(model.params)
  with torch.no_grad():
    phi = features_t(split_theta(model, theta)['extractor'], model.arch, to_tensor(values))
  return phi.numpy().copy()

def extract_features_batch(model, windows, chunk_size=256):
  if len(windows) == 0:
    return np.zeros((0, model.arch.feature_dim))
  theta_ext = split_theta(model, to_tensor(model.params))['extractor']
  out = []
  for chunk in util.chunks(windows, chunk_size):
    X = np.array([_window_values(model, W) for W in chunk])
    with torch.no_grad():
      out.append(features_t(theta_ext, model.arch, to_tensor(X)).numpy())
  return np.concatenate(out, axis=0)

def head_scores(model, phi, head):
  if head not in Heads:
    raise Exception('Unknown head: %s' % head)
  phi = np.asarray(phi, dtype=np.float64)
  if phi.shape[-1] != model.arch.feature_dim:
    raise UserError('Feature has length %s, but the model expects %s' % (phi.shape[-1], model.arch.feature_dim))
  theta = split_theta(model, to_tensor(model.params))
  with torch.no_grad():
    scores = head_t(theta[head], model.arch, to_tensor(phi), head)
  return scores.numpy().copy()

def forward(model, x, head=Heads.seen):
  return head_scores(model, extract_features(model, x), head)
