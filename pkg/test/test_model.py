import numpy as np
import pytest
import torch

from common import Heads, Segments, UserError
import model as modelmod
from conftest import TINY_ARCH

def test_default_arch():
  arch = modelmod.default_arch(2, 100)
  assert arch.hidden == 64 and arch.feature_dim == 64
  assert arch.channels == 3

def test_param_count_and_offsets(tiny_model):
  assert modelmod.n_params(TINY_ARCH) == 119
  assert len(tiny_model.params) == 119
  start, end = tiny_model.offsets[Heads.seen]
  ustart, uend = tiny_model.offsets[Heads.unseen]
  assert end - start == uend - ustart == 26
  assert end == ustart and uend == 119
  assert modelmod.segment_range(tiny_model, Segments.all) == (0, 119)
  assert modelmod.segment_range(tiny_model, Segments.head_only, Heads.unseen) == (ustart, uend)

def test_init_deterministic():
  A = modelmod.init_model(TINY_ARCH, 5)
  B = modelmod.init_model(TINY_ARCH, 5)
  C = modelmod.init_model(TINY_ARCH, 6)
  assert A.params.tobytes() == B.params.tobytes()
  assert not np.array_equal(A.params, C.params)

def test_invalid_arch():
  with pytest.raises(UserError):
    modelmod.init_model(TINY_ARCH._replace(dilations=(1,)), 0)
  with pytest.raises(UserError):
    modelmod.init_model(TINY_ARCH._replace(channels=0), 0)

def test_segment_round_trip(tiny_model):
  values = np.arange(26, dtype=np.float64)
  updated = modelmod.set_segment(tiny_model, Heads.seen, values)
  assert np.array_equal(modelmod.get_segment(updated, Heads.seen), values)
  assert np.array_equal(modelmod.get_segment(updated, Heads.unseen), modelmod.get_segment(tiny_model, Heads.unseen))
  # The original state is left untouched.
  assert not np.array_equal(modelmod.get_segment(tiny_model, Heads.seen), values)

def test_zero_extractor_gives_zero_features(tiny_model):
  start, end = tiny_model.offsets['extractor']
  zeroed = modelmod.set_segment(tiny_model, 'extractor', np.zeros(end - start))
  phi = modelmod.extract_features(zeroed, np.zeros((TINY_ARCH.dims, TINY_ARCH.length)))
  assert phi.shape == (TINY_ARCH.feature_dim,)
  assert np.all(phi == 0)

def test_features_pure_and_batched(tiny_model, windows):
  single = np.array([modelmod.extract_features(tiny_model, W) for W in windows])
  again = np.array([modelmod.extract_features(tiny_model, W) for W in windows])
  assert single.tobytes() == again.tobytes()
  batched = modelmod.extract_features_batch(tiny_model, windows, chunk_size=3)
  assert np.allclose(single, batched, rtol=0, atol=1e-12)
  assert modelmod.extract_features_batch(tiny_model, []).shape == (0, TINY_ARCH.feature_dim)

def test_conv_is_causal():
  rng = np.random.default_rng(0)
  X = torch.as_tensor(rng.normal(size=(1, 2, 12)))
  W = torch.as_tensor(rng.normal(size=(3, 2, 3)))
  b = torch.zeros(3, dtype=torch.float64)
  Y = modelmod._causal_conv(X, W, b, 2)
  assert Y.shape == (1, 3, 12)
  X2 = X.clone()
  X2[..., 8:] += 5.
  Y2 = modelmod._causal_conv(X2, W, b, 2)
  assert torch.equal(Y[..., :8], Y2[..., :8])
  assert not torch.equal(Y[..., 8:], Y2[..., 8:])

def test_head_scores(tiny_model, windows):
  phi = modelmod.extract_features(tiny_model, windows[0])
  seen = modelmod.head_scores(tiny_model, phi, Heads.seen)
  assert seen.shape == (TINY_ARCH.channels,)
  assert np.array_equal(seen, modelmod.forward(tiny_model, windows[0]))

  phis = modelmod.extract_features_batch(tiny_model, windows)
  batched = modelmod.head_scores(tiny_model, phis, Heads.unseen)
  assert batched.shape == (len(windows), TINY_ARCH.channels)
  assert np.allclose(batched[0], modelmod.head_scores(tiny_model, phi, Heads.unseen))

def test_seen_edit_leaves_unseen_head(tiny_model, windows):
  phi = modelmod.extract_features(tiny_model, windows[0])
  before = modelmod.head_scores(tiny_model, phi, Heads.unseen)
  start, end = tiny_model.offsets[Heads.seen]
  edited = modelmod.set_segment(tiny_model, Heads.seen, np.ones(end - start))
  assert np.array_equal(before, modelmod.head_scores(edited, phi, Heads.unseen))
  assert not np.array_equal(modelmod.head_scores(tiny_model, phi, Heads.seen), modelmod.head_scores(edited, phi, Heads.seen))

def test_affine_head():
  arch = TINY_ARCH._replace(head_hidden=0)
  M = modelmod.init_model(arch, 0)
  start, end = M.offsets[Heads.seen]
  assert end - start == arch.channels * arch.feature_dim + arch.channels
  theta = modelmod.get_segment(M, Heads.seen)
  W = theta[:arch.channels * arch.feature_dim].reshape((arch.channels, arch.feature_dim))
  b = theta[arch.channels * arch.feature_dim:]
  phi = np.array([0.5, -1., 2.])
  assert np.allclose(modelmod.head_scores(M, phi, Heads.seen), W @ phi + b)

def test_shape_mismatch(tiny_model):
  with pytest.raises(UserError):
    modelmod.extract_features(tiny_model, np.zeros((3, TINY_ARCH.length)))
  with pytest.raises(UserError):
    modelmod.head_scores(tiny_model, np.zeros(5), Heads.seen)
