import os
import sys
import numpy as np
import pytest
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'lib'))

import common
from common import Arch, FeatureSample, LossConfig, OracleSpec, PriorStats, SeriesWindow, Provenance, Segments, Heads
import deviation
import influence
import model as modelmod
import splitter
import synthgen
import trainer

def pytest_addoption(parser):
  parser.addoption('--runslow', action='store_true', default=False, help='Run desk-scale multi-seed experiments')

def pytest_configure(config):
  config.addinivalue_line('markers', 'slow: desk-scale experiment, only run with --runslow')

def pytest_collection_modifyitems(config, items):
  if config.getoption('--runslow'):
    return
  skip = pytest.mark.skip(reason='needs --runslow')
  for item in items:
    if 'slow' in item.keywords:
      item.add_marker(skip)

TINY_ARCH = Arch(
  dims = 2,
  length = 12,
  hidden = 4,
  feature_dim = 3,
  channels = 2,
  kernel_size = 3,
  dilations = (1, 2),
  head_hidden = 4,
)

TINY_TRAIN = dict(
  hidden = 4,
  feature_dim = 4,
  head_hidden = 4,
  channels = 2,
  epochs_total = 3,
  epochs_initial = 2,
  batch_size = 32,
  learning_rate = 0.01,
  k = 2,
  prior_samples = 200,
  cg_max_iter = 20,
  hessian_cap = 64,
)

TINY_DATA = dict(
  n_normal = 120,
  n_per_class = 12,
  dims = 1,
  length = 16,
  anomaly_classes = ('spike', 'level_shift', 'freq_shift'),
)

@pytest.fixture
def tiny_model():
  return modelmod.init_model(TINY_ARCH, 3)

@pytest.fixture
def loss_cfg():
  return deviation.make_loss_config(deviation.prior_stats(TINY_ARCH.channels, 1000, 1.0, seed=0), margin=5.0)

def random_windows(n, arch=TINY_ARCH, seed=0, labels=None):
  rng = np.random.default_rng(seed)
  out = []
  for idx in range(n):
    label = int(rng.integers(2)) if labels is None else labels[idx]
    out.append(SeriesWindow(
      id = idx,
      values = rng.normal(size=(arch.dims, arch.length)),
      label = label,
      class_id = 0 if label == 1 else None,
      provenance = Provenance.original,
    ))
  return out

@pytest.fixture
def windows():
  return random_windows(10)

def tiny_split(seed=0, setting=common.Settings.general, contamination_rate=0.05):
  data = synthgen.synth_generate(synthgen.default_spec(seed=seed, **TINY_DATA))
  return splitter.make_openset_split(
    data,
    setting = setting,
    n_labeled = 2,
    contamination_rate = contamination_rate,
    val_fraction = 0.2,
    seed = seed,
  )

@pytest.fixture(scope='session')
def trained_tiny():
  split = tiny_split()
  cfg = trainer.make_config(**TINY_TRAIN)
  return (split, cfg, trainer.impact_train(split, cfg))

# A problem on which every loss stays in its linear branch: an affine head on
# small features, a prior mean far below zero and a wide margin. With weight
# decay equal to the damping, first-order influence estimates are then exact.
CONVEX_DAMPING = 4.0

def convex_problem(seed=0, n_normal=45, n_contam=5, n_val_normal=20, n_val_anom=5):
  rng = np.random.default_rng(seed)
  arch = Arch(dims=1, length=4, hidden=1, feature_dim=2, channels=1, kernel_size=1, dilations=(1, 1), head_hidden=0)
  prior = PriorStats(mu_r=np.array([-10.]), sigma_r=np.array([1.]), sample_count=5000, source_sigma=1.)
  cfg = LossConfig(margin=20., channels=1, prior=prior, signed_dev=False)
  init = modelmod.init_model(arch, seed)

  def _feat(id, centre, label):
    return FeatureSample(id=id, values=centre + rng.normal(0, 0.3, size=2), label=label)

  train = [_feat(idx, np.zeros(2), 0) for idx in range(n_normal)]
  contam_ids = list(range(n_normal, n_normal + n_contam))
  train += [_feat(idx, np.full(2, 2.), 0) for idx in contam_ids]
  val = [_feat(1000 + idx, np.zeros(2), 0) for idx in range(n_val_normal)]
  val += [_feat(2000 + idx, np.full(2, 2.), 1) for idx in range(n_val_anom)]

  spec = OracleSpec(
    model = init,
    loss_cfg = cfg,
    segment = Segments.head_only,
    head = Heads.seen,
    steps = 60,
    learning_rate = 0.2,
    weight_decay = CONVEX_DAMPING,
  )
  solver = influence.SolverConfig(damping=CONVEX_DAMPING, tol=1e-12, max_iter=50, hessian_cap=512)
  return dict(spec=spec, cfg=cfg, train=train, val=val, contam_ids=contam_ids, solver=solver)

@pytest.fixture
def convex():
  return convex_problem
