import numpy as np
from collections import namedtuple

_EPSILON = 1e-10

class UserError(Exception):
  '''Bad input from the person running the tool: exit code 1.'''
  pass

class NumericalError(Exception):
  '''Optimisation or linear-algebra failure: exit code 2.'''
  pass

# Names are stored on windows as integer indices into this tuple.
ANOMALY_CLASSES = (
  'spike',
  'level_shift',
  'freq_shift',
  'noise_burst',
  'shape_warp',
)

def class_index(name):
  if name not in ANOMALY_CLASSES:
    raise UserError('Unknown anomaly class %s (expected one of %s)' % (name, ', '.join(ANOMALY_CLASSES)))
  return ANOMALY_CLASSES.index(name)

# Choice tuples: each field names itself, so members go straight into JSON.
_PartitionChoice = namedtuple('_PartitionChoice', (
  'contaminated',
  'reference',
  'clean',
  'perturb_candidate',
  'labeled_anomaly',
))
Partitions = _PartitionChoice(*_PartitionChoice._fields)

_ProvenanceChoice = namedtuple('_ProvenanceChoice', ('original', 'injected'))
Provenance = _ProvenanceChoice(original='original', injected='injected-contaminant')

_SettingChoice = namedtuple('_SettingChoice', ('general', 'hard'))
Settings = _SettingChoice(*_SettingChoice._fields)

_HeadChoice = namedtuple('_HeadChoice', ('seen', 'unseen'))
Heads = _HeadChoice(*_HeadChoice._fields)

_SegmentChoice = namedtuple('_SegmentChoice', ('all', 'head_only'))
Segments = _SegmentChoice(*_SegmentChoice._fields)

ABLATIONS = (
  'no_flip',
  'keep_con_unflipped',
  'no_unseen_head',
  'no_feature_score',
  'random_ref',
  'random_flip',
  'random_perturb',
)

SeriesWindow = namedtuple('SeriesWindow', (
  'id',
  'values',
  'label',
  'class_id',
  'provenance',
))

# A labelled point in feature space, w = (phi, y).
FeatureSample = namedtuple('FeatureSample', (
  'id',
  'values',
  'label',
))

OpenSetSplit = namedtuple('OpenSetSplit', (
  'd_n',
  'd_a',
  'validation',
  'test',
  'setting',
  'seen_classes',
))

SynthSpec = namedtuple('SynthSpec', (
  'n_normal',
  'n_per_class',
  'dims',
  'length',
  'anomaly_classes',
  'amplitude',
  'period',
  'phase_jitter',
  'noise_sd',
  'seed',
))

Arch = namedtuple('Arch', (
  'dims',
  'length',
  'hidden',
  'feature_dim',
  'channels',
  'kernel_size',
  'dilations',
  'head_hidden',
))

ModelState = namedtuple('ModelState', (
  'arch',
  'params',
  'offsets',
  'seed',
))

PriorStats = namedtuple('PriorStats', (
  'mu_r',
  'sigma_r',
  'sample_count',
  'source_sigma',
))

LossConfig = namedtuple('LossConfig', (
  'margin',
  'channels',
  'prior',
  'signed_dev',
))

InfluenceEntry = namedtuple('InfluenceEntry', (
  'id',
  'influence',
  'partition',
  'provenance',
))

InfluenceReport = namedtuple('InfluenceReport', (
  'entries',
  'stest_residual',
  'damping',
  'validation_size',
  'flags',
))

PerturbDirection = namedtuple('PerturbDirection', (
  'id',
  'direction',
  'norm_sq',
))

PerturbedFeature = namedtuple('PerturbedFeature', (
  'source_id',
  'values',
  'label',
  'alpha',
  'direction_norm_sq',
))

TrainedModel = namedtuple('TrainedModel', (
  'model',
  'ref_feature_mean',
  'prior',
  'config',
  'audit',
  'pseudo_features',
  'ref_score_stats',
  'run_tag',
  'summary',
))

OracleSpec = namedtuple('OracleSpec', (
  'model',
  'loss_cfg',
  'segment',
  'head',
  'steps',
  'learning_rate',
  'weight_decay',
))

def index_by_id(samples):
  by_id = {S.id: S for S in samples}
  assert len(by_id) == len(samples), 'Duplicate sample ids'
  return by_id

def extract_ids(samples):
  return sorted(S.id for S in samples)

def relabel(window, label):
  return window._replace(label=label)

def is_feature_sample(sample):
  return isinstance(sample, FeatureSample)

def check_window(window, dims, length):
  assert window.values.shape == (dims, length), 'window %s has shape %s, expected %s' % (window.id, window.values.shape, (dims, length))
  assert np.all(np.isfinite(window.values))
  assert window.label in (0, 1)

