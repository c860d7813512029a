'''Desk-scale multi-seed experiments. They train dozens of models, so they
only run with `pytest --runslow`.'''
import numpy as np
import pytest

from common import Partitions, Provenance, Settings
import deviation
import evalmetrics
import influence
import splitter
import synthgen
import trainer

SEEDS = range(5)

DATA = dict(
  n_normal = 600,
  n_per_class = 30,
  dims = 1,
  length = 32,
)

TRAIN = dict(
  hidden = 16,
  feature_dim = 16,
  head_hidden = 16,
  epochs_total = 8,
  epochs_initial = 5,
  batch_size = 64,
  learning_rate = 0.01,
  prior_samples = 1000,
  cg_max_iter = 50,
  hessian_cap = 128,
)

def _split(seed, setting=Settings.general, contamination_rate=0.02):
  data = synthgen.synth_generate(synthgen.default_spec(seed=seed, **DATA))
  return splitter.make_openset_split(
    data,
    setting = setting,
    n_labeled = 5,
    contamination_rate = contamination_rate,
    seed = seed,
  )

def _train(split, seed, ablations=()):
  cfg = trainer.make_config(**TRAIN, seed=seed, ablations=ablations)
  return trainer.impact_train(split, cfg)

def _mean_auc(setting=Settings.general, contamination_rate=0.02, ablations=()):
  aucs = []
  for seed in SEEDS:
    split = _split(seed, setting, contamination_rate)
    tm = _train(split, seed, ablations)
    aucs.append(evalmetrics.evaluate_model(tm, split)['auc_overall'])
  return np.mean(aucs)

@pytest.mark.slow
def test_decontamination_audit():
  recalls, injected_infl, normal_infl = [], [], []
  for seed in SEEDS:
    split = _split(seed)
    tm = _train(split, seed)
    _, recall, _ = evalmetrics.decon_metrics(tm.audit)
    recalls.append(recall)
    pool = [E for E in tm.audit.entries if E.partition != Partitions.labeled_anomaly]
    injected_infl.append(np.mean([E.influence for E in pool if E.provenance == Provenance.injected]))
    normal_infl.append(np.mean([E.influence for E in pool if E.provenance == Provenance.original]))
  assert np.mean(recalls) >= 0.6
  assert np.mean(injected_infl) > np.mean(normal_infl)

@pytest.mark.slow
def test_anomalies_outscore_normals():
  split = _split(0)
  tm = _train(split, 0)
  _, _, s = trainer.score_samples(tm, split.test)
  labels = np.array([W.label for W in split.test])
  assert np.mean(s[labels == 1]) > np.mean(s[labels == 0])

@pytest.mark.slow
def test_flipping_helps_on_contaminated_split():
  full = _mean_auc()
  assert full >= _mean_auc(ablations=('no_flip',)) + 0.02

@pytest.mark.slow
def test_unseen_head_helps_on_hard_split():
  full = _mean_auc(Settings.hard)
  assert full >= _mean_auc(Settings.hard, ablations=('no_unseen_head',)) + 0.02

@pytest.mark.slow
@pytest.mark.parametrize('ablation', ['random_flip', 'random_perturb', 'random_ref'])
def test_random_selection_is_worse(ablation):
  assert _mean_auc() > _mean_auc(ablations=(ablation,))

@pytest.mark.slow
def test_contamination_robustness():
  def _drop(ablations):
    return _mean_auc(contamination_rate=0.02, ablations=ablations) - _mean_auc(contamination_rate=0.1, ablations=ablations)
  assert _drop(()) < _drop(('keep_con_unflipped',))

@pytest.mark.slow
def test_perturbed_features_resemble_unseen_anomalies():
  perturbed, randomized = [], []
  for seed in SEEDS:
    split = _split(seed, Settings.hard)
    report = evalmetrics.evaluate_model(_train(split, seed), split)
    perturbed.append(report['kld_perturbed_vs_unseen'])
    randomized.append(report['kld_random_vs_unseen'])
  assert np.mean(perturbed) < np.mean(randomized)

@pytest.mark.slow
def test_retraining_on_flipped_labels_lowers_validation_risk():
  lowered = []
  for seed in range(10):
    split = _split(seed)
    summary = _train(split, seed).summary
    lowered.append(summary['final_validation_risk'] < summary['initial_validation_risk'])
  assert np.mean(lowered) >= 0.9

@pytest.mark.slow
def test_degenerates_to_deviation_training():
  full, plain = [], []
  for seed in SEEDS:
    split = _split(seed, contamination_rate=0.)
    cfg = trainer.make_config(**{**TRAIN, 'lam': 0.}, seed=seed)
    labels = np.array([W.label for W in split.test])
    for aucs, tm in ((full, trainer.impact_train(split, cfg)), (plain, trainer.deviation_train(split, cfg))):
      aucs.append(evalmetrics.auc(trainer.score_samples(tm, split.test)[2], labels))
  assert abs(np.mean(full) - np.mean(plain)) <= 0.01

@pytest.mark.slow
def test_injected_contaminants_top_the_harmful_list():
  top, base = [], []
  for seed in SEEDS:
    split = _split(seed)
    tm = _train(split, seed)
    cfg = trainer.make_config(**TRAIN, seed=seed)
    loss_cfg = deviation.make_loss_config(tm.prior, cfg.margin, cfg.signed_dev)
    report = influence.batch_influence(tm.model, split.d_n, split.d_a, split.validation, loss_cfg, cfg.k, influence.solver_config(cfg))
    enrichment = evalmetrics.harmful_enrichment(report)
    top.append(enrichment['top_injected_rate'])
    base.append(enrichment['base_rate'])
  assert np.mean(top) > np.mean(base)

def _sweep_aucs(rows, param):
  return {row['value']: [R['auc_overall'] for R in row['per_seed']] for row in rows if row['param'] == param}

@pytest.fixture(scope='module')
def hard_sweep():
  make_split = lambda seed: _split(seed, Settings.hard)
  return evalmetrics.sweep(make_split, {'lam': [0., 0.5, 1., 2.], 'k': [1, 5, 10], 'channels': [1, 3, 5]}, list(SEEDS), **TRAIN)

@pytest.mark.slow
def test_sweep_unseen_weight(hard_sweep):
  aucs = _sweep_aucs(hard_sweep, 'lam')
  assert sorted(aucs.keys()) == [0., 0.5, 1., 2.]
  assert np.mean(aucs[1.]) >= np.mean(aucs[0.])

@pytest.mark.slow
def test_sweep_perturbed_count(hard_sweep):
  aucs = _sweep_aucs(hard_sweep, 'k')
  assert sorted(aucs.keys()) == [1, 5, 10]
  assert all(0 <= A <= 1 for values in aucs.values() for A in values)

@pytest.mark.slow
def test_sweep_channels(hard_sweep):
  aucs = _sweep_aucs(hard_sweep, 'channels')
  assert np.mean(aucs[3]) >= np.mean(aucs[1])

@pytest.mark.slow
def test_three_channels_within_noise_of_more():
  rows = evalmetrics.sweep(_split, {'channels': [3, 4, 5]}, list(SEEDS), **TRAIN)
  aucs = _sweep_aucs(rows, 'channels')
  stderr = lambda values: np.std(values, ddof=1) / np.sqrt(len(values))
  for r in (4, 5):
    noise = 2*np.sqrt(stderr(aucs[3])**2 + stderr(aucs[r])**2)
    assert abs(np.mean(aucs[3]) - np.mean(aucs[r])) <= noise
