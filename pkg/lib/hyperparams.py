explanations = {
  'epochs_total': '''
    Total number of epochs: initial training plus influence-guided retraining
  ''',

  'epochs_initial': '''
    Epochs of plain deviation-loss training before influence scoring starts
  ''',

  'batch_size': '''
    Mini-batch size for both training stages
  ''',

  'learning_rate': '''
    Step size of plain stochastic gradient descent
  ''',

  'lam': '''
    Weight of the unseen-abnormality loss relative to the seen-abnormality
    loss during retraining
  ''',

  'k': '''
    Number of reference normals and of perturbation candidates taken from each
    mini-batch
  ''',

  'alpha': '''
    Perturbation strength applied along the influence direction in feature
    space
  ''',

  'margin': '''
    Deviation margin that labelled anomalies must exceed on every channel
  ''',

  'channels': '''
    Number of anomaly-score channels emitted by each head
  ''',

  'damping': '''
    Multiple of the identity added to the Hessian before inversion
  ''',

  'cg_tol': '''
    Relative residual at which conjugate gradient stops
  ''',

  'cg_max_iter': '''
    Maximum number of conjugate gradient iterations per solve
  ''',

  'hessian_cap': '''
    Maximum number of validation samples used to form Hessian-vector products
  ''',

  'prior_samples': '''
    Number of Gaussian prior draws per channel used to estimate the reference
    mean and standard deviation
  ''',

  'prior_sigma': '''
    Standard deviation of the isotropic Gaussian prior
  ''',

  'weight_decay': '''
    L2 penalty added to every SGD step; zero reproduces the plain objective
  ''',

  'refresh_per_batch': '''
    Recompute the Hessian solve for every mini-batch instead of once per
    retraining epoch
  ''',

  'zscore_combine': '''
    Standardise the abnormality and feature-deviation scores with reference-set
    statistics before adding them
  ''',

  'signed_dev': '''
    Use signed deviations in the anomaly hinge instead of absolute deviations
  ''',

  'unseen_both_heads': '''
    Also pass the most helpful normals through the unseen head during
    retraining
  ''',

  'hidden': '''
    Width of the hidden temporal convolution layer
  ''',

  'feature_dim': '''
    Dimension of the extracted feature vector
  ''',

  'head_hidden': '''
    Hidden width of both scoring heads; zero gives affine heads
  ''',

  'kernel_size': '''
    Temporal convolution kernel size
  ''',

  'dilations': '''
    Dilation of each of the two temporal convolution layers
  ''',

  'seed': '''
    Seed for initialisation, shuffling, prior draws and random ablations
  ''',

  'ablations': '''
    Components to disable or randomise; any of no_flip, keep_con_unflipped,
    no_unseen_head, no_feature_score, random_ref, random_flip, random_perturb
  ''',
}

defaults = {
  'epochs_total': 10,
  'epochs_initial': 9,
  'batch_size': 64,
  'learning_rate': 3e-4,
  'lam': 1.0,
  'k': 5,
  'alpha': 0.02,
  'margin': 5.0,
  'channels': 3,
  'damping': 0.01,
  'cg_tol': 1e-4,
  'cg_max_iter': 100,
  'hessian_cap': 512,
  'prior_samples': 5000,
  'prior_sigma': 1.0,
  'weight_decay': 0.0,
  'refresh_per_batch': False,
  'zscore_combine': False,
  'signed_dev': False,
  'unseen_both_heads': False,
  'hidden': 64,
  'feature_dim': 64,
  'head_hidden': 64,
  'kernel_size': 3,
  'dilations': (1, 2),
  'seed': 0,
  'ablations': (),
}

assert set(explanations.keys()) == set(defaults.keys())
