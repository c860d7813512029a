import numpy as np
import common
from common import SynthSpec, SeriesWindow, Provenance, UserError, ANOMALY_CLASSES
import util

# Transformed segments cover between 10% and 30% of the window.
_MIN_SEGMENT_FRAC = 0.1
_MAX_SEGMENT_FRAC = 0.3

def default_spec(**overrides):
  spec = SynthSpec(
    n_normal = 1000,
    n_per_class = 60,
    dims = 2,
    length = 100,
    anomaly_classes = ANOMALY_CLASSES,
    amplitude = 1.0,
    period = 25.0,
    phase_jitter = 1.0,
    noise_sd = 0.1,
    seed = 0,
  )
  return spec._replace(**overrides)

def check_spec(spec):
  for K in ('n_normal', 'n_per_class', 'dims', 'length'):
    V = getattr(spec, K)
    if not (isinstance(V, (int, np.integer)) and V > 0):
      raise UserError('SynthSpec.%s must be a positive integer, got %r' % (K, V))
  for K in ('amplitude', 'period'):
    if not getattr(spec, K) > 0:
      raise UserError('SynthSpec.%s must be positive, got %r' % (K, getattr(spec, K)))
  if spec.noise_sd < 0 or spec.phase_jitter < 0:
    raise UserError('SynthSpec noise_sd and phase_jitter must be non-negative')
  if len(spec.anomaly_classes) == 0:
    raise UserError('SynthSpec needs at least one anomaly class')
  for name in spec.anomaly_classes:
    common.class_index(name)
  if len(set(spec.anomaly_classes)) != len(spec.anomaly_classes):
    raise UserError('SynthSpec.anomaly_classes contains duplicates')
  if spec.length < 10:
    raise UserError('SynthSpec.length must be at least 10 so anomalous segments span >= 1 step')

def _base_signal(spec, rng):
  D, L = spec.dims, spec.length
  t = np.arange(L)
  # Each channel gets its own phase; `phase_jitter` is the fraction of a full
  # cycle the phase may wander.
  phase = rng.uniform(0, 2*np.pi*spec.phase_jitter, size=(D, 1))
  clean = spec.amplitude * np.sin(2*np.pi*t[None,:]/spec.period + phase)
  noise = rng.normal(0, spec.noise_sd, size=(D, L))
  return (clean, noise, phase)

def _pick_segment(L, rng):
  lo = int(np.ceil(_MIN_SEGMENT_FRAC * L))
  hi = max(lo, int(np.ceil(_MAX_SEGMENT_FRAC * L)))
  seglen = rng.integers(lo, hi + 1)
  start = rng.integers(0, L - seglen + 1)
  return (start, start + seglen)

def _pick_dims(D, rng):
  ndims = rng.integers(1, D + 1)
  return np.sort(rng.choice(D, size=ndims, replace=False))

def _spike(values, clean, phase, seg, dims, spec, rng):
  start, end = seg
  # Triangular pulse peaking in the middle of the segment.
  pulse = 1 - np.abs(np.linspace(-1, 1, end - start))
  for D in dims:
    height = rng.uniform(4, 6) * spec.amplitude * rng.choice((-1, 1))
    values[D,start:end] += height * pulse
  return values

def _level_shift(values, clean, phase, seg, dims, spec, rng):
  start, end = seg
  for D in dims:
    values[D,start:end] += rng.uniform(1.5, 2.5) * spec.amplitude * rng.choice((-1, 1))
  return values

def _freq_shift(values, clean, phase, seg, dims, spec, rng):
  start, end = seg
  t = np.arange(start, end)
  for D in dims:
    factor = rng.uniform(3, 5)
    values[D,start:end] += spec.amplitude * np.sin(2*np.pi*factor*t/spec.period + phase[D,0]) - clean[D,start:end]
  return values

def _noise_burst(values, clean, phase, seg, dims, spec, rng):
  start, end = seg
  for D in dims:
    values[D,start:end] += rng.normal(0, rng.uniform(0.8, 1.2) * spec.amplitude, size=end - start)
  return values

def _shape_warp(values, clean, phase, seg, dims, spec, rng):
  start, end = seg
  for D in dims:
    S = clean[D,start:end] / spec.amplitude
    # Compress the sinusoid towards a square wave.
    warped = spec.amplitude * np.sign(S) * np.abs(S)**rng.uniform(0.1, 0.3)
    values[D,start:end] += warped - clean[D,start:end]
  return values

_TRANSFORMS = {
  'spike': _spike,
  'level_shift': _level_shift,
  'freq_shift': _freq_shift,
  'noise_burst': _noise_burst,
  'shape_warp': _shape_warp,
}
assert set(_TRANSFORMS.keys()) == set(ANOMALY_CLASSES)

def make_anomaly(spec, name, rng):
  clean, noise, phase = _base_signal(spec, rng)
  values = clean + noise
  seg = _pick_segment(spec.length, rng)
  dims = _pick_dims(spec.dims, rng)
  return _TRANSFORMS[name](values, clean, phase, seg, dims, spec, rng)

def synth_generate(spec):
  check_spec(spec)
  rng = util.make_rng(spec.seed)
  windows = []

  for _ in range(spec.n_normal):
    clean, noise, _ = _base_signal(spec, rng)
    windows.append(SeriesWindow(
      id = len(windows),
      values = clean + noise,
      label = 0,
      class_id = None,
      provenance = Provenance.original,
    ))

  for name in spec.anomaly_classes:
    cidx = common.class_index(name)
    for _ in range(spec.n_per_class):
      windows.append(SeriesWindow(
        id = len(windows),
        values = make_anomaly(spec, name, rng),
        label = 1,
        class_id = cidx,
        provenance = Provenance.original,
      ))

  for W in windows:
    common.check_window(W, spec.dims, spec.length)
  return windows
