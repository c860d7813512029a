import numpy as np
from numba import njit

def make_rng(seed):
  return np.random.default_rng(seed)

def chunks(seq, size):
  assert size > 0
  seq = list(seq)
  for start in range(0, len(seq), size):
    yield seq[start:start + size]

def sliding_windows(series, length, stride=1):
  '''`series` is T x D. Returns an array of shape W x D x L, one window per
  start offset, where W = floor((T - L) / stride) + 1.'''
  T, D = series.shape
  assert T >= length
  # `sliding_window_view` returns a read-only view of shape (T-L+1, D, L).
  view = np.lib.stride_tricks.sliding_window_view(series, length, axis=0)
  return np.ascontiguousarray(view[::stride])

def select_extreme(values, ids, k, largest):
  '''Pick `k` entries with the smallest (or largest) `values`. Ties are broken
  by ascending id, so the result never depends on input order.'''
  values = np.asarray(values, dtype=np.float64)
  ids = np.asarray(ids)
  assert len(values) == len(ids)
  if len(values) == 0 or k <= 0:
    return []
  key = -values if largest else values
  # `lexsort` sorts by the last key first.
  order = np.lexsort((ids, key))
  return [ids[idx].item() for idx in order[:k]]

@njit
def backfill_point_scores(window_scores, length):
  # Window `w` covers timesteps [w, w + length); its score goes on the last of
  # them. The first `length - 1` timesteps have no window ending on them and
  # take the first window's score instead.
  W = len(window_scores)
  T = W + length - 1
  point = np.empty(T)
  for t in range(length - 1):
    point[t] = window_scores[0]
  for w in range(W):
    point[w + length - 1] = window_scores[w]
  return point

def to_jsonable(obj):
  # JSON can't take NumPy scalars or arrays. Ugh.
  if isinstance(obj, dict):
    return {str(K): to_jsonable(V) for K, V in obj.items()}
  if isinstance(obj, (list, tuple, set)):
    return [to_jsonable(V) for V in obj]
  if isinstance(obj, np.ndarray):
    return obj.tolist()
  if isinstance(obj, np.generic):
    return obj.item()
  return obj
