import numpy as np
import util

def test_sliding_windows_shape_and_content():
  series = np.arange(20, dtype=np.float64).reshape((10, 2))
  W = util.sliding_windows(series, 4, 1)
  assert W.shape == (7, 2, 4)
  assert np.array_equal(W[0], series[:4].T)
  assert np.array_equal(W[-1], series[6:].T)

def test_sliding_windows_stride():
  series = np.zeros((300, 2))
  assert util.sliding_windows(series, 100, 100).shape[0] == 3
  assert util.sliding_windows(series, 100, 1).shape[0] == 201

def test_select_extreme_breaks_ties_by_id():
  values = [1., -2., -2., 3., -2.]
  ids = [10, 7, 3, 1, 5]
  assert util.select_extreme(values, ids, 2, largest=False) == [3, 5]
  assert util.select_extreme(values, ids, 1, largest=True) == [1]
  assert util.select_extreme(values, ids, 10, largest=False) == [3, 5, 7, 10, 1]
  assert util.select_extreme([], [], 3, largest=True) == []

def test_backfill_point_scores():
  scores = util.backfill_point_scores(np.array([5., 6., 7.]), 4)
  assert np.array_equal(scores, [5., 5., 5., 5., 6., 7.])
  single = util.backfill_point_scores(np.array([2.]), 3)
  assert np.array_equal(single, [2., 2., 2.])

def test_chunks():
  assert list(util.chunks(range(5), 2)) == [[0, 1], [2, 3], [4]]

def test_to_jsonable():
  obj = {'a': np.arange(3), 'b': (np.float64(1.5), np.int64(2)), 3: None}
  assert util.to_jsonable(obj) == {'a': [0, 1, 2], 'b': [1.5, 2], '3': None}
