from tqdm import tqdm
import sys
import json
import datetime
from contextlib import contextmanager

@contextmanager
def progressbar(**kwargs):
  '''A `tqdm` bar on a terminal; JSON status lines otherwise, so batch logs
  stay parseable. `quiet=True` suppresses both.'''
  fd = kwargs.pop('file', sys.stderr)
  quiet = kwargs.pop('quiet', False)

  if quiet:
    pbar = progressbar_null()
  elif fd.isatty():
    kwargs.setdefault('smoothing', 0.1)
    pbar = tqdm(file=fd, **kwargs)
  else:
    pbar = progressbar_file(
      kwargs.get('desc', 'Working'),
      kwargs.get('total', None),
      kwargs.get('unit', 'it'),
      fd,
    )
  try:
    yield pbar
  finally:
    pbar.close()

class progressbar_null:
  def update(self, n=1):
    pass

  def set_postfix(self, **kwargs):
    pass

  def close(self):
    pass

class progressbar_file:
  # Seconds between status lines, besides the first and last.
  _update_min = 10

  def __init__(self, desc, total, unit, fd):
    self._desc = desc
    self._total = total if total is not None else -1
    self._unit = unit
    self._fd = fd
    self._count = 0
    self._postfix = {}
    self._started_at = datetime.datetime.now()
    self._last_printed = self._started_at
    self._print()

  def update(self, n=1):
    self._count += n
    if self._total > -1:
      assert self._count <= self._total

    elapsed = (datetime.datetime.now() - self._last_printed).total_seconds()
    if self._count == n or self._count == self._total or elapsed >= self._update_min:
      self._print()

  def _print(self):
    self._last_printed = datetime.datetime.now()
    out = {
      'desc': self._desc,
      'count': self._count,
      'total': self._total,
      'unit': self._unit,
      'started_at': str(self._started_at),
      'timestamp': str(self._last_printed),
    }
    print(json.dumps({**out, **self._postfix}), file=self._fd)
    self._fd.flush()

  def set_postfix(self, **kwargs):
    # Only remember the values here; they go out with the next status line.
    self._postfix.update({K: float(V) for K, V in kwargs.items()})

  def close(self):
    if self._count != self._total:
      self._print()
