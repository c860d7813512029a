import io
import json

import progressbar

def test_quiet_writes_nothing():
  fd = io.StringIO()
  with progressbar.progressbar(total=3, desc='Quiet', file=fd, quiet=True) as pbar:
    pbar.update()
    pbar.set_postfix(risk=1.)
  assert fd.getvalue() == ''

def test_file_bar_emits_json_lines():
  fd = io.StringIO()
  with progressbar.progressbar(total=2, desc='Retraining', unit='epoch', file=fd) as pbar:
    pbar.update()
    pbar.set_postfix(risk=0.5)
    pbar.update()
  lines = [json.loads(L) for L in fd.getvalue().splitlines()]
  assert [L['count'] for L in lines] == [0, 1, 2]
  assert all(L['desc'] == 'Retraining' and L['total'] == 2 and L['unit'] == 'epoch' for L in lines)
  assert 'risk' not in lines[1]
  assert lines[2]['risk'] == 0.5

def test_unfinished_bar_reports_on_close():
  fd = io.StringIO()
  with progressbar.progressbar(desc='Open-ended', file=fd) as pbar:
    pbar.update(5)
  lines = [json.loads(L) for L in fd.getvalue().splitlines()]
  assert lines[-1]['count'] == 5
  assert lines[-1]['total'] == -1
