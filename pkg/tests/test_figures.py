# SPDX-License-Identifier: MIT

import re

import pytest

import mcsim
import mcsim._figures


@pytest.mark.parametrize('figure', [name for name in mcsim.figures() if name != 'edf-sweep'])
def test_figure(figure):
    result = mcsim.reproduce(figure)
    assert result.rows
    assert result.failures() == []
    assert result.passed


def test_edf_sweep():
    result = mcsim.reproduce('edf-sweep')
    assert result.passed
    assert [(row.name, row.actual) for row in result.rows] == [
        ('sets simulated', '100'), ('feasible sets', '100'), ('deadline misses', '0'),
    ]


def test_unknown_figure():
    with pytest.raises(mcsim.UnknownFigure, match=re.escape('Unknown figure `nope` (known: ')):
        mcsim.reproduce('nope')


def test_unknown_builtin():
    with pytest.raises(mcsim.UnknownFigure):
        mcsim._figures.load_builtin('nope')


def test_failing_row():
    row = mcsim.FigureRow('misses', '0', '1')
    result = mcsim.FigureResult('x', 'y', (row, mcsim.FigureRow('ok', 'a', 'a')))
    assert not result.passed
    assert result.failures() == [row]


def test_round_robin_reference():
    assert mcsim._figures.round_robin(['a', 'b'], 2, 7) == ['a', 'a', 'b', 'b', 'a', 'a', 'b']
