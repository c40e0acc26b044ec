# SPDX-License-Identifier: MIT

from __future__ import annotations

import math

from typing import IO, List, Optional, Sequence, Tuple, Union

import numpy

from mcsim._analysis import TaskSet, TaskSpec
from mcsim._model import BadParams, Time


Seed = Union[int, numpy.random.Generator]

MS = 1000  # ticks per millisecond
DEFAULT_PERIOD_RANGE = (10 * MS, 100 * MS)


def _rng(seed: Seed) -> numpy.random.Generator:
    if isinstance(seed, numpy.random.Generator):
        return seed
    return numpy.random.default_rng(seed)


def randfixedsum(n: int, total: float, seed: Seed = 0) -> List[float]:
    '''Draw ``n`` utilisations in [0, 1] summing to ``total``, uniform over that slice of the unit cube.

    Stafford's method: pick a simplex of the triangulated slice with the
    right probability, then a uniform point inside it.
    '''
    if n < 1 or not 0 < total <= n:
        raise BadParams(f'Cannot draw {n} utilisations summing to {total}')
    if n == 1:
        return [float(total)]
    if total == n:
        return [1.0] * n
    rng = _rng(seed)

    k = min(int(total), n - 1)
    s1 = total - numpy.arange(k, k - n, -1.0)
    s2 = numpy.arange(k + n, k, -1.0) - total
    tiny = numpy.finfo(float).tiny
    huge = numpy.finfo(float).max

    w = numpy.zeros((n, n + 1))
    w[0, 1] = huge
    t = numpy.zeros((n - 1, n))
    for i in range(2, n + 1):
        low = w[i - 2, 1:i + 1] * s1[0:i] / i
        high = w[i - 2, 0:i] * s2[n - i:n] / i
        w[i - 1, 1:i + 1] = low + high
        weight = w[i - 1, 1:i + 1] + tiny
        upward = s2[n - i:n] > s1[0:i]
        t[i - 2, 0:i] = (high / weight) * upward + (1 - low / weight) * numpy.logical_not(upward)

    x = numpy.zeros(n)
    kind = rng.uniform(size=n - 1)
    position = rng.uniform(size=n - 1)
    remaining = float(total)
    column = k + 1
    acc = 0.0
    scale = 1.0
    for i in range(n - 1, 0, -1):
        step = bool(kind[n - i - 1] <= t[i - 1, column - 1])
        coordinate = position[n - i - 1] ** (1.0 / i)
        acc += (1.0 - coordinate) * scale * remaining / (i + 1)
        scale *= coordinate
        x[n - i - 1] = acc + scale * step
        remaining -= step
        column -= step
    x[n - 1] = acc + scale * remaining
    return [float(value) for value in numpy.clip(rng.permutation(x), 0.0, 1.0)]


def make_taskset(
    utils: Sequence[float],
    period_range: Tuple[Time, Time] = DEFAULT_PERIOD_RANGE,
    seed: Seed = 0,
    *,
    period_choices: Optional[Sequence[Time]] = None,
    rounding: str = 'nearest',
) -> TaskSet:
    '''Turn utilisations into tasks with log-uniform periods and rate-monotonic priorities.

    Budgets are rounded half up (or down with ``rounding='down'``), never
    below one tick.
    '''
    if rounding not in ('nearest', 'down'):
        raise BadParams(f'Unknown rounding `{rounding}`')
    low, high = period_range
    if not 0 < low <= high:
        raise BadParams(f'Invalid period range {period_range}')
    rng = _rng(seed)

    periods: List[Time] = []
    for _ in utils:
        if period_choices:
            periods.append(int(rng.choice(numpy.asarray(period_choices))))
        else:
            periods.append(int(round(math.exp(rng.uniform(math.log(low), math.log(high))))))

    order = sorted(range(len(utils)), key=lambda index: (periods[index], index))
    priorities = {index: len(utils) - rank for rank, index in enumerate(order)}

    tasks = []
    for index, (util, period) in enumerate(zip(utils, periods)):
        exact = util * period
        budget = math.floor(exact + 0.5) if rounding == 'nearest' else math.floor(exact)
        tasks.append(TaskSpec(f'tau{index}', period, min(max(budget, 1), period), priorities[index]))
    return TaskSet(tuple(tasks))


def generate(
    n: int,
    total: float,
    sets: int = 1,
    seed: int = 0,
    **kwargs: object,
) -> List[TaskSet]:
    '''``sets`` task sets of ``n`` tasks at utilisation ``total`` from one seeded stream.'''
    rng = _rng(seed)
    return [make_taskset(randfixedsum(n, total, rng), seed=rng, **kwargs) for _ in range(sets)]  # type: ignore[arg-type]


def dump_taskset(tasks: TaskSet, file: IO[str], *, comment: Optional[str] = None) -> None:
    '''Write ``[[task]]`` tables readable by :meth:`TaskSet.from_tables`.'''
    if comment:
        file.write(f'# {comment}\n\n')
    for task in tasks:
        file.write('[[task]]\n')
        file.write(f'name = "{task.name}"\n')
        file.write(f'period = {task.period}\n')
        file.write(f'budget = {task.budget}\n')
        file.write(f'priority = {task.priority}\n')
        if task.criticality:
            file.write(f'criticality = {task.criticality}\n')
        if task.budget_hi is not None:
            file.write(f'budget-hi = {task.budget_hi}\n')
        file.write('\n')
