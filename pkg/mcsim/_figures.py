# SPDX-License-Identifier: MIT

'''Canned scenarios with known outcomes.

Each figure runs a scenario shipped in ``mcsim/scenarios`` (or built on the
fly) and compares what happened against the expected values, row by row.
'''

from __future__ import annotations

import dataclasses
import heapq
import os.path

from fractions import Fraction
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy

import mcsim._analysis
import mcsim._engine
import mcsim._scenario
import mcsim._taskgen

from mcsim._analysis import TaskSet
from mcsim._model import McsimError, Time


SCENARIO_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'scenarios')

# divisors of 10^5, so hyperperiods stay at 10^5 ticks
EDF_PERIODS = (10000, 12500, 20000, 25000, 50000, 100000)


class UnknownFigure(McsimError):
    '''No figure with that name.'''


@dataclasses.dataclass(frozen=True)
class FigureRow():
    name: str
    expected: str
    actual: str

    @property
    def passed(self) -> bool:
        return self.expected == self.actual


@dataclasses.dataclass(frozen=True)
class FigureResult():
    figure: str
    description: str
    rows: Tuple[FigureRow, ...]

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    def failures(self) -> List[FigureRow]:
        return [row for row in self.rows if not row.passed]


_Rows = List[Tuple[str, Any, Any]]
_FIGURES: Dict[str, Tuple[str, Callable[[], _Rows]]] = {}


def _figure(name: str, description: str) -> Callable[[Callable[[], _Rows]], Callable[[], _Rows]]:
    def decorator(func: Callable[[], _Rows]) -> Callable[[], _Rows]:
        _FIGURES[name] = (description, func)
        return func
    return decorator


def _yes(value: bool) -> str:
    return 'yes' if value else 'no'


def figures() -> Dict[str, str]:
    '''Figure names and their descriptions.'''
    return {name: description for name, (description, _) in _FIGURES.items()}


def scenario_path(name: str) -> str:
    return os.path.join(SCENARIO_DIR, f'{name}.toml')


def load_builtin(name: str) -> mcsim._scenario.Scenario:
    '''Load one of the scenarios shipped with the package.'''
    path = scenario_path(name)
    if not os.path.isfile(path):
        raise UnknownFigure(f'No scenario named `{name}`')
    return mcsim._scenario.load_scenario(path)


def reproduce(figure: str) -> FigureResult:
    '''Run a figure and compare it with its expected values.'''
    try:
        description, func = _FIGURES[figure]
    except KeyError:
        raise UnknownFigure(
            f'Unknown figure `{figure}` (known: {", ".join(sorted(_FIGURES))})'
        ) from None
    return FigureResult(figure, description, tuple(
        FigureRow(name, str(expected), str(actual)) for name, expected, actual in func()
    ))


# budgets

@_figure('budget-ex-a', 'Budgets cap the share of each thread, the lowest one runs in the slack')
def _budget_ex_a() -> _Rows:
    result = load_builtin('budget-ex-a').run()
    return [
        (f'share of {thread}', share, result.share(thread))
        for thread, share in (('p3', Fraction(1, 5)), ('p2', Fraction(1, 2)), ('p1', Fraction(3, 10)))
    ]


def round_robin(threads: Sequence[str], quantum: Time, horizon: Time) -> List[str]:
    '''Reference time-slicing schedule, one entry per tick.'''
    ticks: List[str] = []
    while len(ticks) < horizon:
        for thread in threads:
            ticks.extend([thread] * quantum)
    return ticks[:horizon]


def ticks(result: mcsim._engine.RunResult) -> List[Optional[str]]:
    '''The thread on the CPU at every tick of a run, ``None`` when idle.'''
    schedule: List[Optional[str]] = [None] * result.horizon
    for segment in result.timeline:
        for tick in range(segment.start, min(segment.end, result.horizon)):
            schedule[tick] = segment.thread
    return schedule


@_figure('budget-ex-b', 'Full budgets degenerate into round robin and starve the lower priority')
def _budget_ex_b() -> _Rows:
    result = load_builtin('budget-ex-b').run()
    return [
        ('schedule', ' '.join(round_robin(('a', 'b'), 1, result.horizon)), ' '.join(map(str, ticks(result)))),
        ('share of c', Fraction(0), result.share('c')),
    ]


# mixed criticality

def _misses(result: mcsim._engine.RunResult, threads: Optional[Iterable[str]] = None) -> int:
    selected = None if threads is None else set(threads)
    return sum(1 for job in result.misses if selected is None or job.thread in selected)


@_figure('mc-params-low', 'Sample mixed-criticality task set in low mode meets every deadline')
def _mc_params_low() -> _Rows:
    scenario = load_builtin('mc-params-low')
    result = scenario.run()
    report = mcsim._analysis.rta(scenario.taskset)
    return [
        ('hyperperiod', 600, result.horizon),
        ('deadline misses', 0, _misses(result)),
        ('response time of T4', 4, report['T4'].response),
        ('response time of T2', 15, report['T2'].response),
        ('response time of T1', 25, report['T1'].response),
        ('schedulable', 'yes', _yes(report.schedulable)),
    ]


@_figure('mc-params-high', 'T4 at its high budget without a mode switch makes T1 miss')
def _mc_params_high() -> _Rows:
    scenario = load_builtin('mc-params-high')
    result = scenario.run()
    report = mcsim._analysis.rta(scenario.taskset)
    total = mcsim._analysis.utilization(scenario.taskset)
    return [
        ('utilisation', Fraction(19, 20), total),
        ('above the 4 task bound', 'yes', _yes(total > mcsim._analysis.ll_bound(4))),
        ('T1 schedulable', 'no', _yes(report['T1'].schedulable)),
        ('T1 misses a deadline', 'yes', _yes(_misses(result, ['T1']) > 0)),
    ]


@_figure('mc-params-handler', 'A timeout handler extends T4 and raises the criticality')
def _mc_params_handler() -> _Rows:
    engine = load_builtin('mc-params-handler').build()
    result = engine.run()
    kernel = engine.kernel
    faults = [record for record in result.trace if record.category == 'timeout-fault']
    switches = [dict(record.detail)['new'] for record in result.trace if record.category == 'crit-switch']
    high = [kernel.threads[name].effective_priority for name in ('T5', 'T4', 'T2')]
    return [
        ('first fault', 'T4', faults[0].subject if faults else ''),
        ('criticality switches', '1', ','.join(switches)),
        ('misses of T5, T4, T2', 0, _misses(result, ['T5', 'T4', 'T2'])),
        ('T4 budget', 7, kernel.scs['T4-sc'].budget),
        ('T3 below every criticality 1 task', 'yes', _yes(kernel.threads['T3'].effective_priority < min(high))),
    ]


@_figure('mode-switch-counts', 'Threads boosted by each switch of the 60 thread benchmark')
def _mode_switch_counts() -> _Rows:
    result = load_builtin('mode-switch-counts').run()
    rows: _Rows = []
    ratios = []
    for record in result.trace:
        if record.category != 'crit-switch':
            continue
        detail = dict(record.detail)
        level, boosted, ops = detail['new'], int(detail['boosted']), int(detail['ops'])
        if detail['old'] != '0' or level == '0':
            continue
        rows.append((f'boosted at level {level}', {'3': 4, '2': 12, '1': 28}[level], boosted))
        ratios.append(Fraction(ops, boosted))
    rows.append(('switches measured', 3, len(ratios)))
    # one visit per boosted thread plus at most one queue move
    rows.append(('operations linear in boosted threads', 'yes', _yes(bool(ratios) and max(ratios) <= 2)))
    return rows


# passive servers

@_figure('passive-server', 'A passive server runs entirely on the budgets of its clients')
def _passive_server() -> _Rows:
    result = load_builtin('passive-server').run()
    return [
        ('server-sc charged', 0, result.charged['server-sc']),
        ('c1-sc charged', 3, result.charged['c1-sc']),
        ('c2-sc charged', 4, result.charged['c2-sc']),
        ('server consumed', 7, result.consumed.get('server', 0)),
    ]


@_figure('rollback', 'A timeout during a dirty update rolls the server back to its last commit')
def _rollback() -> _Rows:
    result = load_builtin('rollback').run()
    categories = [record.category for record in result.trace]
    replies = [
        dict(record.detail).get('badge')
        for record in result.trace
        if record.category == 'ipc-reply' and record.subject == 'server'
    ]
    return [
        ('timeout faults', 1, categories.count('timeout-fault')),
        ('rollbacks', 1, categories.count('rollback')),
        ('first committed reply', '3', replies[0] if replies else ''),
        ('errors', '{}', result.errors),
    ]


# EDF

def edf_scenario(tasks: TaskSet, *, horizon: Optional[Time] = None) -> mcsim._scenario.Scenario:
    '''A user-level EDF scheduler running ``tasks`` on one shared SC, at zero kernel cost.'''
    if horizon is None:
        horizon = mcsim._analysis.hyperperiod(tasks)
    names = [task.name for task in tasks]
    window = 2 * horizon
    data: Dict[str, Any] = {
        'kernel': {'horizon': horizon, 'kernel-wcet': 0},
        'endpoint': [{'name': 'edf'}],
        'sc': [
            {'name': 'edf-shared-sc', 'budget': window, 'period': window},
            {'name': 'edf-sched-sc', 'budget': window, 'period': window},
        ],
        'thread': [{
            'name': 'edf-scheduler',
            'priority': 11,
            'sc': 'edf-sched-sc',
            'program': 'edf-scheduler',
            'params': {
                'clients': names,
                'periods': [task.period for task in tasks],
                'sc': 'edf-shared-sc',
                'ep': 'edf',
                'timer': 'edf-timer',
            },
        }] + [{
            'name': task.name,
            'priority': 10,
            'program': 'edf-client',
            'params': {'ep': 'edf', 'index': index, 'work': task.budget},
            'task': {'period': task.period},
        } for index, task in enumerate(tasks)],
        'notification': [{'name': 'edf-timer', 'bound': 'edf-scheduler'}],
    }
    return mcsim._scenario.Scenario(data, 'edf')


def reference_edf(tasks: TaskSet, horizon: Time) -> Dict[str, List[Time]]:
    '''Completion times under ideal preemptive EDF, ties going to the earlier task.'''
    tasks_ = list(tasks)
    next_release = [0] * len(tasks_)
    backlog: List[List[Tuple[Time, Time]]] = [[] for _ in tasks_]
    ready: List[Tuple[Time, int]] = []
    completions: Dict[str, List[Time]] = {task.name: [] for task in tasks_}
    now = 0
    while now < horizon:
        for index, task in enumerate(tasks_):
            while next_release[index] <= now:
                deadline = next_release[index] + task.period
                backlog[index].append((deadline, task.budget))
                if len(backlog[index]) == 1:
                    heapq.heappush(ready, (deadline, index))
                next_release[index] = deadline
        upcoming = min(next_release)
        if not ready:
            now = upcoming
            continue
        deadline, index = ready[0]
        _, left = backlog[index][0]
        run = min(left, upcoming - now, horizon - now)
        now += run
        if run < left:
            backlog[index][0] = (deadline, left - run)
            continue
        heapq.heappop(ready)
        backlog[index].pop(0)
        completions[tasks_[index].name].append(now)
        if backlog[index]:
            heapq.heappush(ready, (backlog[index][0][0], index))
    return completions


def edf_sets(sets: int = 100, seed: int = 0, sizes: Sequence[int] = (2, 3, 4, 5, 6, 7, 8)) -> List[TaskSet]:
    '''Feasible task sets at utilisation at most 1 with bounded hyperperiods, cycling through ``sizes``.

    Budgets round down but never below one tick, so a set pushed over 1 is
    drawn again.
    '''
    rng = numpy.random.default_rng(seed)
    result: List[TaskSet] = []
    while len(result) < sets:
        tasks = mcsim._taskgen.make_taskset(
            mcsim._taskgen.randfixedsum(sizes[len(result) % len(sizes)], 1.0, rng),
            seed=rng,
            period_choices=EDF_PERIODS,
            rounding='down',
        )
        if mcsim._analysis.edf_test(tasks):
            result.append(tasks)
    return result


@_figure('edf-sweep', 'User-level EDF misses nothing on feasible task sets')
def _edf_sweep() -> _Rows:
    sets = edf_sets()
    results = [edf_scenario(tasks).run() for tasks in sets]
    return [
        ('sets simulated', 100, len(results)),
        ('feasible sets', 100, sum(mcsim._analysis.edf_test(tasks) for tasks in sets)),
        ('deadline misses', 0, sum(_misses(result) for result in results)),
    ]
