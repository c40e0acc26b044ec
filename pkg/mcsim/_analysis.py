# SPDX-License-Identifier: MIT

from __future__ import annotations

import csv
import dataclasses
import functools
import math

from fractions import Fraction
from typing import IO, Any, Iterator, List, Mapping, Optional, Sequence, Tuple

from mcsim._model import ConfigurationError, Fetcher, McsimError, Time


class AnalysisError(McsimError):
    '''The task set cannot be analysed.'''


class TiePriorities(AnalysisError):
    '''Two tasks share a priority.'''


@dataclasses.dataclass(frozen=True)
class TaskSpec():
    name: str
    period: Time
    budget: Time
    priority: int
    criticality: int = 0
    budget_hi: Optional[Time] = None

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise ConfigurationError(f'Task `{self.name}` needs a positive period', key=f'task.{self.name}.period')
        for field, value in (('budget', self.budget), ('budget-hi', self.budget_hi)):
            if value is not None and not 0 <= value <= self.period:
                raise ConfigurationError(
                    f'Task `{self.name}` has {field} {value} outside [0, {self.period}]',
                    key=f'task.{self.name}.{field}',
                )

    def wcet(self, high: bool = False) -> Time:
        if high and self.budget_hi is not None:
            return self.budget_hi
        return self.budget

    def utilization(self, high: bool = False) -> Fraction:
        return Fraction(self.wcet(high), self.period)


@dataclasses.dataclass(frozen=True)
class TaskSet():
    tasks: Tuple[TaskSpec, ...] = ()

    def __iter__(self) -> Iterator[TaskSpec]:
        return iter(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    def by_priority(self) -> List[TaskSpec]:
        '''Tasks from the most to the least urgent.'''
        return sorted(self.tasks, key=lambda task: -task.priority)

    @classmethod
    def from_tables(cls, tables: Sequence[Mapping[str, Any]], *, section: str = 'task') -> TaskSet:
        '''Build a set from ``[[task]]`` tables.'''
        tasks = []
        for index, table in enumerate(tables):
            fetcher = Fetcher(table, f'{section}[{index}]')
            tasks.append(TaskSpec(
                fetcher.get_opt_str('name') or f'task{index}',
                fetcher.get_int('period'),
                fetcher.get_int('budget'),
                fetcher.get_int('priority', 0),
                fetcher.get_int('criticality', 0),
                fetcher.get_opt_int('budget-hi'),
            ))
        return cls(tuple(tasks))


def utilization(tasks: TaskSet, *, high: bool = False) -> Fraction:
    '''Sum of budget over period, exact.'''
    return sum((task.utilization(high) for task in tasks), Fraction(0))


def ll_bound(n: int) -> float:
    '''Liu and Layland utilisation bound for ``n`` rate-monotonic tasks.'''
    if n < 1:
        raise ValueError(f'Need at least one task, got {n}')
    return n * (2 ** (1 / n) - 1)


def _lcm(a: int, b: int) -> int:
    return a * b // math.gcd(a, b)


def hyperperiod(tasks: TaskSet) -> Time:
    if not len(tasks):
        raise AnalysisError('The hyperperiod of an empty task set is undefined')
    return functools.reduce(_lcm, (task.period for task in tasks))


@dataclasses.dataclass(frozen=True)
class TaskResponse():
    task: TaskSpec
    response: Optional[Time]

    @property
    def schedulable(self) -> bool:
        return self.response is not None and self.response <= self.task.period


@dataclasses.dataclass(frozen=True)
class RtaReport():
    responses: Tuple[TaskResponse, ...]
    high: bool = False

    @property
    def schedulable(self) -> bool:
        return all(response.schedulable for response in self.responses)

    def __getitem__(self, name: str) -> TaskResponse:
        for response in self.responses:
            if response.task.name == name:
                return response
        raise KeyError(name)

    def unschedulable(self) -> List[str]:
        return [response.task.name for response in self.responses if not response.schedulable]


def _response_time(task: TaskSpec, higher: Sequence[TaskSpec], high: bool) -> Optional[Time]:
    own = task.wcet(high)
    time = own + sum(other.wcet(high) for other in higher)
    while time <= task.period:
        demand = own + sum(-(-time // other.period) * other.wcet(high) for other in higher)
        if demand == time:
            return time
        time = demand
    return None


def rta(tasks: TaskSet, *, high: bool = False) -> RtaReport:
    '''Exact response times under fixed priorities, implicit deadlines.

    ``high`` uses each task's high-criticality budget where it has one.
    '''
    ordered = tasks.by_priority()
    for upper, lower in zip(ordered, ordered[1:]):
        if upper.priority == lower.priority:
            raise TiePriorities(f'Tasks `{upper.name}` and `{lower.name}` share priority {upper.priority}')
    return RtaReport(tuple(
        TaskResponse(task, _response_time(task, ordered[:index], high))
        for index, task in enumerate(ordered)
    ), high)


def ll_test(tasks: TaskSet, *, high: bool = False) -> bool:
    '''Sufficient rate-monotonic test.'''
    return len(tasks) == 0 or utilization(tasks, high=high) <= ll_bound(len(tasks))


def edf_test(tasks: TaskSet, *, high: bool = False) -> bool:
    return utilization(tasks, high=high) <= 1


def write_report(tasks: TaskSet, file: IO[str], *, high: bool = False) -> RtaReport:
    '''Write a CSV report of the exact analysis plus the utilisation tests.'''
    report = rta(tasks, high=high)
    writer = csv.writer(file, lineterminator='\n')
    writer.writerow(['task', 'priority', 'period', 'budget', 'utilization', 'response', 'schedulable'])
    for response in report.responses:
        task = response.task
        writer.writerow([
            task.name,
            task.priority,
            task.period,
            task.wcet(high),
            f'{float(task.utilization(high)):.4f}',
            '' if response.response is None else response.response,
            'yes' if response.schedulable else 'no',
        ])
    total = utilization(tasks, high=high)
    writer.writerow(['total', '', '', '', f'{float(total):.4f}', '', 'yes' if report.schedulable else 'no'])
    if len(tasks):
        bound = ll_bound(len(tasks))
        writer.writerow(['ll-bound', '', '', '', f'{bound:.4f}', '', 'yes' if ll_test(tasks, high=high) else 'no'])
    writer.writerow(['edf', '', '', '', '1.0000', '', 'yes' if edf_test(tasks, high=high) else 'no'])
    return report
