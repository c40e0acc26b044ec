# SPDX-License-Identifier: MIT

from __future__ import annotations

import csv
import importlib.util
import json
import os
import os.path
import sys
import warnings

from typing import IO, Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy
import tomli

import mcsim._analysis
import mcsim._engine
import mcsim._kernel
import mcsim._programs

from mcsim._model import (
    ConfigurationError, EndpointCap, Fetcher, KernelConfig, McsimWarning, NtfnCap, ScCap, TcbCap, Time, TraceRecord,
    parse_capability
)


if sys.version_info < (3, 8):
    from backports.cached_property import cached_property
else:
    from functools import cached_property


TRACE_COLUMNS = ('time', 'category', 'subject', 'object', 'detail')


def load_file_module(name: str, path: str) -> object:
    spec = importlib.util.spec_from_file_location(name, path)
    assert spec
    if not spec.loader:  # pragma: no cover
        raise ImportError(f'Unable to import `{path}`: no loader')
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)  # type: ignore
    return module


def read_data(path: str) -> Dict[str, Any]:
    '''Read a TOML or JSON document.'''
    try:
        if path.endswith('.json'):
            with open(path) as f:
                data = json.load(f)
        else:
            with open(path, 'rb') as f:
                data = tomli.load(f)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigurationError(f'Failed to parse `{path}`: {e}') from None
    if not isinstance(data, dict):
        raise ConfigurationError(f'`{path}` does not hold a table')
    return data


class Scenario():
    '''A scenario file: kernel constants, objects, thread programs and external events.

    Every :meth:`build` starts from a fresh kernel, so a scenario can be run
    any number of times with identical results.
    '''
    def __init__(self, data: Mapping[str, Any], name: str = 'scenario', base_dir: str = '.') -> None:
        self._data = data
        self._name = name
        self._base_dir = base_dir
        self._fetcher = Fetcher(data, '')
        kernel = Fetcher(self._fetcher.get_table('kernel'), 'kernel')
        self.config = KernelConfig(
            priority_bits=kernel.get_int('priority-bits', 8),
            criticality_levels=kernel.get_int('criticality-levels', 4),
            kernel_wcet=kernel.get_int('kernel-wcet', 1),
        )
        self.seed = kernel.get_int('seed', 0)
        self.default_grants = kernel.get('default-grants') is not False
        self._horizon = kernel.get_opt_int('horizon')
        self._programs_file = kernel.get_opt_str('programs')
        self.taskset = mcsim._analysis.TaskSet.from_tables(
            [table for _, table in self._fetcher.tables('task')]
        )
        if len(self.taskset) and mcsim._analysis.utilization(self.taskset) > 1:
            warnings.warn(
                f'Tasks of `{name}` use {float(mcsim._analysis.utilization(self.taskset)):.3f} of the CPU',
                McsimWarning,
            )
        # validate everything up front
        self.build()

    @classmethod
    def from_file(cls, path: str) -> Scenario:
        name = os.path.splitext(os.path.basename(path))[0]
        return cls(read_data(path), name, os.path.dirname(os.path.abspath(path)))

    @property
    def name(self) -> str:
        return self._name

    @property
    def horizon(self) -> Time:
        if self._horizon is not None:
            return self._horizon
        if len(self.taskset):
            return mcsim._analysis.hyperperiod(self.taskset)
        raise ConfigurationError('Field `kernel.horizon` missing and there are no tasks to derive it from',
                                 key='kernel.horizon')

    @cached_property
    def programs(self) -> Dict[str, mcsim._programs.Program]:
        programs = mcsim._programs.builtin_programs()
        if self._programs_file:
            path = os.path.join(self._base_dir, self._programs_file)
            if not os.path.isfile(path):
                raise ConfigurationError(f'Programs file `{path}` not found', key='kernel.programs')
            programs.update(mcsim._programs.collect_programs(load_file_module('mcsim_programs', path)))
        return programs

    def build(  # noqa: C901
        self,
        *,
        seed: Optional[int] = None,
        externals: Optional[Iterable[Tuple[Time, str]]] = None,
        check: bool = False,
        horizon: Optional[Time] = None,
    ) -> mcsim._engine.Engine:
        '''Create the kernel objects and an engine ready to run.

        ``externals`` replaces the scenario's interrupt sources, as a replay
        does.
        '''
        kernel = mcsim._kernel.Kernel(self.config)
        kernel.check = check
        fetcher = self._fetcher
        programs = self.programs

        for item, _ in fetcher.tables('endpoint'):
            kernel.create_endpoint(item.get_name())
        for item, _ in fetcher.tables('sc'):
            kernel.create_sc(item.get_name(), item.get_int('budget'), item.get_int('period'), item.get_int('data', 0))

        # name -> (program, params, jobs, start time or None)
        launches: List[Tuple[str, mcsim._programs.Program, Dict[str, Any], Optional[mcsim._engine.PeriodicJobs],
                             Optional[Time]]] = []
        grants: Dict[str, List[str]] = {}

        for (item, table), task in zip(fetcher.tables('task'), self.taskset):
            sc = kernel.create_sc(f'{task.name}-sc', task.budget, task.period)
            thread = kernel.create_thread(
                task.name,
                task.priority,
                mcp=item.get_opt_int('mcp'),
                criticality=task.criticality,
                timeout_handler=item.get_opt_str('timeout-handler'),
            )
            kernel.attach(sc.id, thread.id)
            offset = item.get_int('offset', 0)
            params = {'work': item.get_int('work', task.budget)}
            launches.append((task.name, programs['periodic'], params,
                             mcsim._engine.PeriodicJobs(task.period, offset), offset))
            grants[task.name] = item.get_strings('grants')

        for item, table in fetcher.tables('thread'):
            name = item.get_name()
            thread = kernel.create_thread(
                name,
                item.get_int('priority', 0),
                mcp=item.get_opt_int('mcp'),
                criticality=item.get_int('criticality', 0),
                mcc=item.get_opt_int('mcc'),
                timeout_handler=item.get_opt_str('timeout-handler'),
            )
            home = item.get_opt_str('sc')
            if home is not None:
                if home not in kernel.scs:
                    raise ConfigurationError(f'Unknown scheduling context `{home}`', key=f'{item.prefix}.sc')
                kernel.attach(home, name)
            state = item.get_opt_str('state') or 'ready'
            if state not in ('ready', 'suspended'):
                raise ConfigurationError(f'Invalid state `{state}`', key=f'{item.prefix}.state')
            program = mcsim._programs.resolve_program(
                table.get('program', 'spin'), programs, key=f'{item.prefix}.program'
            )
            task_table = Fetcher(item.get_table('task'), f'{item.prefix}.task')
            jobs = None
            offset = task_table.get_int('offset', 0)
            if task_table.get('period') is not None:
                jobs = mcsim._engine.PeriodicJobs(task_table.get_int('period'), offset)
            launches.append((name, program, item.get_table('params'), jobs, offset if state == 'ready' else None))
            grants[name] = item.get_strings('grants')

        for item, _ in fetcher.tables('notification'):
            kernel.create_notification(item.get_name(), item.get_opt_str('bound'))

        self._grant(kernel, grants)

        engine = mcsim._engine.Engine(kernel, self.horizon if horizon is None else horizon)
        for name, program, params, jobs, start in launches:
            engine.add_program(name, program, params, jobs=jobs)
            if start is not None:
                engine.start_thread(name, start)
        if externals is None:
            externals = self._externals(engine.horizon, self.seed if seed is None else seed)
        for at, ntfn in externals:
            engine.add_interrupt(at, ntfn)
        return engine

    def _grant(self, kernel: mcsim._kernel.Kernel, grants: Mapping[str, Sequence[str]]) -> None:
        for holder in kernel.threads:
            if self.default_grants:
                for sc in kernel.scs:
                    kernel.authority.grant(holder, ScCap(sc))
                for thread in kernel.threads:
                    kernel.authority.grant(holder, TcbCap(thread))
                for ep in kernel.endpoints:
                    kernel.authority.grant(holder, EndpointCap(ep))
                for ntfn in kernel.notifications:
                    kernel.authority.grant(holder, NtfnCap(ntfn))
            for index, text in enumerate(grants.get(holder, ())):
                try:
                    kernel.authority.grant(holder, parse_capability(text))
                except ConfigurationError as e:
                    raise ConfigurationError(str(e), key=f'{holder}.grants[{index}]') from None

    def _externals(self, horizon: Time, seed: int) -> List[Tuple[Time, str]]:
        '''Interrupt times of the ``[[external]]`` sources; jitter is drawn from the seed.'''
        rng = numpy.random.default_rng(seed)
        events = []
        for item, _ in self._fetcher.tables('external'):
            ntfn = item.get_opt_str('notification')
            if ntfn is None:
                raise ConfigurationError(f'Field `{item.prefix}.notification` missing', key=f'{item.prefix}.notification')
            times = item.get('at')
            if times is not None:
                if not isinstance(times, list) or not all(isinstance(at, int) for at in times):
                    raise ConfigurationError('Field `at` must be a list of times', key=f'{item.prefix}.at')
                events.extend((at, ntfn) for at in times)
                continue
            period = item.get_int('period')
            if period <= 0:
                raise ConfigurationError(f'Invalid period {period}', key=f'{item.prefix}.period')
            jitter = item.get_int('jitter', 0)
            at = item.get_int('offset', 0)
            while at < horizon:
                events.append((at + (int(rng.integers(0, jitter + 1)) if jitter else 0), ntfn))
                at += period
        if any(at < 0 for at, _ in events):
            raise ConfigurationError('External events cannot happen before time 0', key='external')
        return sorted(events, key=lambda event: event[0])

    def run(self, *, seed: Optional[int] = None, check: bool = False) -> mcsim._engine.RunResult:
        result = self.build(seed=seed, check=check).run()
        total = sum(result.charged.values()) + result.idle
        if total != result.horizon:
            warnings.warn(f'Accounted {total} ticks over a horizon of {result.horizon}', McsimWarning)
        return result


def load_scenario(path: str) -> Scenario:
    return Scenario.from_file(path)


def run_scenario(scenario: Scenario, *, seed: Optional[int] = None, check: bool = False) -> mcsim._engine.RunResult:
    return scenario.run(seed=seed, check=check)


# traces

def write_trace(records: Iterable[TraceRecord], file: IO[str]) -> None:
    writer = csv.writer(file, lineterminator='\n')
    writer.writerow(TRACE_COLUMNS)
    for record in records:
        writer.writerow(record.as_row())


def read_trace(file: IO[str]) -> List[TraceRecord]:
    reader = csv.reader(file)
    header = next(reader, None)
    if header is None or tuple(header) != TRACE_COLUMNS:
        raise ConfigurationError(f'Not a trace: expected the columns {",".join(TRACE_COLUMNS)}')
    records = []
    for row in reader:
        time, category, subject, object, detail = row
        pairs = tuple(
            tuple(pair.split('=', 1)) for pair in detail.split(';') if pair
        )
        records.append(TraceRecord(int(time), category, subject, object, pairs))  # type: ignore[arg-type]
    return records


def recorded_externals(records: Iterable[TraceRecord]) -> List[Tuple[Time, str]]:
    '''External interrupts as they happened in a recorded run.'''
    return [
        (record.time, record.object)
        for record in records
        if record.category == 'irq' and ('source', 'external') in record.detail
    ]


def replay(scenario: Scenario, records: Iterable[TraceRecord], *, check: bool = False) -> mcsim._engine.RunResult:
    '''Run again, feeding the external events of a recorded trace.'''
    return scenario.build(externals=recorded_externals(records), check=check).run()


def write_summary(result: mcsim._engine.RunResult, file: IO[str]) -> None:
    writer = csv.writer(file, lineterminator='\n')
    writer.writerow(['kind', 'name', 'consumed', 'jobs', 'misses'])
    for name, stats in result.summary()['threads'].items():
        writer.writerow(['thread', name, stats['consumed'], stats['jobs'], stats['misses']])
    for name, charged in sorted(result.charged.items()):
        writer.writerow(['sc', name, charged, '', ''])
    writer.writerow(['idle', '', result.idle, '', ''])
