# SPDX-License-Identifier: MIT

import argparse
import os
import os.path
import sys
import warnings

from typing import Iterable, List, Optional, TextIO, Type, Union

import rich
import rich.table
import rich.traceback

import mcsim
import mcsim._scenario


def _showwarning(
    message: Union[Warning, str],
    category: Type[Warning],
    filename: str,
    lineno: int,
    file: Optional[TextIO] = None,
    line: Optional[str] = None,
) -> None:  # pragma: no cover
    rich.print(f'[bold orange]WARNING[/bold orange] {str(message)}')


warnings.showwarning = _showwarning


def _error(msg: str, code: int = 1) -> None:  # pragma: no cover
    '''Print an error message and exit.'''
    rich.print(f'[bold red]ERROR[/bold red] {msg}', file=sys.stderr)
    exit(code)


def main_parser(prog: str) -> argparse.ArgumentParser:
    '''Construct the main parser.'''
    # mypy does not recognize module.__path__
    # https://github.com/python/mypy/issues/1422
    paths: Iterable[Optional[str]] = mcsim.__path__  # type: ignore
    parser = argparse.ArgumentParser()
    parser.prog = prog
    parser.add_argument(
        '--version',
        '-V',
        action='version',
        version='mcsim {} ({})'.format(
            mcsim.__version__,
            ', '.join(path for path in paths if path)
        ),
    )
    subparsers = parser.add_subparsers(
        dest='command',
        title='subcommands',
        required=True,
    )

    # run subcommand
    run_parser = subparsers.add_parser(
        'run',
        description='run a scenario',
    )
    run_parser.prog = prog
    run_parser.add_argument('scenario', type=str, help='scenario file (TOML or JSON)')
    run_parser.add_argument('--trace', '-t', type=str, help='write the trace CSV to this path')
    run_parser.add_argument('--summary', type=str, help='write the summary CSV to this path')
    run_parser.add_argument('--seed', type=int, help='override the scenario seed')

    # analyze subcommand
    analyze_parser = subparsers.add_parser(
        'analyze',
        description='analyse the schedulability of a task set',
    )
    analyze_parser.prog = prog
    analyze_parser.add_argument('taskset', type=str, help='file holding [[task]] tables')
    analyze_parser.add_argument('--high', action='store_true', help='use the high-criticality budgets')
    analyze_parser.add_argument('--report', type=str, help='write the report CSV to this path')

    # gen subcommand
    gen_parser = subparsers.add_parser(
        'gen',
        description='generate random task sets',
    )
    gen_parser.prog = prog
    gen_parser.add_argument('--n', type=int, required=True, help='tasks per set')
    gen_parser.add_argument('--u', type=float, required=True, help='total utilisation of each set')
    gen_parser.add_argument('--sets', type=int, default=1, help='number of sets (defaults to 1)')
    gen_parser.add_argument('--seed', type=int, default=0, help='random seed (defaults to 0)')
    gen_parser.add_argument(
        '--outdir',
        '-o',
        type=str,
        help='write one `taskset-N.toml` file per set here instead of printing them',
    )

    # reproduce subcommand
    reproduce_parser = subparsers.add_parser(
        'reproduce',
        description='run a canned figure and compare it with the expected values',
    )
    reproduce_parser.prog = prog
    reproduce_parser.add_argument('figure', type=str, nargs='?', help='figure name')
    reproduce_parser.add_argument('--list', '-l', action='store_true', help='list the known figures')

    # check-invariants subcommand
    check_parser = subparsers.add_parser(
        'check-invariants',
        description='run a scenario checking the kernel invariants after every event',
    )
    check_parser.prog = prog
    check_parser.add_argument('scenario', type=str, help='scenario file (TOML or JSON)')
    check_parser.add_argument('--seed', type=int, help='override the scenario seed')

    # replay subcommand
    replay_parser = subparsers.add_parser(
        'replay',
        description='run a scenario again with the external events of a recorded trace',
    )
    replay_parser.prog = prog
    replay_parser.add_argument('scenario', type=str, help='scenario file (TOML or JSON)')
    replay_parser.add_argument('recorded', type=str, help='trace CSV of the recorded run')
    replay_parser.add_argument('--trace', '-t', type=str, help='write the replayed trace CSV to this path')

    return parser


def _print_summary(result: mcsim.RunResult) -> None:
    summary = result.summary()
    table = rich.table.Table(title=f'{result.horizon} ticks')
    for column in ('thread', 'consumed', 'share', 'jobs', 'misses'):
        table.add_column(column, justify='left' if column == 'thread' else 'right')
    for name, stats in summary['threads'].items():
        table.add_row(
            name,
            str(stats['consumed']),
            f'{float(result.share(name)):.3f}',
            str(stats['jobs']),
            f'[red]{stats["misses"]}[/red]' if stats['misses'] else '0',
        )
    table.add_row('[dim]idle[/dim]', str(result.idle), f'{result.idle / result.horizon:.3f}' if result.horizon else '', '', '')
    rich.print(table)
    for thread, error in summary['errors'].items():
        rich.print(f'[bold orange]WARNING[/bold orange] `{thread}` stopped on {error}')


def _write_trace(path: str, records: Iterable[mcsim.TraceRecord]) -> None:
    with open(path, 'w', newline='') as f:
        mcsim.write_trace(records, f)


def _analyze(path: str, high: bool, report_path: Optional[str]) -> None:
    data = mcsim._scenario.read_data(path)
    tasks = mcsim.TaskSet.from_tables(data.get('task', []))
    if not len(tasks):
        _error(f'No task tables in `{path}`')
    report = mcsim.rta(tasks, high=high)
    table = rich.table.Table(title=path)
    for column in ('task', 'priority', 'period', 'budget', 'U', 'R', 'ok'):
        table.add_column(column, justify='left' if column == 'task' else 'right')
    for response in report.responses:
        task = response.task
        table.add_row(
            task.name,
            str(task.priority),
            str(task.period),
            str(task.wcet(high)),
            f'{float(task.utilization(high)):.4f}',
            '-' if response.response is None else str(response.response),
            '[green]yes[/green]' if response.schedulable else '[red]no[/red]',
        )
    rich.print(table)
    total = mcsim.utilization(tasks, high=high)
    rich.print(f'utilisation {float(total):.4f}, Liu-Layland bound {mcsim.ll_bound(len(tasks)):.4f}')
    rich.print(
        f'exact test: {"schedulable" if report.schedulable else "unschedulable"}, '
        f'bound test: {"pass" if mcsim.ll_test(tasks, high=high) else "fail"}, '
        f'EDF: {"pass" if mcsim.edf_test(tasks, high=high) else "fail"}'
    )
    if report_path:
        with open(report_path, 'w', newline='') as f:
            mcsim.write_report(tasks, f, high=high)


def _gen(args: argparse.Namespace) -> None:
    sets = mcsim.generate(args.n, args.u, args.sets, args.seed)
    if args.outdir is None:
        for index, tasks in enumerate(sets):
            mcsim.dump_taskset(tasks, sys.stdout, comment=f'set {index}, n={args.n}, U={args.u}, seed={args.seed}')
        return
    if os.path.exists(args.outdir):
        if not os.path.isdir(args.outdir):
            _error(f'Output path `{args.outdir}` exists and is not a directory!')
    else:
        os.makedirs(args.outdir)
    for index, tasks in enumerate(sets):
        with open(os.path.join(args.outdir, f'taskset-{index}.toml'), 'w') as f:
            mcsim.dump_taskset(tasks, f, comment=f'set {index}, n={args.n}, U={args.u}, seed={args.seed}')
    rich.print(f'Wrote {len(sets)} task sets to `{args.outdir}`')


def _reproduce(figure: Optional[str], list_: bool) -> None:
    if list_ or figure is None:
        for name, description in mcsim.figures().items():
            rich.print(f'[bold]{name}[/bold] {description}')
        return
    result = mcsim.reproduce(figure)
    table = rich.table.Table(title=f'{result.figure}: {result.description}')
    for column in ('check', 'expected', 'actual', ''):
        table.add_column(column)
    for row in result.rows:
        table.add_row(row.name, row.expected, row.actual, '[green]ok[/green]' if row.passed else '[red]FAIL[/red]')
    rich.print(table)
    if not result.passed:
        _error(f'Figure `{figure}` does not match ({len(result.failures())} failing checks)')


def main_task(cli_args: List[str], prog: str) -> None:  # noqa: C901
    '''Parse the CLI arguments and run the command.'''
    parser = main_parser(prog)
    args = parser.parse_args(cli_args)

    try:
        if args.command == 'run':
            scenario = mcsim.load_scenario(args.scenario)
            result = mcsim.run_scenario(scenario, seed=args.seed)
            _print_summary(result)
            if args.trace:
                _write_trace(args.trace, result.trace)
            if args.summary:
                with open(args.summary, 'w', newline='') as f:
                    mcsim.write_summary(result, f)
        elif args.command == 'analyze':
            _analyze(args.taskset, args.high, args.report)
        elif args.command == 'gen':
            _gen(args)
        elif args.command == 'reproduce':
            _reproduce(args.figure, args.list)
        elif args.command == 'check-invariants':
            scenario = mcsim.load_scenario(args.scenario)
            try:
                result = mcsim.run_scenario(scenario, seed=args.seed, check=True)
            except mcsim.InvariantViolation as e:
                _error(f'Invariant violated: {e}')
            rich.print(f'[bold green]OK[/bold green] {len(result.trace)} records, no invariant violated')
        elif args.command == 'replay':
            scenario = mcsim.load_scenario(args.scenario)
            with open(args.recorded, newline='') as f:
                recorded = mcsim.read_trace(f)
            result = mcsim.replay(scenario, recorded)
            if args.trace:
                _write_trace(args.trace, result.trace)
            replayed = [record.as_row() for record in result.trace]
            if replayed != [record.as_row() for record in recorded]:
                _error('The replayed trace differs from the recorded one')
            rich.print(f'[bold green]OK[/bold green] replayed {len(replayed)} records identically')
    except mcsim.ConfigurationError as e:
        _error(f'Invalid configuration{f" (`{e.key}`)" if e.key else ""}: {e}')
    except (mcsim.UnknownFigure, mcsim.AnalysisError, OSError) as e:
        _error(str(e))


def main(cli_args: List[str], prog: str) -> None:
    try:
        main_task(cli_args, prog)
    except Exception:  # pragma: no cover
        exc_type, exc_value, tb = sys.exc_info()
        assert exc_type and exc_value
        rich.print(rich.traceback.Traceback.from_exception(
            exc_type,
            exc_value,
            tb.tb_next if tb else tb,
        ))


def entrypoint() -> None:
    main(sys.argv[1:], sys.argv[0])


if __name__ == '__main__':  # pragma: no cover
    try:
        main(sys.argv[1:], 'python -m mcsim')
    except KeyboardInterrupt:
        rich.print('Exiting...')
