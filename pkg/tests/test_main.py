# SPDX-License-Identifier: MIT

import csv
import os
import pathlib
import sys

import pytest
import tomli

import mcsim
import mcsim.__main__
import mcsim._figures

from .conftest import scenario_dir


builtin_dir = pathlib.Path(mcsim._figures.SCENARIO_DIR)


def test_entrypoint(mocker, capsys):
    mocker.patch.object(sys, 'argv', ['something', 'run', str(scenario_dir / 'single.json')])
    mcsim.__main__.entrypoint()

    out = capsys.readouterr().out
    assert '10 ticks' in out
    assert '0.300' in out


def test_run_writes_files(tmp_path):
    trace = tmp_path / 'trace.csv'
    summary = tmp_path / 'summary.csv'
    mcsim.__main__.main(
        ['run', str(scenario_dir / 'single.json'), '--trace', str(trace), '--summary', str(summary)],
        'something',
    )

    with open(trace, newline='') as f:
        assert next(csv.reader(f)) == ['time', 'category', 'subject', 'object', 'detail']
    with open(summary, newline='') as f:
        assert list(csv.reader(f))[-1] == ['idle', '', '7', '', '']


def test_run_invalid(capsys):
    with pytest.raises(SystemExit) as e:
        mcsim.__main__.main(['run', str(scenario_dir / 'invalid-sc.toml')], 'something')
    assert e.value.code == 1
    err = capsys.readouterr().err
    assert err.startswith('ERROR Invalid configuration (`thread[0].sc`)')


def test_run_missing_file(capsys):
    with pytest.raises(SystemExit):
        mcsim.__main__.main(['run', 'does-not-exist.toml'], 'something')
    assert capsys.readouterr().err.startswith('ERROR')


def test_check_invariants(capsys):
    mcsim.__main__.main(['check-invariants', str(builtin_dir / 'passive-server.toml')], 'something')
    assert 'no invariant violated' in capsys.readouterr().out


def test_replay(tmp_path, capsys):
    recorded = tmp_path / 'recorded.csv'
    replayed = tmp_path / 'replayed.csv'
    mcsim.__main__.main(['run', str(scenario_dir / 'jitter.toml'), '--seed', '3', '--trace', str(recorded)], 'something')
    capsys.readouterr()

    mcsim.__main__.main(
        ['replay', str(scenario_dir / 'jitter.toml'), str(recorded), '--trace', str(replayed)],
        'something',
    )
    assert 'replayed' in capsys.readouterr().out
    assert recorded.read_text() == replayed.read_text()


def test_replay_mismatch(tmp_path, capsys):
    recorded = tmp_path / 'recorded.csv'
    mcsim.__main__.main(['run', str(scenario_dir / 'single.json'), '--trace', str(recorded)], 'something')
    capsys.readouterr()

    with pytest.raises(SystemExit):
        mcsim.__main__.main(['replay', str(scenario_dir / 'jitter.toml'), str(recorded)], 'something')
    assert capsys.readouterr().err == 'ERROR The replayed trace differs from the recorded one\n'


def test_analyze(tmp_path, capsys):
    report = tmp_path / 'report.csv'
    mcsim.__main__.main(['analyze', str(builtin_dir / 'mc-params-low.toml'), '--report', str(report)], 'something')

    assert 'exact test: schedulable' in capsys.readouterr().out
    with open(report, newline='') as f:
        rows = list(csv.DictReader(f))
    assert [row['task'] for row in rows] == ['T5', 'T4', 'T3', 'T2', 'T1', 'total', 'll-bound', 'edf']
    assert all(row['schedulable'] == 'yes' for row in rows)


def test_analyze_no_tasks(capsys):
    with pytest.raises(SystemExit):
        mcsim.__main__.main(['analyze', str(scenario_dir / 'single.json')], 'something')
    assert 'No task tables' in capsys.readouterr().err


def test_gen_stdout(capsys):
    mcsim.__main__.main(['gen', '--n', '4', '--u', '0.7', '--seed', '2'], 'something')

    data = tomli.loads(capsys.readouterr().out)
    tasks = mcsim.TaskSet.from_tables(data['task'])
    assert len(tasks) == 4


def test_gen_outdir(tmp_path):
    outdir = tmp_path / 'sets'
    mcsim.__main__.main(['gen', '--n', '3', '--u', '0.5', '--sets', '3', '-o', str(outdir)], 'something')

    assert sorted(os.listdir(outdir)) == ['taskset-0.toml', 'taskset-1.toml', 'taskset-2.toml']


def test_gen_outdir_notdir(tmp_path, capsys):
    target = tmp_path / 'file'
    target.touch()

    with pytest.raises(SystemExit):
        mcsim.__main__.main(['gen', '--n', '2', '--u', '0.5', '-o', str(target)], 'something')
    assert capsys.readouterr().err.startswith('ERROR Output path')


def test_reproduce_list(capsys):
    mcsim.__main__.main(['reproduce', '--list'], 'something')

    out = capsys.readouterr().out
    for name in mcsim.figures():
        assert name in out


def test_reproduce_figure(capsys):
    mcsim.__main__.main(['reproduce', 'budget-ex-a'], 'something')
    assert 'FAIL' not in capsys.readouterr().out


def test_reproduce_unknown(capsys):
    with pytest.raises(SystemExit):
        mcsim.__main__.main(['reproduce', 'nope'], 'something')
    assert capsys.readouterr().err.startswith('ERROR')
