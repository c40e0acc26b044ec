# SPDX-License-Identifier: MIT

import os
import pathlib

import pytest

import mcsim
import mcsim._figures

from mcsim._model import EndpointCap, NtfnCap, ScCap, SchedControl, TcbCap


scenario_dir = pathlib.Path(__file__).parent / 'scenarios'


def grant_all(kernel, *, sched_control=()):
    '''Give every thread authority over every object, as scenarios do by default.'''
    for holder in kernel.threads:
        for sc in kernel.scs:
            kernel.authority.grant(holder, ScCap(sc))
        for thread in kernel.threads:
            kernel.authority.grant(holder, TcbCap(thread))
        for ep in kernel.endpoints:
            kernel.authority.grant(holder, EndpointCap(ep))
        for ntfn in kernel.notifications:
            kernel.authority.grant(holder, NtfnCap(ntfn))
    for holder in sched_control:
        kernel.authority.grant(holder, SchedControl())


def running(kernel, name, *, priority=10, budget=10, period=10, **kwargs):
    '''Create a thread on its own SC and boot it.'''
    kernel.create_sc(f'{name}-sc', budget, period)
    kernel.create_thread(name, priority, **kwargs)
    kernel.attach(f'{name}-sc', name)
    return name


def boot(kernel, *names, at=0):
    with kernel.invocation(at):
        for name in names:
            kernel.start(name)


@pytest.fixture
def kernel():
    k = mcsim.Kernel(mcsim.KernelConfig(kernel_wcet=1))
    k.check = True
    return k


@pytest.fixture
def kernel0():
    '''Kernel with zero entry cost.'''
    k = mcsim.Kernel(mcsim.KernelConfig(kernel_wcet=0))
    k.check = True
    return k


def generate_scenario_fixture(path):
    @pytest.fixture
    def fixture():
        return mcsim.load_scenario(str(path))
    return fixture


# inject scenario_* fixtures (https://github.com/pytest-dev/pytest/issues/2424)
for entry in os.listdir(scenario_dir):
    name, ext = os.path.splitext(entry)
    if ext in ('.toml', '.json') and not name.startswith('invalid-'):
        globals()[f'scenario_{name.replace("-", "_")}'] = generate_scenario_fixture(scenario_dir / entry)

for entry in os.listdir(mcsim._figures.SCENARIO_DIR):
    name, ext = os.path.splitext(entry)
    if ext == '.toml':
        globals()[f'builtin_{name.replace("-", "_")}'] = generate_scenario_fixture(
            pathlib.Path(mcsim._figures.SCENARIO_DIR) / entry
        )
