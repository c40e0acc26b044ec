# SPDX-License-Identifier: MIT

import itertools

import hypothesis
import hypothesis.strategies as st
import pytest

import mcsim

from mcsim._model import EndpointCap, ThreadState

from .conftest import boot, grant_all, running


@pytest.fixture
def served(kernel0):
    '''A passive server waiting on `ep` and a client with a 10/100 SC.'''
    running(kernel0, 'client', priority=5, budget=10, period=100)
    kernel0.create_thread('server', 8)
    kernel0.create_endpoint('ep')
    grant_all(kernel0)
    boot(kernel0, 'server', 'client')
    with kernel0.invocation(0):
        kernel0.ipc.recv('server', 'ep')
    return kernel0


def test_call_donates(served):
    with served.invocation(0):
        served.ipc.call('client', 'ep', badge=4)
    server, client = served.threads['server'], served.threads['client']
    assert served.current == 'server'
    assert server.current_sc == 'client-sc'
    assert client.current_sc is None
    assert client.state is ThreadState.BLOCKED_ON_REPLY
    assert served.scs['client-sc'].running_thread == 'server'
    assert (client.call_stack_next, server.call_stack_prev) == ('server', 'client')
    assert served.outcomes['server'] == mcsim.Message(4, sender='client')
    assert [record.category for record in served.trace][-3:] == ['ipc-call', 'donate', 'dispatch']


def test_reply_returns_donation(served):
    with served.invocation(0):
        served.ipc.call('client', 'ep')
    with served.invocation(5):
        served.ipc.reply('server', 7)
    server, client = served.threads['server'], served.threads['client']
    assert served.current == 'client'
    assert server.state is ThreadState.INACTIVE
    assert server.current_sc is None
    assert client.current_sc == 'client-sc'
    assert served.outcomes['client'].badge == 7
    sc = served.scs['client-sc']
    # never left the client's SC, nothing committed yet
    assert sc.charged == 0
    assert served.sched.remaining(sc) == 5


def test_reply_recv(served):
    with served.invocation(0):
        served.ipc.call('client', 'ep')
    with served.invocation(3):
        served.ipc.reply_recv('server', 'ep', 1)
    server = served.threads['server']
    assert served.current == 'client'
    assert server.state is ThreadState.BLOCKED_RECV
    assert server.current_sc is None
    assert server.reply_slot is None
    assert [item.thread for item in served.endpoints['ep'].queue] == ['server']


def test_reply_without_caller(served):
    with pytest.raises(mcsim.NoReplyCap):
        with served.invocation(0):
            served.ipc.reply('client')
    with pytest.raises(mcsim.NoReplyCap):
        with served.invocation(0):
            served.ipc.reply_recv('server', 'ep')


def test_call_refuses_donation(served):
    before = served.snapshot()
    with pytest.raises(mcsim.DonationRefused):
        with served.invocation(0):
            served.ipc.call('client', 'ep', willing_to_donate=False)
    assert served.snapshot() == before


def test_queued_call_refused_on_receive(kernel0):
    running(kernel0, 'client', priority=5)
    kernel0.create_thread('server', 8)
    kernel0.create_endpoint('ep')
    grant_all(kernel0)
    boot(kernel0, 'server', 'client')
    with kernel0.invocation(0):
        kernel0.ipc.call('client', 'ep', willing_to_donate=False)
    assert kernel0.threads['client'].state is ThreadState.BLOCKED_SEND
    with kernel0.invocation(0):
        kernel0.ipc.recv('server', 'ep')
    assert isinstance(kernel0.outcomes['client'], mcsim.DonationRefused)
    assert kernel0.current == 'client'
    assert kernel0.threads['server'].state is ThreadState.BLOCKED_RECV


def test_queued_call_donates_on_receive(kernel0):
    running(kernel0, 'client', priority=5)
    kernel0.create_thread('server', 8)
    kernel0.create_endpoint('ep')
    grant_all(kernel0)
    boot(kernel0, 'server', 'client')
    with kernel0.invocation(0):
        kernel0.ipc.call('client', 'ep', badge=2)
    with kernel0.invocation(1):
        kernel0.ipc.recv('server', 'ep')
    assert kernel0.current == 'server'
    assert kernel0.threads['server'].current_sc == 'client-sc'
    assert kernel0.outcomes['server'].badge == 2


def test_active_server_keeps_its_sc(kernel0):
    running(kernel0, 'client', priority=5)
    running(kernel0, 'server', priority=8)
    kernel0.create_endpoint('ep')
    grant_all(kernel0)
    boot(kernel0, 'server', 'client')
    with kernel0.invocation(0):
        kernel0.ipc.recv('server', 'ep')
    assert kernel0.current == 'client'
    with kernel0.invocation(2):
        kernel0.ipc.call('client', 'ep')
    assert kernel0.current == 'server'
    assert kernel0.threads['server'].current_sc == 'server-sc'
    assert kernel0.threads['client'].current_sc == 'client-sc'
    assert kernel0.scs['client-sc'].charged == 2
    assert 'donate' not in [record.category for record in kernel0.trace]


def test_nested_donation(kernel0):
    running(kernel0, 'client', priority=3)
    kernel0.create_thread('s1', 6)
    kernel0.create_thread('s2', 8)
    kernel0.create_endpoint('ep1')
    kernel0.create_endpoint('ep2')
    grant_all(kernel0)
    boot(kernel0, 's1', 's2', 'client')
    with kernel0.invocation(0):
        kernel0.ipc.recv('s1', 'ep1')
        kernel0.ipc.recv('s2', 'ep2')
        kernel0.ipc.call('client', 'ep1')
    with kernel0.invocation(1):
        kernel0.ipc.call('s1', 'ep2')
    assert kernel0.current == 's2'
    assert kernel0.threads['s2'].current_sc == 'client-sc'
    assert kernel0.threads['client'].call_stack_next == 's1'
    assert kernel0.threads['s1'].call_stack_next == 's2'
    with kernel0.invocation(2):
        kernel0.ipc.reply('s2')
    assert kernel0.current == 's1'
    assert kernel0.threads['s1'].current_sc == 'client-sc'
    assert kernel0.threads['s2'].current_sc is None
    assert kernel0.threads['client'].state is ThreadState.BLOCKED_ON_REPLY


@hypothesis.given(unwind=st.lists(st.booleans(), min_size=1, max_size=5))
def test_donation_returns_at_any_depth(unwind):
    kernel = mcsim.Kernel(mcsim.KernelConfig(kernel_wcet=0))
    kernel.check = True
    depth = len(unwind)
    servers = [f's{level}' for level in range(depth)]
    running(kernel, 'client', priority=3, budget=100, period=100)
    for level, server in enumerate(servers):
        kernel.create_thread(server, 4 + level)
        kernel.create_endpoint(f'ep{level}')
    grant_all(kernel)
    boot(kernel, *servers, 'client')
    with kernel.invocation(0):
        for level, server in enumerate(servers):
            kernel.ipc.recv(server, f'ep{level}')

    clock = itertools.count(1)
    for level, caller in enumerate(['client', *servers[:-1]]):
        with kernel.invocation(next(clock)):
            kernel.ipc.call(caller, f'ep{level}')
        assert kernel.current == servers[level]
        assert kernel.scs['client-sc'].running_thread == servers[level]

    for level, again in reversed(list(enumerate(unwind))):
        server = servers[level]
        with kernel.invocation(next(clock)):
            if again:
                kernel.ipc.reply_recv(server, f'ep{level}')
            else:
                kernel.ipc.reply(server)
        owner = servers[level - 1] if level else 'client'
        assert kernel.current == owner
        assert kernel.scs['client-sc'].running_thread == owner
        assert kernel.threads[server].current_sc is None

    assert kernel.threads['client'].current_sc == 'client-sc'
    assert kernel.threads['client'].call_stack_next is None


def test_receive_in_priority_order(kernel0):
    running(kernel0, 'r', priority=1)
    for priority in (3, 7, 5):
        running(kernel0, f's{priority}', priority=priority)
    kernel0.create_endpoint('ep')
    grant_all(kernel0)
    boot(kernel0, 'r', 's3', 's7', 's5')
    badges = []
    with kernel0.invocation(0):
        for priority in (3, 7, 5):
            kernel0.ipc.send(f's{priority}', 'ep', badge=priority)
        for _ in range(3):
            kernel0.ipc.recv('r', 'ep')
            badges.append(kernel0.outcomes.pop('r').badge)
    assert badges == [7, 5, 3]
    assert kernel0.current == 's7'


def test_nbsend_without_receiver(kernel0):
    running(kernel0, 't')
    kernel0.create_endpoint('ep')
    grant_all(kernel0)
    boot(kernel0, 't')
    with kernel0.invocation(0):
        assert not kernel0.ipc.nbsend('t', 'ep', 1)
    assert kernel0.current == 't'
    assert kernel0.endpoints['ep'].queue == []
    record = kernel0.trace[-1]
    assert record.category == 'ipc-nbsend'
    assert record.detail == (('delivered', 'false'),)


def test_nbsend_wait(kernel0):
    running(kernel0, 't')
    kernel0.create_endpoint('out')
    kernel0.create_endpoint('in')
    grant_all(kernel0)
    boot(kernel0, 't')
    with kernel0.invocation(0):
        assert not kernel0.ipc.nbsend_wait('t', 'out', 'in')
    thread = kernel0.threads['t']
    assert thread.state is ThreadState.BLOCKED_RECV
    assert thread.blocked_on == 'in'
    assert kernel0.current is None


def test_send_without_rights(kernel0):
    running(kernel0, 't')
    kernel0.create_endpoint('ep')
    kernel0.authority.grant('t', EndpointCap('ep', mcsim.Rights.RECV))
    boot(kernel0, 't')
    with pytest.raises(mcsim.NoAuthority):
        with kernel0.invocation(0):
            kernel0.ipc.send('t', 'ep')


# notifications


@pytest.fixture
def pair(kernel0):
    running(kernel0, 'w', priority=8)
    running(kernel0, 's', priority=5)
    kernel0.create_notification('n')
    grant_all(kernel0)
    boot(kernel0, 'w', 's')
    return kernel0


def test_signal_wakes_waiter(pair):
    with pair.invocation(0):
        pair.ipc.wait('w', 'n')
    assert pair.threads['w'].state is ThreadState.WAITING_NOTIFICATION
    assert pair.current == 's'
    with pair.invocation(1):
        pair.ipc.signal('s', 'n')
    assert pair.current == 'w'
    assert pair.outcomes['w'] == mcsim.Message(notification='n')
    assert pair.notifications['n'].word == 0


def test_signal_is_binary(pair):
    with pair.invocation(0):
        pair.ipc.signal('w', 'n')
        pair.ipc.signal('w', 'n')
    assert pair.notifications['n'].word == 1
    with pair.invocation(0):
        pair.ipc.wait('w', 'n')
    assert pair.current == 'w'
    assert pair.notifications['n'].word == 0
    assert pair.outcomes['w'] == mcsim.Message(notification='n')


def test_second_waiter_busy(pair):
    with pair.invocation(0):
        pair.ipc.wait('w', 'n')
    with pytest.raises(mcsim.ObjectBusy):
        with pair.invocation(0):
            pair.ipc.wait('s', 'n')


@pytest.mark.parametrize('order', sorted(set(itertools.permutations(('wait',) * 3 + ('signal',) * 3))))
def test_signal_wait_interleavings(pair, order):
    blocked = pending = False
    for now, op in enumerate(order):
        if op == 'wait':
            if blocked:
                # a blocked waiter issues nothing
                continue
            with pair.invocation(now):
                pair.ipc.wait('w', 'n')
            blocked, pending = not pending, False
        else:
            with pair.invocation(now):
                pair.ipc.signal('s', 'n')
            if blocked:
                blocked = False
            else:
                pending = True
        assert (pair.threads['w'].state is ThreadState.WAITING_NOTIFICATION) == blocked, (order, now)
        assert pair.notifications['n'].word == int(pending), (order, now)


def test_bound_notification(kernel0):
    running(kernel0, 'server', priority=8)
    running(kernel0, 'other', priority=5)
    kernel0.create_endpoint('ep')
    kernel0.create_notification('n', bound='server')
    grant_all(kernel0)
    boot(kernel0, 'server', 'other')
    with kernel0.invocation(0):
        kernel0.ipc.recv('server', 'ep')
    with kernel0.invocation(1):
        kernel0.ipc.signal('other', 'n')
    assert kernel0.current == 'server'
    assert kernel0.outcomes['server'] == mcsim.Message(notification='n')
    assert kernel0.endpoints['ep'].queue == []


def test_bound_notification_pending(kernel0):
    running(kernel0, 'server', priority=8)
    kernel0.create_endpoint('ep')
    kernel0.create_notification('n', bound='server')
    grant_all(kernel0)
    boot(kernel0, 'server')
    with kernel0.invocation(0):
        kernel0.ipc.signal('server', 'n')
        kernel0.ipc.recv('server', 'ep')
    assert kernel0.current == 'server'
    assert kernel0.outcomes['server'] == mcsim.Message(notification='n')


def test_interrupt_wakes_waiter(pair):
    with pair.invocation(0):
        pair.ipc.wait('w', 'n')
    pair.irq(4, 'n')
    assert pair.current == 'w'
    assert pair.trace[-3].category == 'irq'


# reply capability slots


def test_save_and_set_caller(served):
    with served.invocation(0):
        served.ipc.call('client', 'ep')
        served.ipc.save_caller('server', 'server', 'a')
    server = served.threads['server']
    assert server.reply_slot is None
    assert server.saved_callers['a'].caller == 'client'
    with pytest.raises(mcsim.NoReplyCap):
        with served.invocation(1):
            served.ipc.reply('server')
    with served.invocation(1):
        served.ipc.set_caller('server', 'a')
        served.ipc.reply('server', 9)
    assert served.current == 'client'
    assert served.outcomes['client'].badge == 9


def test_save_caller_errors(served):
    with pytest.raises(mcsim.EmptySlot):
        with served.invocation(0):
            served.ipc.save_caller('server', 'server', 'a')
    with served.invocation(0):
        served.ipc.call('client', 'ep')
        served.ipc.save_caller('server', 'server', 'a')
    served.threads['server'].reply_slot = served.threads['server'].saved_callers['a']
    with pytest.raises(mcsim.ObjectBusy):
        with served.invocation(0):
            served.ipc.save_caller('server', 'server', 'a')


def test_swap_caller(served):
    with served.invocation(0):
        served.ipc.call('client', 'ep')
        served.ipc.save_caller('server', 'server', 'a')
        served.ipc.swap_caller('server', 'a', 'b')
    assert list(served.threads['server'].saved_callers) == ['b']
    with pytest.raises(mcsim.EmptySlot):
        with served.invocation(0):
            served.ipc.swap_caller('server', 'x', 'y')
    with pytest.raises(mcsim.EmptySlot):
        with served.invocation(0):
            served.ipc.set_caller('server', 'a')
