# SPDX-License-Identifier: MIT

from __future__ import annotations

import itertools

from typing import TYPE_CHECKING, Any, Optional, Union

from mcsim._model import (
    Direction, DonationRefused, EmptySlot, Endpoint, EndpointCap, KernelError, Message, NoReplyCap,
    Notification, NtfnCap, ObjectBusy, QueuedIpc, ReplyCapability, RequestAborted, Rights, Slot, TcbCap, Thread,
    ThreadState
)


if TYPE_CHECKING:  # pragma: no cover
    import mcsim._kernel
    import mcsim._timefault


class Ipc():
    '''Endpoints, notifications, reply capabilities and scheduling-context donation.

    Results of operations that may block are handed to the receiving thread
    through :meth:`mcsim.Kernel.deliver`; the engine picks them up when the
    thread runs again.
    '''
    def __init__(self, kernel: mcsim._kernel.Kernel) -> None:
        self._kernel = kernel
        self._reply_ids = itertools.count(1)

    # endpoints

    def send(self, actor: str, ep: str, badge: int = 0, payload: Any = None) -> None:
        kernel = self._kernel
        kernel.authority.require(actor, EndpointCap(ep, Rights.SEND))
        sender = kernel.threads[actor]
        endpoint = kernel.endpoints[ep]
        kernel.record('ipc-send', actor, ep, detail={'badge': str(badge)})
        item = QueuedIpc(actor, Direction.SEND, badge=badge, payload=payload)
        if not self._deliver_send(item, endpoint):
            self._block(sender, ThreadState.BLOCKED_SEND, ep)
            endpoint.enqueue(item, kernel.effective_priority)

    def nbsend(self, actor: str, ep: str, badge: int = 0, payload: Any = None) -> bool:
        '''Send only if a receiver is waiting; returns whether the message was delivered.'''
        kernel = self._kernel
        kernel.authority.require(actor, EndpointCap(ep, Rights.SEND))
        item = QueuedIpc(actor, Direction.SEND, badge=badge, payload=payload)
        delivered = self._deliver_send(item, kernel.endpoints[ep])
        kernel.record('ipc-nbsend', actor, ep, detail={'delivered': str(delivered).lower()})
        return delivered

    def _deliver_send(self, item: QueuedIpc, endpoint: Endpoint) -> bool:
        if endpoint.direction is not Direction.RECV:
            return False
        receiver = self._kernel.threads[endpoint.queue.pop(0).thread]
        self._kernel.deliver(receiver.id, Message(item.badge, item.payload, sender=item.thread))
        self._wake(receiver, direct=False)
        return True

    def call(
        self,
        actor: str,
        ep: str,
        willing_to_donate: bool = True,
        badge: int = 0,
        payload: Any = None,
    ) -> None:
        '''Send and wait for the reply, lending the caller's scheduling context to a passive receiver.'''
        kernel = self._kernel
        kernel.authority.require(actor, EndpointCap(ep, Rights.SEND))
        client = kernel.threads[actor]
        endpoint = kernel.endpoints[ep]
        item = QueuedIpc(actor, Direction.SEND, willing_to_donate, badge, payload, is_call=True)
        if endpoint.direction is Direction.RECV:
            receiver = kernel.threads[endpoint.queue[0].thread]
            if receiver.current_sc is None and not willing_to_donate:
                raise DonationRefused(f'`{receiver.id}` is passive and `{actor}` does not lend its SC')
            endpoint.queue.pop(0)
            kernel.record('ipc-call', actor, ep, detail={'badge': str(badge), 'receiver': receiver.id})
            self._rendezvous(item, receiver, endpoint)
            self._wake(receiver, direct=True)
        else:
            kernel.record('ipc-call', actor, ep, detail={'badge': str(badge)})
            self._block(client, ThreadState.BLOCKED_SEND, ep)
            endpoint.enqueue(item, kernel.effective_priority)

    def _rendezvous(self, item: QueuedIpc, receiver: Thread, endpoint: Endpoint) -> None:
        kernel = self._kernel
        client = kernel.threads[item.thread]
        reply = ReplyCapability(next(self._reply_ids), client.id, endpoint=endpoint.id)
        if receiver.current_sc is None and client.current_sc is not None:
            reply.donated_sc = client.current_sc
            self._donate(client, receiver)
        receiver.reply_slot = reply
        self._block(client, ThreadState.BLOCKED_ON_REPLY, endpoint.id)
        kernel.deliver(receiver.id, Message(item.badge, item.payload, sender=client.id))

    def _donate(self, client: Thread, receiver: Thread) -> None:
        assert client.current_sc is not None
        sc = self._kernel.scs[client.current_sc]
        client.current_sc = None
        receiver.current_sc = sc.id
        sc.running_thread = receiver.id
        client.call_stack_next = receiver.id
        receiver.call_stack_prev = client.id
        self._kernel.record('donate', client.id, receiver.id, detail={'sc': sc.id})

    def recv(self, actor: str, ep: str) -> None:
        kernel = self._kernel
        kernel.authority.require(actor, EndpointCap(ep, Rights.RECV))
        thread = kernel.threads[actor]
        bound = kernel.bound_notification(actor)
        if bound is not None and bound.word:
            bound.word = 0
            kernel.record('ipc-recv', actor, ep, detail={'notification': bound.id})
            kernel.deliver(actor, Message(notification=bound.id))
            return
        kernel.record('ipc-recv', actor, ep)
        self.receive(thread, kernel.endpoints[ep])

    def receive(self, receiver: Thread, endpoint: Endpoint) -> None:
        '''Take the first acceptable sender off ``endpoint``, or block ``receiver`` on it.'''
        kernel = self._kernel
        while endpoint.direction is Direction.SEND:
            item = endpoint.queue.pop(0)
            sender = kernel.threads[item.thread]
            if item.fault is not None:
                receiver.reply_slot = ReplyCapability(
                    next(self._reply_ids), sender.id, endpoint=endpoint.id, fault=item.fault
                )
                kernel.deliver(receiver.id, Message(sender=sender.id, fault=item.fault))
            elif item.is_call:
                if receiver.current_sc is None and not item.willing_to_donate:
                    sender.blocked_on = None
                    kernel.deliver(sender.id, DonationRefused(f'`{receiver.id}` is passive'))
                    kernel.sched.make_runnable(sender)
                    continue
                self._rendezvous(item, receiver, endpoint)
            else:
                sender.blocked_on = None
                kernel.deliver(receiver.id, Message(item.badge, item.payload, sender=sender.id))
                kernel.deliver(sender.id, None)
                kernel.sched.make_runnable(sender)
            if receiver.state is ThreadState.INACTIVE or receiver.state.blocked:
                self._wake(receiver, direct=False)
            return
        self._block(receiver, ThreadState.BLOCKED_RECV, endpoint.id)
        endpoint.enqueue(QueuedIpc(receiver.id, Direction.RECV), kernel.effective_priority)

    def send_fault(self, thread: Thread, fault: mcsim._timefault.TimeoutFault) -> None:
        kernel = self._kernel
        assert thread.timeout_handler is not None
        endpoint = kernel.endpoints[thread.timeout_handler]
        item = QueuedIpc(thread.id, Direction.SEND, is_call=True, fault=fault)
        if endpoint.direction is Direction.RECV:
            handler = kernel.threads[endpoint.queue.pop(0).thread]
            handler.reply_slot = ReplyCapability(
                next(self._reply_ids), thread.id, endpoint=endpoint.id, fault=fault
            )
            kernel.deliver(handler.id, Message(sender=thread.id, fault=fault))
            self._wake(handler, direct=True)
        else:
            endpoint.enqueue(item, kernel.effective_priority)

    def reply(self, actor: str, badge: int = 0, payload: Any = None, *, abort: bool = False) -> None:
        '''Answer the caller in the reply slot; ``abort`` makes its call fail with RequestAborted.'''
        kernel = self._kernel
        replier = kernel.threads[actor]
        reply = replier.reply_slot
        if reply is None:
            raise NoReplyCap(f'Thread `{actor}` holds no reply capability')
        if reply.fault is not None:
            kernel.faults.handler_reply(actor)
            return
        replier.reply_slot = None
        kernel.record('ipc-reply', actor, reply.caller, detail={'badge': str(badge)})
        result: Union[Message, KernelError]
        if abort:
            result = RequestAborted(f'`{actor}` aborted the request')
        else:
            result = Message(badge, payload, sender=actor)
        self.answer(replier, reply, result)

    def answer(self, replier: Thread, reply: ReplyCapability, result: Union[Message, KernelError]) -> None:
        kernel = self._kernel
        caller = kernel.threads[reply.caller]
        if reply.donated_sc is not None:
            self.return_donation(replier, reply)
        if caller.state is ThreadState.BLOCKED_ON_REPLY:
            caller.blocked_on = None
            kernel.deliver(caller.id, result)
            self._wake(caller, direct=True)

    def return_donation(self, replier: Thread, reply: ReplyCapability) -> None:
        kernel = self._kernel
        assert reply.donated_sc is not None
        sc = kernel.scs[reply.donated_sc]
        caller = kernel.threads[reply.caller]
        if sc.running_thread is not None:
            holder = kernel.threads[sc.running_thread]
            kernel.sched.dequeue(holder)
            holder.current_sc = None
            if holder.state in (ThreadState.READY, ThreadState.OUT_OF_BUDGET):
                holder.state = ThreadState.INACTIVE
        sc.running_thread = caller.id
        caller.current_sc = sc.id
        caller.call_stack_next = None
        replier.call_stack_prev = None
        kernel.record('donation-return', replier.id, caller.id, detail={'sc': sc.id})

    def reply_recv(self, actor: str, ep: str, badge: int = 0, payload: Any = None) -> None:
        kernel = self._kernel
        kernel.authority.require(actor, EndpointCap(ep, Rights.RECV))
        if kernel.threads[actor].reply_slot is None:
            raise NoReplyCap(f'Thread `{actor}` holds no reply capability')
        self.reply(actor, badge, payload)
        self.recv(actor, ep)

    def nbsend_wait(self, actor: str, ep_send: str, ep_recv: str, badge: int = 0, payload: Any = None) -> bool:
        kernel = self._kernel
        kernel.authority.require(actor, EndpointCap(ep_send, Rights.SEND))
        kernel.authority.require(actor, EndpointCap(ep_recv, Rights.RECV))
        delivered = self.nbsend(actor, ep_send, badge, payload)
        self.recv(actor, ep_recv)
        return delivered

    # notifications

    def signal(self, actor: str, ntfn: str) -> None:
        kernel = self._kernel
        kernel.authority.require(actor, NtfnCap(ntfn, Rights.SEND))
        kernel.record('signal', actor, ntfn)
        self.notify(kernel.notifications[ntfn])

    def notify(self, notification: Notification) -> None:
        '''Signal without an invoker, as interrupts do.'''
        kernel = self._kernel
        message = Message(notification=notification.id)
        if notification.waiter is not None:
            waiter = kernel.threads[notification.waiter]
            notification.waiter = None
            waiter.blocked_on = None
            kernel.deliver(waiter.id, message)
            self._wake(waiter, direct=False)
            return
        bound = notification.bound_thread
        if bound is not None and kernel.threads[bound].state is ThreadState.BLOCKED_RECV:
            thread = kernel.threads[bound]
            assert thread.blocked_on is not None
            kernel.endpoints[thread.blocked_on].remove(thread.id)
            thread.blocked_on = None
            kernel.deliver(thread.id, message)
            self._wake(thread, direct=False)
            return
        notification.word = 1

    def wait(self, actor: str, ntfn: str) -> None:
        kernel = self._kernel
        kernel.authority.require(actor, NtfnCap(ntfn, Rights.RECV))
        notification = kernel.notifications[ntfn]
        if notification.waiter is not None and notification.waiter != actor:
            raise ObjectBusy(f'`{notification.waiter}` already waits on `{ntfn}`')
        kernel.record('wait', actor, ntfn, detail={'word': str(notification.word)})
        if notification.word:
            notification.word = 0
            kernel.deliver(actor, Message(notification=ntfn))
            return
        notification.waiter = actor
        self._block(kernel.threads[actor], ThreadState.WAITING_NOTIFICATION, ntfn)

    def signal_recv(self, actor: str, ntfn: str, ep: str) -> None:
        kernel = self._kernel
        kernel.authority.require(actor, NtfnCap(ntfn, Rights.SEND))
        kernel.authority.require(actor, EndpointCap(ep, Rights.RECV))
        self.signal(actor, ntfn)
        self.recv(actor, ep)

    # reply capability slots

    def save_caller(self, actor: str, target: str, slot: Slot) -> None:
        '''Move the reply capability of ``target`` into a slot of ``actor``.'''
        kernel = self._kernel
        kernel.authority.require(actor, TcbCap(target))
        owner = kernel.threads[actor]
        source = kernel.threads[target]
        if source.reply_slot is None:
            raise EmptySlot(f'Thread `{target}` holds no reply capability')
        if slot in owner.saved_callers:
            raise ObjectBusy(f'Slot `{slot}` of `{actor}` is in use')
        owner.saved_callers[slot] = source.reply_slot
        source.reply_slot = None
        kernel.record('save-caller', actor, target, detail={'slot': slot})

    def set_caller(self, actor: str, slot: Slot) -> None:
        '''Exchange the reply slot with a saved slot.'''
        kernel = self._kernel
        kernel.authority.require(actor, TcbCap(actor))
        owner = kernel.threads[actor]
        if slot not in owner.saved_callers:
            raise EmptySlot(f'Slot `{slot}` of `{actor}` is empty')
        saved = owner.saved_callers.pop(slot)
        if owner.reply_slot is not None:
            owner.saved_callers[slot] = owner.reply_slot
        owner.reply_slot = saved
        kernel.record('set-caller', actor, saved.caller, detail={'slot': slot})

    def swap_caller(self, actor: str, a: Slot, b: Slot) -> None:
        kernel = self._kernel
        kernel.authority.require(actor, TcbCap(actor))
        saved = kernel.threads[actor].saved_callers
        if a not in saved and b not in saved:
            raise EmptySlot(f'Slots `{a}` and `{b}` of `{actor}` are empty')
        first: Optional[ReplyCapability] = saved.pop(a, None)
        second: Optional[ReplyCapability] = saved.pop(b, None)
        if first is not None:
            saved[b] = first
        if second is not None:
            saved[a] = second
        kernel.record('swap-caller', actor, detail={'a': a, 'b': b})

    # helpers

    def _block(self, thread: Thread, state: ThreadState, on: str) -> None:
        self._kernel.sched.dequeue(thread)
        thread.state = state
        thread.blocked_on = on

    def _wake(self, thread: Thread, *, direct: bool) -> None:
        if thread.state is ThreadState.SUSPENDED:
            return
        thread.blocked_on = None
        self._kernel.sched.make_runnable(thread, direct=direct)
