//! Single-threaded virtual-time executor.
//!
//! Tasks are ordinary futures; time only advances when no task is runnable,
//! jumping straight to the earliest pending timer. Timers with equal
//! deadlines fire in registration order, so a run is a pure function of the
//! spawned work and its random draws.

use std::cell::{Cell, RefCell};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use futures::channel::oneshot;
use futures::future::LocalBoxFuture;
use serde::{Deserialize, Serialize};

/// Virtual instant in microseconds since simulation start.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    pub fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub fn from_ms_f64(ms: f64) -> Self {
        SimTime((ms.max(0.0) * 1_000.0).round() as u64)
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    /// Whole second this instant falls in.
    pub fn second(self) -> u64 {
        self.0 / 1_000_000
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl std::ops::Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

struct TimerEntry {
    at: SimTime,
    seq: u64,
    waker: Waker,
    cancelled: Rc<Cell<bool>>,
}

impl PartialEq for TimerEntry {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for TimerEntry {}
impl PartialOrd for TimerEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimerEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

type ReadyQueue = Arc<Mutex<VecDeque<usize>>>;

struct TaskWaker {
    id: usize,
    queued: AtomicBool,
    ready: ReadyQueue,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if !self.queued.swap(true, Ordering::AcqRel) {
            self.ready
                .lock()
                .expect("ready queue poisoned")
                .push_back(self.id);
        }
    }
}

struct Task {
    future: Option<LocalBoxFuture<'static, ()>>,
    waker: Arc<TaskWaker>,
}

struct Inner {
    now: Cell<SimTime>,
    seq: Cell<u64>,
    timers: RefCell<BinaryHeap<Reverse<TimerEntry>>>,
    ready: ReadyQueue,
    tasks: RefCell<Vec<Option<Task>>>,
    free: RefCell<Vec<usize>>,
    spawned: RefCell<Vec<LocalBoxFuture<'static, ()>>>,
    live: Cell<usize>,
}

/// Cloneable handle to the executor.
#[derive(Clone)]
pub struct Runtime {
    inner: Rc<Inner>,
}

impl Default for Runtime {
    fn default() -> Self {
        Self::new()
    }
}

impl Runtime {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(Inner {
                now: Cell::new(SimTime::ZERO),
                seq: Cell::new(0),
                timers: RefCell::new(BinaryHeap::new()),
                ready: Arc::new(Mutex::new(VecDeque::new())),
                tasks: RefCell::new(Vec::new()),
                free: RefCell::new(Vec::new()),
                spawned: RefCell::new(Vec::new()),
                live: Cell::new(0),
            }),
        }
    }

    pub fn now(&self) -> SimTime {
        self.inner.now.get()
    }

    /// Number of tasks not yet completed.
    pub fn live_tasks(&self) -> usize {
        self.inner.live.get()
    }

    pub fn spawn<F>(&self, fut: F)
    where
        F: Future<Output = ()> + 'static,
    {
        self.inner.live.set(self.inner.live.get() + 1);
        self.inner.spawned.borrow_mut().push(Box::pin(fut));
    }

    /// Spawns `fut` and returns a receiver for its output. Dropping the
    /// receiver does not cancel the task.
    pub fn spawn_with_handle<F, T>(&self, fut: F) -> oneshot::Receiver<T>
    where
        F: Future<Output = T> + 'static,
        T: 'static,
    {
        let (tx, rx) = oneshot::channel();
        self.spawn(async move {
            let _ = tx.send(fut.await);
        });
        rx
    }

    pub fn sleep(&self, dur: SimTime) -> Sleep {
        Sleep {
            inner: self.inner.clone(),
            at: self.now() + dur,
            cancelled: None,
        }
    }

    pub fn sleep_until(&self, at: SimTime) -> Sleep {
        Sleep {
            inner: self.inner.clone(),
            at,
            cancelled: None,
        }
    }

    fn adopt_spawned(&self) {
        let pending: Vec<_> = self.inner.spawned.borrow_mut().drain(..).collect();
        if pending.is_empty() {
            return;
        }
        let mut tasks = self.inner.tasks.borrow_mut();
        let mut free = self.inner.free.borrow_mut();
        let mut ready = self.inner.ready.lock().expect("ready queue poisoned");
        for fut in pending {
            let id = free.pop().unwrap_or_else(|| {
                tasks.push(None);
                tasks.len() - 1
            });
            let waker = Arc::new(TaskWaker {
                id,
                queued: AtomicBool::new(true),
                ready: self.inner.ready.clone(),
            });
            tasks[id] = Some(Task {
                future: Some(fut),
                waker,
            });
            ready.push_back(id);
        }
    }

    fn poll_task(&self, id: usize) {
        let (mut fut, waker) = {
            let mut tasks = self.inner.tasks.borrow_mut();
            let Some(task) = tasks.get_mut(id).and_then(Option::as_mut) else {
                return;
            };
            let Some(fut) = task.future.take() else {
                return;
            };
            task.waker.queued.store(false, Ordering::Release);
            (fut, task.waker.clone())
        };
        let w = Waker::from(waker);
        let mut cx = Context::from_waker(&w);
        match fut.as_mut().poll(&mut cx) {
            Poll::Ready(()) => {
                self.inner.tasks.borrow_mut()[id] = None;
                self.inner.free.borrow_mut().push(id);
                self.inner.live.set(self.inner.live.get() - 1);
            }
            Poll::Pending => {
                if let Some(task) = self.inner.tasks.borrow_mut()[id].as_mut() {
                    task.future = Some(fut);
                }
            }
        }
    }

    fn run_ready(&self) {
        loop {
            self.adopt_spawned();
            let next = self
                .inner
                .ready
                .lock()
                .expect("ready queue poisoned")
                .pop_front();
            match next {
                Some(id) => self.poll_task(id),
                None => break,
            }
        }
    }

    /// Runs every event with a deadline at or before `limit`, then leaves
    /// the clock at `limit`.
    pub fn run_until(&self, limit: SimTime) {
        loop {
            self.run_ready();
            let entry = {
                let mut timers = self.inner.timers.borrow_mut();
                loop {
                    match timers.peek() {
                        Some(Reverse(t)) if t.cancelled.get() => {
                            timers.pop();
                        }
                        Some(Reverse(t)) if t.at <= limit => {
                            break timers.pop().map(|Reverse(t)| t)
                        }
                        _ => break None,
                    }
                }
            };
            match entry {
                Some(t) => {
                    if t.at > self.now() {
                        self.inner.now.set(t.at);
                    }
                    t.cancelled.set(true);
                    t.waker.wake();
                }
                None => {
                    if limit > self.now() {
                        self.inner.now.set(limit);
                    }
                    return;
                }
            }
        }
    }

    /// Drops every pending task and timer. Tasks that hold handles back to
    /// their owner would otherwise keep it alive forever.
    pub fn shutdown(&self) {
        let tasks: Vec<_> = self.inner.tasks.borrow_mut().drain(..).collect();
        let spawned: Vec<_> = self.inner.spawned.borrow_mut().drain(..).collect();
        let timers = std::mem::take(&mut *self.inner.timers.borrow_mut());
        self.inner.free.borrow_mut().clear();
        self.inner
            .ready
            .lock()
            .expect("ready queue poisoned")
            .clear();
        self.inner.live.set(0);
        drop(tasks);
        drop(spawned);
        drop(timers);
    }

    /// Drives the executor until `fut` resolves. Other tasks keep running
    /// meanwhile.
    pub fn block_on<F, T>(&self, fut: F) -> T
    where
        F: Future<Output = T> + 'static,
        T: 'static,
    {
        let mut rx = self.spawn_with_handle(fut);
        loop {
            self.run_ready();
            if let Ok(Some(v)) = rx.try_recv() {
                return v;
            }
            let next = {
                let mut timers = self.inner.timers.borrow_mut();
                while matches!(timers.peek(), Some(Reverse(t)) if t.cancelled.get()) {
                    timers.pop();
                }
                timers.peek().map(|Reverse(t)| t.at)
            };
            match next {
                Some(at) => self.run_until(at),
                None => panic!("block_on: future can never complete"),
            }
        }
    }
}

/// Future resolving once virtual time reaches its deadline.
pub struct Sleep {
    inner: Rc<Inner>,
    at: SimTime,
    cancelled: Option<Rc<Cell<bool>>>,
}

impl Future for Sleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.inner.now.get() >= self.at {
            return Poll::Ready(());
        }
        if self.cancelled.is_none() {
            let flag = Rc::new(Cell::new(false));
            let seq = self.inner.seq.get();
            self.inner.seq.set(seq + 1);
            self.inner.timers.borrow_mut().push(Reverse(TimerEntry {
                at: self.at,
                seq,
                waker: cx.waker().clone(),
                cancelled: flag.clone(),
            }));
            self.cancelled = Some(flag);
        }
        Poll::Pending
    }
}

impl Drop for Sleep {
    fn drop(&mut self) {
        if let Some(flag) = &self.cancelled {
            flag.set(true);
        }
    }
}

/// One-shot latch: `wait()` resolves after `open()`.
#[derive(Clone, Default)]
pub struct Gate {
    state: Rc<RefCell<(bool, Vec<Waker>)>>,
}

impl Gate {
    pub fn new(open: bool) -> Self {
        Self {
            state: Rc::new(RefCell::new((open, Vec::new()))),
        }
    }

    pub fn is_open(&self) -> bool {
        self.state.borrow().0
    }

    pub fn open(&self) {
        let wakers = {
            let mut s = self.state.borrow_mut();
            s.0 = true;
            std::mem::take(&mut s.1)
        };
        wakers.into_iter().for_each(Waker::wake);
    }

    pub fn close(&self) {
        self.state.borrow_mut().0 = false;
    }

    pub fn wait(&self) -> GateWait {
        GateWait { gate: self.clone() }
    }
}

pub struct GateWait {
    gate: Gate,
}

impl Future for GateWait {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        let mut s = self.gate.state.borrow_mut();
        if s.0 {
            Poll::Ready(())
        } else {
            s.1.push(cx.waker().clone());
            Poll::Pending
        }
    }
}
