//! Worker-pool execution of agents over a shared-memory workspace.
//!
//! [`RemoteAgent::create`] probes the agent once on a private workspace to
//! learn the shapes it writes, allocates one shared arena region per
//! variable sized `[T_max, B * n, ...]`, and spawns `n` workers, each
//! holding a value-copy of the agent seeded `base_seed + k` and bound to
//! batch rows `[k * B, (k + 1) * B)`. Workers execute gradient-free and are
//! driven over a length-prefixed binary control channel (RUN / STOP / ACK /
//! DONE / ERR).
//!
//! Arena regions are memory-mapped files named `wspc-<run-uuid>-<var-index>`
//! (plus one `...-mask` region for the written flags), placed in `/dev/shm`
//! when available. The concurrency contract: workers write only their own
//! batch rows while a run is in flight; the coordinator reads only between
//! runs.

mod protocol;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::os::fd::AsRawFd;
use std::os::unix::net::UnixStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::RngCore;

use crate::agent::{Agent, AgentExt, KwArgs};
use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};
use crate::workspace::{VarStore, Workspace};

use protocol::{read_frame, write_frame, Frame};

/// One memory-mapped file region. The mapping outlives the file handle; the
/// file is unlinked on drop.
struct MmapRegion {
    ptr: *mut u8,
    len: usize,
    path: PathBuf,
}

// Concurrent access is raw-pointer based and confined by the slice
// discipline documented on `Arena`.
unsafe impl Send for MmapRegion {}
unsafe impl Sync for MmapRegion {}

impl MmapRegion {
    fn create(path: PathBuf, len: usize) -> Result<MmapRegion> {
        let len = len.max(1);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(&path)?;
        file.set_len(len as u64)?;
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED,
                file.as_raw_fd(),
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            let err = std::io::Error::last_os_error();
            let _ = std::fs::remove_file(&path);
            return Err(Error::Io(err));
        }
        Ok(MmapRegion {
            ptr: ptr.cast(),
            len,
            path,
        })
    }
}

impl Drop for MmapRegion {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.ptr.cast(), self.len);
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

fn arena_dir() -> PathBuf {
    let shm = Path::new("/dev/shm");
    if shm.is_dir() {
        shm.to_path_buf()
    } else {
        std::env::temp_dir()
    }
}

struct VarLayout {
    name: String,
    item_shape: Vec<usize>,
    item: usize,
}

/// The shared storage: one region per variable plus a written-mask region,
/// all laid out `[T_max, B * n, item...]` row-major.
struct Arena {
    run_id: String,
    vars: Vec<VarLayout>,
    by_name: BTreeMap<String, usize>,
    t_max: usize,
    total_batch: usize,
    per_worker: usize,
    regions: Vec<MmapRegion>,
    mask: MmapRegion,
    running: AtomicBool,
}

impl Arena {
    fn create(
        vars: Vec<VarLayout>,
        t_max: usize,
        per_worker: usize,
        workers: usize,
    ) -> Result<Arena> {
        let mut id_bytes = [0u8; 8];
        rand::thread_rng().fill_bytes(&mut id_bytes);
        let run_id: String = id_bytes.iter().map(|b| format!("{b:02x}")).collect();
        let dir = arena_dir();
        let total_batch = per_worker * workers;

        let mut regions = Vec::with_capacity(vars.len());
        for (index, var) in vars.iter().enumerate() {
            let len = t_max * total_batch * var.item * 4;
            let path = dir.join(format!("wspc-{run_id}-{index}"));
            regions.push(MmapRegion::create(path, len)?);
        }
        let mask_len = vars.len() * t_max * total_batch;
        let mask = MmapRegion::create(dir.join(format!("wspc-{run_id}-mask")), mask_len)?;

        let by_name = vars
            .iter()
            .enumerate()
            .map(|(i, v)| (v.name.clone(), i))
            .collect();
        Ok(Arena {
            run_id,
            vars,
            by_name,
            t_max,
            total_batch,
            per_worker,
            regions,
            mask,
            running: AtomicBool::new(false),
        })
    }

    fn var(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownVariable {
                name: name.to_string(),
            })
    }

    /// Writes one batch row's item block. Caller guarantees the (var, t,
    /// row) triple is inside its own slice while a run is in flight.
    fn write_row(&self, var: usize, t: usize, row: usize, values: &[f32]) {
        let layout = &self.vars[var];
        debug_assert_eq!(values.len(), layout.item);
        let offset = (t * self.total_batch + row) * layout.item * 4;
        debug_assert!(offset + values.len() * 4 <= self.regions[var].len);
        unsafe {
            let dst = self.regions[var].ptr.add(offset).cast::<f32>();
            std::ptr::copy_nonoverlapping(values.as_ptr(), dst, values.len());
        }
        let mask_offset = (var * self.t_max + t) * self.total_batch + row;
        unsafe {
            *self.mask.ptr.add(mask_offset) = 1;
        }
    }

    fn read_row(&self, var: usize, t: usize, row: usize, out: &mut [f32]) {
        let layout = &self.vars[var];
        debug_assert_eq!(out.len(), layout.item);
        let offset = (t * self.total_batch + row) * layout.item * 4;
        unsafe {
            let src = self.regions[var].ptr.add(offset).cast::<f32>();
            std::ptr::copy_nonoverlapping(src, out.as_mut_ptr(), out.len());
        }
    }

    fn is_written(&self, var: usize, t: usize, row: usize) -> bool {
        let mask_offset = (var * self.t_max + t) * self.total_batch + row;
        unsafe { *self.mask.ptr.add(mask_offset) != 0 }
    }
}

/// Worker-side view: a [`VarStore`] restricted to one batch slice of the
/// arena. Reads return detached tensors; the variable set and shapes are
/// fixed by the probe run.
struct WorkerSlice {
    arena: Arc<Arena>,
    worker: usize,
}

impl WorkerSlice {
    fn row_range(&self) -> std::ops::Range<usize> {
        let b = self.arena.per_worker;
        self.worker * b..(self.worker + 1) * b
    }
}

impl VarStore for WorkerSlice {
    fn set(&mut self, name: &str, t: usize, value: Tensor) -> Result<()> {
        let var = self.arena.var(name)?;
        if t >= self.arena.t_max {
            return Err(Error::TimeCapacityExceeded {
                t,
                t_max: self.arena.t_max,
            });
        }
        let layout = &self.arena.vars[var];
        let expected_batch = self.arena.per_worker;
        if value.shape().is_empty() || value.shape()[0] != expected_batch {
            return Err(Error::BatchSizeMismatch {
                name: name.to_string(),
                expected: expected_batch,
                got: value.shape().first().copied().unwrap_or(0),
            });
        }
        if value.shape()[1..] != layout.item_shape[..] {
            return Err(Error::ItemShapeMismatch {
                name: name.to_string(),
                expected: layout.item_shape.clone(),
                got: value.shape()[1..].to_vec(),
            });
        }
        let item = layout.item;
        for (offset, row) in self.row_range().enumerate() {
            self.arena
                .write_row(var, t, row, &value.data()[offset * item..(offset + 1) * item]);
        }
        Ok(())
    }

    fn get(&self, name: &str, t: usize) -> Result<Tensor> {
        let var = self.arena.var(name)?;
        if t >= self.arena.t_max {
            return Err(Error::UnwrittenTimestep {
                name: name.to_string(),
                t,
            });
        }
        let layout = &self.arena.vars[var];
        let item = layout.item;
        let batch = self.arena.per_worker;
        let mut data = vec![0.0f32; batch * item];
        for (offset, row) in self.row_range().enumerate() {
            if !self.arena.is_written(var, t, row) {
                return Err(Error::UnwrittenTimestep {
                    name: name.to_string(),
                    t,
                });
            }
            self.arena
                .read_row(var, t, row, &mut data[offset * item..(offset + 1) * item]);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&layout.item_shape);
        Ok(Tensor::from_vec(shape, data))
    }

    fn set_full(&mut self, name: &str, value: Tensor) -> Result<()> {
        if value.shape().len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "workspace.set_full",
                lhs: value.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        for t in 0..value.shape()[0] {
            self.set(name, t, value.slice0(t)?)?;
        }
        Ok(())
    }

    fn full(&self, name: &str) -> Result<Tensor> {
        let extent = self.time_extent(name).unwrap_or(0);
        if extent == 0 {
            return Err(Error::UnwrittenTimestep {
                name: name.to_string(),
                t: 0,
            });
        }
        let mut slices = Vec::with_capacity(extent);
        for t in 0..extent {
            slices.push(self.get(name, t).map_err(|e| match e {
                Error::UnwrittenTimestep { name, t } => Error::TimeGap { name, t },
                other => other,
            })?);
        }
        Tensor::stack(&slices)
    }

    fn batch_size(&self) -> Option<usize> {
        Some(self.arena.per_worker)
    }

    /// `1 + max t` at which this slice's first row is written.
    fn time_extent(&self, name: &str) -> Option<usize> {
        let var = self.arena.var(name).ok()?;
        let first_row = self.worker * self.arena.per_worker;
        (0..self.arena.t_max)
            .rev()
            .find(|&t| self.arena.is_written(var, t, first_row))
            .map(|t| t + 1)
    }

    fn variable_names(&self) -> Vec<String> {
        self.arena.by_name.keys().cloned().collect()
    }

    fn is_empty(&self) -> bool {
        // The variable set is predeclared; emptiness means nothing written.
        !(0..self.arena.vars.len()).any(|var| {
            let first_row = self.worker * self.arena.per_worker;
            (0..self.arena.t_max).any(|t| self.arena.is_written(var, t, first_row))
        })
    }
}

/// Coordinator-side handle to the shared storage.
pub struct SharedWorkspace {
    arena: Arc<Arena>,
}

impl SharedWorkspace {
    pub fn t_max(&self) -> usize {
        self.arena.t_max
    }

    /// Total batch extent, `B * n`.
    pub fn total_batch(&self) -> usize {
        self.arena.total_batch
    }

    /// Batch rows each worker owns.
    pub fn batch_per_worker(&self) -> usize {
        self.arena.per_worker
    }

    pub fn run_id(&self) -> &str {
        &self.arena.run_id
    }

    pub fn variable_names(&self) -> Vec<String> {
        self.arena.by_name.keys().cloned().collect()
    }

    /// Paths of the backing regions, in variable order (the mask region
    /// last).
    pub fn region_paths(&self) -> Vec<PathBuf> {
        let mut paths: Vec<PathBuf> = self.arena.regions.iter().map(|r| r.path.clone()).collect();
        paths.push(self.arena.mask.path.clone());
        paths
    }

    /// Deep copy into a plain workspace. For each variable, a timestep is
    /// included once every batch row has written it; a timestep written by
    /// some rows but not others is an error.
    pub fn snapshot(&self) -> Result<Workspace> {
        if self.arena.running.load(Ordering::Acquire) {
            return Err(Error::RunInProgress);
        }
        let mut ws = Workspace::new();
        for (var, layout) in self.arena.vars.iter().enumerate() {
            for t in 0..self.arena.t_max {
                let written = (0..self.arena.total_batch)
                    .filter(|&row| self.arena.is_written(var, t, row))
                    .count();
                if written == 0 {
                    continue;
                }
                if written < self.arena.total_batch {
                    return Err(Error::PartialTimestep {
                        name: layout.name.clone(),
                        t,
                    });
                }
                let mut data = vec![0.0f32; self.arena.total_batch * layout.item];
                for row in 0..self.arena.total_batch {
                    self.arena.read_row(
                        var,
                        t,
                        row,
                        &mut data[row * layout.item..(row + 1) * layout.item],
                    );
                }
                let mut shape = vec![self.arena.total_batch];
                shape.extend_from_slice(&layout.item_shape);
                ws.set(&layout.name, t, Tensor::from_vec(shape, data))?;
            }
        }
        Ok(ws)
    }
}

/// Options for [`RemoteAgent::create`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RemoteOptions {
    /// Time capacity of the shared arena; defaults to the probe run's
    /// maximum time extent.
    pub t_max: Option<usize>,
    /// Worker `k` is seeded `base_seed + k`.
    pub base_seed: u64,
}

struct WorkerHandle {
    control: UnixStream,
    thread: Option<JoinHandle<()>>,
}

/// Drives `n` value-copies of an agent over disjoint batch slices of a
/// [`SharedWorkspace`], with blocking and non-blocking entry points. At most
/// one run can be outstanding.
pub struct RemoteAgent {
    workers: Vec<WorkerHandle>,
    arena: Arc<Arena>,
    completed: Arc<AtomicUsize>,
    outstanding: bool,
    poisoned: Option<(usize, String)>,
}

fn worker_main(
    mut agent: Box<dyn Agent>,
    mut slice: WorkerSlice,
    mut stream: UnixStream,
    completed: Arc<AtomicUsize>,
) {
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(frame) => frame,
            Err(_) => return, // coordinator went away
        };
        match frame {
            Frame::Run(kwargs) => {
                if write_frame(&mut stream, &Frame::Ack).is_err() {
                    return;
                }
                let outcome = catch_unwind(AssertUnwindSafe(|| {
                    no_grad(|| agent.execute(&mut slice, &kwargs))
                }));
                let reply = match outcome {
                    Ok(Ok(())) => Frame::Done,
                    Ok(Err(e)) => Frame::Err(e.to_string()),
                    Err(panic) => {
                        let msg = panic
                            .downcast_ref::<&str>()
                            .map(|s| s.to_string())
                            .or_else(|| panic.downcast_ref::<String>().cloned())
                            .unwrap_or_else(|| "worker panicked".to_string());
                        Frame::Err(msg)
                    }
                };
                completed.fetch_add(1, Ordering::Release);
                if write_frame(&mut stream, &reply).is_err() {
                    return;
                }
            }
            Frame::Stop => {
                let _ = write_frame(&mut stream, &Frame::Ack);
                return;
            }
            _ => return,
        }
    }
}

impl RemoteAgent {
    /// Probes the agent on a fresh private workspace under `probe_kwargs`,
    /// sizes the shared arena from what it wrote, and spawns the workers.
    pub fn create(
        agent: &dyn Agent,
        num_processes: usize,
        probe_kwargs: &KwArgs,
        options: RemoteOptions,
    ) -> Result<(RemoteAgent, SharedWorkspace)> {
        assert!(num_processes >= 1, "need at least one worker");

        let mut probe_agent = agent.clone_agent();
        probe_agent.seed(options.base_seed);
        let mut probe_ws = Workspace::new();
        no_grad(|| probe_agent.execute(&mut probe_ws, probe_kwargs))?;

        let per_worker = probe_ws.batch_size().ok_or(Error::ProbeWroteNothing)?;
        let probe_extent = probe_ws.max_time_extent();
        let t_max = options.t_max.unwrap_or(probe_extent);
        if t_max == 0 {
            return Err(Error::InvalidConfig("t_max must be at least 1".into()));
        }

        let vars: Vec<VarLayout> = probe_ws
            .variables()
            .map(|(name, series)| VarLayout {
                name: name.to_string(),
                item_shape: series.item_shape().to_vec(),
                item: series.item_shape().iter().product(),
            })
            .collect();
        if vars.is_empty() {
            return Err(Error::ProbeWroteNothing);
        }

        let arena = Arc::new(Arena::create(vars, t_max, per_worker, num_processes)?);
        let completed = Arc::new(AtomicUsize::new(0));

        let mut workers = Vec::with_capacity(num_processes);
        for k in 0..num_processes {
            let mut clone = agent.clone_agent();
            clone.seed(options.base_seed + k as u64);
            let slice = WorkerSlice {
                arena: Arc::clone(&arena),
                worker: k,
            };
            let (coordinator_end, worker_end) = UnixStream::pair()?;
            let completed_handle = Arc::clone(&completed);
            let thread = std::thread::Builder::new()
                .name(format!("wspc-worker-{k}"))
                .spawn(move || worker_main(clone, slice, worker_end, completed_handle))?;
            workers.push(WorkerHandle {
                control: coordinator_end,
                thread: Some(thread),
            });
        }

        Ok((
            RemoteAgent {
                workers,
                arena: Arc::clone(&arena),
                completed,
                outstanding: false,
                poisoned: None,
            },
            SharedWorkspace { arena },
        ))
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    /// Blocking run: every worker executes the agent with `kwargs`; returns
    /// once all have finished.
    pub fn execute(&mut self, ws: &SharedWorkspace, kwargs: &KwArgs) -> Result<()> {
        self.execute_async(ws, kwargs)?;
        self.join()
    }

    /// Non-blocking run: dispatches to all workers and returns immediately.
    pub fn execute_async(&mut self, ws: &SharedWorkspace, kwargs: &KwArgs) -> Result<()> {
        if self.outstanding {
            return Err(Error::AlreadyRunning);
        }
        if let Some((worker, message)) = &self.poisoned {
            return Err(Error::WorkerFailed {
                worker: *worker,
                message: message.clone(),
            });
        }
        if !Arc::ptr_eq(&self.arena, &ws.arena) {
            return Err(Error::WorkspaceMismatch);
        }
        self.completed.store(0, Ordering::Release);
        self.arena.running.store(true, Ordering::Release);
        let outcome = self.dispatch(kwargs);
        if let Err(e) = outcome {
            // A failed dispatch means a dead worker; unlatch the arena and
            // refuse further runs rather than wedging snapshots forever.
            self.arena.running.store(false, Ordering::Release);
            if let Error::WorkerFailed { worker, message } = &e {
                self.poisoned = Some((*worker, message.clone()));
            }
            return Err(e);
        }
        self.outstanding = true;
        Ok(())
    }

    fn dispatch(&mut self, kwargs: &KwArgs) -> Result<()> {
        let frame = Frame::Run(kwargs.clone());
        for (k, worker) in self.workers.iter_mut().enumerate() {
            write_frame(&mut worker.control, &frame).map_err(|e| Error::WorkerFailed {
                worker: k,
                message: e.to_string(),
            })?;
        }
        for (k, worker) in self.workers.iter_mut().enumerate() {
            match read_frame(&mut worker.control) {
                Ok(Frame::Ack) => {}
                Ok(other) => {
                    return Err(Error::WorkerFailed {
                        worker: k,
                        message: format!("expected ACK, got {other:?}"),
                    });
                }
                Err(e) => {
                    return Err(Error::WorkerFailed {
                        worker: k,
                        message: e.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Whether an asynchronous run is still in flight. Safe to poll any time.
    pub fn is_running(&self) -> bool {
        self.outstanding && self.completed.load(Ordering::Acquire) < self.workers.len()
    }

    /// Waits for the outstanding run (if any). A worker failure poisons the
    /// agent: the error is returned now and on any later run attempt.
    pub fn join(&mut self) -> Result<()> {
        if !self.outstanding {
            return Ok(());
        }
        let mut first_error: Option<(usize, String)> = None;
        for (k, worker) in self.workers.iter_mut().enumerate() {
            let outcome = read_frame(&mut worker.control);
            if first_error.is_none() {
                match outcome {
                    Ok(Frame::Done) => {}
                    Ok(Frame::Err(message)) => first_error = Some((k, message)),
                    Ok(other) => first_error = Some((k, format!("expected DONE, got {other:?}"))),
                    Err(e) => first_error = Some((k, e.to_string())),
                }
            }
        }
        // Synchronizes with the workers' Release increments, making their
        // arena writes visible to subsequent snapshots.
        self.completed.load(Ordering::Acquire);
        self.outstanding = false;
        self.arena.running.store(false, Ordering::Release);
        if let Some((worker, message)) = first_error {
            self.poisoned = Some((worker, message.clone()));
            return Err(Error::WorkerFailed { worker, message });
        }
        Ok(())
    }

    /// Stops every worker and joins the threads. Called automatically on
    /// drop.
    pub fn shutdown(&mut self) {
        let _ = self.join();
        for worker in &mut self.workers {
            let _ = write_frame(&mut worker.control, &Frame::Stop);
        }
        for worker in &mut self.workers {
            // Best-effort ACK drain; the thread may already be gone.
            let _ = worker
                .control
                .set_read_timeout(Some(std::time::Duration::from_secs(5)));
            let _ = read_frame(&mut worker.control);
            if let Some(thread) = worker.thread.take() {
                let _ = thread.join();
            }
        }
    }
}

impl Drop for RemoteAgent {
    fn drop(&mut self) {
        self.shutdown();
    }
}
