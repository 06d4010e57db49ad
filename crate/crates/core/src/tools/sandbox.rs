//! Local sandbox pool for code jobs.
//!
//! Each job runs in a fresh private directory as its own process group, with
//! rlimits for CPU time and address space, no network (a fresh network
//! namespace), and a wall-clock watchdog that kills the whole group. When the
//! host runs as root, every pool slot also maps to its own unprivileged uid
//! and the job directory is made private to it, so concurrent jobs cannot
//! read each other's files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::ToolError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub wall_seconds: f64,
    pub cpu_seconds: u64,
    pub memory_bytes: u64,
    pub max_output_bytes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            wall_seconds: 60.0,
            cpu_seconds: 60,
            memory_bytes: 1 << 30,
            max_output_bytes: 64 * 1024,
        }
    }
}

impl Limits {
    fn check(&self) -> Result<(), ToolError> {
        if self.wall_seconds.is_nan()
            || self.wall_seconds <= 0.0
            || self.cpu_seconds == 0
            || self.memory_bytes == 0
            || self.max_output_bytes == 0
        {
            return Err(ToolError::InvalidArguments("all limits must be positive".into()));
        }
        Ok(())
    }

    fn within(&self, cap: &Limits) -> bool {
        self.wall_seconds <= cap.wall_seconds
            && self.cpu_seconds <= cap.cpu_seconds
            && self.memory_bytes <= cap.memory_bytes
            && self.max_output_bytes <= cap.max_output_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeJob {
    pub runtime: String,
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    /// Arguments after the runtime command, whitespace separated. The first
    /// one names a file in `files` (or is an interpreter flag).
    pub entry: String,
    #[serde(default)]
    pub stdin: String,
    #[serde(default)]
    pub limits: Option<Limits>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub wall_ms: u64,
    pub cpu_ms: u64,
    pub peak_memory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeResult {
    /// Process exit code, or 128 + signal number when killed.
    pub exit_code: i32,
    pub stdout: String,
    pub stdout_truncated: bool,
    pub stderr: String,
    pub stderr_truncated: bool,
    #[serde(skip)]
    pub produced_files: BTreeMap<String, Vec<u8>>,
    pub usage: Usage,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub max_concurrency: usize,
    /// Runtime tag to interpreter argv.
    pub runtimes: BTreeMap<String, Vec<String>>,
    pub default_limits: Limits,
    /// Upper bounds any job may request.
    pub caps: Limits,
    /// Where job directories are created.
    pub work_root: Option<PathBuf>,
    pub network_isolation: bool,
    /// First uid used for per-slot isolation when running as root.
    pub uid_base: u32,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        let mut runtimes = BTreeMap::new();
        runtimes.insert("python".to_string(), vec!["python3".to_string()]);
        runtimes.insert("sh".to_string(), vec!["/bin/sh".to_string()]);
        Self {
            max_concurrency: 4,
            runtimes,
            default_limits: Limits::default(),
            caps: Limits {
                wall_seconds: 3600.0,
                cpu_seconds: 3600,
                memory_bytes: 8 << 30,
                max_output_bytes: 4 << 20,
            },
            work_root: None,
            network_isolation: true,
            uid_base: 61000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SandboxEvent {
    Started { slot: usize },
    Stopped { slot: usize },
}

pub type SandboxObserver = Arc<dyn Fn(SandboxEvent) + Send + Sync>;

pub struct Sandbox {
    config: SandboxConfig,
    free: Mutex<Vec<usize>>,
    available: Condvar,
    observer: Option<SandboxObserver>,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox").field("config", &self.config).finish()
    }
}

struct SlotGuard<'a> {
    sandbox: &'a Sandbox,
    slot: usize,
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        if let Some(o) = &self.sandbox.observer {
            o(SandboxEvent::Stopped { slot: self.slot });
        }
        self.sandbox.free.lock().unwrap().push(self.slot);
        self.sandbox.available.notify_one();
    }
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        let n = config.max_concurrency.max(1);
        Self {
            free: Mutex::new((0..n).rev().collect()),
            available: Condvar::new(),
            observer: None,
            config,
        }
    }

    /// Registers a callback for slot start/stop events.
    pub fn with_observer(mut self, observer: SandboxObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        loop {
            if let Some(slot) = free.pop() {
                drop(free);
                if let Some(o) = &self.observer {
                    o(SandboxEvent::Started { slot });
                }
                return SlotGuard { sandbox: self, slot };
            }
            free = self.available.wait(free).unwrap();
        }
    }

    pub fn execute(&self, job: &CodeJob) -> Result<CodeResult, ToolError> {
        let (argv, limits) = self.plan(job)?;
        let slot = self.acquire();
        self.run(job, &argv, &limits, slot.slot)
    }

    /// Runs jobs with at most `max_concurrency` in flight at once; results
    /// line up with `jobs`.
    pub fn execute_parallel(&self, jobs: &[CodeJob], max_concurrency: usize) -> Vec<Result<CodeResult, ToolError>> {
        let width = max_concurrency.max(1).min(jobs.len().max(1));
        let next = Mutex::new(0usize);
        let results: Mutex<Vec<Option<Result<CodeResult, ToolError>>>> =
            Mutex::new(jobs.iter().map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..width {
                s.spawn(|| loop {
                    let i = {
                        let mut n = next.lock().unwrap();
                        let i = *n;
                        *n += 1;
                        i
                    };
                    let Some(job) = jobs.get(i) else { break };
                    let r = self.execute(job);
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every job ran"))
            .collect()
    }

    fn plan(&self, job: &CodeJob) -> Result<(Vec<String>, Limits), ToolError> {
        let runtime = self
            .config
            .runtimes
            .get(&job.runtime)
            .ok_or_else(|| ToolError::RuntimeUnavailable(job.runtime.clone()))?;
        let limits = job.limits.unwrap_or(self.config.default_limits);
        limits.check()?;
        if !limits.within(&self.config.caps) {
            return Err(ToolError::InvalidArguments(
                "job limits exceed the configured caps".into(),
            ));
        }
        let args: Vec<String> = job.entry.split_whitespace().map(str::to_string).collect();
        match args.first() {
            Some(first) if job.files.contains_key(first) || first.starts_with('-') => {}
            _ => {
                return Err(ToolError::InvalidArguments(format!(
                    "entry {:?} must start with a file from the job",
                    job.entry
                )))
            }
        }
        for p in job.files.keys() {
            if p.is_empty() || p.starts_with('/') || p.split('/').any(|s| s == ".." || s.is_empty()) {
                return Err(ToolError::InvalidArguments(format!("bad job file path {p:?}")));
            }
        }
        let mut argv = runtime.clone();
        argv.extend(args);
        Ok((argv, limits))
    }

    fn run(&self, job: &CodeJob, argv: &[String], limits: &Limits, slot: usize) -> Result<CodeResult, ToolError> {
        let setup = |e: std::io::Error| ToolError::SandboxSetupFailure(e.to_string());
        let root = self.config.work_root.clone().unwrap_or_else(std::env::temp_dir);
        let dir = tempfile::Builder::new()
            .prefix("wb-job-")
            .tempdir_in(&root)
            .map_err(setup)?;
        let workdir = dir.path().to_path_buf();
        for (p, content) in &job.files {
            let target = workdir.join(p);
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent).map_err(setup)?;
            }
            std::fs::write(&target, content).map_err(setup)?;
        }
        let isolate_uid = is_root().then(|| self.config.uid_base + slot as u32);
        if let Some(uid) = isolate_uid {
            chown_tree(&workdir, uid).map_err(setup)?;
        }
        std::fs::set_permissions(&workdir, std::fs::Permissions::from_mode(0o700)).map_err(setup)?;

        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(&workdir)
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", &workdir)
            .env("LANG", "C.UTF-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let cpu = limits.cpu_seconds;
        let mem = limits.memory_bytes;
        let net = self.config.network_isolation;
        // SAFETY: the closure only issues async-signal-safe system calls.
        unsafe {
            cmd.pre_exec(move || confine(cpu, mem, net, isolate_uid));
        }
        let started = Instant::now();
        let mut child = cmd.spawn().map_err(setup)?;
        let pid = child.id() as libc::pid_t;

        let cap = limits.max_output_bytes;
        let out_rx = capture(child.stdout.take().expect("piped stdout"), cap);
        let err_rx = capture(child.stderr.take().expect("piped stderr"), cap);
        if let Some(mut stdin) = child.stdin.take() {
            let data = job.stdin.clone().into_bytes();
            std::thread::spawn(move || {
                let _ = stdin.write_all(&data);
            });
        }

        let deadline = started + Duration::from_secs_f64(limits.wall_seconds);
        let mut status: libc::c_int = 0;
        // SAFETY: rusage is plain data, fully written by wait4.
        let mut rusage: libc::rusage = unsafe { std::mem::zeroed() };
        let mut timed_out = false;
        loop {
            // SAFETY: waiting on our own child with valid out-pointers.
            let r = unsafe { libc::wait4(pid, &mut status, libc::WNOHANG, &mut rusage) };
            if r == pid {
                break;
            }
            if r < 0 {
                let e = std::io::Error::last_os_error();
                if e.kind() == std::io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(ToolError::SandboxSetupFailure(format!("wait4: {e}")));
            }
            if Instant::now() >= deadline {
                timed_out = true;
                // SAFETY: signalling the job's own process group.
                unsafe {
                    libc::killpg(pid, libc::SIGKILL);
                }
                // SAFETY: as above; blocking reap after the kill.
                unsafe {
                    libc::wait4(pid, &mut status, 0, &mut rusage);
                }
                break;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        let wall = started.elapsed();
        // Stray members of the group would hold the pipes open.
        // SAFETY: signalling the job's own process group.
        unsafe {
            libc::killpg(pid, libc::SIGKILL);
        }
        let (stdout, stdout_truncated) = out_rx
            .recv_timeout(Duration::from_secs(2))
            .unwrap_or((Vec::new(), true));
        let (stderr, stderr_truncated) = err_rx
            .recv_timeout(Duration::from_secs(2))
            .unwrap_or((Vec::new(), true));

        let exit_code = if libc::WIFEXITED(status) {
            libc::WEXITSTATUS(status)
        } else if libc::WIFSIGNALED(status) {
            128 + libc::WTERMSIG(status)
        } else {
            -1
        };
        let tv_ms = |t: libc::timeval| (t.tv_sec as u64) * 1000 + (t.tv_usec as u64) / 1000;
        let usage = Usage {
            wall_ms: wall.as_millis() as u64,
            cpu_ms: tv_ms(rusage.ru_utime) + tv_ms(rusage.ru_stime),
            peak_memory_bytes: (rusage.ru_maxrss as u64) * 1024,
        };
        let produced_files = collect_produced(&workdir, &job.files);
        Ok(CodeResult {
            exit_code,
            stdout: String::from_utf8_lossy(&stdout).into_owned(),
            stdout_truncated,
            stderr: String::from_utf8_lossy(&stderr).into_owned(),
            stderr_truncated,
            produced_files,
            usage,
            timed_out,
        })
    }
}

fn is_root() -> bool {
    // SAFETY: geteuid has no failure modes.
    unsafe { libc::geteuid() == 0 }
}

fn chown_tree(path: &Path, uid: u32) -> std::io::Result<()> {
    std::os::unix::fs::chown(path, Some(uid), Some(uid))?;
    if path.is_dir() {
        for e in std::fs::read_dir(path)? {
            chown_tree(&e?.path(), uid)?;
        }
    }
    Ok(())
}

/// Runs in the forked child before exec.
fn confine(cpu: u64, mem: u64, net: bool, uid: Option<u32>) -> std::io::Result<()> {
    let check = |r: libc::c_int| {
        if r == 0 {
            Ok(())
        } else {
            Err(std::io::Error::last_os_error())
        }
    };
    // SAFETY: plain system calls on the current (child) process.
    unsafe {
        if libc::setsid() < 0 {
            return Err(std::io::Error::last_os_error());
        }
        if net {
            let flags = if uid.is_some() {
                libc::CLONE_NEWNET
            } else {
                libc::CLONE_NEWUSER | libc::CLONE_NEWNET
            };
            check(libc::unshare(flags))?;
        }
        let lim = |n: u64| libc::rlimit {
            rlim_cur: n as libc::rlim_t,
            rlim_max: n as libc::rlim_t,
        };
        check(libc::setrlimit(libc::RLIMIT_CPU, &lim(cpu)))?;
        check(libc::setrlimit(libc::RLIMIT_AS, &lim(mem)))?;
        check(libc::setrlimit(libc::RLIMIT_CORE, &lim(0)))?;
        if let Some(uid) = uid {
            check(libc::setgroups(0, std::ptr::null()))?;
            check(libc::setgid(uid))?;
            check(libc::setuid(uid))?;
        }
    }
    Ok(())
}

/// Reads a pipe to the end, keeping at most `cap` bytes.
fn capture(mut pipe: impl Read + Send + 'static, cap: usize) -> mpsc::Receiver<(Vec<u8>, bool)> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    if n > room {
                        truncated = true;
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        let _ = tx.send((kept, truncated));
    });
    rx
}

const MAX_PRODUCED_BYTES: u64 = 16 << 20;

fn collect_produced(root: &Path, inputs: &BTreeMap<String, String>) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut total = 0u64;
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let path = e.path();
            let Ok(meta) = std::fs::symlink_metadata(&path) else {
                continue;
            };
            if meta.is_dir() {
                stack.push(path);
                continue;
            }
            if !meta.is_file() || total + meta.len() > MAX_PRODUCED_BYTES {
                continue;
            }
            let Ok(rel) = path.strip_prefix(root) else { continue };
            let rel = rel.to_string_lossy().replace('\\', "/");
            let Ok(bytes) = std::fs::read(&path) else { continue };
            if inputs.get(&rel).is_some_and(|orig| orig.as_bytes() == bytes.as_slice()) {
                continue;
            }
            total += meta.len();
            out.insert(rel, bytes);
        }
    }
    out
}
