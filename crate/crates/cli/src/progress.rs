//! Per-ensemble completed-run counters on standard error.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ahl::experiment::Observer;

pub struct Progress {
    quiet: bool,
    done: AtomicUsize,
    total: AtomicUsize,
    label: Mutex<String>,
}

impl Progress {
    pub fn new(quiet: bool) -> Self {
        Self { quiet, done: AtomicUsize::new(0), total: AtomicUsize::new(0), label: Mutex::new(String::new()) }
    }

    fn print(&self, done: usize, total: usize, end: bool) {
        let label = self.label.lock().unwrap();
        let mut err = std::io::stderr().lock();
        let _ = write!(err, "\r{label}: {done}/{total} runs");
        if end {
            let _ = writeln!(err);
        }
        let _ = err.flush();
    }

    pub fn message(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

impl Observer for Progress {
    fn ensemble_started(&self, label: &str, runs: usize) {
        *self.label.lock().unwrap() = label.to_string();
        self.done.store(0, Ordering::SeqCst);
        self.total.store(runs, Ordering::SeqCst);
        if !self.quiet {
            self.print(0, runs, false);
        }
    }

    fn run_finished(&self) {
        let done = self.done.fetch_add(1, Ordering::SeqCst) + 1;
        let total = self.total.load(Ordering::SeqCst);
        // About a hundred updates per ensemble.
        if !self.quiet && done.is_multiple_of((total / 100).max(1)) && done < total {
            self.print(done, total, false);
        }
    }

    fn ensemble_finished(&self, _label: &str) {
        if !self.quiet {
            let total = self.total.load(Ordering::SeqCst);
            self.print(self.done.load(Ordering::SeqCst), total, true);
        }
    }
}
