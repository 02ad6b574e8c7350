//! File-access tracing for debug builds.
//!
//! Every file the runner opens goes through [`open`] or [`create`], and the
//! runner marks each pipeline stage it enters. While a recording is active
//! (debug builds only) these events are appended to a process-wide log,
//! which tests use to check the dataflow between stages.

use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Read(PathBuf),
    Write(PathBuf),
    /// Entry into a named pipeline stage of the image `image`.
    Stage { image: String, stage: &'static str },
}

static LOG: Mutex<Option<Vec<Event>>> = Mutex::new(None);

/// Starts a fresh recording. Does nothing in release builds.
pub fn start() {
    if cfg!(debug_assertions) {
        *LOG.lock().unwrap() = Some(Vec::new());
    }
}

/// Ends the recording and returns the events in order.
pub fn finish() -> Vec<Event> {
    LOG.lock().unwrap().take().unwrap_or_default()
}

pub fn record(event: impl FnOnce() -> Event) {
    if cfg!(debug_assertions) {
        if let Some(log) = LOG.lock().unwrap().as_mut() {
            log.push(event());
        }
    }
}

pub fn open(path: &Path) -> io::Result<File> {
    record(|| Event::Read(path.to_path_buf()));
    File::open(path)
}

pub fn create(path: &Path) -> io::Result<File> {
    record(|| Event::Write(path.to_path_buf()));
    File::create(path)
}

pub fn read_to_string(path: &Path) -> io::Result<String> {
    record(|| Event::Read(path.to_path_buf()));
    std::fs::read_to_string(path)
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> io::Result<()> {
    record(|| Event::Write(path.to_path_buf()));
    std::fs::write(path, contents)
}
