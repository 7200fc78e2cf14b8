//! Helpers for unit tests.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

static COUNTER: AtomicU64 = AtomicU64::new(0);

/// Unique file path under the system temp dir; the parent directory exists
/// on return.
pub fn tmp_path(name: &str) -> PathBuf {
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!("slotreg-tests-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(format!("{n}-{name}"))
}

/// Unique empty directory under the system temp dir.
pub fn tmp_dir(name: &str) -> PathBuf {
    let dir = tmp_path(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
