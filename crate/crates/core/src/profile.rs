//! Wall-clock and peak-memory measurement around a closure.
//!
//! Without an accelerator the peak is the resident-set high-water mark
//! (reset before the call where the kernel allows it) minus the resident
//! set at entry.

use std::time::{Duration, Instant};

fn status_kib(field: &str) -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with(field))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

fn reset_high_water_mark() -> bool {
    std::fs::write("/proc/self/clear_refs", "5").is_ok()
}

pub fn measure<T>(f: impl FnOnce() -> T) -> (T, Duration, Option<f64>) {
    let before = status_kib("VmRSS:");
    let reset = reset_high_water_mark();
    let start = Instant::now();
    let out = f();
    let mut elapsed = start.elapsed();
    if elapsed.is_zero() {
        elapsed = Duration::from_nanos(1);
    }
    let after = if reset {
        status_kib("VmHWM:")
    } else {
        status_kib("VmRSS:")
    };
    let peak = match (before, after) {
        (Some(b), Some(a)) => Some(a.saturating_sub(b) as f64 / 1024.0),
        _ => None,
    };
    (out, elapsed, peak)
}
