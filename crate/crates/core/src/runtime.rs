//! Process-level tuning for long training runs.

/// Keeps freed memory in the heap instead of returning it to the OS.
///
/// A training step allocates and frees a few hundred megabytes of tensors.
/// With glibc's defaults each large buffer is a fresh `mmap`, so every step
/// pays page faults and kernel zeroing again; pinning the thresholds makes
/// steps reuse the same pages. Call once at startup, before any threads are
/// spawned. A no-op on other platforms.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters; called before any
    // concurrent allocation.
    unsafe {
        // Largest mmap threshold glibc accepts on 64-bit targets.
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}
