//! Datasets, file formats, training and evaluation drivers for camera-LiDAR gait
//! recognition, on top of the algorithms in `clgait-core`. The `clgait` binary
//! exposes all of it through [`cli::run`].

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod report;
pub mod train;
pub mod verify;

pub use clgait_core as core;
pub use error::{Error, Result};

/// Keeps glibc malloc from returning large per-iteration buffers to the kernel.
/// Training reallocates the same few-megabyte activations every step, and with the
/// default mmap threshold each one is freshly mapped and zero-faulted.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // 32 MiB is the largest mmap threshold glibc accepts.
    // SAFETY: mallopt only adjusts allocator parameters and is called before any
    // other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}
