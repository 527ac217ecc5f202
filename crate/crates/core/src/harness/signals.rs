//! SIGINT/SIGTERM turn into a flag polled by long-running loops.

use std::sync::atomic::{AtomicBool, Ordering};

static ABORT: AtomicBool = AtomicBool::new(false);

#[cfg(unix)]
extern "C" fn on_signal(_: libc::c_int) {
    ABORT.store(true, Ordering::SeqCst);
}

/// Installs the handlers (once) and returns the flag they set.
pub fn install() -> &'static AtomicBool {
    #[cfg(unix)]
    unsafe {
        let handler = on_signal as extern "C" fn(libc::c_int) as libc::sighandler_t;
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
    &ABORT
}

pub fn aborted() -> bool {
    ABORT.load(Ordering::SeqCst)
}

/// Asks a child process to stop the same way a user would.
#[cfg(unix)]
pub fn terminate(child: &std::process::Child) {
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
    }
}

#[cfg(not(unix))]
pub fn terminate(child: &std::process::Child) {
    let _ = child;
}
