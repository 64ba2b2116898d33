//! Error codes and exit statuses. Every failure leaves the process through
//! one of these, printed as a single `error[ENNN]: message` line on stderr
//! so scripts can match on the code without parsing prose.

use std::fmt;

/// Process exit statuses. Success is 0; a finished run in which some
/// monitor gave up exits with `MonitorFailed` so schedulers can tell
/// "experiment says no" from "tool broke".
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_MONITOR_FAILED: i32 = 3;

#[derive(Debug, Clone)]
pub struct Fail {
    pub code: &'static str,
    pub msg: String,
    pub exit: i32,
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // One line, always: embedded newlines would break the contract.
        write!(f, "error[{}]: {}", self.code, self.msg.replace('\n', " "))
    }
}

impl Fail {
    pub fn io(msg: impl fmt::Display) -> Self {
        Fail { code: "E001", msg: msg.to_string(), exit: EXIT_RUNTIME }
    }
    pub fn spec_syntax(msg: impl fmt::Display) -> Self {
        Fail { code: "E002", msg: msg.to_string(), exit: EXIT_RUNTIME }
    }
    pub fn topology(msg: impl fmt::Display) -> Self {
        Fail { code: "E003", msg: msg.to_string(), exit: EXIT_RUNTIME }
    }
    pub fn artifact(msg: impl fmt::Display) -> Self {
        Fail { code: "E004", msg: msg.to_string(), exit: EXIT_RUNTIME }
    }
    pub fn decode_line(msg: impl fmt::Display) -> Self {
        Fail { code: "E010", msg: msg.to_string(), exit: EXIT_RUNTIME }
    }
    pub fn decode_frame(msg: impl fmt::Display) -> Self {
        Fail { code: "E011", msg: msg.to_string(), exit: EXIT_RUNTIME }
    }
    pub fn run(msg: impl fmt::Display) -> Self {
        Fail { code: "E020", msg: msg.to_string(), exit: EXIT_RUNTIME }
    }
    /// Validation failure; `code` picks the specific E1xx entry.
    pub fn invalid(code: &'static str, msg: impl fmt::Display) -> Self {
        debug_assert!(code.starts_with("E1"));
        Fail { code, msg: msg.to_string(), exit: EXIT_VALIDATION }
    }
}

/// Writes to stdout. A closed pipe (`decode ... | head`) means the reader
/// has everything it wants; stop quietly instead of panicking mid-stream.
pub fn emit(text: impl fmt::Display) -> Result<(), Fail> {
    use std::io::Write;
    let out = std::io::stdout();
    match write!(out.lock(), "{text}") {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(Fail::io(format!("stdout: {e}"))),
    }
}

/// Validation problems are collected, not returned one at a time, so a bad
/// spec is reported exhaustively in a single invocation.
#[derive(Debug, Default)]
pub struct Problems(pub Vec<Fail>);

impl Problems {
    pub fn push(&mut self, code: &'static str, msg: impl fmt::Display) {
        self.0.push(Fail::invalid(code, msg));
    }

    pub fn into_result(self) -> Result<(), Vec<Fail>> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(self.0)
        }
    }
}
