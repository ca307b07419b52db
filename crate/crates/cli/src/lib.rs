//! Library side of the `dcci` operator tool.

pub mod replay;
pub mod report;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const DATA: i32 = 2;
}
