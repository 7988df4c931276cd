//! Virtual time base: all simulation timestamps and durations are u64 microseconds.

pub type Micros = u64;

pub const MILLI: Micros = 1_000;
pub const SECOND: Micros = 1_000_000;

/// Renders a microsecond timestamp as fractional seconds for logs and summaries.
pub fn secs_f64(t: Micros) -> f64 {
    t as f64 / SECOND as f64
}
