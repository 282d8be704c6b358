//! Helpers shared by the line-oriented text formats (datasets, latent
//! records, checkpoints, logs, reports).
//!
//! Floats are written with 17 significant digits so that every `f64`
//! round-trips exactly and equal values always serialize to identical bytes.

use std::fmt::Write as _;

/// Formats an `f64` with 17 significant digits (exact round-trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Appends a space-separated float field to a line buffer.
pub fn push_f64(line: &mut String, v: f64) {
    let _ = write!(line, " {:.16e}", v);
}

/// Parses a float field, rejecting non-finite values.
pub fn parse_f64(field: &str) -> Result<f64, String> {
    let v: f64 = field
        .parse()
        .map_err(|_| format!("invalid float {field:?}"))?;
    if !v.is_finite() {
        return Err(format!("non-finite float {field:?}"));
    }
    Ok(v)
}

pub fn parse_usize(field: &str) -> Result<usize, String> {
    field
        .parse()
        .map_err(|_| format!("invalid integer {field:?}"))
}

pub fn parse_u64(field: &str) -> Result<u64, String> {
    field
        .parse()
        .map_err(|_| format!("invalid integer {field:?}"))
}

/// Splits a record line into whitespace-separated fields.
pub fn fields(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fmt_is_exact_for_simple_values() {
        for v in [0.0, -0.0, 1.0, -1.5, 0.1, 1e-300, 1e300, std::f64::consts::PI] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{v} -> {s}");
        }
    }

    proptest! {
        #[test]
        fn fmt_round_trips_exactly(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let back: f64 = fmt_f64(v).parse().unwrap();
            prop_assert_eq!(v.to_bits(), back.to_bits());
        }
    }
}
