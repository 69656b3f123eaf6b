//! Numeric formatting for file outputs.
//!
//! Report files carry floats at 9 significant digits; trace files use fixed
//! 6-decimal columns. Formatting is centralized here so rerunning a command
//! reproduces output files byte for byte.

/// Round to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.8e}", x).parse().unwrap()
}

/// Format with 9 significant digits, shortest decimal form.
pub fn sig9(x: f64) -> String {
    let r = round_sig9(x);
    if r == 0.0 {
        return "0".to_string();
    }
    format!("{}", r)
}

/// Fixed 6-decimal form used by trace files.
pub fn fixed6(x: f64) -> String {
    format!("{:.6}", x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_keeps_nine_digits() {
        assert_eq!(sig9(2.302585092994046), "2.30258509");
        assert_eq!(sig9(0.01), "0.01");
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(-123456789.123), "-123456789");
    }

    #[test]
    fn round_trips_are_stable() {
        for &x in &[1.0 / 3.0, 2.5e-7, -9.87654321e12, 55e6] {
            let once = sig9(x);
            let twice = sig9(once.parse::<f64>().unwrap());
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn fixed6_shape() {
        assert_eq!(fixed6(0.03), "0.030000");
        assert_eq!(fixed6(150.0), "150.000000");
    }
}
