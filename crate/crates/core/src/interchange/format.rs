//! Canonical number formatting shared by dumps and plan files.

use std::io;

use serde::Serialize;
use serde_json::ser::Formatter;

/// Significant digits kept for every float in canonical output.
pub const SIGNIFICANT_DIGITS: usize = 6;

/// Formats `v` with 6 significant digits, `%g` style, trailing zeros removed.
///
/// Fixed notation is used for decimal exponents in `-4..6`, scientific
/// notation otherwise. Output is always a valid JSON number.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent formatting always has 'e'");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if (-4..SIGNIFICANT_DIGITS as i32).contains(&exp) {
        let decimals = (SIGNIFICANT_DIGITS as i32 - 1 - exp).max(0) as usize;
        trim_fraction(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_fraction(mantissa.to_string()))
    }
}

fn trim_fraction(mut s: String) -> String {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Rounds `v` to the value it will have after a canonical write and re-read.
pub fn quantize(v: f64) -> f64 {
    if !v.is_finite() {
        return v;
    }
    format_sig6(v).parse().expect("canonical float text parses")
}

/// serde_json formatter: compact layout, canonical floats.
#[derive(Debug, Default, Clone, Copy)]
pub struct CanonicalFormatter;

impl Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(format_sig6(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serializes `value` as one canonical JSON line (no trailing newline).
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, CanonicalFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(-0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(10.0), "10");
        assert_eq!(format_sig6(0.9), "0.9");
        assert_eq!(format_sig6(1.0 / 7.0), "0.142857");
        assert_eq!(format_sig6(1066.6666666), "1066.67");
        assert_eq!(format_sig6(123456.0), "123456");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(0.000012345678), "1.23457e-5");
        assert_eq!(format_sig6(0.00012345678), "0.000123457");
        assert_eq!(format_sig6(-2.5), "-2.5");
        assert_eq!(format_sig6(9.9999999), "10");
        assert_eq!(format_sig6(999999.7), "1e6");
    }

    #[test]
    fn floats_in_json_use_canonical_form() {
        let s = to_canonical_string(&serde_json::json!({"a": [0.3, 1.0, 2.0 / 3.0]})).unwrap();
        assert_eq!(s, r#"{"a":[0.3,1,0.666667]}"#);
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(v in -1e7..1e7f64) {
            let q = quantize(v);
            prop_assert_eq!(quantize(q), q);
            prop_assert_eq!(format_sig6(q), format_sig6(v));
        }

        #[test]
        fn keeps_six_significant_digits(v in 1e-9..1e9f64) {
            let q = quantize(v);
            prop_assert!(((q - v) / v).abs() <= 5e-6);
        }
    }
}
