//! Numeric flags with SI unit suffixes.
//!
//! A bare number is taken in the base unit of the quantity (A, s, Ah, V).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Current,
    Time,
    Charge,
    Voltage,
}

impl Quantity {
    // Longest suffixes first so "mAh" is not read as "h".
    fn suffixes(self) -> &'static [(&'static str, f64)] {
        match self {
            Quantity::Current => &[("mA", 1e-3), ("A", 1.0)],
            Quantity::Time => &[("min", 60.0), ("ms", 1e-3), ("s", 1.0), ("h", 3600.0)],
            Quantity::Charge => &[("mAh", 1e-3), ("Ah", 1.0)],
            Quantity::Voltage => &[("mV", 1e-3), ("V", 1.0)],
        }
    }

    fn base(self) -> &'static str {
        match self {
            Quantity::Current => "A",
            Quantity::Time => "s",
            Quantity::Charge => "Ah",
            Quantity::Voltage => "V",
        }
    }
}

/// Parses `text` as `quantity`, returning the value in the base unit.
pub fn parse_quantity(text: &str, quantity: Quantity) -> Result<f64, String> {
    let text = text.trim();
    let (number, factor) = quantity
        .suffixes()
        .iter()
        .find_map(|&(sfx, f)| text.strip_suffix(sfx).map(|n| (n.trim_end(), f)))
        .unwrap_or((text, 1.0));
    let value: f64 = number.parse().map_err(|_| {
        let units: Vec<&str> = quantity.suffixes().iter().map(|s| s.0).collect();
        format!(
            "`{text}` is not a number with an optional unit ({})",
            units.join(", ")
        )
    })?;
    let value = value * factor;
    if !value.is_finite() {
        return Err(format!("`{text}` is not finite"));
    }
    Ok(value)
}

pub fn amps(text: &str) -> Result<f64, String> {
    parse_quantity(text, Quantity::Current)
}

pub fn seconds(text: &str) -> Result<f64, String> {
    parse_quantity(text, Quantity::Time)
}

pub fn amp_hours(text: &str) -> Result<f64, String> {
    parse_quantity(text, Quantity::Charge)
}

pub fn volts(text: &str) -> Result<f64, String> {
    parse_quantity(text, Quantity::Voltage)
}

/// Renders a value in the base unit of `quantity`, e.g. `10A`.
pub fn show(value: f64, quantity: Quantity) -> String {
    format!("{value}{}", quantity.base())
}
