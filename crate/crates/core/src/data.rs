//! Cases compiled into the library.

pub(crate) const NAMES: &[&str] = &["two-bus", "wscc9"];

pub(crate) fn lookup(name: &str) -> Option<&'static str> {
    match name {
        "two-bus" | "two_bus" => Some(include_str!("../data/two_bus.json")),
        "wscc9" | "case9" | "wscc-9" => Some(include_str!("../data/wscc9.json")),
        _ => None,
    }
}
