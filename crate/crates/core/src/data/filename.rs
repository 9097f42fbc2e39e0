use crate::error::{Error, Result};

/// Parses `<subject>.<view>.bmp` (extension case-insensitive) into
/// `(subject_id, view_index)`.
pub fn parse_filename(name: &str) -> Result<(u32, u32)> {
    let bad = || Error::MalformedName(name.to_string());
    let mut parts = name.split('.');
    let (Some(subject), Some(view), Some(ext), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(bad());
    };
    if !ext.eq_ignore_ascii_case("bmp") {
        return Err(bad());
    }
    let number = |s: &str| -> Result<u32> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        s.parse().map_err(|_| bad())
    };
    let subject = number(subject)?;
    let view = number(view)?;
    if view == 0 {
        return Err(bad());
    }
    Ok((subject, view))
}
