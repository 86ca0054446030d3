//! Character-offset helpers.
//!
//! Every offset stored in a record counts Unicode scalar values, not bytes.

/// Number of Unicode scalar values in `s`.
pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Byte offset of every character boundary in `s`, including `s.len()` at the end.
///
/// `table[i]` is the byte index where character `i` starts.
pub fn boundary_table(s: &str) -> Vec<usize> {
    let mut table: Vec<usize> = s.char_indices().map(|(b, _)| b).collect();
    table.push(s.len());
    table
}

/// Substring covering characters `[start, end)`; `None` when out of range.
pub fn slice(s: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = s.char_indices().map(|(b, _)| b).chain(std::iter::once(s.len()));
    let lo = indices.nth(start)?;
    let hi = if end == start {
        lo
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&s[lo..hi])
}

/// Prefix containing the first `n` characters; `None` when `s` is shorter.
pub fn prefix(s: &str, n: usize) -> Option<&str> {
    slice(s, 0, n)
}

/// Character offset of byte offset `byte` (which must sit on a boundary).
pub fn char_offset_of_byte(s: &str, byte: usize) -> usize {
    s[..byte].chars().count()
}
