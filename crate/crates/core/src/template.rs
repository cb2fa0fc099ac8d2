//! Minimal prompt templating: literal `{name}` placeholders, substituted in
//! a single left-to-right pass. Substituted values are never rescanned, so a
//! value containing `{question}` (or any other placeholder) stays literal.

/// Replace each placeholder occurrence with its value in one pass.
///
/// `vars` maps placeholder tokens *including braces* (e.g. `"{question}"`) to
/// replacement text. Unmatched braces and unknown placeholders are kept
/// verbatim.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        match vars.iter().find(|(token, _)| tail.starts_with(token)) {
            Some((token, value)) => {
                out.push_str(value);
                rest = &tail[token.len()..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Number of (non-overlapping) occurrences of `token` in `template`.
/// Used to validate that a custom template names each placeholder exactly once.
pub fn occurrences(template: &str, token: &str) -> usize {
    template.matches(token).count()
}
