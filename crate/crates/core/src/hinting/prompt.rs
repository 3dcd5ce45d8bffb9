/// Appends ` [Detected: a, b, c]` to `prompt`. An empty list returns the
/// prompt unchanged. Calling it twice appends twice.
pub fn enrich_prompt<S: AsRef<str>>(prompt: &str, names: &[S]) -> String {
    if names.is_empty() {
        return prompt.to_string();
    }
    let joined = names
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(", ");
    format!("{prompt} [Detected: {joined}]")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_names() {
        assert_eq!(
            enrich_prompt("Describe the object.", &["bollard", "cone", "barrier"]),
            "Describe the object. [Detected: bollard, cone, barrier]"
        );
    }

    #[test]
    fn single_name() {
        assert_eq!(
            enrich_prompt("Describe.", &["stroller"]),
            "Describe. [Detected: stroller]"
        );
    }

    #[test]
    fn empty_detection_is_identity() {
        let p = "what is it ?  ";
        assert_eq!(enrich_prompt::<&str>(p, &[]), p);
    }

    #[test]
    fn not_idempotent() {
        let once = enrich_prompt("q", &["cone"]);
        assert_eq!(
            enrich_prompt(&once, &["cone"]),
            "q [Detected: cone] [Detected: cone]"
        );
    }
}
