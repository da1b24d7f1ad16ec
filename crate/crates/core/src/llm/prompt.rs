//! Prompt rendering.
//!
//! Direct (no context):
//!
//! ```text
//! Translate from {S} to {T}.
//! Output only the translated sentence.
//! {S} SOURCE: {source}
//! {T} TRANSLATION:
//! ```
//!
//! One context adds `, given the translation in {C}` to the first line and a
//! `{C} CONTEXT: {z}` line before the last. With n ≥ 2 contexts the first
//! line reads `given the translations in {C1} and {C2}` (`{C1}, {C2} and
//! {C3}` for three) and the lines are `{Ci} CONTEXT i: {zi}`. Lines are
//! joined by `\n`, with no trailing newline.

use std::borrow::Cow;

use super::LlmError;

/// English name used in prompts; unknown codes are used verbatim.
pub fn language_name(code: &str) -> Cow<'_, str> {
    let name = match code {
        "en" => "English",
        "pt" => "Portuguese",
        "es" => "Spanish",
        "fr" => "French",
        "it" => "Italian",
        "de" => "German",
        "ru" => "Russian",
        "zh" => "Chinese",
        other => return Cow::Borrowed(other),
    };
    Cow::Borrowed(name)
}

fn join_names(names: &[Cow<'_, str>]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!(
            "{} and {last}",
            init.iter().map(|n| n.as_ref()).collect::<Vec<_>>().join(", ")
        ),
    }
}

/// Renders the prompt for translating `source` with optional `(language, sentence)` contexts.
pub fn render_prompt(
    source_language: &str,
    target_language: &str,
    source: &str,
    contexts: &[(String, String)],
) -> Result<String, LlmError> {
    if source.trim().is_empty() {
        return Err(LlmError::Validation("empty source sentence".into()));
    }
    if let Some((lang, _)) = contexts.iter().find(|(_, s)| s.trim().is_empty()) {
        return Err(LlmError::Validation(format!("empty {lang} context sentence")));
    }
    let s = language_name(source_language);
    let t = language_name(target_language);
    let names: Vec<Cow<'_, str>> = contexts.iter().map(|(l, _)| language_name(l)).collect();
    let mut lines = Vec::with_capacity(4 + contexts.len());
    lines.push(match contexts.len() {
        0 => format!("Translate from {s} to {t}."),
        1 => format!("Translate from {s} to {t}, given the translation in {}.", names[0]),
        _ => format!("Translate from {s} to {t}, given the translations in {}.", join_names(&names)),
    });
    lines.push("Output only the translated sentence.".to_string());
    lines.push(format!("{s} SOURCE: {source}"));
    if let [(_, z)] = contexts {
        lines.push(format!("{} CONTEXT: {z}", names[0]));
    } else {
        for (i, ((_, z), name)) in contexts.iter().zip(&names).enumerate() {
            lines.push(format!("{name} CONTEXT {}: {z}", i + 1));
        }
    }
    lines.push(format!("{t} TRANSLATION:"));
    Ok(lines.join("\n"))
}

/// Strips surrounding whitespace and one pair of quotes wrapping the whole
/// completion. Quotes are kept when the inside uses the same quote marks.
pub fn clean_completion(raw: &str) -> String {
    let s = raw.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”')] {
        if s.len() >= open.len_utf8() + close.len_utf8() && s.starts_with(open) && s.ends_with(close) {
            let inner = &s[open.len_utf8()..s.len() - close.len_utf8()];
            if !inner.contains([open, close]) {
                return inner.trim().to_string();
            }
        }
    }
    s.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(l, s)| (l.to_string(), s.to_string())).collect()
    }

    #[test]
    fn direct_prompt() {
        let p = render_prompt("en", "pt", "Hello.", &[]).unwrap();
        assert_eq!(
            p,
            "Translate from English to Portuguese.\n\
             Output only the translated sentence.\n\
             English SOURCE: Hello.\n\
             Portuguese TRANSLATION:"
        );
    }

    #[test]
    fn single_context_prompt() {
        let p = render_prompt("en", "pt", "Hello.", &ctx(&[("es", "Hola.")])).unwrap();
        assert_eq!(
            p,
            "Translate from English to Portuguese, given the translation in Spanish.\n\
             Output only the translated sentence.\n\
             English SOURCE: Hello.\n\
             Spanish CONTEXT: Hola.\n\
             Portuguese TRANSLATION:"
        );
    }

    #[test]
    fn two_context_prompt() {
        let p = render_prompt("zh", "pt", "你好。", &ctx(&[("es", "Hola."), ("fr", "Bonjour.")])).unwrap();
        assert_eq!(
            p,
            "Translate from Chinese to Portuguese, given the translations in Spanish and French.\n\
             Output only the translated sentence.\n\
             Chinese SOURCE: 你好。\n\
             Spanish CONTEXT 1: Hola.\n\
             French CONTEXT 2: Bonjour.\n\
             Portuguese TRANSLATION:"
        );
    }

    #[test]
    fn three_context_prompt() {
        let p = render_prompt("en", "pt", "Hi.", &ctx(&[("es", "Hola."), ("fr", "Salut."), ("it", "Ciao.")])).unwrap();
        assert_eq!(
            p,
            "Translate from English to Portuguese, given the translations in Spanish, French and Italian.\n\
             Output only the translated sentence.\n\
             English SOURCE: Hi.\n\
             Spanish CONTEXT 1: Hola.\n\
             French CONTEXT 2: Salut.\n\
             Italian CONTEXT 3: Ciao.\n\
             Portuguese TRANSLATION:"
        );
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(render_prompt("en", "pt", "  ", &[]), Err(LlmError::Validation(_))));
        assert!(render_prompt("en", "pt", "x", &ctx(&[("es", "")])).is_err());
    }

    #[test]
    fn unknown_codes_used_verbatim() {
        let p = render_prompt("xx", "pt", "a", &[]).unwrap();
        assert!(p.starts_with("Translate from xx to Portuguese."));
    }

    #[test]
    fn completion_cleanup() {
        assert_eq!(clean_completion("  Olá.\n"), "Olá.");
        assert_eq!(clean_completion("\"Olá.\""), "Olá.");
        assert_eq!(clean_completion("“Olá.”"), "Olá.");
        assert_eq!(clean_completion("\"a\" e \"b\""), "\"a\" e \"b\"");
        assert_eq!(clean_completion("«sim»"), "«sim»");
        assert_eq!(clean_completion("\""), "\"");
        assert_eq!(clean_completion("Ele disse \"sim\""), "Ele disse \"sim\"");
    }
}
