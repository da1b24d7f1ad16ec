use std::sync::OnceLock;

use regex::Regex;

/// Whitespace as Python's `str.split()` sees it, which also covers the
/// ASCII separators 0x1C..0x1F.
fn is_py_space(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

fn rules() -> &'static [(Regex, &'static str); 4] {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RULES.get_or_init(|| {
        let re = |p: &str| Regex::new(p).expect("static pattern");
        [
            // isolate symbols: { | } ~ [ \ ] ^ _ ` space ! " # $ % & ( ) * + : ; < = > ? @ /
            (re(r"([\{-~\[-`\x20-&\(-\+:-@/])"), " $1 "),
            // period and comma unless preceded by a digit
            (re(r"([^0-9])([\.,])"), "$1 $2 "),
            // period and comma unless followed by a digit
            (re(r"([\.,])([^0-9])"), " $1 $2"),
            // dash after a digit
            (re(r"([0-9])(-)"), "$1 $2 "),
        ]
    })
}

/// SacreBLEU's default `13a` tokenization, returning the tokens.
pub fn tokenize_13a(text: &str) -> Vec<String> {
    let mut line = text.trim_end_matches(is_py_space).replace("<skipped>", "");
    line = line.replace("-\n", "").replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut line = format!(" {line} ");
    for (re, rep) in rules() {
        line = re.replace_all(&line, *rep).into_owned();
    }
    line.split(is_py_space).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(s: &str) -> Vec<String> {
        tokenize_13a(s)
    }

    #[test]
    fn pinned_examples() {
        assert_eq!(tok("Hello, world!"), ["Hello", ",", "world", "!"]);
        assert!(tok("").is_empty());
        assert_eq!(tok("a  b"), ["a", "b"]);
        assert_eq!(
            tok("It costs $3,000.50 (approx.) -- 1-2 days & <tags>"),
            ["It", "costs", "$", "3,000.50", "(", "approx", ".", ")", "--", "1", "-", "2", "days", "&", "<", "tags", ">"]
        );
        assert_eq!(
            tok("end-of-line-\nnext &quot;q&quot; &amp; 10.5, x.y"),
            ["end-of-linenext", "\"", "q", "\"", "&", "10.5", ",", "x", ".", "y"]
        );
    }

    #[test]
    fn separator_chars_split() {
        assert_eq!(tok("a\u{1f}b"), ["a", "b"]);
    }
}
