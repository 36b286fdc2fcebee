//! Final-answer extraction, normalization and equivalence.
//!
//! Model output is split into a reasoning segment (between think markers) and
//! an answer segment. The committed answer is the last balanced `\boxed{...}`
//! in the answer segment. Answers are normalized into a canonical string so
//! that `"0.50"`, `"{0.5}"` and `"1/2"` can be compared.
//!
//! Equivalence is exact string match, exact rational match, or, when either
//! side is a decimal, a match within [`DECIMAL_TOLERANCE`]. It is reflexive
//! and symmetric but not transitive, which is why [`classify_votes`] is greedy first-fit.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used when two answers only match as floating point values.
pub const DECIMAL_TOLERANCE: f64 = 1e-9;

const BOXED_MARKER: &str = "\\boxed{";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnswerError {
    #[error("completion text is empty")]
    EmptyCompletion,
    #[error("cannot classify an empty answer list")]
    EmptyAnswerSet,
}

/// Delimiters around the reasoning segment of a completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinkMarkers {
    pub open: String,
    pub close: String,
}

impl Default for ThinkMarkers {
    fn default() -> Self {
        Self {
            open: "<think>".to_string(),
            close: "</think>".to_string(),
        }
    }
}

/// A model completion split into its reasoning and answer segments.
///
/// Both segments are stored as byte ranges into `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub text: String,
    think: Option<Range<usize>>,
    answer: Range<usize>,
}

impl RawCompletion {
    pub fn new(text: impl Into<String>) -> Self {
        Self::with_markers(text, &ThinkMarkers::default())
    }

    pub fn with_markers(text: impl Into<String>, markers: &ThinkMarkers) -> Self {
        let text = text.into();
        let full = 0..text.len();

        let open = if markers.open.is_empty() {
            None
        } else {
            text.find(&markers.open)
        };
        let search_from = open.map_or(0, |i| i + markers.open.len());
        let close = if markers.close.is_empty() {
            None
        } else {
            text[search_from..]
                .find(&markers.close)
                .map(|i| i + search_from)
        };

        let (think, answer) = match close {
            Some(close) => {
                let think_start = open.map_or(0, |i| i + markers.open.len());
                let answer_start = close + markers.close.len();
                if text[answer_start..].trim().is_empty() {
                    // Nothing after the reasoning: treat the whole output as the answer.
                    (None, full)
                } else {
                    (Some(think_start..close), answer_start..text.len())
                }
            }
            None => (None, full),
        };

        Self {
            text,
            think,
            answer,
        }
    }

    pub fn think_segment(&self) -> Option<&str> {
        self.think.as_ref().map(|r| &self.text[r.clone()])
    }

    pub fn answer_segment(&self) -> &str {
        &self.text[self.answer.clone()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Integer,
    Rational,
    Decimal,
    Symbolic,
}

/// A normalized answer string together with the raw text it came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalAnswer {
    pub raw: String,
    pub canonical: String,
    pub kind: AnswerKind,
}

impl CanonicalAnswer {
    /// Normalizes a bare answer string such as a dataset gold label.
    ///
    /// A string containing `\boxed{...}` is unwrapped first.
    pub fn parse(raw: &str) -> Self {
        let inner = last_boxed(raw).unwrap_or(raw);
        let (canonical, kind) = normalize_with_kind(inner);
        Self {
            raw: inner.to_string(),
            canonical,
            kind,
        }
    }

    /// Placeholder for a reasoning path that produced no output.
    pub fn missing() -> Self {
        Self {
            raw: String::new(),
            canonical: String::new(),
            kind: AnswerKind::Symbolic,
        }
    }

    pub fn is_missing(&self) -> bool {
        self.canonical.is_empty()
    }

    pub fn as_str(&self) -> &str {
        &self.canonical
    }
}

/// Extracts the committed answer from a completion.
pub fn extract_answer(completion: &RawCompletion) -> Result<CanonicalAnswer, AnswerError> {
    if completion.text.is_empty() {
        return Err(AnswerError::EmptyCompletion);
    }
    let segment = completion.answer_segment();
    if let Some(boxed) = last_boxed(segment) {
        let (canonical, kind) = normalize_with_kind(boxed);
        return Ok(CanonicalAnswer {
            raw: boxed.to_string(),
            canonical,
            kind,
        });
    }

    let line = segment
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    Ok(CanonicalAnswer {
        raw: line.to_string(),
        canonical: normalize(line),
        kind: AnswerKind::Symbolic,
    })
}

/// Contents of the last `\boxed{...}` whose braces balance.
fn last_boxed(text: &str) -> Option<&str> {
    let mut found = None;
    let mut from = 0;
    while let Some(pos) = text[from..].find(BOXED_MARKER) {
        let start = from + pos + BOXED_MARKER.len();
        if let Some(end) = matching_brace(text, start) {
            found = Some(&text[start..end]);
        }
        from = start;
    }
    found
}

/// Index of the `}` closing a group that opened just before `start`.
fn matching_brace(text: &str, start: usize) -> Option<usize> {
    let mut depth = 1usize;
    for (i, b) in text.bytes().enumerate().skip(start) {
        match b {
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Canonical form of an answer string. Idempotent.
pub fn normalize(raw: &str) -> String {
    normalize_with_kind(raw).0
}

fn normalize_with_kind(raw: &str) -> (String, AnswerKind) {
    let mut current = raw.to_string();
    // Every rewrite shrinks or preserves the string, so this settles quickly.
    for _ in 0..16 {
        let next = normalize_once(&current);
        if next == current {
            break;
        }
        current = next;
    }
    let kind = classify_kind(&current);
    (current, kind)
}

fn normalize_once(raw: &str) -> String {
    let mut s: String = raw.chars().filter(|c| !c.is_whitespace()).collect();

    for (from, to) in [
        ("\\left", ""),
        ("\\right", ""),
        ("\\displaystyle", ""),
        ("\\!", ""),
        ("\\,", ""),
        ("\\;", ""),
        ("\\dfrac", "\\frac"),
        ("\\tfrac", "\\frac"),
        ("^{\\circ}", ""),
        ("^\\circ", ""),
        ("\\%", ""),
        ("\\$", ""),
    ] {
        s = s.replace(from, to);
    }
    s = s.trim_matches('$').to_string();
    if let Some(stripped) = s.strip_suffix('%') {
        s = stripped.to_string();
    }
    for wrapper in ["\\text{", "\\mathrm{", "\\textbf{", "\\mathbf{"] {
        s = unwrap_command(&s, wrapper);
    }
    s = strip_outer_braces(&s);
    s = rewrite_simple_frac(&s);
    if is_grouped_thousands(&s) {
        s.retain(|c| c != ',');
    }

    if is_signed_int(&s) || s.contains('/') {
        if let Some(r) = parse_rational(&s) {
            return r.to_canonical();
        }
    }
    if let Some(d) = normalize_decimal(&s) {
        return d;
    }
    s
}

/// Replaces `\cmd{x}` with `x` everywhere.
fn unwrap_command(s: &str, command: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find(command) {
        let start = pos + command.len();
        match matching_brace(rest, start) {
            Some(end) => {
                out.push_str(&rest[..pos]);
                out.push_str(&rest[start..end]);
                rest = &rest[end + 1..];
            }
            None => break,
        }
    }
    out.push_str(rest);
    out
}

fn strip_outer_braces(s: &str) -> String {
    let mut s = s;
    while s.starts_with('{') && matching_brace(s, 1) == Some(s.len() - 1) {
        s = &s[1..s.len() - 1];
    }
    s.to_string()
}

/// `\frac{a}{b}` (optionally signed) with integer parts becomes `a/b`.
fn rewrite_simple_frac(s: &str) -> String {
    let (sign, body) = match s.strip_prefix('-') {
        Some(b) => ("-", b),
        None => ("", s),
    };
    let Some(after) = body.strip_prefix("\\frac{") else {
        return s.to_string();
    };
    let Some(num_end) = matching_brace(after, 0) else {
        return s.to_string();
    };
    let num = &after[..num_end];
    let Some(den_part) = after[num_end + 1..].strip_prefix('{') else {
        return s.to_string();
    };
    let Some(den_end) = matching_brace(den_part, 0) else {
        return s.to_string();
    };
    if den_end + 1 != den_part.len() {
        return s.to_string();
    }
    let den = &den_part[..den_end];
    if is_signed_int(num) && is_signed_int(den) {
        format!("{sign}{num}/{den}")
    } else {
        s.to_string()
    }
}

fn is_signed_int(s: &str) -> bool {
    let digits = s.strip_prefix(['+', '-']).unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

fn is_grouped_thousands(s: &str) -> bool {
    let digits = s.strip_prefix('-').unwrap_or(s);
    let mut groups = digits.split(',');
    let Some(first) = groups.next() else {
        return false;
    };
    let rest: Vec<&str> = groups.collect();
    !rest.is_empty()
        && (1..=3).contains(&first.len())
        && first.bytes().all(|b| b.is_ascii_digit())
        && rest
            .iter()
            .all(|g| g.len() == 3 && g.bytes().all(|b| b.is_ascii_digit()))
}

/// Strips redundant zeros from a plain decimal literal. Integral values
/// collapse to integer form.
fn normalize_decimal(s: &str) -> Option<String> {
    let (negative, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (int_part, frac_part) = body.split_once('.')?;
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    let int_part = int_part.trim_start_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let frac_part = frac_part.trim_end_matches('0');
    let magnitude = if frac_part.is_empty() {
        int_part.to_string()
    } else {
        format!("{int_part}.{frac_part}")
    };
    let is_zero = magnitude == "0";
    Some(if negative && !is_zero {
        format!("-{magnitude}")
    } else {
        magnitude
    })
}

fn classify_kind(canonical: &str) -> AnswerKind {
    if is_signed_int(canonical) {
        AnswerKind::Integer
    } else if canonical.contains('/') && parse_rational(canonical).is_some() {
        AnswerKind::Rational
    } else if normalize_decimal(canonical).is_some() {
        AnswerKind::Decimal
    } else {
        AnswerKind::Symbolic
    }
}

/// Exact rational in lowest terms with a positive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rational {
    num: i128,
    den: i128,
}

impl Rational {
    fn new(num: i128, den: i128) -> Option<Self> {
        if den == 0 {
            return None;
        }
        let g = gcd(num.unsigned_abs(), den.unsigned_abs()).max(1) as i128;
        let (mut num, mut den) = (num / g, den / g);
        if den < 0 {
            num = num.checked_neg()?;
            den = den.checked_neg()?;
        }
        Some(Self { num, den })
    }

    fn to_canonical(self) -> String {
        if self.den == 1 {
            self.num.to_string()
        } else {
            format!("{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Parses `p`, `p/q` or a plain decimal as an exact rational.
fn parse_rational(s: &str) -> Option<Rational> {
    if let Some((n, d)) = s.split_once('/') {
        if !is_signed_int(n) || !is_signed_int(d) {
            return None;
        }
        return Rational::new(n.parse().ok()?, d.parse().ok()?);
    }
    if is_signed_int(s) {
        return Rational::new(s.parse().ok()?, 1);
    }
    let dec = normalize_decimal(s)?;
    let (negative, body) = match dec.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, dec.as_str()),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    let scale = 10i128.checked_pow(u32::try_from(frac_part.len()).ok()?)?;
    let digits: i128 = format!("{int_part}{frac_part}").parse().ok()?;
    Rational::new(if negative { -digits } else { digits }, scale)
}

fn parse_float(s: &str) -> Option<f64> {
    if let Some((n, d)) = s.split_once('/') {
        if !is_signed_int(n) || !is_signed_int(d) {
            return None;
        }
        let (n, d): (f64, f64) = (n.parse().ok()?, d.parse().ok()?);
        return (d != 0.0).then(|| n / d);
    }
    if is_signed_int(s) || normalize_decimal(s).is_some() {
        return s.parse().ok();
    }
    None
}

/// `|x - y| <= 1e-9` in exact arithmetic; `None` on overflow.
fn within_tolerance(x: Rational, y: Rational) -> Option<bool> {
    let diff = x.num.checked_mul(y.den)?.checked_sub(y.num.checked_mul(x.den)?)?;
    let lhs = diff.unsigned_abs().checked_mul(1_000_000_000)?;
    let rhs = x.den.checked_mul(y.den)?.unsigned_abs();
    Some(lhs <= rhs)
}

/// Whether two answers denote the same value.
pub fn is_equivalent(a: &CanonicalAnswer, b: &CanonicalAnswer) -> bool {
    equivalent_str(&a.canonical, &b.canonical)
}

fn equivalent_str(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    let decimal = a.contains('.') || b.contains('.');
    if let (Some(x), Some(y)) = (parse_rational(a), parse_rational(b)) {
        if x == y {
            return true;
        }
        if !decimal {
            return false;
        }
        if let Some(close) = within_tolerance(x, y) {
            return close;
        }
    }
    if !decimal {
        return false;
    }
    match (parse_float(a), parse_float(b)) {
        (Some(x), Some(y)) => (x - y).abs() <= DECIMAL_TOLERANCE,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteClass {
    pub representative: CanonicalAnswer,
    pub members: Vec<usize>,
}

/// Answers grouped into equivalence classes, ordered by first occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteClasses {
    pub classes: Vec<VoteClass>,
}

impl VoteClasses {
    /// Largest class. Ties go to the class that appeared first. Classes of
    /// missing answers only win when nothing else was answered.
    pub fn majority(&self) -> Option<&VoteClass> {
        let mut best: Option<&VoteClass> = None;
        for class in &self.classes {
            let better = match best {
                None => true,
                Some(b) if b.representative.is_missing() => !class.representative.is_missing(),
                Some(b) => {
                    !class.representative.is_missing() && class.members.len() > b.members.len()
                }
            };
            if better {
                best = Some(class);
            }
        }
        best
    }

    /// Whether the largest class is strictly larger than every other class.
    pub fn has_unique_majority(&self) -> bool {
        let Some(top) = self.majority() else {
            return false;
        };
        self.classes
            .iter()
            .filter(|c| !std::ptr::eq(*c, top))
            .all(|c| c.members.len() < top.members.len())
    }
}

/// Greedy first-fit grouping of answers into vote classes.
pub fn classify_votes(answers: &[CanonicalAnswer]) -> Result<VoteClasses, AnswerError> {
    if answers.is_empty() {
        return Err(AnswerError::EmptyAnswerSet);
    }
    let mut classes: Vec<VoteClass> = Vec::new();
    for (i, answer) in answers.iter().enumerate() {
        match classes
            .iter_mut()
            .find(|c| is_equivalent(answer, &c.representative))
        {
            Some(class) => class.members.push(i),
            None => classes.push(VoteClass {
                representative: answer.clone(),
                members: vec![i],
            }),
        }
    }
    Ok(VoteClasses { classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ans(s: &str) -> CanonicalAnswer {
        CanonicalAnswer::parse(s)
    }

    #[test]
    fn extracts_boxed_integer() {
        let c = RawCompletion::new("… the answer is \\boxed{42}.");
        let a = extract_answer(&c).unwrap();
        assert_eq!(a.canonical, "42");
        assert_eq!(a.kind, AnswerKind::Integer);
    }

    #[test]
    fn last_boxed_wins() {
        let c = RawCompletion::new("\\boxed{1/2} … later \\boxed{3/4}");
        assert_eq!(extract_answer(&c).unwrap().canonical, "3/4");
    }

    #[test]
    fn decimal_trailing_zeros() {
        let a = extract_answer(&RawCompletion::new("final: \\boxed{0.50}")).unwrap();
        assert_eq!(a.canonical, "0.5");
        assert_eq!(a.kind, AnswerKind::Decimal);
    }

    #[test]
    fn nested_braces_and_unbalanced_tail() {
        let c = RawCompletion::new("\\boxed{\\frac{1}{2}} then \\boxed{oops");
        assert_eq!(extract_answer(&c).unwrap().canonical, "1/2");
    }

    #[test]
    fn no_boxed_uses_last_line() {
        let c = RawCompletion::new("work\n\nso it is 12\n\n");
        let a = extract_answer(&c).unwrap();
        assert_eq!(a.canonical, "soitis12");
        assert_eq!(a.kind, AnswerKind::Symbolic);

        let c = RawCompletion::new("steps\n17");
        let a = extract_answer(&c).unwrap();
        assert_eq!(a.canonical, "17");
        assert_eq!(a.kind, AnswerKind::Symbolic);
    }

    #[test]
    fn empty_completion_errors() {
        assert_eq!(
            extract_answer(&RawCompletion::new("")),
            Err(AnswerError::EmptyCompletion)
        );
    }

    #[test]
    fn segments_after_think_close() {
        let c = RawCompletion::new("reason…</think> Thus \\boxed{9}");
        assert_eq!(c.think_segment(), Some("reason…"));
        assert_eq!(c.answer_segment(), " Thus \\boxed{9}");

        let c = RawCompletion::new("<think>a</think>b");
        assert_eq!(c.think_segment(), Some("a"));
        assert_eq!(c.answer_segment(), "b");

        let c = RawCompletion::new("<think>still thinking");
        assert_eq!(c.think_segment(), None);
        assert_eq!(c.answer_segment(), "<think>still thinking");

        let c = RawCompletion::new("<think>only \\boxed{3}</think>  ");
        assert_eq!(c.answer_segment(), c.text);
    }

    #[test]
    fn boxed_inside_think_is_ignored_when_answer_exists() {
        let c = RawCompletion::new("<think>\\boxed{1}</think> final \\boxed{2}");
        assert_eq!(extract_answer(&c).unwrap().canonical, "2");
    }

    #[test]
    fn custom_markers() {
        let m = ThinkMarkers {
            open: "[[".into(),
            close: "]]".into(),
        };
        let c = RawCompletion::with_markers("[[x]]\\boxed{5}", &m);
        assert_eq!(c.think_segment(), Some("x"));
        assert_eq!(c.answer_segment(), "\\boxed{5}");
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize(" { 42 } "), "42");
        assert_eq!(normalize("007"), "7");
        assert_eq!(normalize("-0"), "0");
        assert_eq!(normalize("+5"), "5");
        assert_eq!(normalize("2/4"), "1/2");
        assert_eq!(normalize("6/3"), "2");
        assert_eq!(normalize("1/-2"), "-1/2");
        assert_eq!(normalize("\\dfrac{3}{6}"), "1/2");
        assert_eq!(normalize("-\\frac{3}{6}"), "-1/2");
        assert_eq!(normalize(".500"), "0.5");
        assert_eq!(normalize("2.000"), "2");
        assert_eq!(normalize("-0.0"), "0");
        assert_eq!(normalize("1,000"), "1000");
        assert_eq!(normalize("1,2"), "1,2");
        assert_eq!(normalize("$45^\\circ$"), "45");
        assert_eq!(normalize("\\text{ yes }"), "yes");
        assert_eq!(normalize("\\sqrt{2}"), "\\sqrt{2}");
        assert_eq!(normalize("2/0"), "2/0");
    }

    #[test]
    fn equivalence_examples() {
        assert!(is_equivalent(&ans("42"), &ans("42")));
        assert!(is_equivalent(&ans("1/2"), &ans("0.5")));
        assert!(is_equivalent(&ans("0.50"), &ans("0.5")));
        assert!(!is_equivalent(&ans("7"), &ans("8")));
        assert!(!is_equivalent(&ans("2^3"), &ans("8")));
        assert!(is_equivalent(&ans("1/3"), &ans("0.3333333333333")));
        assert!(!is_equivalent(&ans("1/3"), &ans("0.333")));
    }

    #[test]
    fn vote_class_examples() {
        let v = classify_votes(&[ans("3"), ans("3"), ans("5")]).unwrap();
        assert_eq!(v.classes.len(), 2);
        assert_eq!(v.classes[0].representative.canonical, "3");
        assert_eq!(v.classes[0].members, vec![0, 1]);
        assert_eq!(v.classes[1].members, vec![2]);

        let v = classify_votes(&[ans("1/2"), ans("0.5"), ans("2")]).unwrap();
        assert_eq!(v.classes[0].representative.canonical, "1/2");
        assert_eq!(v.classes[0].members, vec![0, 1]);
        assert_eq!(v.classes[1].members, vec![2]);

        let v = classify_votes(&[ans("x")]).unwrap();
        assert_eq!(v.classes.len(), 1);
        assert_eq!(v.classes[0].members, vec![0]);

        assert_eq!(classify_votes(&[]), Err(AnswerError::EmptyAnswerSet));
    }

    #[test]
    fn majority_tie_breaks_on_first_class() {
        let v = classify_votes(&[ans("5"), ans("3"), ans("5"), ans("3")]).unwrap();
        assert_eq!(v.majority().unwrap().representative.canonical, "5");
        assert!(!v.has_unique_majority());

        let v = classify_votes(&[
            CanonicalAnswer::missing(),
            CanonicalAnswer::missing(),
            ans("4"),
        ])
        .unwrap();
        assert_eq!(v.majority().unwrap().representative.canonical, "4");
    }
}
