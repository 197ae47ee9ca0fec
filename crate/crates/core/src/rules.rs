//! Regex rules that propose NSW candidate spans.
//!
//! Rules only locate candidates; they never assign categories. A rule file
//! has one `name<TAB>pattern` per line, with `#` comments and blank lines
//! skipped.

use std::collections::HashSet;
use std::path::Path;

use regex::Regex;
use thiserror::Error;

use crate::lattice::{Token, TokenKind};

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule file line {line}: expected `name<TAB>pattern`")]
    Malformed { line: usize },
    #[error("rule file line {line}: rule {name:?} does not compile: {source}")]
    Pattern {
        line: usize,
        name: String,
        #[source]
        source: Box<regex::Error>,
    },
    #[error("rule file line {line}: duplicate rule name {name:?}")]
    Duplicate { line: usize, name: String },
    #[error("failed to read rule file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct Rule {
    name: String,
    pattern: Regex,
}

impl Rule {
    pub fn new(name: &str, pattern: &str) -> Result<Self, RuleError> {
        let pattern = Regex::new(pattern).map_err(|e| RuleError::Pattern {
            line: 0,
            name: name.to_string(),
            source: Box::new(e),
        })?;
        Ok(Rule {
            name: name.to_string(),
            pattern,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pattern(&self) -> &str {
        self.pattern.as_str()
    }

    /// True when the whole of `text` is one match of this rule.
    pub fn matches_whole(&self, text: &str) -> bool {
        self.pattern
            .find_iter(text)
            .any(|m| m.start() == 0 && m.end() == text.len())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rules(rules: Vec<Rule>) -> Result<Self, RuleError> {
        let mut seen = HashSet::new();
        for (i, r) in rules.iter().enumerate() {
            if !seen.insert(r.name.clone()) {
                return Err(RuleError::Duplicate {
                    line: i + 1,
                    name: r.name.clone(),
                });
            }
        }
        Ok(RuleSet { rules })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Renders the set in the `name<TAB>pattern` format read by [`compile_rules`].
    pub fn to_source(&self) -> String {
        self.rules
            .iter()
            .map(|r| format!("{}\t{}\n", r.name(), r.pattern()))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RuleError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RuleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        compile_rules(&text)
    }

    /// Starter inventory covering the surface shapes of the NSW categories.
    pub fn builtin() -> Self {
        compile_rules(include_str!("../data/rules.tsv")).expect("builtin rules compile")
    }
}

pub fn compile_rules(source: &str) -> Result<RuleSet, RuleError> {
    let mut rules = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in source.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, pattern) = line
            .split_once('\t')
            .ok_or(RuleError::Malformed { line: line_no })?;
        if name.is_empty() || pattern.is_empty() {
            return Err(RuleError::Malformed { line: line_no });
        }
        let rule = Rule::new(name, pattern).map_err(|e| match e {
            RuleError::Pattern { name, source, .. } => RuleError::Pattern {
                line: line_no,
                name,
                source,
            },
            other => other,
        })?;
        if !seen.insert(name.to_string()) {
            return Err(RuleError::Duplicate {
                line: line_no,
                name: name.to_string(),
            });
        }
        rules.push(rule);
    }
    Ok(RuleSet { rules })
}

/// Leftmost non-overlapping matches of each rule, in rule order. Matches of
/// different rules may overlap. Empty matches are skipped.
pub fn match_rules(sentence: &str, rules: &RuleSet) -> Vec<Token> {
    // byte offset -> char index, with one extra entry for the end
    let mut char_at = vec![0usize; sentence.len() + 1];
    let mut count = 0;
    for (b, _) in sentence.char_indices() {
        char_at[b] = count;
        count += 1;
    }
    char_at[sentence.len()] = count;

    let mut out = Vec::new();
    for rule in &rules.rules {
        for m in rule.pattern.find_iter(sentence) {
            if m.is_empty() {
                continue;
            }
            out.push(Token::new(
                m.as_str(),
                char_at[m.start()],
                char_at[m.end()] - 1,
                TokenKind::NswCandidate {
                    rule: rule.name.clone(),
                },
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triples(tokens: &[Token]) -> Vec<(String, usize, usize, String)> {
        tokens
            .iter()
            .map(|t| {
                let rule = match &t.kind {
                    TokenKind::NswCandidate { rule } => rule.clone(),
                    _ => unreachable!(),
                };
                (t.text.clone(), t.head, t.tail, rule)
            })
            .collect()
    }

    #[test]
    fn single_rule_compiles() {
        assert_eq!(compile_rules("NUM\t[0-9]+").unwrap().len(), 1);
    }

    #[test]
    fn source_round_trip() {
        let rs = RuleSet::builtin();
        let again = compile_rules(&rs.to_source()).unwrap();
        assert_eq!(again.to_source(), rs.to_source());
        assert_eq!(again.len(), rs.len());
    }

    #[test]
    fn comments_blank_lines_and_crlf() {
        let rs = compile_rules("# rules\n\nNUM\t[0-9]+\r\nENG\t[A-Za-z]+\n").unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(rs.rules()[0].pattern(), "[0-9]+");
    }

    #[test]
    fn bad_pattern_reports_line_and_name() {
        let err = compile_rules("NUM\t[0-9+").unwrap_err();
        match &err {
            RuleError::Pattern { line, name, .. } => {
                assert_eq!(*line, 1);
                assert_eq!(name, "NUM");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_name_rejected() {
        let err = compile_rules("NUM\t[0-9]+\nNUM\t[0-9]").unwrap_err();
        assert!(matches!(err, RuleError::Duplicate { line: 2, .. }));
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(
            compile_rules("NUM [0-9]+"),
            Err(RuleError::Malformed { line: 1 })
        ));
        assert!(matches!(
            compile_rules("# c\n\t[0-9]+"),
            Err(RuleError::Malformed { line: 2 })
        ));
    }

    #[test]
    fn character_indices_not_bytes() {
        let rs = compile_rules("NUM\t[0-9]+").unwrap();
        assert_eq!(
            triples(&match_rules("共2021年", &rs)),
            vec![("2021".into(), 1, 4, "NUM".into())]
        );
        assert!(match_rules("你好", &rs).is_empty());
    }

    #[test]
    fn cross_rule_overlap_retained() {
        let rs = compile_rules("NUM\t[0-9]+\nDEC\t[0-9]+\\.[0-9]+").unwrap();
        assert_eq!(
            triples(&match_rules("3.14和911", &rs)),
            vec![
                ("3".into(), 0, 0, "NUM".into()),
                ("14".into(), 2, 3, "NUM".into()),
                ("911".into(), 5, 7, "NUM".into()),
                ("3.14".into(), 0, 3, "DEC".into()),
            ]
        );
    }

    #[test]
    fn empty_matches_skipped() {
        let rs = compile_rules("OPT\t[0-9]*").unwrap();
        assert_eq!(
            triples(&match_rules("a12b", &rs)),
            vec![("12".into(), 1, 2, "OPT".into())]
        );
    }

    #[test]
    fn builtin_rules_compile() {
        assert!(RuleSet::builtin().len() >= 10);
    }

    proptest! {
        #[test]
        fn reordering_rules_preserves_matches(s in "[0-9a-z./:年-]{0,30}") {
            let a = compile_rules("NUM\t[0-9]+\nDEC\t[0-9]+\\.[0-9]+\nENG\t[a-z]+").unwrap();
            let b = compile_rules("ENG\t[a-z]+\nDEC\t[0-9]+\\.[0-9]+\nNUM\t[0-9]+").unwrap();
            let mut x = triples(&match_rules(&s, &a));
            let mut y = triples(&match_rules(&s, &b));
            x.sort();
            y.sort();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn matches_rematch_their_rule(s in "[0-9a-z./:年-]{0,30}") {
            let rs = RuleSet::builtin();
            for t in match_rules(&s, &rs) {
                let TokenKind::NswCandidate { rule } = &t.kind else { unreachable!() };
                let r = rs.rules().iter().find(|r| r.name() == rule).unwrap();
                prop_assert!(r.pattern.is_match(&t.text));
            }
        }

        #[test]
        fn literal_rule_counts_like_substring_scan(s in "[ab年]{0,40}") {
            let rs = compile_rules("LIT\tab年").unwrap();
            let naive = s.matches("ab年").count();
            prop_assert_eq!(match_rules(&s, &rs).len(), naive);
        }
    }
}
