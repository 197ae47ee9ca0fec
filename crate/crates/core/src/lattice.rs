//! Flat lattice construction.
//!
//! A lattice holds one token per sentence character, followed by every
//! multi-character span proposed by the lexicon or by the NSW rules. Each
//! token records the inclusive character range (`head..=tail`) it covers.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LatticeError {
    #[error("span {text:?} ({head}, {tail}) is out of bounds for a sentence of {len} characters")]
    OutOfBounds {
        text: String,
        head: usize,
        tail: usize,
        len: usize,
    },
    #[error("span ({head}, {tail}) has text {text:?} but the sentence slice is {expected:?}")]
    TextMismatch {
        text: String,
        expected: String,
        head: usize,
        tail: usize,
    },
    #[error(
        "span {text:?} ({head}, {tail}) has kind Character; character tokens are built implicitly"
    )]
    CharacterSpan {
        text: String,
        head: usize,
        tail: usize,
    },
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon line {line}: word {word:?} is shorter than two characters")]
    TooShort { line: usize, word: String },
    #[error("failed to read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Provenance of a lattice token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenKind {
    Character,
    LexiconWord,
    NswCandidate { rule: String },
}

impl TokenKind {
    fn rank(&self) -> u8 {
        match self {
            TokenKind::Character => 0,
            TokenKind::LexiconWord => 1,
            TokenKind::NswCandidate { .. } => 2,
        }
    }

    pub fn label(&self) -> String {
        match self {
            TokenKind::Character => "char".to_string(),
            TokenKind::LexiconWord => "word".to_string(),
            TokenKind::NswCandidate { rule } => format!("nsw:{rule}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    pub head: usize,
    pub tail: usize,
    pub kind: TokenKind,
}

impl Token {
    pub fn new(text: impl Into<String>, head: usize, tail: usize, kind: TokenKind) -> Self {
        Token {
            text: text.into(),
            head,
            tail,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.tail - self.head + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn sort_key(&self) -> (usize, usize, u8, &str) {
        let rule = match &self.kind {
            TokenKind::NswCandidate { rule } => rule.as_str(),
            _ => "",
        };
        (self.head, self.tail, self.kind.rank(), rule)
    }

    /// Checks the token against the sentence it claims to cover.
    pub fn validate(&self, chars: &[char]) -> Result<(), LatticeError> {
        if self.head > self.tail || self.tail >= chars.len() {
            return Err(LatticeError::OutOfBounds {
                text: self.text.clone(),
                head: self.head,
                tail: self.tail,
                len: chars.len(),
            });
        }
        let expected: String = chars[self.head..=self.tail].iter().collect();
        if expected != self.text {
            return Err(LatticeError::TextMismatch {
                text: self.text.clone(),
                expected,
                head: self.head,
                tail: self.tail,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({},{})", self.text, self.head, self.tail)
    }
}

/// Character tokens in sentence order, then span tokens sorted by
/// `(head, tail, kind)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatLattice {
    sentence: String,
    chars: Vec<char>,
    tokens: Vec<Token>,
}

impl FlatLattice {
    pub fn sentence(&self) -> &str {
        &self.sentence
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn char_count(&self) -> usize {
        self.chars.len()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Total token count, L'.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn span_tokens(&self) -> &[Token] {
        &self.tokens[self.chars.len()..]
    }

    pub fn heads(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    pub fn tails(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.tail).collect()
    }
}

impl fmt::Display for FlatLattice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(
                f,
                "{i:>4}  {:<12} head={:<3} tail={:<3} {}",
                t.text,
                t.head,
                t.tail,
                t.kind.label()
            )?;
        }
        Ok(())
    }
}

/// Builds the canonical lattice. Duplicate spans within one kind are
/// dropped; the same range matched by both channels yields two tokens.
pub fn build_lattice(
    sentence: &str,
    word_spans: &[Token],
    nsw_spans: &[Token],
) -> Result<FlatLattice, LatticeError> {
    let chars: Vec<char> = sentence.chars().collect();
    let mut spans = BTreeSet::new();
    for span in word_spans.iter().chain(nsw_spans) {
        span.validate(&chars)?;
        if span.kind == TokenKind::Character {
            return Err(LatticeError::CharacterSpan {
                text: span.text.clone(),
                head: span.head,
                tail: span.tail,
            });
        }
        spans.insert(SortedToken(span.clone()));
    }

    let mut tokens: Vec<Token> = chars
        .iter()
        .enumerate()
        .map(|(i, c)| Token::new(c.to_string(), i, i, TokenKind::Character))
        .collect();
    tokens.extend(spans.into_iter().map(|s| s.0));
    Ok(FlatLattice {
        sentence: sentence.to_string(),
        chars,
        tokens,
    })
}

#[derive(PartialEq, Eq)]
struct SortedToken(Token);

impl Ord for SortedToken {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.sort_key().cmp(&other.0.sort_key())
    }
}

impl PartialOrd for SortedToken {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default, Clone)]
struct TrieNode {
    children: HashMap<char, usize>,
    terminal: bool,
}

/// Word list stored as a prefix tree for all-substring matching.
#[derive(Debug, Clone)]
pub struct Lexicon {
    nodes: Vec<TrieNode>,
    len: usize,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon {
            nodes: vec![TrieNode::default()],
            len: 0,
        }
    }
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a word. Returns false if the word was already present.
    ///
    /// Words shorter than two characters are rejected: single characters
    /// are always lattice nodes already.
    pub fn insert(&mut self, word: &str) -> Result<bool, LexiconError> {
        if word.chars().count() < 2 {
            return Err(LexiconError::TooShort {
                line: 0,
                word: word.to_string(),
            });
        }
        let mut node = 0;
        for c in word.chars() {
            node = match self.nodes[node].children.get(&c) {
                Some(&next) => next,
                None => {
                    self.nodes.push(TrieNode::default());
                    let next = self.nodes.len() - 1;
                    self.nodes[node].children.insert(c, next);
                    next
                }
            };
        }
        let fresh = !self.nodes[node].terminal;
        self.nodes[node].terminal = true;
        if fresh {
            self.len += 1;
        }
        Ok(fresh)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// All words in lexicographic order.
    pub fn words(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len);
        let mut stack = vec![(0usize, String::new())];
        while let Some((node, prefix)) = stack.pop() {
            if self.nodes[node].terminal {
                out.push(prefix.clone());
            }
            for (c, &next) in &self.nodes[node].children {
                let mut w = prefix.clone();
                w.push(*c);
                stack.push((next, w));
            }
        }
        out.sort();
        out
    }

    pub fn contains(&self, word: &str) -> bool {
        let mut node = 0;
        for c in word.chars() {
            match self.nodes[node].children.get(&c) {
                Some(&next) => node = next,
                None => return false,
            }
        }
        self.nodes[node].terminal
    }

    /// Parses the plain-text format: one word per line, `#` comments and
    /// blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lexicon = Lexicon::new();
        for (i, line) in text.lines().enumerate() {
            let word = line.trim();
            if word.is_empty() || word.starts_with('#') {
                continue;
            }
            lexicon.insert(word).map_err(|_| LexiconError::TooShort {
                line: i + 1,
                word: word.to_string(),
            })?;
        }
        Ok(lexicon)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn builtin() -> Self {
        Self::parse(include_str!("../data/lexicon.txt")).expect("builtin lexicon is valid")
    }
}

impl<S: AsRef<str>> FromIterator<S> for Lexicon {
    /// Collects words, silently skipping entries shorter than two characters.
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut lexicon = Lexicon::new();
        for w in iter {
            let _ = lexicon.insert(w.as_ref());
        }
        lexicon
    }
}

/// Every `(head, tail)` whose substring is a lexicon word, ordered by head
/// then tail. Overlapping and nested matches are all returned.
pub fn match_lexicon(sentence: &str, lexicon: &Lexicon) -> Vec<Token> {
    let chars: Vec<char> = sentence.chars().collect();
    let mut out = Vec::new();
    for head in 0..chars.len() {
        let mut node = 0;
        for (tail, c) in chars.iter().enumerate().skip(head) {
            match lexicon.nodes[node].children.get(c) {
                Some(&next) => node = next,
                None => break,
            }
            if lexicon.nodes[node].terminal {
                let text: String = chars[head..=tail].iter().collect();
                out.push(Token::new(text, head, tail, TokenKind::LexiconWord));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(sentence: &str, words: &[String]) -> Vec<(usize, usize)> {
        let chars: Vec<char> = sentence.chars().collect();
        let mut out = Vec::new();
        for h in 0..chars.len() {
            for t in h..chars.len() {
                let s: String = chars[h..=t].iter().collect();
                if s.chars().count() >= 2 && words.iter().any(|w| *w == s) {
                    out.push((h, t));
                }
            }
        }
        out
    }

    fn spans(tokens: &[Token]) -> Vec<(usize, usize)> {
        tokens.iter().map(|t| (t.head, t.tail)).collect()
    }

    #[test]
    fn repeated_word_matches_twice() {
        let lex: Lexicon = ["学习"].into_iter().collect();
        let m = match_lexicon("学习学习", &lex);
        assert_eq!(spans(&m), brute_force("学习学习", &["学习".into()]));
        assert_eq!(spans(&m), vec![(0, 1), (2, 3)]);
        assert!(m.iter().all(|t| t.text == "学习"));
    }

    #[test]
    fn empty_lexicon_matches_nothing() {
        assert!(match_lexicon("学习", &Lexicon::new()).is_empty());
    }

    #[test]
    fn only_present_words_match() {
        let lex: Lexicon = ["学习", "习学"].into_iter().collect();
        let m = match_lexicon("学习", &lex);
        assert_eq!(
            spans(&m),
            brute_force("学习", &["学习".into(), "习学".into()])
        );
        assert_eq!(m, vec![Token::new("学习", 0, 1, TokenKind::LexiconWord)]);
    }

    #[test]
    fn words_are_sorted_and_complete() {
        let lex: Lexicon = ["年代", "光年", "二光年", "光年"].into_iter().collect();
        assert_eq!(lex.words(), vec!["二光年", "光年", "年代"]);
        let again: Lexicon = lex.words().into_iter().collect();
        assert_eq!(again.words(), lex.words());
    }

    #[test]
    fn nested_matches_are_kept() {
        let lex: Lexicon = ["光年", "二光年", "年代"].into_iter().collect();
        let m = match_lexicon("二光年代", &lex);
        assert_eq!(spans(&m), vec![(0, 2), (1, 2), (2, 3)]);
    }

    #[test]
    fn lexicon_file_format() {
        let lex = Lexicon::parse("# comment\n\n学习\n光年\r\n学习\n").unwrap();
        assert_eq!(lex.len(), 2);
        assert!(lex.contains("光年"));
        let err = Lexicon::parse("学习\n年\n").unwrap_err();
        assert!(matches!(err, LexiconError::TooShort { line: 2, .. }));
    }

    #[test]
    fn figure_two_lattice() {
        let word = Token::new("学习", 0, 1, TokenKind::LexiconWord);
        let lat = build_lattice("学习", &[word], &[]).unwrap();
        let got: Vec<(String, usize, usize)> = lat
            .tokens()
            .iter()
            .map(|t| (t.text.clone(), t.head, t.tail))
            .collect();
        assert_eq!(
            got,
            vec![
                ("学".to_string(), 0, 0),
                ("习".to_string(), 1, 1),
                ("学习".to_string(), 0, 1)
            ]
        );
        assert_eq!(lat.len(), 3);
    }

    #[test]
    fn minimal_sentence() {
        let lat = build_lattice("a", &[], &[]).unwrap();
        assert_eq!(lat.len(), 1);
        assert_eq!(lat.tokens()[0].kind, TokenKind::Character);
    }

    #[test]
    fn nsw_span_count() {
        let nsw = Token::new("2021", 0, 3, TokenKind::NswCandidate { rule: "NUM".into() });
        let lat = build_lattice("2021年", &[], &[nsw]).unwrap();
        assert_eq!(lat.char_count(), 5);
        assert_eq!(lat.len(), 6);
    }

    #[test]
    fn same_range_from_both_channels_gives_two_tokens() {
        let w = Token::new("2021", 0, 3, TokenKind::LexiconWord);
        let n = Token::new("2021", 0, 3, TokenKind::NswCandidate { rule: "NUM".into() });
        let lat = build_lattice("2021年", &[w.clone(), w], &[n.clone(), n]).unwrap();
        assert_eq!(lat.span_tokens().len(), 2);
        assert_eq!(lat.span_tokens()[0].kind, TokenKind::LexiconWord);
    }

    #[test]
    fn bounds_error_names_span() {
        let bad = Token::new("习学", 1, 2, TokenKind::LexiconWord);
        let err = build_lattice("学习", &[bad], &[]).unwrap_err();
        assert!(err.to_string().contains("习学"));
        assert!(matches!(
            err,
            LatticeError::OutOfBounds {
                head: 1,
                tail: 2,
                ..
            }
        ));

        let wrong = Token::new("习学", 0, 1, TokenKind::LexiconWord);
        assert!(matches!(
            build_lattice("学习", &[wrong], &[]),
            Err(LatticeError::TextMismatch { .. })
        ));
    }

    fn sentence_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop::sample::select(vec!['学', '习', '光', '年', '2', '0']),
            1..50,
        )
        .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn trie_matches_brute_force(
            sentence in sentence_strategy(),
            words in proptest::collection::vec(sentence_strategy(), 0..200),
        ) {
            let words: Vec<String> = words
                .into_iter()
                .map(|w| w.chars().take(4).collect::<String>())
                .filter(|w| w.chars().count() >= 2)
                .collect();
            let lex: Lexicon = words.iter().collect();
            prop_assert_eq!(spans(&match_lexicon(&sentence, &lex)), brute_force(&sentence, &words));
        }

        #[test]
        fn characters_reassemble_sentence(sentence in sentence_strategy()) {
            let lex: Lexicon = ["学习", "光年"].into_iter().collect();
            let words = match_lexicon(&sentence, &lex);
            let lat = build_lattice(&sentence, &words, &[]).unwrap();
            let joined: String = lat.tokens()[..lat.char_count()].iter().map(|t| t.text.as_str()).collect();
            prop_assert_eq!(joined, sentence);
        }

        #[test]
        fn order_insensitive(sentence in sentence_strategy(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let lex: Lexicon = ["学习", "光年", "学习学", "20"].into_iter().collect();
            let words = match_lexicon(&sentence, &lex);
            let mut shuffled = words.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                build_lattice(&sentence, &words, &[]).unwrap(),
                build_lattice(&sentence, &shuffled, &[]).unwrap()
            );
        }
    }
}
