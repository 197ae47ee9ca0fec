//! NSW categories and the BMESO tag inventory built on them.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

macro_rules! categories {
    ($($variant:ident => $name:literal,)*) => {
        /// The 29 NSW categories. `O` is ordinary text kept as is.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[allow(non_camel_case_types)]
        pub enum Category {
            $($variant,)*
        }

        impl Category {
            pub const ALL: &'static [Category] = &[$(Category::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(Category::$variant => $name,)*
                }
            }
        }

        impl FromStr for Category {
            type Err = TagError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(Category::$variant),)*
                    _ => Err(TagError::UnknownLabel(s.to_string())),
                }
            }
        }
    };
}

categories! {
    O => "O",
    Cardinal => "CARDINAL",
    Digit => "DIGIT",
    Punc => "PUNC",
    EngLetter => "ENG_LETTER",
    HyphenIgnore => "HYPHEN_IGNORE",
    Point => "POINT",
    Verbatim => "VERBATIM",
    HyphenRange => "HYPHEN_RANGE",
    MeasureUnit => "MEASURE_UNIT",
    SlashPer => "SLASH_PER",
    HyphenRatio => "HYPHEN_RATIO",
    NumTwoLiang => "NUM_TWO_LIANG",
    ColonHour => "COLON_HOUR",
    MinuteCardinal => "MINUTE_CARDINAL",
    SlashOr => "SLASH_OR",
    NumEng => "NUM_ENG",
    SlashFraction => "SLASH_FRACTION",
    Abbr => "ABBR",
    DayCardinal => "DAY_CARDINAL",
    SlashYear => "SLASH_YEAR",
    SlashMonth => "SLASH_MONTH",
    HyphenMinus => "HYPHEN_MINUS",
    HyphenSubzero => "HYPHEN_SUBZERO",
    MonthCardinal => "MONTH_CARDINAL",
    ColonMinute => "COLON_MINUTE",
    SecondCardinal => "SECOND_CARDINAL",
    HyphenExtension => "HYPHEN_EXTENSION",
    PowerOperator => "POWER_OPERATOR",
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TagError {
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("ill-formed BMESO sequence at position {position}: {reason}")]
    IllFormed { position: usize, reason: String },
    #[error("label index {0} is outside the label set")]
    BadIndex(usize),
    #[error("label file line {line}: {reason}")]
    LabelFile { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Position {
    Begin,
    Middle,
    End,
    Single,
}

impl Position {
    const ALL: [Position; 4] = [
        Position::Begin,
        Position::Middle,
        Position::End,
        Position::Single,
    ];

    fn prefix(self) -> char {
        match self {
            Position::Begin => 'B',
            Position::Middle => 'M',
            Position::End => 'E',
            Position::Single => 'S',
        }
    }
}

/// One BMESO tag: `O`, or a position inside a categorized span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    In(Position, Category),
}

impl Tag {
    pub fn category(self) -> Category {
        match self {
            Tag::O => Category::O,
            Tag::In(_, c) => c,
        }
    }

    /// Whether `next` may follow this tag.
    pub fn allows_next(self, next: Tag) -> bool {
        match self {
            Tag::In(Position::Begin, c) | Tag::In(Position::Middle, c) => {
                matches!(next, Tag::In(Position::Middle, d) | Tag::In(Position::End, d) if d == c)
            }
            _ => matches!(
                next,
                Tag::O | Tag::In(Position::Begin, _) | Tag::In(Position::Single, _)
            ),
        }
    }

    pub fn can_start(self) -> bool {
        matches!(
            self,
            Tag::O | Tag::In(Position::Begin, _) | Tag::In(Position::Single, _)
        )
    }

    pub fn can_end(self) -> bool {
        matches!(
            self,
            Tag::O | Tag::In(Position::End, _) | Tag::In(Position::Single, _)
        )
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::In(p, c) => write!(f, "{}-{}", p.prefix(), c),
        }
    }
}

impl FromStr for Tag {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(Tag::O);
        }
        let unknown = || TagError::UnknownLabel(s.to_string());
        let (p, c) = s.split_once('-').ok_or_else(unknown)?;
        let pos = match p {
            "B" => Position::Begin,
            "M" => Position::Middle,
            "E" => Position::End,
            "S" => Position::Single,
            _ => return Err(unknown()),
        };
        let cat: Category = c.parse().map_err(|_| unknown())?;
        if cat == Category::O {
            return Err(unknown());
        }
        Ok(Tag::In(pos, cat))
    }
}

/// Checks BMESO well-formedness of a tag sequence.
pub fn validate_tags(tags: &[Tag]) -> Result<(), TagError> {
    let Some(first) = tags.first() else {
        return Ok(());
    };
    if !first.can_start() {
        return Err(TagError::IllFormed {
            position: 0,
            reason: format!("sequence cannot start with {first}"),
        });
    }
    for (i, w) in tags.windows(2).enumerate() {
        if !w[0].allows_next(w[1]) {
            return Err(TagError::IllFormed {
                position: i + 1,
                reason: format!("{} cannot follow {}", w[1], w[0]),
            });
        }
    }
    let last = tags[tags.len() - 1];
    if !last.can_end() {
        return Err(TagError::IllFormed {
            position: tags.len() - 1,
            reason: format!("sequence cannot end with {last}"),
        });
    }
    Ok(())
}

/// Fixed ordering: `O` first, then B/M/E/S for every other category in
/// category order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    tags: Vec<Tag>,
    index: HashMap<Tag, usize>,
}

impl LabelSet {
    pub fn standard() -> Self {
        let mut tags = vec![Tag::O];
        for &c in &Category::ALL[1..] {
            for p in Position::ALL {
                tags.push(Tag::In(p, c));
            }
        }
        Self::from_tags(tags)
    }

    fn from_tags(tags: Vec<Tag>) -> Self {
        let index = tags.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        LabelSet { tags, index }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn index_of(&self, tag: Tag) -> Option<usize> {
        self.index.get(&tag).copied()
    }

    pub fn tag(&self, index: usize) -> Result<Tag, TagError> {
        self.tags
            .get(index)
            .copied()
            .ok_or(TagError::BadIndex(index))
    }

    pub fn encode(&self, tags: &[Tag]) -> Result<Vec<usize>, TagError> {
        tags.iter()
            .map(|t| {
                self.index_of(*t)
                    .ok_or_else(|| TagError::UnknownLabel(t.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<Tag>, TagError> {
        indices.iter().map(|&i| self.tag(i)).collect()
    }

    /// `index<TAB>label` lines.
    pub fn to_tsv(&self) -> String {
        self.tags
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{i}\t{t}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self, TagError> {
        let mut tags = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| TagError::LabelFile {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (idx, label) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected index<TAB>label"))?;
            let idx: usize = idx.parse().map_err(|_| bad("index is not an integer"))?;
            if idx != tags.len() {
                return Err(bad("indices must be consecutive from 0"));
            }
            let tag: Tag = label
                .parse()
                .map_err(|_| bad(&format!("unknown label {label:?}")))?;
            tags.push(tag);
        }
        Ok(Self::from_tags(tags))
    }
}

/// Per-character tags for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence(Vec<Tag>);

impl LabelSequence {
    /// Validates BMESO well-formedness.
    pub fn new(tags: Vec<Tag>) -> Result<Self, TagError> {
        validate_tags(&tags)?;
        Ok(LabelSequence(tags))
    }

    pub fn all_o(len: usize) -> Self {
        LabelSequence(vec![Tag::O; len])
    }

    pub fn tags(&self) -> &[Tag] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Maximal `B..E` and `S` runs as `(head, tail, category)`.
    pub fn spans(&self) -> Vec<(usize, usize, Category)> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, t) in self.0.iter().enumerate() {
            match t {
                Tag::O => {}
                Tag::In(Position::Single, c) => out.push((i, i, *c)),
                Tag::In(Position::Begin, _) => start = i,
                Tag::In(Position::Middle, _) => {}
                Tag::In(Position::End, c) => out.push((start, i, *c)),
            }
        }
        out
    }

    /// Inverse of [`LabelSequence::spans`]. Spans must be disjoint and in range.
    pub fn from_spans(len: usize, spans: &[(usize, usize, Category)]) -> Result<Self, TagError> {
        let mut tags = vec![Tag::O; len];
        for &(h, t, c) in spans {
            if h > t || t >= len || c == Category::O {
                return Err(TagError::IllFormed {
                    position: h,
                    reason: format!("bad span ({h}, {t}, {c})"),
                });
            }
            if tags[h..=t].iter().any(|x| *x != Tag::O) {
                return Err(TagError::IllFormed {
                    position: h,
                    reason: "overlapping spans".to_string(),
                });
            }
            if h == t {
                tags[h] = Tag::In(Position::Single, c);
            } else {
                tags[h] = Tag::In(Position::Begin, c);
                for x in &mut tags[h + 1..t] {
                    *x = Tag::In(Position::Middle, c);
                }
                tags[t] = Tag::In(Position::End, c);
            }
        }
        Ok(LabelSequence(tags))
    }
}
