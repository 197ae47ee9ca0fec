//! Spoken-form rendering of tagged NSW spans.
//!
//! Each category binds one conversion function. Fixed readings (点, 到, 每,
//! ...) come straight from the category; letters, symbols, units and
//! abbreviations are looked up in `surface<TAB>reading` lexicons.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::tags::{validate_tags, Category, Tag, TagError};

const DIGITS: [&str; 10] = ["零", "一", "二", "三", "四", "五", "六", "七", "八", "九"];
const MAX_CARDINAL_DIGITS: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerbalizeError {
    #[error("no reading for {symbol:?} in category {category}")]
    Unmapped { symbol: String, category: Category },
    #[error("{0:?} is not a decimal digit string")]
    NotDigits(String),
    #[error("{0} digits exceed the 16-digit cardinal range")]
    TooLong(usize),
    #[error("spans {first} and {second} overlap or are out of order")]
    Overlap { first: String, second: String },
    #[error("span ({head}, {tail}) is outside a sentence of {len} characters")]
    OutOfBounds {
        head: usize,
        tail: usize,
        len: usize,
    },
    #[error(transparent)]
    Labels(#[from] TagError),
    #[error("lexicon {path} line {line}: expected surface<TAB>reading")]
    LexiconFormat { path: String, line: usize },
    #[error("failed to read lexicon {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSpan {
    pub text: String,
    pub head: usize,
    pub tail: usize,
    pub category: Category,
}

impl TaggedSpan {
    pub fn new(text: impl Into<String>, head: usize, tail: usize, category: Category) -> Self {
        TaggedSpan {
            text: text.into(),
            head,
            tail,
            category,
        }
    }
}

impl std::fmt::Display for TaggedSpan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}({},{}):{}",
            self.text, self.head, self.tail, self.category
        )
    }
}

/// Groups maximal `B..E` and `S` runs into spans; `O` positions are skipped.
pub fn spans_from_labels(
    sentence: &str,
    labels: &[Tag],
) -> Result<Vec<TaggedSpan>, VerbalizeError> {
    let chars: Vec<char> = sentence.chars().collect();
    if chars.len() != labels.len() {
        return Err(TagError::IllFormed {
            position: chars.len().min(labels.len()),
            reason: format!("{} labels for {} characters", labels.len(), chars.len()),
        }
        .into());
    }
    validate_tags(labels)?;
    let seq = crate::tags::LabelSequence::new(labels.to_vec())?;
    Ok(seq
        .spans()
        .into_iter()
        .map(|(h, t, c)| TaggedSpan::new(chars[h..=t].iter().collect::<String>(), h, t, c))
        .collect())
}

fn parse_tsv(text: &str, path: &str) -> Result<HashMap<String, String>, VerbalizeError> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        // `#<TAB>reading` is the entry for the '#' symbol, not a comment
        if line.trim().is_empty() || (line.starts_with('#') && !line.starts_with("#\t")) {
            continue;
        }
        let (surface, reading) = line.split_once('\t').ok_or(VerbalizeError::LexiconFormat {
            path: path.to_string(),
            line: i + 1,
        })?;
        if surface.is_empty() {
            return Err(VerbalizeError::LexiconFormat {
                path: path.to_string(),
                line: i + 1,
            });
        }
        map.insert(surface.to_string(), reading.to_string());
    }
    Ok(map)
}

fn load_tsv(path: &Path) -> Result<HashMap<String, String>, VerbalizeError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| VerbalizeError::Io {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    parse_tsv(&text, &shown)
}

/// Reading inventories for symbols, measure units and abbreviations.
#[derive(Debug, Clone, Default)]
pub struct ReadingLexicons {
    pub symbols: HashMap<String, String>,
    pub units: HashMap<String, String>,
    pub abbreviations: HashMap<String, String>,
}

impl ReadingLexicons {
    pub fn builtin() -> Self {
        ReadingLexicons {
            symbols: parse_tsv(include_str!("../data/symbols.tsv"), "symbols.tsv")
                .expect("builtin symbols"),
            units: parse_tsv(include_str!("../data/units.tsv"), "units.tsv")
                .expect("builtin units"),
            abbreviations: parse_tsv(
                include_str!("../data/abbreviations.tsv"),
                "abbreviations.tsv",
            )
            .expect("builtin abbreviations"),
        }
    }

    /// Builtin inventories with any given file replacing its counterpart.
    pub fn load(
        symbols: Option<&Path>,
        units: Option<&Path>,
        abbreviations: Option<&Path>,
    ) -> Result<Self, VerbalizeError> {
        let mut lex = Self::builtin();
        if let Some(p) = symbols {
            lex.symbols = load_tsv(p)?;
        }
        if let Some(p) = units {
            lex.units = load_tsv(p)?;
        }
        if let Some(p) = abbreviations {
            lex.abbreviations = load_tsv(p)?;
        }
        Ok(lex)
    }
}

fn digit_values(digits: &str) -> Result<Vec<usize>, VerbalizeError> {
    if digits.is_empty() {
        return Err(VerbalizeError::NotDigits(digits.to_string()));
    }
    digits
        .chars()
        .map(|c| {
            c.to_digit(10)
                .filter(|_| c.is_ascii_digit())
                .map(|d| d as usize)
                .ok_or_else(|| VerbalizeError::NotDigits(digits.to_string()))
        })
        .collect()
}

/// Digit-by-digit reading: "2021" → 二零二一.
pub fn read_digits(digits: &str) -> Result<String, VerbalizeError> {
    Ok(digit_values(digits)?
        .into_iter()
        .map(|d| DIGITS[d])
        .collect())
}

/// Reads 1..=9999 with 千/百/十, one 零 per internal zero run.
fn read_group(value: usize, out: &mut String) {
    const UNITS: [&str; 4] = ["千", "百", "十", ""];
    let digits = [value / 1000, value / 100 % 10, value / 10 % 10, value % 10];
    let mut started = false;
    let mut zero = false;
    for (pos, &d) in digits.iter().enumerate() {
        if d == 0 {
            zero |= started;
            continue;
        }
        if zero {
            out.push('零');
            zero = false;
        }
        out.push_str(DIGITS[d]);
        out.push_str(UNITS[pos]);
        started = true;
    }
}

/// Mandarin cardinal reading with 万/亿 grouping: "10005" → 一万零五,
/// "11" → 十一. Leading zeros are ignored; at most 16 significant digits.
pub fn read_cardinal(digits: &str) -> Result<String, VerbalizeError> {
    let values = digit_values(digits)?;
    let significant: Vec<usize> = values.into_iter().skip_while(|d| *d == 0).collect();
    if significant.is_empty() {
        return Ok("零".to_string());
    }
    if significant.len() > MAX_CARDINAL_DIGITS {
        return Err(VerbalizeError::TooLong(significant.len()));
    }
    const GROUP_UNITS: [&str; 4] = ["", "万", "亿", "万亿"];
    let n_groups = significant.len().div_ceil(4);
    let mut groups = vec![0usize; n_groups];
    for (i, d) in significant.iter().rev().enumerate() {
        groups[i / 4] += d * 10usize.pow((i % 4) as u32);
    }

    let mut out = String::new();
    let mut first = true;
    let mut gap = false;
    for gi in (0..n_groups).rev() {
        let g = groups[gi];
        if g == 0 {
            gap = true;
            continue;
        }
        if !first && (gap || g < 1000) {
            out.push('零');
        }
        if first && (10..20).contains(&g) {
            out.push('十');
            if g > 10 {
                out.push_str(DIGITS[g - 10]);
            }
        } else {
            read_group(g, &mut out);
        }
        out.push_str(GROUP_UNITS[gi]);
        first = false;
        gap = false;
    }
    Ok(out)
}

/// Cardinal reading keeping a leading 零 for zero-padded clock fields
/// ("05" → 零五).
fn read_clock_field(text: &str) -> Result<String, VerbalizeError> {
    let reading = read_cardinal(text)?;
    if text.len() == 2 && text.starts_with('0') && text != "00" {
        Ok(format!("零{reading}"))
    } else {
        Ok(reading)
    }
}

fn fixed_reading(category: Category) -> Option<&'static str> {
    use Category::*;
    Some(match category {
        Punc | HyphenIgnore => "",
        Point => "点",
        HyphenRange => "到",
        SlashPer => "每",
        HyphenRatio => "比",
        NumTwoLiang => "两",
        ColonHour => "点",
        SlashOr => "或",
        HyphenMinus => "负",
        HyphenSubzero => "零下",
        ColonMinute => "分",
        HyphenExtension => "转",
        PowerOperator => "次方",
        SlashYear => "年",
        SlashMonth => "月",
        _ => return None,
    })
}

fn is_number(category: Category) -> bool {
    matches!(category, Category::Cardinal | Category::Digit)
}

/// Applies per-category conversion functions.
#[derive(Debug, Clone)]
pub struct Verbalizer {
    lexicons: ReadingLexicons,
}

impl Default for Verbalizer {
    fn default() -> Self {
        Verbalizer::new(ReadingLexicons::builtin())
    }
}

impl Verbalizer {
    pub fn new(lexicons: ReadingLexicons) -> Self {
        Verbalizer { lexicons }
    }

    pub fn lexicons(&self) -> &ReadingLexicons {
        &self.lexicons
    }

    fn per_symbol(&self, text: &str, category: Category) -> Result<String, VerbalizeError> {
        text.chars()
            .map(|c| {
                let key = c.to_string();
                self.lexicons
                    .symbols
                    .get(&key)
                    .cloned()
                    .ok_or(VerbalizeError::Unmapped {
                        symbol: key,
                        category,
                    })
            })
            .collect()
    }

    fn whole(
        map: &HashMap<String, String>,
        text: &str,
        category: Category,
    ) -> Result<String, VerbalizeError> {
        map.get(text)
            .cloned()
            .ok_or_else(|| VerbalizeError::Unmapped {
                symbol: text.to_string(),
                category,
            })
    }

    pub fn verbalize(&self, span: &TaggedSpan) -> Result<String, VerbalizeError> {
        use Category::*;
        let text = span.text.as_str();
        let unmapped = |e: VerbalizeError| match e {
            VerbalizeError::NotDigits(s) => VerbalizeError::Unmapped {
                symbol: s,
                category: span.category,
            },
            other => other,
        };
        if let Some(reading) = fixed_reading(span.category) {
            return Ok(reading.to_string());
        }
        match span.category {
            O => Ok(text.to_string()),
            Digit => read_digits(text).map_err(unmapped),
            Cardinal => read_cardinal(text).map_err(unmapped),
            MinuteCardinal => Ok(read_clock_field(text).map_err(unmapped)? + "分"),
            SecondCardinal => Ok(read_clock_field(text).map_err(unmapped)? + "秒"),
            DayCardinal => Ok(read_cardinal(text).map_err(unmapped)? + "日"),
            MonthCardinal => Ok(read_cardinal(text).map_err(unmapped)? + "月"),
            EngLetter | Verbatim | NumEng => self.per_symbol(text, span.category),
            MeasureUnit => Self::whole(&self.lexicons.units, text, span.category),
            Abbr => Self::whole(&self.lexicons.abbreviations, text, span.category),
            SlashFraction => match text.split_once('/') {
                Some((num, den)) if !num.is_empty() && !den.is_empty() => Ok(format!(
                    "{}分之{}",
                    read_cardinal(den).map_err(unmapped)?,
                    read_cardinal(num).map_err(unmapped)?
                )),
                _ => Ok("分之".to_string()),
            },
            _ => unreachable!("fixed readings handled above"),
        }
    }

    /// Replaces each span by its reading and keeps the remaining text.
    ///
    /// A fraction slash or power operator directly between two number spans
    /// reorders its operands: `3/4` → 四分之三, `2^3` → 二的三次方.
    pub fn normalize_sentence(
        &self,
        sentence: &str,
        spans: &[TaggedSpan],
    ) -> Result<String, VerbalizeError> {
        let chars: Vec<char> = sentence.chars().collect();
        for s in spans {
            if s.head > s.tail || s.tail >= chars.len() {
                return Err(VerbalizeError::OutOfBounds {
                    head: s.head,
                    tail: s.tail,
                    len: chars.len(),
                });
            }
        }
        for w in spans.windows(2) {
            if w[1].head <= w[0].tail {
                return Err(VerbalizeError::Overlap {
                    first: w[0].to_string(),
                    second: w[1].to_string(),
                });
            }
        }

        let mut out = String::new();
        let mut cursor = 0;
        let mut i = 0;
        while i < spans.len() {
            let s = &spans[i];
            out.extend(&chars[cursor..s.head]);
            if let Some((reading, used)) = self.operator_triple(&spans[i..])? {
                out.push_str(&reading);
                cursor = spans[i + used - 1].tail + 1;
                i += used;
                continue;
            }
            out.push_str(&self.verbalize(s)?);
            cursor = s.tail + 1;
            i += 1;
        }
        out.extend(&chars[cursor..]);
        Ok(out)
    }

    fn operator_triple(
        &self,
        spans: &[TaggedSpan],
    ) -> Result<Option<(String, usize)>, VerbalizeError> {
        let [a, op, b, ..] = spans else {
            return Ok(None);
        };
        let adjacent = a.tail + 1 == op.head && op.tail + 1 == b.head;
        if !adjacent || !is_number(a.category) || !is_number(b.category) {
            return Ok(None);
        }
        let (Ok(left), Ok(right)) = (read_cardinal(&a.text), read_cardinal(&b.text)) else {
            return Ok(None);
        };
        Ok(match op.category {
            Category::SlashFraction => Some((format!("{right}分之{left}"), 3)),
            Category::PowerOperator => Some((format!("{left}的{right}次方"), 3)),
            _ => None,
        })
    }
}
