//! BMESO corpora: loading, saving, splitting, synthesis and evaluation.
//!
//! The corpus format is one `char<TAB>label` pair per line with a blank
//! line between sentences.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::tags::{validate_tags, Category, LabelSequence, Position, Tag, TagError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: expected `char<TAB>label`")]
    Malformed { line: usize },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: ill-formed BMESO sequence: {reason}")]
    IllFormed { line: usize, reason: String },
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad template {template:?}: {reason}")]
    Template { template: String, reason: String },
    #[error("sentence {index}: {predicted} predicted labels for {gold} gold labels")]
    Misaligned {
        index: usize,
        predicted: usize,
        gold: usize,
    },
    #[error("{predicted} predicted sentences for {gold} gold sentences")]
    CountMismatch { predicted: usize, gold: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub chars: Vec<char>,
    pub tags: Vec<Tag>,
}

impl Sentence {
    pub fn new(chars: Vec<char>, tags: Vec<Tag>) -> Result<Self, TagError> {
        if chars.len() != tags.len() {
            return Err(TagError::IllFormed {
                position: chars.len().min(tags.len()),
                reason: format!("{} labels for {} characters", tags.len(), chars.len()),
            });
        }
        validate_tags(&tags)?;
        Ok(Sentence { chars, tags })
    }

    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.sentences.iter().flat_map(|s| s.chars.iter().copied())
    }

    pub fn categories(&self) -> std::collections::BTreeSet<Category> {
        self.sentences
            .iter()
            .flat_map(|s| s.tags.iter().map(|t| t.category()))
            .filter(|c| *c != Category::O)
            .collect()
    }
}

pub fn parse_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let mut sentences = Vec::new();
    let mut chars = Vec::new();
    let mut tags = Vec::new();
    let mut lines = Vec::new();

    let mut flush = |chars: &mut Vec<char>, tags: &mut Vec<Tag>, lines: &mut Vec<usize>| {
        if chars.is_empty() {
            return Ok(());
        }
        if let Err(TagError::IllFormed { position, reason }) = validate_tags(tags) {
            return Err(CorpusError::IllFormed {
                line: lines[position],
                reason,
            });
        }
        sentences.push(Sentence {
            chars: std::mem::take(chars),
            tags: std::mem::take(tags),
        });
        lines.clear();
        Ok(())
    };

    for (i, raw) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            flush(&mut chars, &mut tags, &mut lines)?;
            continue;
        }
        let (c, label) = line
            .split_once('\t')
            .ok_or(CorpusError::Malformed { line: line_no })?;
        let mut it = c.chars();
        let ch = match (it.next(), it.next()) {
            (Some(ch), None) => ch,
            _ => return Err(CorpusError::Malformed { line: line_no }),
        };
        if label.is_empty() || label.contains('\t') {
            return Err(CorpusError::Malformed { line: line_no });
        }
        let tag: Tag = label.parse().map_err(|_| CorpusError::UnknownLabel {
            line: line_no,
            label: label.to_string(),
        })?;
        chars.push(ch);
        tags.push(tag);
        lines.push(line_no);
    }
    flush(&mut chars, &mut tags, &mut lines)?;
    Ok(Corpus { sentences })
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

pub fn save_corpus(corpus: &Corpus) -> String {
    let mut out = String::new();
    for (i, s) in corpus.sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (c, t) in s.chars.iter().zip(&s.tags) {
            let _ = writeln!(out, "{c}\t{t}");
        }
    }
    out
}

/// Deterministic shuffle then partition by `ratios`; each part is within one
/// sentence of its exact share (largest-remainder rounding).
pub fn split(corpus: &Corpus, ratios: [usize; 3], seed: u64) -> (Corpus, Corpus, Corpus) {
    assert!(ratios.iter().all(|r| *r > 0), "ratios must be positive");
    let n = corpus.len();
    let total: usize = ratios.iter().sum();
    let mut sizes = ratios.map(|r| n * r / total);
    let mut remainders: Vec<(usize, usize)> = ratios
        .iter()
        .enumerate()
        .map(|(i, r)| (n * r % total, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let leftover = n - sizes.iter().sum::<usize>();
    for &(_, i) in remainders.iter().take(leftover) {
        sizes[i] += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| Corpus {
        sentences: order[range]
            .iter()
            .map(|&i| corpus.sentences[i].clone())
            .collect(),
    };
    (
        take(0..sizes[0]),
        take(sizes[0]..sizes[0] + sizes[1]),
        take(sizes[0] + sizes[1]..n),
    )
}

/// Value generators available to templates as `{name}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Year,
    SmallCardinal,
    LargeCardinal,
    Phone,
    Code,
    Decimal,
    DateSlash,
    YearMonthSlash,
    MonthDaySlash,
    ClockTime,
    ClockTimeSeconds,
    MinutesSeconds,
    Ratio,
    Range,
    Minus,
    Subzero,
    Temperature,
    Measure,
    Per,
    Liang,
    Fraction,
    English,
    NumEnglish,
    Extension,
    Power,
}

impl Slot {
    fn parse(name: &str) -> Option<Slot> {
        use Slot::*;
        Some(match name {
            "year" => Year,
            "small" => SmallCardinal,
            "large" => LargeCardinal,
            "phone" => Phone,
            "code" => Code,
            "decimal" => Decimal,
            "date" => DateSlash,
            "year_month" => YearMonthSlash,
            "month_day" => MonthDaySlash,
            "clock" => ClockTime,
            "clock_seconds" => ClockTimeSeconds,
            "min_sec" => MinutesSeconds,
            "ratio" => Ratio,
            "range" => Range,
            "minus" => Minus,
            "subzero" => Subzero,
            "temperature" => Temperature,
            "measure" => Measure,
            "per" => Per,
            "liang" => Liang,
            "fraction" => Fraction,
            "english" => English,
            "num_english" => NumEnglish,
            "extension" => Extension,
            "power" => Power,
            _ => return None,
        })
    }

    fn generate<R: Rng>(self, rng: &mut R) -> Vec<(String, Category)> {
        use Category::*;
        let num = |rng: &mut R, lo: u32, hi: u32| rng.gen_range(lo..=hi).to_string();
        let pad2 = |rng: &mut R, lo: u32, hi: u32| format!("{:02}", rng.gen_range(lo..=hi));
        let p = |s: &str, c: Category| (s.to_string(), c);
        match self {
            Slot::Year => vec![(num(rng, 1900, 2030), Digit)],
            Slot::SmallCardinal => vec![(num(rng, 3, 999), Cardinal)],
            Slot::LargeCardinal => vec![(num(rng, 1000, 9_999_999), Cardinal)],
            Slot::Phone => {
                let s = if rng.gen_bool(0.4) {
                    ["110", "119", "120", "114", "911", "12345"][rng.gen_range(0..6)].to_string()
                } else {
                    (0..rng.gen_range(7..=11))
                        .map(|_| char::from(b'0' + rng.gen_range(0..10u8)))
                        .collect()
                };
                vec![(s, Digit)]
            }
            Slot::Code => vec![(num(rng, 100, 9999), Digit)],
            Slot::Decimal => vec![
                (num(rng, 0, 99), Cardinal),
                p(".", Point),
                (num(rng, 1, 99), Digit),
            ],
            Slot::DateSlash => vec![
                (num(rng, 1990, 2030), Digit),
                p("/", SlashYear),
                (pad2(rng, 1, 12), Cardinal),
                p("/", SlashMonth),
                (pad2(rng, 1, 28), DayCardinal),
            ],
            Slot::YearMonthSlash => vec![
                (num(rng, 1990, 2030), Digit),
                p("/", SlashYear),
                (pad2(rng, 1, 12), MonthCardinal),
            ],
            Slot::MonthDaySlash => vec![
                (num(rng, 1, 12), Cardinal),
                p("/", SlashMonth),
                (num(rng, 1, 28), DayCardinal),
            ],
            Slot::ClockTime => vec![
                (num(rng, 0, 23), Cardinal),
                p(":", ColonHour),
                (pad2(rng, 0, 59), MinuteCardinal),
            ],
            Slot::ClockTimeSeconds => vec![
                (num(rng, 0, 23), Cardinal),
                p(":", ColonHour),
                (pad2(rng, 0, 59), Cardinal),
                p(":", ColonMinute),
                (pad2(rng, 0, 59), SecondCardinal),
            ],
            Slot::MinutesSeconds => vec![
                (num(rng, 1, 59), Cardinal),
                p(":", ColonMinute),
                (pad2(rng, 0, 59), SecondCardinal),
            ],
            Slot::Ratio => vec![
                (num(rng, 0, 9), Cardinal),
                p(":", HyphenRatio),
                (num(rng, 0, 9), Cardinal),
            ],
            Slot::Range => {
                let a = rng.gen_range(1..=20);
                let b = a + rng.gen_range(1..=10);
                vec![
                    (a.to_string(), Cardinal),
                    p("-", HyphenRange),
                    (b.to_string(), Cardinal),
                ]
            }
            Slot::Minus => vec![p("-", HyphenMinus), (num(rng, 1, 500), Cardinal)],
            Slot::Subzero => vec![
                p("-", HyphenSubzero),
                (num(rng, 1, 40), Cardinal),
                p("℃", MeasureUnit),
            ],
            Slot::Temperature => vec![(num(rng, 0, 40), Cardinal), p("℃", MeasureUnit)],
            Slot::Measure => {
                let unit = ["cm", "km", "kg", "GB", "mm", "ml"][rng.gen_range(0..6)];
                vec![(num(rng, 2, 999), Cardinal), p(unit, MeasureUnit)]
            }
            Slot::Per => {
                let (money, per) = [("元", "年"), ("元", "月"), ("元", "人"), ("公里", "小时")]
                    [rng.gen_range(0..4)];
                vec![
                    (num(rng, 3, 9999), Cardinal),
                    p(money, O),
                    p("/", SlashPer),
                    p(per, O),
                ]
            }
            Slot::Liang => vec![p("2", NumTwoLiang)],
            Slot::Fraction => vec![
                (num(rng, 1, 9), Cardinal),
                p("/", SlashFraction),
                (num(rng, 2, 99), Cardinal),
            ],
            Slot::English => {
                let w =
                    ["NBA", "CEO", "GDP", "CPU", "APP", "TV", "VIP", "DNA"][rng.gen_range(0..8)];
                vec![p(w, EngLetter)]
            }
            Slot::NumEnglish => match rng.gen_range(0..3) {
                0 => vec![p("B", EngLetter), p("2", NumEng), p("B", EngLetter)],
                1 => vec![p("P", EngLetter), p("2", NumEng), p("P", EngLetter)],
                _ => vec![p("MP", EngLetter), (num(rng, 3, 4), NumEng)],
            },
            Slot::Extension => {
                let main: String = (0..8)
                    .map(|_| char::from(b'0' + rng.gen_range(0..10u8)))
                    .collect();
                vec![
                    (main, Digit),
                    p("-", HyphenExtension),
                    (num(rng, 100, 999), Digit),
                ]
            }
            Slot::Power => vec![
                (num(rng, 2, 10), Cardinal),
                p("^", PowerOperator),
                (num(rng, 2, 9), Cardinal),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Part {
    Literal(String),
    Slot(Slot),
    Fixed(String, Category),
}

/// A sentence pattern.
///
/// * `{name}` draws from a [`Slot`] generator;
/// * `{CATEGORY=text}` inserts `text` labeled with that category;
/// * `#CATEGORY#` inserts the symbol written for a symbol category, e.g.
///   `#HYPHEN_SUBZERO#` is a `-` labeled `HYPHEN_SUBZERO`;
/// * other literal text is labeled `O`, except runs of ASCII digits
///   (`CARDINAL`), `℃` (`MEASURE_UNIT`) and punctuation (`PUNC`).
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    source: String,
    parts: Vec<Part>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, CorpusError> {
        let bad = |reason: &str| CorpusError::Template {
            template: source.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = Vec::new();
        let mut literal = String::new();
        let mut rest = source;
        while let Some(c) = rest.chars().next() {
            match c {
                '{' => {
                    let close = rest.find('}').ok_or_else(|| bad("unclosed '{'"))?;
                    let inner = &rest[1..close];
                    if !literal.is_empty() {
                        parts.push(Part::Literal(std::mem::take(&mut literal)));
                    }
                    if let Some((cat, text)) = inner.split_once('=') {
                        let c: Category = cat
                            .parse()
                            .map_err(|_| bad(&format!("unknown category {cat}")))?;
                        if text.is_empty() {
                            return Err(bad("empty fixed text"));
                        }
                        parts.push(Part::Fixed(text.to_string(), c));
                    } else {
                        let slot = Slot::parse(inner)
                            .ok_or_else(|| bad(&format!("unknown slot {inner}")))?;
                        parts.push(Part::Slot(slot));
                    }
                    rest = &rest[close + 1..];
                }
                '#' => {
                    let close = rest[1..].find('#').ok_or_else(|| bad("unclosed '#'"))? + 1;
                    let name = &rest[1..close];
                    let cat: Category = name
                        .parse()
                        .map_err(|_| bad(&format!("unknown category {name}")))?;
                    let symbol = canonical_symbol(cat)
                        .ok_or_else(|| bad(&format!("{name} has no symbol")))?;
                    if !literal.is_empty() {
                        parts.push(Part::Literal(std::mem::take(&mut literal)));
                    }
                    parts.push(Part::Fixed(symbol.to_string(), cat));
                    rest = &rest[close + 1..];
                }
                _ => {
                    literal.push(c);
                    rest = &rest[c.len_utf8()..];
                }
            }
        }
        if !literal.is_empty() {
            parts.push(Part::Literal(literal));
        }
        Ok(Template {
            source: source.to_string(),
            parts,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn instantiate<R: Rng>(&self, rng: &mut R) -> Sentence {
        let mut pieces: Vec<(String, Category)> = Vec::new();
        for part in &self.parts {
            match part {
                Part::Literal(s) => {
                    for c in s.chars() {
                        let cat = match c {
                            '0'..='9' => Category::Cardinal,
                            '℃' => Category::MeasureUnit,
                            c if is_punctuation(c) => Category::Punc,
                            _ => Category::O,
                        };
                        match pieces.last_mut() {
                            Some((run, Category::Cardinal))
                                if cat == Category::Cardinal && literal_digits(run) =>
                            {
                                run.push(c)
                            }
                            _ => pieces.push((c.to_string(), cat)),
                        }
                    }
                }
                Part::Fixed(s, c) => pieces.push((s.clone(), *c)),
                Part::Slot(slot) => pieces.extend(slot.generate(rng)),
            }
        }
        let mut chars = Vec::new();
        let mut tags = Vec::new();
        for (text, cat) in pieces {
            let n = text.chars().count();
            for (i, c) in text.chars().enumerate() {
                chars.push(c);
                tags.push(match (cat, n, i) {
                    (Category::O, _, _) => Tag::O,
                    (c, 1, _) => Tag::In(Position::Single, c),
                    (c, _, 0) => Tag::In(Position::Begin, c),
                    (c, n, i) if i == n - 1 => Tag::In(Position::End, c),
                    (c, _, _) => Tag::In(Position::Middle, c),
                });
            }
        }
        Sentence { chars, tags }
    }

    pub fn categories(&self) -> Vec<Category> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = self.instantiate(&mut rng);
        LabelSequence::new(s.tags)
            .map(|l| l.spans().into_iter().map(|(_, _, c)| c).collect())
            .unwrap_or_default()
    }
}

fn canonical_symbol(cat: Category) -> Option<&'static str> {
    use Category::*;
    Some(match cat {
        Point => ".",
        HyphenRange | HyphenRatio | HyphenMinus | HyphenSubzero | HyphenExtension
        | HyphenIgnore => "-",
        SlashYear | SlashMonth | SlashPer | SlashOr | SlashFraction => "/",
        ColonHour | ColonMinute => ":",
        PowerOperator => "^",
        _ => return None,
    })
}

fn literal_digits(run: &str) -> bool {
    run.bytes().all(|b| b.is_ascii_digit())
}

fn is_punctuation(c: char) -> bool {
    matches!(
        c,
        '。' | '，'
            | '、'
            | '；'
            | '：'
            | '？'
            | '！'
            | '“'
            | '”'
            | '（'
            | '）'
            | '《'
            | '》'
            | '…'
    )
}

const DEFAULT_TEMPLATES: &[&str] = &[
    "他于{year}年毕业",
    "这家公司成立于{year}年",
    "早在{year}年就有记载",
    "{year}年的数据显示",
    "共{year}年",
    "截至{year}年底",
    "{year}年以来",
    "该软件发布于{year}年",
    "{small}年前他来到这里",
    "过去{small}年来变化很大",
    "这颗恒星距离地球{large}光年",
    "该星系约{small}光年远",
    "全市人口约{large}人",
    "总共有{small}名学生参加",
    "公司今年利润{large}元",
    "他今年{small}岁",
    "他去过{small}次北京",
    "请拨打{phone}",
    "热线电话是{phone}",
    "房间号是{code}",
    "他乘坐{ENG_LETTER=G}{code}次列车",
    "圆周率约为{decimal}",
    "价格下跌了{decimal}元",
    "他的身高是{decimal}米",
    "会议定于{date}举行",
    "截止日期是{date}",
    "数据更新于{year_month}",
    "报名截止到{month_day}",
    "约有{fraction}的学生参加",
    "超过{fraction}的人同意",
    "费用为{per}",
    "速度达到{per}",
    "老师{SLASH_OR=/}学生请到这里报名",
    "苹果{SLASH_OR=/}香蕉都可以",
    "比赛将在{clock}开始",
    "列车于{clock}出发",
    "晚上{clock}到达",
    "到达时间是{clock_seconds}",
    "他的成绩是{min_sec}",
    "全程用时{min_sec}",
    "最终比分为{ratio}",
    "主队以{ratio}战胜客队",
    "两者比例约为{ratio}",
    "活动时间为7月{range}日",
    "每组{range}人",
    "适合{range}岁儿童",
    "今天气温{subzero}",
    "明天最低气温{subzero}",
    "温度变化为{minus}",
    "本月利润为{minus}万元",
    "分机号码为{extension}",
    "家里装了{ENG_LETTER=Wi}{HYPHEN_IGNORE=-}{ENG_LETTER=Fi}",
    "他的身高是{measure}",
    "硬盘容量为{measure}",
    "最高气温{temperature}",
    "我们一共{liang}个人",
    "他买了{liang}本书",
    "{english}总决赛今晚举行",
    "他是公司的{english}",
    "这是一种{num_english}模式",
    "他在学习{ENG_LETTER=C}{VERBATIM=++}编程",
    "{ABBR=Dr}李是一名医生",
    "{ABBR=Mr}王明天来",
    "{power}是多少",
    "结果等于{power}",
];

const FILLERS: &[&str] = &[
    "据报道",
    "记者了解到",
    "另外",
    "同时",
    "不过",
    "值得一提的是",
    "消息传出后",
    "大家都认为",
    "有关部门表示",
    "根据统计",
];

/// Clause templates covering every category except `O`.
pub fn default_templates() -> Vec<Template> {
    DEFAULT_TEMPLATES
        .iter()
        .map(|t| Template::parse(t).expect("default templates parse"))
        .collect()
}

/// `n` sentences labeled by construction. Each joins one to three clauses
/// drawn uniformly from `templates` with `，`, optionally opening a clause
/// with a filler phrase, and ends with `。`.
pub fn synthesize_corpus(n: usize, seed: u64, templates: &[Template]) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comma = Template::parse("，").expect("literal");
    let stop = Template::parse("。").expect("literal");
    let fillers: Vec<Template> = FILLERS
        .iter()
        .map(|f| Template::parse(f).expect("literal"))
        .collect();
    let sentences = (0..n)
        .map(|_| {
            let mut parts = Vec::new();
            for c in 0..rng.gen_range(1..=3) {
                if c > 0 {
                    parts.push(comma.instantiate(&mut rng));
                }
                if rng.gen_bool(0.3) {
                    parts.push(fillers[rng.gen_range(0..fillers.len())].instantiate(&mut rng));
                }
                parts.push(templates[rng.gen_range(0..templates.len())].instantiate(&mut rng));
            }
            parts.push(stop.instantiate(&mut rng));
            let mut sentence = Sentence {
                chars: Vec::new(),
                tags: Vec::new(),
            };
            for p in parts {
                sentence.chars.extend(p.chars);
                sentence.tags.extend(p.tags);
            }
            sentence
        })
        .collect();
    Corpus { sentences }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CategoryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl CategoryScore {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        CategoryScore {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        }
    }
}

/// Token accuracy plus span-level scores: a predicted span counts only when
/// head, tail and category all match a gold span.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub tokens: usize,
    pub token_accuracy: f64,
    pub sentence_accuracy: f64,
    pub micro: CategoryScore,
    pub macro_f1: f64,
    pub per_category: BTreeMap<String, CategoryScore>,
    /// Token-level `gold -> predicted -> count` over categories.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

pub fn evaluate(predictions: &[Vec<Tag>], gold: &[Vec<Tag>]) -> Result<EvalReport, CorpusError> {
    if predictions.len() != gold.len() {
        return Err(CorpusError::CountMismatch {
            predicted: predictions.len(),
            gold: gold.len(),
        });
    }
    let mut tokens = 0;
    let mut correct = 0;
    let mut exact = 0;
    let mut counts: BTreeMap<Category, (usize, usize, usize)> = BTreeMap::new();
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (index, (p, g)) in predictions.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(CorpusError::Misaligned {
                index,
                predicted: p.len(),
                gold: g.len(),
            });
        }
        tokens += g.len();
        let right = p.iter().zip(g).filter(|(a, b)| a == b).count();
        correct += right;
        if right == g.len() {
            exact += 1;
        }
        for (a, b) in p.iter().zip(g) {
            *confusion
                .entry(b.category().to_string())
                .or_default()
                .entry(a.category().to_string())
                .or_default() += 1;
        }
        let p_spans = spans_lenient(p);
        let g_spans = spans_lenient(g);
        for s in &p_spans {
            let e = counts.entry(s.2).or_default();
            if g_spans.contains(s) {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        for s in &g_spans {
            if !p_spans.contains(s) {
                counts.entry(s.2).or_default().2 += 1;
            }
        }
    }
    let per_category: BTreeMap<String, CategoryScore> = counts
        .iter()
        .map(|(c, &(tp, fp, fn_))| (c.to_string(), CategoryScore::from_counts(tp, fp, fn_)))
        .collect();
    let (tp, fp, fn_) = counts
        .values()
        .fold((0, 0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1, acc.2 + v.2));
    let macro_f1 = if per_category.is_empty() {
        0.0
    } else {
        per_category.values().map(|s| s.f1).sum::<f64>() / per_category.len() as f64
    };
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(EvalReport {
        sentences: gold.len(),
        tokens,
        token_accuracy: ratio(correct, tokens),
        sentence_accuracy: ratio(exact, gold.len()),
        micro: CategoryScore::from_counts(tp, fp, fn_),
        macro_f1,
        per_category,
        confusion,
    })
}

/// Span extraction that tolerates ill-formed predictions: an unterminated
/// or mismatched run is dropped.
fn spans_lenient(tags: &[Tag]) -> Vec<(usize, usize, Category)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, Category)> = None;
    for (i, t) in tags.iter().enumerate() {
        match *t {
            Tag::O => open = None,
            Tag::In(Position::Single, c) => {
                out.push((i, i, c));
                open = None;
            }
            Tag::In(Position::Begin, c) => open = Some((i, c)),
            Tag::In(Position::Middle, c) => {
                if open.map(|o| o.1) != Some(c) {
                    open = None;
                }
            }
            Tag::In(Position::End, c) => {
                if let Some((h, oc)) = open {
                    if oc == c {
                        out.push((h, i, c));
                    }
                }
                open = None;
            }
        }
    }
    out
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# span-level scores: a span is correct iff head, tail and category match"
        );
        let _ = writeln!(s, "sentences          {}", self.sentences);
        let _ = writeln!(s, "tokens             {}", self.tokens);
        let _ = writeln!(s, "token accuracy     {:.4}", self.token_accuracy);
        let _ = writeln!(s, "sentence accuracy  {:.4}", self.sentence_accuracy);
        let _ = writeln!(
            s,
            "micro P/R/F1       {:.4} / {:.4} / {:.4}",
            self.micro.precision, self.micro.recall, self.micro.f1
        );
        let _ = writeln!(s, "macro F1           {:.4}", self.macro_f1);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<18} {:>9} {:>9} {:>9} {:>7}",
            "category", "precision", "recall", "f1", "support"
        );
        for (c, score) in &self.per_category {
            let _ = writeln!(
                s,
                "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>7}",
                c,
                score.precision,
                score.recall,
                score.f1,
                score.true_positives + score.false_negatives
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &str) -> Vec<Tag> {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    const FIXTURE: &str = "共\tO\n2\tB-DIGIT\n0\tM-DIGIT\n2\tM-DIGIT\n1\tE-DIGIT\n年\tO\n\n你\tO\n好\tO\n。\tS-PUNC\n";

    #[test]
    fn loads_fixture() {
        let c = parse_corpus(FIXTURE).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sentences[0].text(), "共2021年");
        assert_eq!(
            c.sentences[0].tags,
            tags("O B-DIGIT M-DIGIT M-DIGIT E-DIGIT O")
        );
        assert_eq!(c.sentences[1].tags, tags("O O S-PUNC"));
        assert_eq!(parse_corpus(&save_corpus(&c)).unwrap(), c);
    }

    #[test]
    fn empty_file() {
        assert!(parse_corpus("").unwrap().is_empty());
        assert!(parse_corpus("\n\n").unwrap().is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_corpus("a\tO\nb\tB-BOGUS\n").unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabel { line: 2, .. }));
        let err = parse_corpus("a\tO\n\nb\tO\nc\tE-DIGIT\n").unwrap_err();
        assert!(
            matches!(err, CorpusError::IllFormed { line: 4, .. }),
            "{err}"
        );
        let err = parse_corpus("ab\tO\n").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1 }));
        let err = parse_corpus("a\tO\nb\tB-DIGIT\n\n").unwrap_err();
        assert!(matches!(err, CorpusError::IllFormed { line: 2, .. }));
    }

    #[test]
    fn split_sizes() {
        let corpus = synthesize_corpus(10, 1, &default_templates());
        let (a, b, c) = split(&corpus, [8, 1, 1], 42);
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let again = split(&corpus, [8, 1, 1], 42);
        assert_eq!(again.0, a);
        assert_eq!(again.2, c);

        let big = Corpus {
            sentences: vec![corpus.sentences[0].clone(); 30_000],
        };
        let (a, b, c) = split(&big, [8, 1, 1], 0);
        assert_eq!((a.len(), b.len(), c.len()), (24_000, 3_000, 3_000));

        for n in 0..60 {
            let small = Corpus {
                sentences: vec![corpus.sentences[0].clone(); n],
            };
            let (a, b, c) = split(&small, [8, 1, 1], 3);
            for (got, r) in [(a.len(), 8.0), (b.len(), 1.0), (c.len(), 1.0)] {
                assert!((got as f64 - n as f64 * r / 10.0).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn template_labels_by_construction() {
        let t = Template::parse("今天气温{subzero}").unwrap();
        let s = t.instantiate(&mut ChaCha8Rng::seed_from_u64(5));
        let text = s.text();
        assert!(text.starts_with("今天气温-"));
        assert!(text.ends_with('℃'));
        let n = s.len();
        assert_eq!(s.tags[4].to_string(), "S-HYPHEN_SUBZERO");
        assert_eq!(s.tags[n - 1].to_string(), "S-MEASURE_UNIT");
        assert!(s.tags[5..n - 1]
            .iter()
            .all(|t| t.category() == Category::Cardinal));
        assert!(s.tags[..4].iter().all(|t| *t == Tag::O));

        let t = Template::parse("今天气温#HYPHEN_SUBZERO#20℃").unwrap();
        let s = t.instantiate(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(s.text(), "今天气温-20℃");
        let labels: Vec<String> = s.tags.iter().map(|t| t.to_string()).collect();
        assert_eq!(
            labels,
            [
                "O",
                "O",
                "O",
                "O",
                "S-HYPHEN_SUBZERO",
                "B-CARDINAL",
                "E-CARDINAL",
                "S-MEASURE_UNIT"
            ]
        );

        let t = Template::parse("气温{HYPHEN_SUBZERO=-}20{MEASURE_UNIT=℃}").unwrap();
        let s = t.instantiate(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(s.tags[2].to_string(), "S-HYPHEN_SUBZERO");
        assert!(Template::parse("#BOGUS#x").is_err());
        assert!(Template::parse("x#DIGIT#").is_err());
        assert!(Template::parse("x#COLON_HOUR").is_err());
        assert!(Template::parse("{nope}").is_err());
        assert!(Template::parse("{BOGUS=x}").is_err());
    }

    #[test]
    fn synthesis_determinism_and_validity() {
        let t = default_templates();
        assert!(synthesize_corpus(0, 1, &t).is_empty());
        let a = synthesize_corpus(200, 7, &t);
        assert_eq!(a, synthesize_corpus(200, 7, &t));
        assert_ne!(a, synthesize_corpus(200, 8, &t));
        assert!(a.categories().len() >= 10);
        assert_eq!(parse_corpus(&save_corpus(&a)).unwrap(), a);
    }

    #[test]
    fn perfect_predictions() {
        let c = synthesize_corpus(50, 2, &default_templates());
        let gold: Vec<Vec<Tag>> = c.sentences.iter().map(|s| s.tags.clone()).collect();
        let r = evaluate(&gold, &gold).unwrap();
        assert_eq!(r.token_accuracy, 1.0);
        assert!(r.per_category.values().all(|s| s.f1 == 1.0));
    }

    #[test]
    fn all_o_predictions_have_zero_recall() {
        let c = synthesize_corpus(50, 2, &default_templates());
        let gold: Vec<Vec<Tag>> = c.sentences.iter().map(|s| s.tags.clone()).collect();
        let pred: Vec<Vec<Tag>> = gold.iter().map(|g| vec![Tag::O; g.len()]).collect();
        let r = evaluate(&pred, &gold).unwrap();
        assert!(r.per_category.values().all(|s| s.recall == 0.0));
    }

    #[test]
    fn hand_counted_boundary_error() {
        // gold spans: DIGIT(1,4), PUNC(5,5) | CARDINAL(0,1)
        // predicted:  DIGIT(1,3) wrong boundary, PUNC(5,5) | CARDINAL(0,1)
        let gold = vec![
            tags("O B-DIGIT M-DIGIT M-DIGIT E-DIGIT S-PUNC"),
            tags("B-CARDINAL E-CARDINAL O"),
        ];
        let pred = vec![
            tags("O B-DIGIT M-DIGIT E-DIGIT O S-PUNC"),
            tags("B-CARDINAL E-CARDINAL O"),
        ];
        let r = evaluate(&pred, &gold).unwrap();
        // tp=2 fp=1 fn=1 -> P=R=F1=2/3
        assert!((r.micro.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_category["DIGIT"].f1, 0.0);
        assert_eq!(r.per_category["PUNC"].f1, 1.0);
        assert!((r.token_accuracy - 7.0 / 9.0).abs() < 1e-12);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.sentence_accuracy, 0.5);
        let swapped = evaluate(&gold, &pred).unwrap();
        assert_eq!(swapped.token_accuracy, r.token_accuracy);
    }

    #[test]
    fn misaligned_rejected() {
        assert!(evaluate(&[tags("O O")], &[tags("O")]).is_err());
        assert!(evaluate(&[], &[tags("O")]).is_err());
    }
}
