//! Token embeddings: a character lookup table plus span pooling.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lattice::FlatLattice;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("vector file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("failed to read vector file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(format!(
                "unknown pooling mode {other:?} (expected mean or max)"
            )),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

/// Row 0 is the unknown-character vector; row `i + 1` belongs to `chars[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    chars: Vec<char>,
    vocab: HashMap<char, usize>,
    vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub const UNK_INDEX: usize = 0;

    /// Uniform initialization in [-0.1, 0.1]. Characters are deduplicated and
    /// sorted so the row layout does not depend on input order.
    pub fn random(chars: impl IntoIterator<Item = char>, d_model: usize, seed: u64) -> Self {
        let chars: Vec<char> = chars
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors =
            Array2::from_shape_fn((chars.len() + 1, d_model), |_| rng.gen_range(-0.1..=0.1));
        Self::from_parts(chars, vectors)
    }

    /// `vectors` must have `chars.len() + 1` rows, the first being UNK.
    pub fn from_parts(chars: Vec<char>, vectors: Array2<f64>) -> Self {
        assert_eq!(
            vectors.nrows(),
            chars.len() + 1,
            "one row per character plus UNK"
        );
        let vocab = chars.iter().enumerate().map(|(i, c)| (*c, i + 1)).collect();
        EmbeddingTable {
            chars,
            vocab,
            vectors,
        }
    }

    /// Reads `char<TAB>v1 v2 ...` lines. The UNK row is the mean of all rows.
    pub fn load_pretrained(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_pretrained(&text)
    }

    pub fn parse_pretrained(text: &str) -> Result<Self, EmbeddingError> {
        let mut chars = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| EmbeddingError::Format {
                line: i + 1,
                reason,
            };
            let (c, values) = line
                .split_once('\t')
                .ok_or_else(|| err("expected char<TAB>values".into()))?;
            let mut it = c.chars();
            let ch = match (it.next(), it.next()) {
                (Some(ch), None) => ch,
                _ => return Err(err(format!("{c:?} is not a single character"))),
            };
            let row: Vec<f64> = values
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| err(format!("bad value {v:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(err(format!(
                        "expected {} values, found {}",
                        first.len(),
                        row.len()
                    )));
                }
            } else if row.is_empty() {
                return Err(err("no values".into()));
            }
            if chars.contains(&ch) {
                return Err(err(format!("duplicate character {ch:?}")));
            }
            chars.push(ch);
            rows.push(row);
        }
        let d = rows.first().map_or(0, Vec::len);
        let mut vectors = Array2::zeros((rows.len() + 1, d));
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                vectors[[i + 1, j]] = *v;
            }
        }
        if !rows.is_empty() {
            let mean = vectors
                .slice(ndarray::s![1.., ..])
                .mean_axis(ndarray::Axis(0))
                .unwrap();
            vectors.row_mut(0).assign(&mean);
        }
        Ok(Self::from_parts(chars, vectors))
    }

    pub fn d_model(&self) -> usize {
        self.vectors.ncols()
    }

    /// Row count V, including UNK.
    pub fn rows(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index(&self, c: char) -> usize {
        self.vocab.get(&c).copied().unwrap_or(Self::UNK_INDEX)
    }

    pub fn contains(&self, c: char) -> bool {
        self.vocab.contains_key(&c)
    }

    pub fn vector(&self, c: char) -> ArrayView1<'_, f64> {
        self.vectors.row(self.index(c))
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Array2<f64> {
        &mut self.vectors
    }
}

/// L' x d_model token embeddings: table rows for characters, pooled
/// constituent rows for span tokens.
pub fn embed_lattice(
    lattice: &FlatLattice,
    table: &EmbeddingTable,
    pooling: Pooling,
) -> Array2<f64> {
    let d = table.d_model();
    let rows: Vec<usize> = lattice.chars().iter().map(|c| table.index(*c)).collect();
    let mut out = Array2::zeros((lattice.len(), d));
    for (i, tok) in lattice.tokens().iter().enumerate() {
        let members = &rows[tok.head..=tok.tail];
        let mut row = out.row_mut(i);
        match pooling {
            Pooling::Mean => {
                for &r in members {
                    row += &table.vectors.row(r);
                }
                row /= members.len() as f64;
            }
            Pooling::Max => {
                row.assign(&table.vectors.row(members[0]));
                for &r in &members[1..] {
                    row.zip_mut_with(&table.vectors.row(r), |a, b| *a = a.max(*b));
                }
            }
        }
    }
    out
}

/// Scatters `d_embedded` (L' x d_model) back onto table rows.
pub fn accumulate_table_grad(
    lattice: &FlatLattice,
    table: &EmbeddingTable,
    pooling: Pooling,
    d_embedded: &Array2<f64>,
    grad: &mut Array2<f64>,
) {
    let rows: Vec<usize> = lattice.chars().iter().map(|c| table.index(*c)).collect();
    for (i, tok) in lattice.tokens().iter().enumerate() {
        let members = &rows[tok.head..=tok.tail];
        let g = d_embedded.row(i);
        match pooling {
            Pooling::Mean => {
                let scale = 1.0 / members.len() as f64;
                for &r in members {
                    grad.row_mut(r).scaled_add(scale, &g);
                }
            }
            Pooling::Max => {
                for k in 0..g.len() {
                    let mut best = members[0];
                    for &r in &members[1..] {
                        if table.vectors[[r, k]] > table.vectors[[best, k]] {
                            best = r;
                        }
                    }
                    grad[[best, k]] += g[k];
                }
            }
        }
    }
}
