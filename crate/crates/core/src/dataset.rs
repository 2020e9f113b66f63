//! The sample container shared by every module, plus CSV and binary
//! serialization.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic  b"ILABDS01"
//! n, d, C                       u64 each
//! features                      n*d f64, row-major
//! labels                        n u32
//! graph kind                    u8 (0 none, 1 undirected, 2 directed)
//! edge count                    u64 (only if graph kind != 0)
//! edges                         pairs of u32
//! ```
//!
//! CSV files carry `#`-prefixed metadata lines (schema, class count, graph
//! kind, one `#edge=a,b` line per edge) followed by a header and one row per
//! sample: features, then the label.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{estimate_class_stats, ClassStats, CovarianceMode, DenseMatrix};

pub const BINARY_MAGIC: &[u8; 8] = b"ILABDS01";
pub const CSV_SCHEMA: &str = "imbalance-lab/dataset/v1";

/// Edge list over sample indices. In a directed graph `(a, b)` means `b` is
/// in the neighborhood of `a`; undirected edges count for both endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    pub edges: Vec<(usize, usize)>,
    pub directed: bool,
}

impl Graph {
    /// Neighbor lists for `n` nodes.
    pub fn neighbors(&self, n: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            out[a].push(b);
            if !self.directed {
                out[b].push(a);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub graph: Option<Graph>,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            n_classes,
            graph: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_graph(mut self, graph: Graph) -> Result<Self> {
        self.graph = Some(graph);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.features.rows() {
            return Err(Error::DimensionMismatch {
                expected: self.features.rows(),
                found: self.labels.len(),
            });
        }
        if let Some(&label) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.n_classes,
            });
        }
        if let Some(g) = &self.graph {
            let n = self.len();
            if let Some(&(a, b)) = g.edges.iter().find(|&&(a, b)| a >= n || b >= n) {
                return Err(Error::invalid(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn class_stats(&self, mode: CovarianceMode) -> Result<Vec<ClassStats>> {
        estimate_class_stats(&self.features, &self.labels, self.n_classes, mode)
    }

    /// Rows at `indices`, in that order. The graph is dropped.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut features = DenseMatrix::zeros(indices.len(), d);
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            features.row_mut(r).copy_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            labels,
            n_classes: self.n_classes,
            graph: None,
        }
    }

    /// Indices of each class, in sample order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Writes CSV for a `.csv` extension, binary otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        if is_csv(path) {
            self.write_csv(BufWriter::new(File::create(path)?))
        } else {
            self.write_binary(BufWriter::new(File::create(path)?))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if is_csv(path) {
            Self::read_csv(BufReader::new(File::open(path)?))
        } else {
            Self::read_binary(BufReader::new(File::open(path)?))
        }
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        for v in [self.len(), self.dim(), self.n_classes] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &y in &self.labels {
            w.write_all(&(y as u32).to_le_bytes())?;
        }
        match &self.graph {
            None => w.write_all(&[0])?,
            Some(g) => {
                w.write_all(&[if g.directed { 2 } else { 1 }])?;
                w.write_all(&(g.edges.len() as u64).to_le_bytes())?;
                for &(a, b) in &g.edges {
                    w.write_all(&(a as u32).to_le_bytes())?;
                    w.write_all(&(b as u32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let n = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let n_classes = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(n.saturating_mul(d).min(1 << 24));
        let mut buf8 = [0u8; 8];
        for _ in 0..n * d {
            r.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        let mut labels = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            labels.push(read_u32(&mut r)? as usize);
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let graph = match kind[0] {
            0 => None,
            k @ (1 | 2) => {
                let m = read_u64(&mut r)? as usize;
                let mut edges = Vec::with_capacity(m.min(1 << 24));
                for _ in 0..m {
                    let a = read_u32(&mut r)? as usize;
                    let b = read_u32(&mut r)? as usize;
                    edges.push((a, b));
                }
                Some(Graph {
                    edges,
                    directed: k == 2,
                })
            }
            k => return Err(Error::Format(format!("unknown graph kind {k}"))),
        };
        let ds = Self {
            features: DenseMatrix::from_vec(n, d, data)?,
            labels,
            n_classes,
            graph,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# schema={CSV_SCHEMA}")?;
        writeln!(w, "# n_classes={}", self.n_classes)?;
        if let Some(g) = &self.graph {
            writeln!(
                w,
                "# graph={}",
                if g.directed { "directed" } else { "undirected" }
            )?;
            for &(a, b) in &g.edges {
                writeln!(w, "#edge={a},{b}")?;
            }
        }
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        out.write_record(&header)?;
        let mut record = Vec::with_capacity(self.dim() + 1);
        for (row, &y) in self.features.iter_rows().zip(&self.labels) {
            record.clear();
            // `{:?}` prints the shortest string that round-trips exactly
            record.extend(row.iter().map(|v| format!("{v:?}")));
            record.push(y.to_string());
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut text = String::new();
        BufReader::new(r).read_to_string(&mut text)?;

        let mut n_classes = None;
        let mut directed = None;
        let mut edges = Vec::new();
        for line in text.as_bytes().lines() {
            let line = line?;
            let Some(meta) = line.strip_prefix('#') else {
                continue;
            };
            let meta = meta.trim();
            if let Some(v) = meta.strip_prefix("n_classes=") {
                n_classes = Some(parse_usize(v)?);
            } else if let Some(v) = meta.strip_prefix("graph=") {
                directed = Some(v == "directed");
            } else if let Some(v) = meta.strip_prefix("edge=") {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Format(format!("bad edge line `{line}`")))?;
                edges.push((parse_usize(a)?, parse_usize(b)?));
            }
        }

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let d = reader
            .headers()?
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Format("missing label column".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != d + 1 {
                return Err(Error::DimensionMismatch {
                    expected: d + 1,
                    found: record.len(),
                });
            }
            for field in record.iter().take(d) {
                data.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad feature `{field}`: {e}")))?,
                );
            }
            labels.push(parse_usize(&record[d])?);
        }
        let n_classes = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let n = labels.len();
        let ds = Self {
            features: DenseMatrix::from_vec(n, d, data)?,
            labels,
            n_classes,
            graph: directed.map(|directed| Graph { edges, directed }),
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|e| Error::Format(format!("bad integer `{s}`: {e}")))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
