//! Pruning problem data model, problem-file IO and synthetic generation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PROBLEM_FILE_VERSION: u32 = 1;

const SIMILARITY_TOL: f64 = 1e-6;

/// Statistics for one prunable filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub id: usize,
    pub layer: usize,
    pub param_count: u64,
    #[serde(rename = "l1")]
    pub l1_score: f64,
    #[serde(rename = "taylor")]
    pub taylor_score: f64,
    #[serde(rename = "fisher_w", default, skip_serializing_if = "Option::is_none")]
    pub fisher_w_score: Option<f64>,
    #[serde(rename = "fisher_c", default, skip_serializing_if = "Option::is_none")]
    pub fisher_c_score: Option<f64>,
}

/// Activation correlation between the filters of one layer, rows in ascending filter id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBlock {
    pub layer: usize,
    pub matrix: Vec<Vec<f64>>,
}

impl SimilarityBlock {
    pub fn dim(&self) -> usize {
        self.matrix.len()
    }

    /// Checks symmetry, unit diagonal and the `[-1, 1]` range.
    pub fn validate(&self) -> Result<()> {
        let m = self.dim();
        for (i, row) in self.matrix.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Validation(format!(
                    "similarity[layer {}] row {i} has {} entries, expected {m}",
                    self.layer,
                    row.len()
                )));
            }
            for (j, &s) in row.iter().enumerate() {
                if !s.is_finite() || s.abs() > 1.0 + 1e-9 {
                    return Err(Error::Validation(format!(
                        "similarity[layer {}][{i}][{j}] = {s} outside [-1, 1]",
                        self.layer
                    )));
                }
                if (s - self.matrix[j][i]).abs() > SIMILARITY_TOL {
                    return Err(Error::Validation(format!(
                        "similarity[layer {}] not symmetric at ({i}, {j})",
                        self.layer
                    )));
                }
            }
            if (row[i] - 1.0).abs() > SIMILARITY_TOL {
                return Err(Error::Validation(format!(
                    "similarity[layer {}][{i}][{i}] = {} is not 1",
                    self.layer, row[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProblemFile {
    version: u32,
    filters: Vec<FilterRecord>,
    #[serde(default)]
    similarity: Vec<SimilarityBlock>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// All per-filter inputs of one pruning instance. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningProblem {
    filters: Vec<FilterRecord>,
    similarity: Vec<SimilarityBlock>,
    metadata: BTreeMap<String, String>,
    layers: BTreeMap<usize, Vec<usize>>,
}

impl PruningProblem {
    pub fn new(
        filters: Vec<FilterRecord>,
        similarity: Vec<SimilarityBlock>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let layers = validate(&filters, &similarity)?;
        Ok(Self {
            filters,
            similarity,
            metadata,
            layers,
        })
    }

    pub fn n(&self) -> usize {
        self.filters.len()
    }

    pub fn filters(&self) -> &[FilterRecord] {
        &self.filters
    }

    pub fn similarity(&self) -> &[SimilarityBlock] {
        &self.similarity
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Filter ids of every layer, ascending.
    pub fn layers(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.layers
    }

    pub fn similarity_for(&self, layer: usize) -> Option<&SimilarityBlock> {
        self.similarity.iter().find(|b| b.layer == layer)
    }

    pub fn param_counts(&self) -> Vec<f64> {
        self.filters.iter().map(|f| f.param_count as f64).collect()
    }

    pub fn l1_scores(&self) -> Vec<f64> {
        self.filters.iter().map(|f| f.l1_score).collect()
    }

    pub fn taylor_scores(&self) -> Vec<f64> {
        self.filters.iter().map(|f| f.taylor_score).collect()
    }

    pub fn fisher_w_scores(&self) -> Option<Vec<f64>> {
        self.filters.iter().map(|f| f.fisher_w_score).collect()
    }

    pub fn fisher_c_scores(&self) -> Option<Vec<f64>> {
        self.filters.iter().map(|f| f.fisher_c_score).collect()
    }

    pub fn to_json_string(&self) -> String {
        let file = ProblemFile {
            version: PROBLEM_FILE_VERSION,
            filters: self.filters.clone(),
            similarity: self.similarity.clone(),
            metadata: self.metadata.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("problem serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        if file.version != PROBLEM_FILE_VERSION {
            return Err(Error::Validation(format!(
                "version: unsupported problem-file version {}",
                file.version
            )));
        }
        Self::new(file.filters, file.similarity, file.metadata)
    }
}

fn validate(
    filters: &[FilterRecord],
    similarity: &[SimilarityBlock],
) -> Result<BTreeMap<usize, Vec<usize>>> {
    if filters.len() < 2 {
        return Err(Error::Validation(format!(
            "filters: need at least 2 filters, got {}",
            filters.len()
        )));
    }
    let mut seen = HashMap::with_capacity(filters.len());
    for (pos, f) in filters.iter().enumerate() {
        if let Some(prev) = seen.insert(f.id, pos) {
            return Err(Error::Validation(format!(
                "filters[{pos}].id: duplicate filter id {} (first at filters[{prev}])",
                f.id
            )));
        }
    }
    for (pos, f) in filters.iter().enumerate() {
        if f.id != pos {
            return Err(Error::Validation(format!(
                "filters[{pos}].id: expected id {pos}, got {} (ids must be 0..N-1 ascending)",
                f.id
            )));
        }
        if f.param_count < 1 {
            return Err(Error::Validation(format!(
                "filters[{pos}].param_count must be >= 1"
            )));
        }
        let scores = [
            ("l1", Some(f.l1_score)),
            ("taylor", Some(f.taylor_score)),
            ("fisher_w", f.fisher_w_score),
            ("fisher_c", f.fisher_c_score),
        ];
        for (name, value) in scores {
            if let Some(v) = value {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Validation(format!(
                        "filters[{pos}].{name} = {v} must be finite and >= 0"
                    )));
                }
            }
        }
    }

    let mut layers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for f in filters {
        layers.entry(f.layer).or_default().push(f.id);
    }

    let mut covered = HashMap::new();
    for (b, block) in similarity.iter().enumerate() {
        if covered.insert(block.layer, b).is_some() {
            return Err(Error::Validation(format!(
                "similarity[{b}].layer: layer {} has more than one block",
                block.layer
            )));
        }
        let members = layers.get(&block.layer).map_or(0, Vec::len);
        if members == 0 {
            return Err(Error::Validation(format!(
                "similarity[{b}].layer: layer {} has no filters",
                block.layer
            )));
        }
        if block.dim() != members {
            return Err(Error::Validation(format!(
                "similarity[{b}].matrix: dimension {} but layer {} has {members} filters",
                block.dim(),
                block.layer
            )));
        }
        block.validate()?;
    }
    Ok(layers)
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<PruningProblem> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PruningProblem::from_json_str(&text, path)
}

pub fn save_problem(problem: &PruningProblem, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, problem.to_json_string()).map_err(|e| Error::io(path, e))
}

/// Generates a reproducible synthetic problem.
///
/// Filters are split into contiguous layers; each layer draws an input width
/// and kernel size, so parameter counts are constant within a layer. Similarity
/// blocks are normalized Gram matrices of random response vectors.
pub fn synth_problem(n_filters: usize, n_layers: usize, seed: u64) -> Result<PruningProblem> {
    if n_filters < 2 {
        return Err(Error::Argument(format!(
            "n_filters must be >= 2, got {n_filters}"
        )));
    }
    if n_layers < 1 || n_layers > n_filters {
        return Err(Error::Argument(format!(
            "need 1 <= n_layers <= n_filters, got n_layers = {n_layers}, n_filters = {n_filters}"
        )));
    }
    let mut rng = rng::stream(seed, "synth-problem", 0);
    let l1_dist = LogNormal::new(-1.0, 0.5).unwrap();
    let taylor_dist = LogNormal::new(-3.0, 1.0).unwrap();
    let fisher_w_dist = LogNormal::new(-5.0, 1.0).unwrap();
    let fisher_c_dist = LogNormal::new(-4.0, 1.0).unwrap();

    let base = n_filters / n_layers;
    let extra = n_filters % n_layers;
    let mut filters = Vec::with_capacity(n_filters);
    let mut similarity = Vec::with_capacity(n_layers);
    let mut widths = [4u64, 8, 16, 32, 64];
    for layer in 0..n_layers {
        let size = base + usize::from(layer < extra);
        widths.shuffle(&mut rng);
        let c_in = widths[0];
        let kernel: u64 = if rng.random_bool(0.5) { 3 } else { 1 };
        let param_count = c_in * kernel * kernel;
        for _ in 0..size {
            let id = filters.len();
            let pc = param_count as f64;
            filters.push(FilterRecord {
                id,
                layer,
                param_count,
                l1_score: l1_dist.sample(&mut rng),
                taylor_score: pc * taylor_dist.sample(&mut rng),
                fisher_w_score: Some(pc * fisher_w_dist.sample(&mut rng)),
                fisher_c_score: Some(fisher_c_dist.sample(&mut rng)),
            });
        }
        similarity.push(SimilarityBlock {
            layer,
            matrix: random_correlation(size, &mut rng),
        });
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".to_string(), "synth_problem".to_string());
    metadata.insert("seed".to_string(), seed.to_string());
    PruningProblem::new(filters, similarity, metadata)
}

fn random_correlation(m: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let dim = m.max(4) + 4;
    let shared: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let vectors: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let w: f64 = rng.random_range(0.0..1.5);
            let v: Vec<f64> = shared
                .iter()
                .map(|s| w * s + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut s = vec![vec![0.0; m]; m];
    for i in 0..m {
        s[i][i] = 1.0;
        for j in i + 1..m {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let dot = dot.clamp(-1.0, 1.0);
            s[i][j] = dot;
            s[j][i] = dot;
        }
    }
    s
}

/// Binary pruning vector; `1` marks a pruned filter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PruningMask {
    bits: Vec<u8>,
}

impl PruningMask {
    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![0; n] }
    }

    pub fn ones(n: usize) -> Self {
        Self { bits: vec![1; n] }
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::Validation(format!(
                "mask bit {pos} = {} is not 0 or 1",
                bits[pos]
            )));
        }
        Ok(Self { bits })
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self {
            bits: bits.iter().map(|&b| u8::from(b)).collect(),
        }
    }

    /// Parses a string of `0`/`1` characters.
    pub fn parse(text: &str) -> Result<Self> {
        let bits = text
            .trim()
            .chars()
            .enumerate()
            .map(|(i, c)| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Validation(format!(
                    "mask character {i} is {other:?}, expected 0 or 1"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.bits[i] = u8::from(value);
    }

    pub fn flip(&mut self, i: usize) {
        self.bits[i] ^= 1;
    }

    pub fn flipped(&self, i: usize) -> Self {
        let mut m = self.clone();
        m.flip(i);
        m
    }

    pub fn cardinality(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn pruned_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
    }

    pub fn hamming(&self, other: &PruningMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }
}

impl fmt::Display for PruningMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl Serialize for PruningMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PruningMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PruningMask::parse(&s).map_err(serde::de::Error::custom)
    }
}

pub fn cardinality(mask: &PruningMask) -> usize {
    mask.cardinality()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filter(id: usize, layer: usize) -> FilterRecord {
        FilterRecord {
            id,
            layer,
            param_count: 9,
            l1_score: 0.5,
            taylor_score: 1.0,
            fisher_w_score: None,
            fisher_c_score: None,
        }
    }

    #[test]
    fn minimal_problem_parses() {
        let text = r#"{"version":1,"filters":[
            {"id":0,"layer":0,"param_count":3,"l1":0.5,"taylor":1e-3},
            {"id":1,"layer":0,"param_count":3,"l1":2.5E-1,"taylor":0}
        ],"similarity":[],"metadata":{}}"#;
        let p = PruningProblem::from_json_str(text, Path::new("mem")).unwrap();
        assert_eq!(p.n(), 2);
        assert_eq!(p.filters()[0].taylor_score, 1e-3);
        assert_eq!(p.filters()[1].l1_score, 0.25);
    }

    #[test]
    fn duplicate_id_is_named() {
        let err = PruningProblem::new(
            vec![filter(0, 0), filter(1, 0), filter(1, 0)],
            vec![],
            BTreeMap::new(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("duplicate filter id 1"), "{msg}");
    }

    #[test]
    fn rejects_gaps_and_tiny_problems() {
        assert!(PruningProblem::new(vec![filter(0, 0)], vec![], BTreeMap::new()).is_err());
        let err = PruningProblem::new(vec![filter(0, 0), filter(2, 0)], vec![], BTreeMap::new())
            .unwrap_err();
        assert!(err.to_string().contains("filters[1].id"));
    }

    #[test]
    fn rejects_bad_scores_and_counts() {
        let mut f = filter(1, 0);
        f.taylor_score = -1.0;
        let err = PruningProblem::new(vec![filter(0, 0), f], vec![], BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("filters[1].taylor"));

        let mut f = filter(1, 0);
        f.param_count = 0;
        let err = PruningProblem::new(vec![filter(0, 0), f], vec![], BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("param_count"));

        let mut f = filter(1, 0);
        f.fisher_w_score = Some(f64::NAN);
        assert!(PruningProblem::new(vec![filter(0, 0), f], vec![], BTreeMap::new()).is_err());
    }

    #[test]
    fn rejects_bad_similarity() {
        let filters = vec![filter(0, 0), filter(1, 0)];
        let cases = [
            vec![vec![1.0, 0.3], vec![0.2, 1.0]],
            vec![vec![0.9, 0.3], vec![0.3, 1.0]],
            vec![vec![1.0, 1.5], vec![1.5, 1.0]],
            vec![vec![1.0]],
        ];
        for m in cases {
            let block = SimilarityBlock {
                layer: 0,
                matrix: m,
            };
            assert!(PruningProblem::new(filters.clone(), vec![block], BTreeMap::new()).is_err());
        }
        let dup = SimilarityBlock {
            layer: 0,
            matrix: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        assert!(PruningProblem::new(filters, vec![dup.clone(), dup], BTreeMap::new()).is_err());
    }

    #[test]
    fn malformed_text_is_parse_error() {
        let err = PruningProblem::from_json_str("{\"version\":1,", Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let err = PruningProblem::from_json_str(
            r#"{"version":1,"filters":[{"id":0,"layer":0,"param_count":-3,"l1":1,"taylor":1}]}"#,
            Path::new("x"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn synth_two_filters() {
        let p = synth_problem(2, 1, 0).unwrap();
        let s = &p.similarity()[0].matrix;
        assert_eq!(s.len(), 2);
        assert_eq!(s[0][1], s[1][0]);
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(
            synth_problem(16, 4, 7).unwrap(),
            synth_problem(16, 4, 7).unwrap()
        );
        assert_ne!(
            synth_problem(16, 4, 7).unwrap(),
            synth_problem(16, 4, 8).unwrap()
        );
    }

    #[test]
    fn synth_rejects_bad_arguments() {
        assert!(matches!(synth_problem(1, 1, 0), Err(Error::Argument(_))));
        assert!(matches!(synth_problem(4, 5, 0), Err(Error::Argument(_))));
        assert!(matches!(synth_problem(4, 0, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn cardinality_counts_ones() {
        assert_eq!(cardinality(&PruningMask::zeros(8)), 0);
        assert_eq!(cardinality(&PruningMask::ones(8)), 8);
        assert_eq!(
            cardinality(&PruningMask::from_bits(vec![1, 0, 1, 1, 0]).unwrap()),
            3
        );
    }

    #[test]
    fn mask_text_round_trip() {
        let m = PruningMask::parse("0110").unwrap();
        assert_eq!(m.to_string(), "0110");
        assert!(PruningMask::parse("01x").is_err());
        assert!(PruningMask::from_bits(vec![0, 2]).is_err());
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, "\"0110\"");
        assert_eq!(serde_json::from_str::<PruningMask>(&json).unwrap(), m);
    }
}
