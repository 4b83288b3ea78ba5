//! Semantic units, task requests, one-hot request encoding and transmission bookkeeping.
//!
//! A semantic unit is one independently extractable piece of the source description.
//! Its meaning is a fixed offset vector in the world space; the unit table of a world
//! holds `K_max` units with mutually orthogonal offsets, so the contribution of each
//! unit to a generated sample can be read off by projection.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath::{axpy, norm, random_orthonormal};

/// Semantic attribute of a unit. The discriminant order is the one-hot column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    Noun,
    Verb,
    Adjective,
    Style,
    Others,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Noun,
        Category::Verb,
        Category::Adjective,
        Category::Style,
        Category::Others,
    ];

    /// Column of this category in the one-hot request encoding.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Offset norm of a unit of this category, before the world scale is applied.
    pub fn base_magnitude(self) -> f64 {
        match self {
            Category::Noun => 3.0,
            Category::Verb => 2.0,
            Category::Adjective | Category::Style => 1.2,
            Category::Others => 0.4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Noun => "NOUN",
            Category::Verb => "VERB",
            Category::Adjective => "ADJECTIVE",
            Category::Style => "STYLE",
            Category::Others => "OTHERS",
        }
    }
}

#[derive(Deserialize)]
struct RawUnit {
    id: usize,
    category: Category,
    offset: Vec<f64>,
}

/// One transmittable condition element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawUnit")]
pub struct SemanticUnit {
    pub id: usize,
    pub category: Category,
    pub offset: Vec<f64>,
    /// Euclidean norm of `offset`.
    #[serde(skip)]
    pub magnitude_class: f64,
}

impl TryFrom<RawUnit> for SemanticUnit {
    type Error = Error;

    fn try_from(raw: RawUnit) -> Result<Self> {
        SemanticUnit::new(raw.id, raw.category, raw.offset)
    }
}

impl SemanticUnit {
    pub fn new(id: usize, category: Category, offset: Vec<f64>) -> Result<Self> {
        if offset.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidUnit(format!("unit {id} has a non-finite offset")));
        }
        let magnitude_class = norm(&offset);
        if magnitude_class <= 0.0 {
            return Err(Error::InvalidUnit(format!("unit {id} has a zero offset")));
        }
        Ok(Self {
            id,
            category,
            offset,
            magnitude_class,
        })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }
}

/// Parameters for generating a unit table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub dim: usize,
    pub n_e: usize,
    /// Category of every slot of the table; its length is `K_max`.
    pub categories: Vec<Category>,
    /// Multiplier applied to every category magnitude.
    pub world_scale: f64,
}

impl Default for TableConfig {
    fn default() -> Self {
        use Category::*;
        Self {
            dim: 16,
            n_e: 5,
            categories: vec![Noun, Noun, Verb, Adjective, Adjective, Style, Others, Others],
            world_scale: 48.0,
        }
    }
}

/// The world's unit table; this is the world definition exchanged as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitTable {
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "K_max")]
    pub k_max: usize,
    #[serde(rename = "N_e")]
    pub n_e: usize,
    pub units: Vec<SemanticUnit>,
}

impl UnitTable {
    /// Deterministic table from a 64-bit seed: unit `k` gets offset
    /// `world_scale * base_magnitude(category_k) * u_k` for a seeded orthonormal set `u`.
    pub fn generate(seed: u64, cfg: &TableConfig) -> Result<Self> {
        let k_max = cfg.categories.len();
        if k_max == 0 || k_max > cfg.dim {
            return Err(Error::ConfigInvalid(format!(
                "need 1 <= K_max <= D, got K_max={k_max}, D={}",
                cfg.dim
            )));
        }
        if cfg.n_e < Category::ALL.len() {
            return Err(Error::ConfigInvalid(format!(
                "one-hot width {} cannot hold {} categories",
                cfg.n_e,
                Category::ALL.len()
            )));
        }
        if !(cfg.world_scale > 0.0) {
            return Err(Error::ConfigInvalid("world_scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs = random_orthonormal(cfg.dim, k_max, &mut rng);
        let units = cfg
            .categories
            .iter()
            .zip(dirs)
            .enumerate()
            .map(|(id, (&cat, dir))| {
                let m = cfg.world_scale * cat.base_magnitude();
                SemanticUnit::new(id, cat, dir.into_iter().map(|x| x * m).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let table = Self {
            dim: cfg.dim,
            k_max,
            n_e: cfg.n_e,
            units,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.len() != self.k_max {
            return Err(Error::ConfigInvalid(format!(
                "table holds {} units but K_max is {}",
                self.units.len(),
                self.k_max
            )));
        }
        for (k, u) in self.units.iter().enumerate() {
            if u.id != k {
                return Err(Error::ConfigInvalid(format!("unit at position {k} has id {}", u.id)));
            }
            if u.dim() != self.dim {
                return Err(Error::ConfigInvalid(format!(
                    "unit {k} has dimension {}, expected {}",
                    u.dim(),
                    self.dim
                )));
            }
            if u.category.index() >= self.n_e {
                return Err(Error::ConfigInvalid(format!("unit {k} category outside one-hot width")));
            }
        }
        Ok(())
    }

    pub fn unit(&self, id: usize) -> &SemanticUnit {
        &self.units[id]
    }

    /// Sum of the offsets of the given unit ids; the zero vector for an empty set.
    pub fn embedding_of<'a>(&self, ids: impl IntoIterator<Item = &'a usize>) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for &id in ids {
            axpy(&mut acc, 1.0, &self.units[id].offset);
        }
        acc
    }

    /// Largest offset norm in the table.
    pub fn max_magnitude(&self) -> f64 {
        self.units.iter().map(|u| u.magnitude_class).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }
}

/// The receiver's requested unit set. Slot `k < units.len()` holds `units[k]`;
/// the remaining slots up to `k_max` are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub units: Vec<SemanticUnit>,
    pub k_max: usize,
    pub n_e: usize,
}

impl TaskRequest {
    pub fn new(units: Vec<SemanticUnit>, k_max: usize, n_e: usize) -> Result<Self> {
        if units.is_empty() || units.len() > k_max {
            return Err(Error::InvalidRequest(format!(
                "request must hold 1..={k_max} units, got {}",
                units.len()
            )));
        }
        let ids: BTreeSet<usize> = units.iter().map(|u| u.id).collect();
        if ids.len() != units.len() {
            return Err(Error::InvalidRequest("unit ids must be unique".into()));
        }
        if let Some(u) = units.iter().find(|u| u.category.index() >= n_e) {
            return Err(Error::InvalidRequest(format!("unit {} category outside one-hot width", u.id)));
        }
        Ok(Self { units, k_max, n_e })
    }

    /// Request for the given table ids, in the given slot order.
    pub fn from_ids(table: &UnitTable, ids: &[usize]) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= table.k_max) {
            return Err(Error::InvalidRequest(format!("unit id {bad} not in the table")));
        }
        Self::new(ids.iter().map(|&id| table.unit(id).clone()).collect(), table.k_max, table.n_e)
    }

    /// The full table as one request.
    pub fn full(table: &UnitTable) -> Self {
        let ids: Vec<usize> = (0..table.k_max).collect();
        Self::from_ids(table, &ids).expect("table ids are valid")
    }

    /// Uniformly random length in `min_len..=max_len`, then a uniformly random subset of
    /// the table of that size, placed in slots in ascending id order.
    pub fn sample<R: Rng>(table: &UnitTable, min_len: usize, max_len: usize, rng: &mut R) -> Result<Self> {
        let max_len = max_len.min(table.k_max);
        if min_len == 0 || min_len > max_len {
            return Err(Error::ConfigInvalid(format!(
                "request length range {min_len}..={max_len} is empty"
            )));
        }
        let len = rng.gen_range(min_len..=max_len);
        let mut ids: Vec<usize> = (0..table.k_max).collect();
        ids.shuffle(rng);
        ids.truncate(len);
        ids.sort_unstable();
        Self::from_ids(table, &ids)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn slot(&self, k: usize) -> Option<&SemanticUnit> {
        self.units.get(k)
    }

    pub fn ids(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.id).collect()
    }
}

/// Row-major `rows x cols` one-hot matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl OneHotMatrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_zero_row(&self, r: usize) -> bool {
        self.row(r).iter().all(|&x| x == 0.0)
    }
}

/// One-hot category matrix of shape `K_max x N_e`; empty slots are all-zero rows.
pub fn encode_request(req: &TaskRequest) -> OneHotMatrix {
    let mut data = vec![0.0; req.k_max * req.n_e];
    for (k, u) in req.units.iter().enumerate() {
        data[k * req.n_e + u.category.index()] = 1.0;
    }
    OneHotMatrix {
        rows: req.k_max,
        cols: req.n_e,
        data,
    }
}

/// Normalized sum of the unit offsets.
pub fn prompt_embedding<'a, I>(units: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a SemanticUnit>,
{
    let mut iter = units.into_iter().peekable();
    let first = iter.peek().ok_or(Error::EmptyPrompt)?;
    let mut acc = vec![0.0; first.dim()];
    for u in iter {
        axpy(&mut acc, 1.0, &u.offset);
    }
    let n = norm(&acc);
    if n < 1e-12 {
        return Err(Error::DegenerateSum(n));
    }
    acc.iter_mut().for_each(|x| *x /= n);
    Ok(acc)
}

/// Which request slots are still waiting for transmission, and when transmitted units arrived.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionState {
    /// `pending[k]` is true while slot `k` holds a unit that has not been transmitted.
    pub pending: Vec<bool>,
    /// Denoising step at which the unit in slot `k` reached the receiver. Units that were
    /// transmitted too late to be used carry the final step `M`.
    pub sent_at_step: Vec<Option<usize>>,
}

impl TransmissionState {
    pub fn new(req: &TaskRequest) -> Self {
        Self {
            pending: (0..req.k_max).map(|k| k < req.len()).collect(),
            sent_at_step: vec![None; req.k_max],
        }
    }

    /// Records that slot `k` was transmitted and arrives at `step`. Returns false (and
    /// changes nothing) when the slot is empty or was already transmitted.
    pub fn mark_sent(&mut self, k: usize, step: usize) -> bool {
        if !self.pending[k] {
            return false;
        }
        self.pending[k] = false;
        self.sent_at_step[k] = Some(step);
        true
    }

    pub fn pending_count(&self) -> usize {
        self.pending.iter().filter(|&&p| p).count()
    }

    pub fn indicator(&self) -> Vec<f64> {
        self.pending.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(dim: usize, i: usize, scale: f64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = scale;
        v
    }

    fn unit(id: usize, cat: Category, offset: Vec<f64>) -> SemanticUnit {
        SemanticUnit::new(id, cat, offset).unwrap()
    }

    #[test]
    fn single_noun_encodes_to_one_row() {
        let req = TaskRequest::new(vec![unit(0, Category::Noun, basis(4, 0, 1.0))], 3, 5).unwrap();
        let e = encode_request(&req);
        assert_eq!(e.row(0), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(e.row(1), &[0.0; 5]);
        assert_eq!(e.row(2), &[0.0; 5]);
    }

    #[test]
    fn each_filled_row_is_one_hot() {
        let req = TaskRequest::new(
            vec![
                unit(3, Category::Verb, basis(4, 0, 2.0)),
                unit(5, Category::Style, basis(4, 1, 1.2)),
            ],
            8,
            5,
        )
        .unwrap();
        let e = encode_request(&req);
        for r in 0..2 {
            assert_eq!(e.row(r).iter().sum::<f64>(), 1.0);
        }
        assert_eq!(e.row(0)[Category::Verb.index()], 1.0);
        assert_eq!(e.row(1)[Category::Style.index()], 1.0);
        for r in 2..8 {
            assert!(e.is_zero_row(r));
        }
    }

    #[test]
    fn embedding_examples() {
        let e1 = unit(0, Category::Noun, basis(3, 0, 1.0));
        let e2 = unit(1, Category::Noun, basis(3, 1, 1.0));
        assert_eq!(prompt_embedding([&e1]).unwrap(), vec![1.0, 0.0, 0.0]);
        let h = prompt_embedding([&e1, &e2]).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((h[0] - r).abs() < 1e-15 && (h[1] - r).abs() < 1e-15 && h[2] == 0.0);
        let neg = unit(2, Category::Noun, basis(3, 0, -1.0));
        assert!(matches!(prompt_embedding([&e1, &neg]), Err(Error::DegenerateSum(_))));
        assert!(matches!(prompt_embedding(std::iter::empty()), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn request_invariants_are_enforced() {
        let a = unit(0, Category::Noun, basis(2, 0, 1.0));
        assert!(TaskRequest::new(vec![], 3, 5).is_err());
        assert!(TaskRequest::new(vec![a.clone(), a.clone()], 3, 5).is_err());
        assert!(TaskRequest::new(vec![a.clone(); 4], 3, 5).is_err());
        assert!(SemanticUnit::new(1, Category::Noun, vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn generated_table_is_orthogonal_with_category_magnitudes() {
        let cfg = TableConfig::default();
        let t = UnitTable::generate(7, &cfg).unwrap();
        assert_eq!(t.k_max, 8);
        for (i, u) in t.units.iter().enumerate() {
            let expect = cfg.world_scale * u.category.base_magnitude();
            assert!((u.magnitude_class - expect).abs() < 1e-9);
            assert!((norm(&u.offset) - u.magnitude_class).abs() < 1e-9);
            for v in &t.units[i + 1..] {
                assert!(crate::vecmath::dot(&u.offset, &v.offset).abs() < 1e-8);
            }
        }
        assert_eq!(t, UnitTable::generate(7, &cfg).unwrap());
        assert_ne!(t, UnitTable::generate(8, &cfg).unwrap());
    }

    #[test]
    fn table_json_uses_documented_keys() {
        let t = UnitTable::generate(1, &TableConfig::default()).unwrap();
        let json = t.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["D", "K_max", "N_e", "units"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let u0 = &v["units"][0];
        assert!(u0.get("id").is_some() && u0.get("category").is_some() && u0.get("offset").is_some());
        assert_eq!(UnitTable::from_json(&json).unwrap(), t);
    }

    #[test]
    fn transmission_state_tracks_slots() {
        let t = UnitTable::generate(1, &TableConfig::default()).unwrap();
        let req = TaskRequest::from_ids(&t, &[1, 4, 6]).unwrap();
        let mut s = TransmissionState::new(&req);
        assert_eq!(s.indicator(), vec![1., 1., 1., 0., 0., 0., 0., 0.]);
        assert!(s.mark_sent(1, 10));
        assert!(!s.mark_sent(1, 20));
        assert!(!s.mark_sent(5, 20));
        assert_eq!(s.sent_at_step[1], Some(10));
        assert_eq!(s.pending_count(), 2);
    }
}
