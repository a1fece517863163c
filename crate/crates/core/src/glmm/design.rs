//! Model matrices: binary response, dense fixed-effects design and
//! random-intercept grouping factors.

use std::collections::BTreeMap;

use super::GlmmError;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingFactor {
    pub name: String,
    pub levels: Vec<String>,
    /// Level index of each observation.
    pub index: Vec<usize>,
}

impl GroupingFactor {
    /// Builds a factor from per-observation labels; levels are sorted.
    pub fn from_labels<S: AsRef<str>>(name: &str, labels: &[S]) -> Self {
        let mut levels: Vec<String> = labels.iter().map(|s| s.as_ref().to_string()).collect();
        levels.sort();
        levels.dedup();
        let lookup: BTreeMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let index = labels.iter().map(|s| lookup[s.as_ref()]).collect();
        Self { name: name.to_string(), levels, index }
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.levels.len()];
        for &i in &self.index {
            c[i] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub response: Vec<bool>,
    /// Row-major `n_obs x fixed_names.len()`.
    pub x: Vec<f64>,
    pub fixed_names: Vec<String>,
    pub factors: Vec<GroupingFactor>,
}

impl Design {
    pub fn new(
        response: Vec<bool>,
        x: Vec<f64>,
        fixed_names: Vec<String>,
        factors: Vec<GroupingFactor>,
    ) -> Result<Self, GlmmError> {
        let n = response.len();
        let p = fixed_names.len();
        if p == 0 || x.len() != n * p {
            return Err(GlmmError::InvalidDesign(format!("x has {} entries for {n} rows x {p} columns", x.len())));
        }
        if factors.is_empty() {
            return Err(GlmmError::InvalidDesign("at least one grouping factor is required".into()));
        }
        for f in &factors {
            if f.index.len() != n {
                return Err(GlmmError::InvalidDesign(format!(
                    "factor `{}` has {} entries for {n} rows",
                    f.name,
                    f.index.len()
                )));
            }
            if let Some(&bad) = f.index.iter().find(|&&i| i >= f.levels.len()) {
                return Err(GlmmError::InvalidDesign(format!("factor `{}` index {bad} out of range", f.name)));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GlmmError::InvalidDesign("non-finite fixed-effect value".into()));
        }
        Ok(Self { response, x, fixed_names, factors })
    }

    /// Intercept-only design with the given grouping factors.
    pub fn intercept_only(response: Vec<bool>, factors: Vec<GroupingFactor>) -> Result<Self, GlmmError> {
        let n = response.len();
        Self::new(response, vec![1.0; n], vec!["(Intercept)".into()], factors)
    }

    pub fn n_obs(&self) -> usize {
        self.response.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_fixed();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    /// Copy with every observation of `level` in factor `factor` removed.
    /// Levels left without observations are dropped from every factor.
    pub fn without_level(&self, factor: usize, level: usize) -> Design {
        let keep: Vec<usize> = (0..self.n_obs()).filter(|&i| self.factors[factor].index[i] != level).collect();
        self.subset(&keep)
    }

    pub fn subset(&self, keep: &[usize]) -> Design {
        let p = self.n_fixed();
        let response = keep.iter().map(|&i| self.response[i]).collect();
        let mut x = Vec::with_capacity(keep.len() * p);
        for &i in keep {
            x.extend_from_slice(self.row(i));
        }
        let factors = self
            .factors
            .iter()
            .map(|f| {
                let labels: Vec<&str> = keep.iter().map(|&i| f.levels[f.index[i]].as_str()).collect();
                GroupingFactor::from_labels(&f.name, &labels)
            })
            .collect();
        Design { response, x, fixed_names: self.fixed_names.clone(), factors }
    }

    /// Order-independent FNV-1a digest of the (response, fixed row) pairs.
    pub fn fingerprint(&self) -> u64 {
        (0..self.n_obs())
            .map(|i| {
                let mut h: u64 = 0xcbf29ce484222325;
                let mut eat = |bytes: &[u8]| {
                    for &b in bytes {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                };
                eat(&[self.response[i] as u8]);
                for v in self.row(i) {
                    eat(&v.to_bits().to_le_bytes());
                }
                h
            })
            .fold(0u64, u64::wrapping_add)
    }

    /// Name of a 0/1 indicator column (or the reference cell, or the
    /// intercept) whose observations all share one response value.
    pub fn separated_level(&self) -> Option<String> {
        let n = self.n_obs();
        let p = self.n_fixed();
        if n == 0 {
            return None;
        }
        let same = |rows: &mut dyn Iterator<Item = usize>| {
            let mut first = None;
            let mut any = false;
            for i in rows {
                any = true;
                match first {
                    None => first = Some(self.response[i]),
                    Some(v) if v != self.response[i] => return false,
                    _ => {}
                }
            }
            any
        };
        if same(&mut (0..n)) {
            return Some(self.fixed_names[0].clone());
        }
        let indicator: Vec<usize> =
            (0..p).filter(|&j| (0..n).all(|i| matches!(self.row(i)[j], v if v == 0.0 || v == 1.0))).collect();
        let intercept = (0..p).find(|&j| (0..n).all(|i| self.row(i)[j] == 1.0));
        for &j in &indicator {
            if Some(j) == intercept {
                continue;
            }
            if same(&mut (0..n).filter(|&i| self.row(i)[j] == 1.0)) {
                return Some(self.fixed_names[j].clone());
            }
        }
        // reference cell: rows where every non-intercept indicator is 0
        if let Some(c) = intercept.filter(|_| indicator.len() == p && p > 1) {
            let reference = (0..n).filter(|&i| indicator.iter().all(|&j| j == c || self.row(i)[j] == 0.0));
            if same(&mut reference.into_iter()) {
                return Some(format!("{} (reference)", self.fixed_names[c]));
            }
        }
        None
    }
}
