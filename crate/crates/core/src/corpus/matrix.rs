use std::collections::BTreeSet;
use std::fmt::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::{CorpusError, ProjectCorpus, Result};

/// Ratios `R[i][j] = |T_i ∩ T_j| / |T_i|`, rows and columns ordered by
/// ascending unique-token count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharedTokenMatrix {
    pub projects: Vec<String>,
    pub unique_tokens: Vec<usize>,
    pub ratios: Vec<Vec<f64>>,
}

impl SharedTokenMatrix {
    pub fn off_diagonal(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (i, row) in self.ratios.iter().enumerate() {
            for (j, &r) in row.iter().enumerate() {
                if i != j {
                    v.push(r);
                }
            }
        }
        v
    }

    pub fn median_off_diagonal(&self) -> f64 {
        crate::metrics::median(&self.off_diagonal())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("project");
        for p in &self.projects {
            write!(out, ",{p}").unwrap();
        }
        out.push('\n');
        for (p, row) in self.projects.iter().zip(&self.ratios) {
            out.push_str(p);
            for r in row {
                write!(out, ",{r:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn shared_matrix_from_sets(named: Vec<(String, BTreeSet<String>)>) -> Result<SharedTokenMatrix> {
    if named.len() < 2 {
        return Err(CorpusError::TooFewProjects(named.len()));
    }
    if let Some((id, _)) = named.iter().find(|(_, t)| t.is_empty()) {
        return Err(CorpusError::EmptyTokenSet(id.clone()));
    }
    let mut named = named;
    named.sort_by(|a, b| a.1.len().cmp(&b.1.len()).then(a.0.cmp(&b.0)));
    let ratios = named
        .par_iter()
        .map(|(_, ti)| {
            named
                .iter()
                .map(|(_, tj)| ti.intersection(tj).count() as f64 / ti.len() as f64)
                .collect()
        })
        .collect();
    Ok(SharedTokenMatrix {
        unique_tokens: named.iter().map(|(_, t)| t.len()).collect(),
        projects: named.into_iter().map(|(p, _)| p).collect(),
        ratios,
    })
}

pub fn shared_matrix(projects: &[ProjectCorpus]) -> Result<SharedTokenMatrix> {
    shared_matrix_from_sets(projects.iter().map(|p| (p.project_id.clone(), p.tokens())).collect())
}
