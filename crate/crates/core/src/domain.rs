//! Shared domain records. Everything refers to samples by their dense id.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{FesError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub embedding: Vec<f64>,
    /// True class. The engine only reads it for samples revealed as gold and
    /// for the diagnostic pseudo-label correctness column.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub sample_id: usize,
    pub label: usize,
    pub confidence: f64,
    pub issued_at_event: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub gold: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub pseudo: Vec<PseudoLabel>,
}

impl ClientShard {
    pub fn new(client_id: usize, samples: Vec<usize>) -> Self {
        Self {
            client_id,
            gold: Vec::new(),
            unlabeled: samples,
            pseudo: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gold.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.gold.iter().chain(self.unlabeled.iter()).copied()
    }

    pub fn labeled_count(&self) -> usize {
        self.gold.len() + self.pseudo.len()
    }

    pub fn is_eligible(&self) -> bool {
        self.labeled_count() > 0
    }

    /// Replace (or insert) the pseudo label for `label.sample_id`.
    pub fn upsert_pseudo(&mut self, label: PseudoLabel) {
        match self
            .pseudo
            .iter_mut()
            .find(|p| p.sample_id == label.sample_id)
        {
            Some(slot) => *slot = label,
            None => self.pseudo.push(label),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gold: HashSet<usize> = self.gold.iter().copied().collect();
        let unlabeled: HashSet<usize> = self.unlabeled.iter().copied().collect();
        if gold.len() != self.gold.len() || unlabeled.len() != self.unlabeled.len() {
            return Err(FesError::InvalidConfig(format!(
                "client {} lists a sample twice",
                self.client_id
            )));
        }
        if let Some(id) = gold.intersection(&unlabeled).next() {
            return Err(FesError::InvalidConfig(format!(
                "client {}: sample {id} is both gold and unlabeled",
                self.client_id
            )));
        }
        let mut seen = HashSet::new();
        for p in &self.pseudo {
            if !unlabeled.contains(&p.sample_id) {
                return Err(FesError::InvalidConfig(format!(
                    "client {}: pseudo label for non-unlabeled sample {}",
                    self.client_id, p.sample_id
                )));
            }
            if !seen.insert(p.sample_id) {
                return Err(FesError::InvalidConfig(format!(
                    "client {}: two pseudo labels for sample {}",
                    self.client_id, p.sample_id
                )));
            }
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(FesError::InvalidConfig(format!(
                    "client {}: confidence {} out of range",
                    self.client_id, p.confidence
                )));
            }
        }
        Ok(())
    }
}

/// A pool of samples addressed by id. Ids are dense: `samples[i].id == i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            dim,
            num_classes,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: usize) -> &Sample {
        &self.samples[id]
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        &self.samples[id].embedding
    }

    pub fn true_label(&self, id: usize) -> Option<usize> {
        self.samples[id].label
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.id != i {
                return Err(FesError::InvalidConfig(format!(
                    "sample ids must be dense: position {i} holds id {}",
                    s.id
                )));
            }
            if s.embedding.len() != self.dim {
                return Err(FesError::DimensionMismatch {
                    expected: self.dim,
                    actual: s.embedding.len(),
                });
            }
            if let Some(l) = s.label {
                if l >= self.num_classes {
                    return Err(FesError::InvalidConfig(format!(
                        "sample {i} has label {l} but there are only {} classes",
                        self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Check that shards partition `0..total` exactly once.
pub fn validate_partition(shards: &[ClientShard], total: usize) -> Result<()> {
    let mut seen = vec![false; total];
    for shard in shards {
        shard.validate()?;
        for id in shard.all_ids() {
            if id >= total {
                return Err(FesError::InvalidConfig(format!(
                    "sample id {id} out of range"
                )));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(FesError::InvalidConfig(format!(
                    "sample {id} assigned to more than one client"
                )));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(FesError::InvalidConfig(format!(
            "sample {missing} not assigned to any client"
        )));
    }
    Ok(())
}
