use std::sync::atomic::{AtomicUsize, Ordering};

use super::plane::{Image, Mask};
use super::sample::ProcessedSample;
use crate::error::{invalid, Result};

/// In-memory sample collection that audits every label read.
///
/// Label-free trainers take a `&Dataset` and must leave [`Dataset::label_reads`] at zero.
#[derive(Debug, Default)]
pub struct Dataset {
    samples: Vec<ProcessedSample>,
    label_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self::new(self.samples.clone())
    }
}

impl Dataset {
    pub fn new(samples: Vec<ProcessedSample>) -> Self {
        Self {
            samples,
            label_reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.samples[i].image
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.samples.iter().map(|s| &s.image)
    }

    pub fn mask(&self, i: usize) -> Option<&Mask> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.samples[i].mask.as_ref()
    }

    pub fn class_labels(&self, i: usize) -> &[u8] {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        &self.samples[i].class_labels
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Samples whose ids appear in `ids`, in that order.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let index: std::collections::HashMap<&str, usize> =
            self.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let picked = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.samples[i].clone())
                    .ok_or_else(|| invalid(format!("unknown sample id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(picked))
    }

    pub fn into_samples(self) -> Vec<ProcessedSample> {
        self.samples
    }
}
