//! Reservoir-sampled episodic memory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub features: Vec<f64>,
    pub label: usize,
    /// Kept for diagnostics only; routing never reads it.
    pub task_id: usize,
    /// Pre-softmax outputs recorded for this sample, as wide as the
    /// classifier was at recording time.
    pub logits: Option<Vec<f64>>,
}

/// Fixed-capacity reservoir: every offered item ends up in memory with
/// probability `capacity / seen_count`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReservoirBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    seen_count: u64,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReservoirBuffer {
            capacity,
            entries: Vec::with_capacity(capacity),
            seen_count: 0,
            rng: rng_for(seed, "reservoir", 0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Option<&BufferEntry> {
        self.entries.get(index)
    }

    /// Offers one item. Returns the slot it was written to, if any.
    pub fn offer(&mut self, item: BufferEntry) -> Option<usize> {
        let slot = if (self.seen_count as usize) < self.capacity {
            self.entries.push(item);
            Some(self.entries.len() - 1)
        } else {
            let v = self.rng.random_range(0..=self.seen_count);
            self.place(v, item)
        };
        self.seen_count += 1;
        slot
    }

    /// Replacement branch with an externally drawn `v ∈ [0, N]`.
    fn place(&mut self, v: u64, item: BufferEntry) -> Option<usize> {
        if v < self.capacity as u64 {
            self.entries[v as usize] = item;
            Some(v as usize)
        } else {
            None
        }
    }

    /// Draws `batch` indices uniformly with replacement.
    pub fn sample_indices(&mut self, batch: usize) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::BufferEmpty);
        }
        let n = self.entries.len();
        Ok((0..batch).map(|_| self.rng.random_range(0..n)).collect())
    }

    pub fn sample(&mut self, batch: usize) -> Result<Vec<BufferEntry>> {
        let idx = self.sample_indices(batch)?;
        Ok(idx.into_iter().map(|i| self.entries[i].clone()).collect())
    }

    pub fn update_logits(&mut self, index: usize, logits: Vec<f64>) -> Result<()> {
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::arg("stored logits must be finite"));
        }
        let len = self.entries.len();
        let entry = self
            .entries
            .get_mut(index)
            .ok_or_else(|| Error::arg(format!("buffer index {index} out of range ({len})")))?;
        entry.logits = Some(logits);
        Ok(())
    }

    /// Writes entries as CSV (`task_id,label,f*,z*`) plus a `.meta.json`
    /// sidecar with capacity, seen count and generator state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = self.entries.first().map(|e| e.features.len()).unwrap_or(0);
        let z = self
            .entries
            .iter()
            .filter_map(|e| e.logits.as_ref().map(Vec::len))
            .max()
            .unwrap_or(0);
        let mut out = BufWriter::new(fs::File::create(path)?);
        let mut header = String::from("task_id,label");
        (0..f).for_each(|i| header.push_str(&format!(",f{i}")));
        (0..z).for_each(|i| header.push_str(&format!(",z{i}")));
        writeln!(out, "{header}")?;
        for e in &self.entries {
            write!(out, "{},{}", e.task_id, e.label)?;
            for v in &e.features {
                write!(out, ",{v}")?;
            }
            let logits = e.logits.as_deref().unwrap_or(&[]);
            for i in 0..z {
                match logits.get(i) {
                    Some(v) => write!(out, ",{v}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        out.flush()?;
        let meta = BufferMeta {
            capacity: self.capacity,
            seen_count: self.seen_count,
            feature_dim: f,
            rng: self.rng.clone(),
        };
        fs::write(meta_path(path), serde_json::to_string(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: BufferMeta = serde_json::from_str(&fs::read_to_string(meta_path(path))?)?;
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, h)| h).unwrap_or_default();
        let ncols = header.split(',').count();
        let mut entries = Vec::new();
        for (idx, raw) in lines {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').collect();
            let perr = |m: String| Error::Parse { line, message: m };
            if fields.len() != ncols {
                return Err(perr(format!("expected {ncols} fields, found {}", fields.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| perr(format!("bad number {s:?}")));
            let int = |s: &str| s.trim().parse::<usize>().map_err(|_| perr(format!("bad integer {s:?}")));
            let features = fields[2..2 + meta.feature_dim]
                .iter()
                .map(|s| num(s))
                .collect::<Result<Vec<_>>>()?;
            let zs: Vec<&str> = fields[2 + meta.feature_dim..]
                .iter()
                .copied()
                .take_while(|s| !s.trim().is_empty())
                .collect();
            let logits = if zs.is_empty() {
                None
            } else {
                Some(zs.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?)
            };
            entries.push(BufferEntry {
                features,
                label: int(fields[1])?,
                task_id: int(fields[0])?,
                logits,
            });
        }
        if entries.len() != meta.capacity.min(meta.seen_count as usize) {
            return Err(Error::Validation(format!(
                "checkpoint holds {} entries, expected min({}, {})",
                entries.len(),
                meta.capacity,
                meta.seen_count
            )));
        }
        Ok(ReservoirBuffer {
            capacity: meta.capacity,
            entries,
            seen_count: meta.seen_count,
            rng: meta.rng,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BufferMeta {
    capacity: usize,
    seen_count: u64,
    feature_dim: usize,
    rng: ChaCha8Rng,
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}
