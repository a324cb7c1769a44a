//! Lazy CSV ingestion of `(category, target)` rows in file order,
//! chunked into mini-batches.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nuts::DEFAULT_BATCH_SIZE;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub batch_size: usize,
    pub category_column: String,
    pub target_column: String,
    pub delimiter: char,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            category_column: "category".into(),
            target_column: "target".into(),
            delimiter: ',',
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !self.delimiter.is_ascii() {
            return Err(Error::invalid("delimiter", "must be a single ASCII character"));
        }
        Ok(())
    }
}

/// One chunk of raw rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataBatch {
    /// 1-based position of the batch in the stream.
    pub index: usize,
    pub categories: Vec<String>,
    pub targets: Vec<f64>,
}

impl DataBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Counters accumulated while reading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReadStats {
    pub rows: u64,
    pub skipped_missing_target: u64,
    pub negative_targets: u64,
}

/// Iterator over mini-batches. Stops after the first error.
pub struct BatchReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    category_idx: usize,
    target_idx: usize,
    batch_size: usize,
    next_index: usize,
    stats: ReadStats,
    failed: bool,
}

impl<R: Read> BatchReader<R> {
    pub fn new(input: R, config: &StreamConfig) -> Result<Self> {
        config.validate()?;
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(config.delimiter as u8)
            .flexible(true)
            .from_reader(input);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
        };
        let category_idx = find(&config.category_column)?;
        let target_idx = find(&config.target_column)?;
        Ok(BatchReader {
            records: rdr.into_records(),
            category_idx,
            target_idx,
            batch_size: config.batch_size,
            next_index: 1,
            stats: ReadStats::default(),
            failed: false,
        })
    }

    pub fn stats(&self) -> ReadStats {
        self.stats
    }

    fn next_batch(&mut self) -> Result<Option<DataBatch>> {
        let mut batch = DataBatch {
            index: self.next_index,
            ..DataBatch::default()
        };
        while batch.len() < self.batch_size {
            let Some(rec) = self.records.next() else { break };
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let (Some(cat), Some(raw)) = (rec.get(self.category_idx), rec.get(self.target_idx)) else {
                return Err(Error::Malformed {
                    line,
                    message: format!("expected at least {} fields, found {}", self.target_idx.max(self.category_idx) + 1, rec.len()),
                });
            };
            let raw = raw.trim();
            if raw.is_empty() {
                self.stats.skipped_missing_target += 1;
                continue;
            }
            let y: f64 = raw.parse().map_err(|_| Error::Malformed {
                line,
                message: format!("target `{raw}` is not a number"),
            })?;
            if !y.is_finite() {
                return Err(Error::Malformed {
                    line,
                    message: format!("target `{raw}` is not finite"),
                });
            }
            if y < 0.0 {
                self.stats.negative_targets += 1;
            }
            self.stats.rows += 1;
            batch.categories.push(cat.trim().to_string());
            batch.targets.push(y);
        }
        if batch.is_empty() {
            return Ok(None);
        }
        self.next_index += 1;
        Ok(Some(batch))
    }
}

impl<R: Read> Iterator for BatchReader<R> {
    type Item = Result<DataBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.next_batch() {
            Ok(b) => b.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Opens `path` and returns a lazy batch iterator over it.
pub fn read_stream(path: &Path, config: &StreamConfig) -> Result<BatchReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BatchReader::new(BufReader::new(file), config)
}
