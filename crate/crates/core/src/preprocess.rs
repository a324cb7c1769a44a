//! One-pass preprocessing: chronological ordinal encoding of categories and
//! online target scaling.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Code emitted for unseen, empty or missing category values.
pub const UNKNOWN_CODE: u32 = 0;

pub const DEFAULT_CAPACITY: usize = 1024;

/// Streaming ordinal encoder: codes `1..=len` in order of first occurrence.
///
/// Code 0 is reserved for unknown values. By default the first occurrence
/// of a value is emitted as unknown and registered for later rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderState {
    codes: HashMap<String, u32>,
    values: Vec<String>,
    capacity: usize,
    emit_fresh_code: bool,
}

impl Default for EncoderState {
    fn default() -> Self {
        EncoderState::new(DEFAULT_CAPACITY)
    }
}

impl EncoderState {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "encoder capacity must be positive");
        EncoderState {
            codes: HashMap::new(),
            values: Vec::new(),
            capacity,
            emit_fresh_code: false,
        }
    }

    /// Emit the freshly assigned code on first occurrence instead of unknown.
    pub fn with_fresh_codes(mut self, on: bool) -> Self {
        self.emit_fresh_code = on;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn code_of(&self, value: &str) -> Option<u32> {
        self.codes.get(value).copied()
    }

    pub fn value_of(&self, code: u32) -> Option<&str> {
        if code == UNKNOWN_CODE {
            return None;
        }
        self.values.get(code as usize - 1).map(String::as_str)
    }

    /// Encodes one streamed value, registering it if unseen.
    pub fn encode(&mut self, value: &str) -> Result<u32> {
        if value.is_empty() {
            return Ok(UNKNOWN_CODE);
        }
        if let Some(&code) = self.codes.get(value) {
            return Ok(code);
        }
        let code = self.values.len() + 1;
        if code >= self.capacity {
            return Err(Error::CapacityExhausted {
                value: value.to_owned(),
                capacity: self.capacity,
            });
        }
        self.codes.insert(value.to_owned(), code as u32);
        self.values.push(value.to_owned());
        Ok(if self.emit_fresh_code {
            code as u32
        } else {
            UNKNOWN_CODE
        })
    }

    pub fn encode_all<'a>(&mut self, values: impl IntoIterator<Item = &'a str>) -> Result<Vec<u32>> {
        values.into_iter().map(|v| self.encode(v)).collect()
    }

    /// The mapping in code order, for seeding a batch [`OrdinalEncoder`].
    pub fn to_batch_table(&self) -> Vec<(String, u32)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i as u32 + 1))
            .collect()
    }

    /// Writes the table as `value,code` lines in code order.
    pub fn write_table<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["value", "code"])?;
        for (v, c) in self.to_batch_table() {
            w.write_record([v, c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<encoder table>", e))?;
        Ok(())
    }

    /// Restores an encoder from [`EncoderState::write_table`] output.
    pub fn read_table<R: Read>(input: R, capacity: usize) -> Result<Self> {
        let mut enc = EncoderState::new(capacity);
        let mut r = csv::Reader::from_reader(input);
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let value = rec.get(0).unwrap_or_default().to_owned();
            let code: u32 = rec
                .get(1)
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::Malformed {
                    line,
                    message: "code is not an integer".into(),
                })?;
            if code as usize != i + 1 {
                return Err(Error::Malformed {
                    line,
                    message: format!("expected code {}, found {code}", i + 1),
                });
            }
            if code as usize >= capacity {
                return Err(Error::CapacityExhausted { value, capacity });
            }
            enc.codes.insert(value.clone(), code);
            enc.values.push(value);
        }
        Ok(enc)
    }

    /// Approximate heap bytes held by the mapping.
    pub fn footprint_bytes(&self) -> usize {
        let strings: usize = self.values.iter().map(|v| 2 * v.len()).sum();
        strings + self.values.len() * (2 * std::mem::size_of::<String>() + 4)
    }
}

/// Classic batch ordinal encoder over a fixed table; unknown values map to 0.
#[derive(Clone, Debug, Default)]
pub struct OrdinalEncoder {
    codes: HashMap<String, u32>,
}

impl OrdinalEncoder {
    pub fn from_table(table: &[(String, u32)]) -> Self {
        OrdinalEncoder {
            codes: table.iter().cloned().collect(),
        }
    }

    pub fn encode(&self, value: &str) -> u32 {
        self.codes.get(value).copied().unwrap_or(UNKNOWN_CODE)
    }

    pub fn transform<'a>(&self, values: impl IntoIterator<Item = &'a str>) -> Vec<u32> {
        values.into_iter().map(|v| self.encode(v)).collect()
    }
}

/// The affine map `x -> (x - center) / spread` at one instant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub center: f64,
    pub spread: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        center: 0.0,
        spread: 1.0,
    };

    pub fn is_degenerate(&self) -> bool {
        !(self.spread > 0.0)
    }

    pub fn scale(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            (x - self.center) / self.spread
        }
    }

    pub fn unscale(&self, x_scaled: f64) -> f64 {
        if self.is_degenerate() {
            self.center
        } else {
            self.center + self.spread * x_scaled
        }
    }
}

const STD_FLOOR: f64 = 1e-12;

/// Welford running mean and variance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    count: u64,
    mean: f64,
    m2: f64,
}

impl StandardScaler {
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn snapshot(&self) -> AffineMap {
        match self.count {
            0 => AffineMap { center: 0.0, spread: 0.0 },
            1 => AffineMap { center: self.mean, spread: 0.0 },
            _ => AffineMap {
                center: self.mean,
                spread: self.std().max(STD_FLOOR),
            },
        }
    }
}

/// P-square single-quantile estimator (Jain & Chlamtac), O(1) memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct P2Quantile {
    p: f64,
    count: u64,
    heights: [f64; 5],
    positions: [f64; 5],
    desired: [f64; 5],
    increments: [f64; 5],
}

impl P2Quantile {
    pub fn new(p: f64) -> Self {
        assert!(p > 0.0 && p < 1.0);
        P2Quantile {
            p,
            count: 0,
            heights: [0.0; 5],
            positions: [1.0, 2.0, 3.0, 4.0, 5.0],
            desired: [1.0, 1.0 + 2.0 * p, 1.0 + 4.0 * p, 3.0 + 2.0 * p, 5.0],
            increments: [0.0, p / 2.0, p, (1.0 + p) / 2.0, 1.0],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, x: f64) {
        if self.count < 5 {
            self.heights[self.count as usize] = x;
            self.count += 1;
            if self.count == 5 {
                self.heights.sort_by(|a, b| a.total_cmp(b));
            }
            return;
        }
        self.count += 1;
        let q = &mut self.heights;
        let k = if x < q[0] {
            q[0] = x;
            0
        } else if x >= q[4] {
            q[4] = x;
            3
        } else {
            (1..5).find(|&i| x < q[i]).map_or(3, |i| i - 1)
        };
        for n in &mut self.positions[k + 1..] {
            *n += 1.0;
        }
        for (d, inc) in self.desired.iter_mut().zip(self.increments) {
            *d += inc;
        }
        for i in 1..4 {
            let d = self.desired[i] - self.positions[i];
            let n = self.positions;
            if (d >= 1.0 && n[i + 1] - n[i] > 1.0) || (d <= -1.0 && n[i - 1] - n[i] < -1.0) {
                let s = d.signum();
                let q = &mut self.heights;
                let parabolic = q[i]
                    + s / (n[i + 1] - n[i - 1])
                        * ((n[i] - n[i - 1] + s) * (q[i + 1] - q[i]) / (n[i + 1] - n[i])
                            + (n[i + 1] - n[i] - s) * (q[i] - q[i - 1]) / (n[i] - n[i - 1]));
                q[i] = if q[i - 1] < parabolic && parabolic < q[i + 1] {
                    parabolic
                } else {
                    let j = if s > 0.0 { i + 1 } else { i - 1 };
                    q[i] + s * (q[j] - q[i]) / (n[j] - n[i])
                };
                self.positions[i] += s;
            }
        }
    }

    /// Current estimate; exact linear interpolation while fewer than five
    /// observations have been seen.
    pub fn estimate(&self) -> f64 {
        match self.count {
            0 => f64::NAN,
            n if n < 5 => {
                let mut xs = self.heights[..n as usize].to_vec();
                xs.sort_by(|a, b| a.total_cmp(b));
                let h = (n - 1) as f64 * self.p;
                let lo = h.floor() as usize;
                let hi = h.ceil() as usize;
                xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
            }
            _ => self.heights[2],
        }
    }
}

/// Median / inter-quartile-range scaler built on three P-square estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustScaler {
    q1: P2Quantile,
    median: P2Quantile,
    q3: P2Quantile,
}

impl Default for RobustScaler {
    fn default() -> Self {
        RobustScaler {
            q1: P2Quantile::new(0.25),
            median: P2Quantile::new(0.5),
            q3: P2Quantile::new(0.75),
        }
    }
}

impl RobustScaler {
    pub fn count(&self) -> u64 {
        self.median.count()
    }

    pub fn median(&self) -> f64 {
        self.median.estimate()
    }

    pub fn iqr(&self) -> f64 {
        self.q3.estimate() - self.q1.estimate()
    }

    pub fn update(&mut self, x: f64) {
        self.q1.update(x);
        self.median.update(x);
        self.q3.update(x);
    }

    pub fn snapshot(&self) -> AffineMap {
        match self.count() {
            0 => AffineMap { center: 0.0, spread: 0.0 },
            1 => AffineMap { center: self.median(), spread: 0.0 },
            _ => AffineMap {
                center: self.median(),
                spread: self.iqr().max(0.0),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerKind {
    Standard,
    #[default]
    Robust,
}

/// Online target scaler with predict-then-update semantics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScalerState {
    Standard(StandardScaler),
    Robust(RobustScaler),
}

impl ScalerState {
    pub fn new(kind: ScalerKind) -> Self {
        match kind {
            ScalerKind::Standard => ScalerState::Standard(StandardScaler::default()),
            ScalerKind::Robust => ScalerState::Robust(RobustScaler::default()),
        }
    }

    pub fn count(&self) -> u64 {
        match self {
            ScalerState::Standard(s) => s.count(),
            ScalerState::Robust(s) => s.count(),
        }
    }

    pub fn snapshot(&self) -> AffineMap {
        match self {
            ScalerState::Standard(s) => s.snapshot(),
            ScalerState::Robust(s) => s.snapshot(),
        }
    }

    /// Scales `x` with the statistics seen so far, then absorbs `x`.
    pub fn scale_update(&mut self, x: f64) -> f64 {
        let scaled = self.snapshot().scale(x);
        match self {
            ScalerState::Standard(s) => s.update(x),
            ScalerState::Robust(s) => s.update(x),
        }
        scaled
    }

    pub fn unscale(&self, x_scaled: f64) -> f64 {
        self.snapshot().unscale(x_scaled)
    }

    pub fn footprint_bytes(&self) -> usize {
        std::mem::size_of::<Self>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{rng_from_seed, sample_student_t, StudentTParams};
    use proptest::prelude::*;

    #[test]
    fn streaming_codes_follow_first_occurrence() {
        let mut e = EncoderState::new(16);
        assert_eq!(e.encode_all(["a", "b", "a", "c", "b"]).unwrap(), vec![0, 0, 1, 0, 2]);
        let mut e = EncoderState::new(16);
        assert_eq!(e.encode_all(["a", "a", "a"]).unwrap(), vec![0, 1, 1]);
        let mut e = EncoderState::new(16);
        assert!(e.encode_all(std::iter::empty()).unwrap().is_empty());
        assert_eq!(e, EncoderState::new(16));
    }

    #[test]
    fn fresh_code_variant() {
        let mut e = EncoderState::new(16).with_fresh_codes(true);
        assert_eq!(e.encode_all(["a", "b", "a", "c", "b"]).unwrap(), vec![1, 2, 1, 3, 2]);
    }

    #[test]
    fn empty_values_stay_unknown() {
        let mut e = EncoderState::new(4);
        assert_eq!(e.encode_all(["", "", "x", ""]).unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(e.len(), 1);
        assert_eq!(e.code_of(""), None);
    }

    #[test]
    fn batch_table_in_code_order() {
        let mut e = EncoderState::new(8);
        e.encode_all(["a", "b", "a"]).unwrap();
        assert_eq!(e.to_batch_table(), vec![("a".into(), 1), ("b".into(), 2)]);
        assert!(EncoderState::new(8).to_batch_table().is_empty());
        assert_eq!(e.value_of(2), Some("b"));
        assert_eq!(e.value_of(0), None);
    }

    #[test]
    fn capacity_boundary() {
        let mut e = EncoderState::new(4);
        e.encode_all(["a", "b", "c"]).unwrap();
        assert_eq!(e.to_batch_table().len(), 3);
        assert_eq!(e.encode("a").unwrap(), 1);
        match e.encode("d") {
            Err(Error::CapacityExhausted { value, capacity }) => {
                assert_eq!(value, "d");
                assert_eq!(capacity, 4);
            }
            other => panic!("{other:?}"),
        }
        // state untouched by the failed registration
        assert_eq!(e.len(), 3);
    }

    #[test]
    fn table_text_round_trip() {
        let mut e = EncoderState::new(32);
        e.encode_all(["weather", "shop,ping", "travel", "\"q\""]).unwrap();
        let mut buf = Vec::new();
        e.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("value,code\nweather,1\n"));
        let back = EncoderState::read_table(buf.as_slice(), 32).unwrap();
        assert_eq!(back.to_batch_table(), e.to_batch_table());
        assert!(EncoderState::read_table("value,code\nx,2\n".as_bytes(), 32).is_err());
    }

    proptest! {
        #[test]
        fn second_pass_equals_batch_encoder(stream in prop::collection::vec(0u8..20, 0..200)) {
            let values: Vec<String> = stream.iter().map(|v| format!("v{v}")).collect();
            let mut e = EncoderState::new(64);
            let first = e.encode_all(values.iter().map(String::as_str)).unwrap();
            let second = e.encode_all(values.iter().map(String::as_str)).unwrap();
            let batch = OrdinalEncoder::from_table(&e.to_batch_table());
            prop_assert_eq!(&second, &batch.transform(values.iter().map(String::as_str)));
            // known values on the first pass already agree
            for (i, v) in values.iter().enumerate() {
                if first[i] != UNKNOWN_CODE {
                    prop_assert_eq!(first[i], batch.encode(v));
                }
            }
        }

        #[test]
        fn codes_are_stable_and_injective(stream in prop::collection::vec(0u8..30, 1..150), replays in 1usize..4) {
            let mut e = EncoderState::new(64);
            let mut seen: HashMap<String, u32> = HashMap::new();
            for _ in 0..replays {
                for v in &stream {
                    let key = format!("k{v}");
                    e.encode(&key).unwrap();
                    let code = e.code_of(&key).unwrap();
                    prop_assert_eq!(*seen.entry(key).or_insert(code), code);
                }
            }
            let mut codes: Vec<u32> = seen.values().copied().collect();
            codes.sort();
            codes.dedup();
            prop_assert_eq!(codes.len(), seen.len());
            prop_assert!(codes.iter().all(|&c| c != UNKNOWN_CODE));
        }

        #[test]
        fn snapshot_round_trip(xs in prop::collection::vec(-1e4f64..1e4, 2..60), probe in -1e5f64..1e5) {
            for kind in [ScalerKind::Standard, ScalerKind::Robust] {
                let mut s = ScalerState::new(kind);
                for &x in &xs {
                    s.scale_update(x);
                }
                let m = s.snapshot();
                if m.spread > 1e-6 {
                    let back = m.unscale(m.scale(probe));
                    prop_assert!((back - probe).abs() <= 1e-9 * probe.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn first_observation_scales_to_zero() {
        for kind in [ScalerKind::Standard, ScalerKind::Robust] {
            let mut s = ScalerState::new(kind);
            assert_eq!(s.scale_update(42.0), 0.0);
        }
    }

    #[test]
    fn standard_scaler_converges() {
        let mut rng = rng_from_seed(3);
        let mut s = ScalerState::new(ScalerKind::Standard);
        let p = StudentTParams::normal(10.0, 2.0);
        for _ in 0..100_000 {
            s.scale_update(sample_student_t(p, &mut rng));
        }
        let m = s.snapshot();
        assert!((m.center - 10.0).abs() < 0.05, "{m:?}");
        assert!((m.spread - 2.0).abs() < 0.05, "{m:?}");
    }

    #[test]
    fn robust_median_under_cauchy() {
        let mut rng = rng_from_seed(4);
        let p = StudentTParams::new(5.0, 1.0, 1.0);
        let mut s = RobustScaler::default();
        let mut xs = Vec::with_capacity(100_000);
        for _ in 0..100_000 {
            let x = sample_student_t(p, &mut rng);
            s.update(x);
            xs.push(x);
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        let exact = xs[xs.len() / 2];
        assert!((s.median() - 5.0).abs() < 0.1, "{}", s.median());
        assert!((s.median() - exact).abs() < 0.1);
        assert!((s.iqr() - 2.0).abs() < 0.2, "{}", s.iqr());
    }

    #[test]
    fn robust_median_breakdown() {
        let mut rng = rng_from_seed(9);
        let p = StudentTParams::normal(100.0, 10.0);
        let mut clean = RobustScaler::default();
        let mut dirty = RobustScaler::default();
        for i in 0..50_000 {
            let x = sample_student_t(p, &mut rng);
            clean.update(x);
            dirty.update(if i % 10 == 0 { 1e6 } else { x });
        }
        let shift = (dirty.median() - clean.median()).abs() / clean.median();
        assert!(shift < 0.05, "{shift}");
    }

    #[test]
    fn unscale_examples() {
        let mut s = ScalerState::new(ScalerKind::Robust);
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            s.scale_update(sample_student_t(StudentTParams::normal(7.0, 3.0), &mut rng));
        }
        let m = s.snapshot();
        assert!((s.unscale(m.scale(7.3)) - 7.3).abs() < 1e-9 * 7.3);
        assert_eq!(s.unscale(0.0), m.center);
        let map = AffineMap { center: 10.0, spread: 4.0 };
        assert_eq!(map.unscale(1.0), 14.0);
        let flat = AffineMap { center: 3.0, spread: 0.0 };
        assert_eq!(flat.unscale(5.0), 3.0);
    }

    #[test]
    fn p2_small_counts_interpolate() {
        let mut q = P2Quantile::new(0.5);
        assert!(q.estimate().is_nan());
        q.update(4.0);
        assert_eq!(q.estimate(), 4.0);
        q.update(2.0);
        assert_eq!(q.estimate(), 3.0);
    }
}
