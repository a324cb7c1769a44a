//! Warmup adaptation: Nesterov dual averaging for the step size and a
//! windowed running-variance estimate for the diagonal mass matrix.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualAveragingSettings {
    pub target_accept: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
}

impl DualAveragingSettings {
    pub fn new(target_accept: f64) -> Self {
        DualAveragingSettings {
            target_accept,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }
}

/// Dual-averaging accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    pub settings: DualAveragingSettings,
    mu: f64,
    h_bar: f64,
    log_step: f64,
    log_step_bar: f64,
    count: u64,
}

impl DualAveraging {
    pub fn new(settings: DualAveragingSettings, step_size: f64) -> Self {
        let mut da = DualAveraging {
            settings,
            mu: 0.0,
            h_bar: 0.0,
            log_step: 0.0,
            log_step_bar: 0.0,
            count: 0,
        };
        da.restart(step_size);
        da
    }

    /// Restarts the averaging around `step_size`.
    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.h_bar = 0.0;
        self.log_step = step_size.ln();
        self.log_step_bar = 0.0;
        self.count = 0;
    }

    pub fn update(&mut self, accept_stat: f64) {
        let s = &self.settings;
        self.count += 1;
        let m = self.count as f64;
        let w = 1.0 / (m + s.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (s.target_accept - accept_stat);
        self.log_step = self.mu - m.sqrt() / s.gamma * self.h_bar;
        let eta = m.powf(-s.kappa);
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar;
    }

    pub fn step_size(&self) -> f64 {
        self.log_step.exp()
    }

    /// The averaged iterate, used once adaptation ends.
    pub fn final_step_size(&self) -> f64 {
        if self.count == 0 {
            self.step_size()
        } else {
            self.log_step_bar.exp()
        }
    }
}

/// Welford accumulator over positions, one variance per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningVariance {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    pub fn new(dim: usize) -> Self {
        RunningVariance {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn reset(&mut self) {
        self.count = 0;
        self.mean.iter_mut().for_each(|x| *x = 0.0);
        self.m2.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn add(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Sample variances shrunk toward 1e-3 (Stan's regularization).
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.m2
            .iter()
            .map(|&m2| {
                let var = m2 / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Stan-style warmup phases: a fast initial buffer, doubling slow windows
/// that estimate the metric, and a fast terminal buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSchedule {
    pub num_warmup: usize,
    pub init_buffer: usize,
    pub term_buffer: usize,
    /// Iteration indices (0-based, exclusive ends) at which slow windows close.
    pub window_ends: Vec<usize>,
}

impl WindowSchedule {
    pub fn new(num_warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        if num_warmup < 20 {
            return WindowSchedule {
                num_warmup,
                init_buffer: num_warmup,
                term_buffer: 0,
                window_ends: Vec::new(),
            };
        }
        if init + term + base > num_warmup {
            init = num_warmup * 15 / 100;
            term = num_warmup / 10;
            base = num_warmup - init - term;
        }
        let slow_end = num_warmup - term;
        let mut ends = Vec::new();
        let mut start = init;
        let mut size = base;
        loop {
            let mut end = start + size;
            if end + 2 * size > slow_end {
                end = slow_end;
            }
            ends.push(end);
            if end >= slow_end {
                break;
            }
            start = end;
            size *= 2;
        }
        WindowSchedule {
            num_warmup,
            init_buffer: init,
            term_buffer: term,
            window_ends: ends,
        }
    }

    /// Whether iteration `i` contributes to the metric estimate.
    pub fn in_slow_phase(&self, i: usize) -> bool {
        !self.window_ends.is_empty() && i >= self.init_buffer && i < self.num_warmup - self.term_buffer
    }

    /// Whether a slow window closes after iteration `i`.
    pub fn closes_window(&self, i: usize) -> bool {
        self.window_ends.contains(&(i + 1))
    }
}
