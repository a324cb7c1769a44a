//! One NUTS transition: trajectory doubling with multinomial sampling over
//! the trajectory and the generalized no-U-turn criterion, checked across
//! merged subtrees as well as within them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::LogDensity;

/// Energy error beyond which a trajectory is declared divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;

#[derive(Clone, Debug)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Point {
    pub fn at<D: LogDensity + ?Sized>(density: &D, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = density.logp_grad(&q, &mut grad);
        Point {
            p: vec![0.0; q.len()],
            q,
            grad,
            logp,
        }
    }

    fn kinetic(&self, inv_mass: &[f64]) -> f64 {
        0.5 * self
            .p
            .iter()
            .zip(inv_mass)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    fn energy(&self, inv_mass: &[f64]) -> f64 {
        let h = self.kinetic(inv_mass) - self.logp;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn velocity(&self, inv_mass: &[f64]) -> Vec<f64> {
        self.p.iter().zip(inv_mass).map(|(p, m)| p * m).collect()
    }

    fn copy_state_from(&mut self, other: &Point) {
        self.q.copy_from_slice(&other.q);
        self.p.copy_from_slice(&other.p);
        self.grad.copy_from_slice(&other.grad);
        self.logp = other.logp;
    }
}

/// Summary of one transition.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TransitionStats {
    pub accept_stat: f64,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub energy: f64,
}

struct Builder<'a, D: ?Sized, R> {
    density: &'a D,
    inv_mass: &'a [f64],
    step: f64,
    h0: f64,
    rng: &'a mut R,
    n_leapfrog: usize,
    sum_accept: f64,
    divergent: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn no_u_turn(v_minus: &[f64], v_plus: &[f64], rho: &[f64]) -> bool {
    dot(v_plus, rho) > 0.0 && dot(v_minus, rho) > 0.0
}

/// Edge quantities of a subtree needed for the U-turn checks.
struct Edges {
    v_begin: Vec<f64>,
    v_end: Vec<f64>,
    p_begin: Vec<f64>,
    p_end: Vec<f64>,
}

impl<D: LogDensity + ?Sized, R: Rng> Builder<'_, D, R> {
    fn leapfrog(&mut self, z: &mut Point, dir: f64) {
        let eps = dir * self.step;
        for i in 0..z.q.len() {
            z.p[i] += 0.5 * eps * z.grad[i];
        }
        for i in 0..z.q.len() {
            z.q[i] += eps * self.inv_mass[i] * z.p[i];
        }
        z.logp = self.density.logp_grad(&z.q, &mut z.grad);
        for i in 0..z.q.len() {
            z.p[i] += 0.5 * eps * z.grad[i];
        }
    }

    /// Extends `z` by `2^depth` leapfrog steps in direction `dir`.
    /// Returns false if the subtree diverged or turned back on itself.
    fn build(
        &mut self,
        z: &mut Point,
        depth: usize,
        dir: f64,
        proposal: &mut Point,
        rho: &mut [f64],
        log_weight: &mut f64,
    ) -> Option<Edges> {
        if depth == 0 {
            self.leapfrog(z, dir);
            self.n_leapfrog += 1;
            let h = z.energy(self.inv_mass);
            if !z.logp.is_finite() || h - self.h0 > MAX_ENERGY_ERROR {
                self.divergent = true;
            }
            let delta = self.h0 - h;
            *log_weight = log_add_exp(*log_weight, delta);
            self.sum_accept += if delta > 0.0 { 1.0 } else { delta.exp() };
            proposal.copy_state_from(z);
            add_into(rho, &z.p);
            if self.divergent {
                return None;
            }
            let v = z.velocity(self.inv_mass);
            return Some(Edges {
                v_begin: v.clone(),
                v_end: v,
                p_begin: z.p.clone(),
                p_end: z.p.clone(),
            });
        }

        let dim = z.q.len();
        let mut w_init = f64::NEG_INFINITY;
        let mut rho_init = vec![0.0; dim];
        let init = self.build(z, depth - 1, dir, proposal, &mut rho_init, &mut w_init)?;

        let mut proposal_final = z.clone();
        let mut w_final = f64::NEG_INFINITY;
        let mut rho_final = vec![0.0; dim];
        let fin = self.build(z, depth - 1, dir, &mut proposal_final, &mut rho_final, &mut w_final)?;

        let w_subtree = log_add_exp(w_init, w_final);
        *log_weight = log_add_exp(*log_weight, w_subtree);
        if w_final > w_subtree || self.rng.random::<f64>() < (w_final - w_subtree).exp() {
            proposal.copy_state_from(&proposal_final);
        }

        let rho_subtree = sum(&rho_init, &rho_final);
        add_into(rho, &rho_subtree);
        let ok = no_u_turn(&init.v_begin, &fin.v_end, &rho_subtree)
            && no_u_turn(&init.v_begin, &fin.v_begin, &sum(&rho_init, &fin.p_begin))
            && no_u_turn(&init.v_end, &fin.v_end, &sum(&rho_final, &init.p_end));
        if !ok {
            return None;
        }
        Some(Edges {
            v_begin: init.v_begin,
            v_end: fin.v_end,
            p_begin: init.p_begin,
            p_end: fin.p_end,
        })
    }
}

/// Log acceptance ratio of a single leapfrog step from `start` with fresh momentum.
pub(crate) fn one_step_log_accept<D, R>(
    density: &D,
    start: &Point,
    step: f64,
    inv_mass: &[f64],
    rng: &mut R,
) -> f64
where
    D: LogDensity + ?Sized,
    R: Rng,
{
    let mut z = start.clone();
    for i in 0..z.p.len() {
        let n: f64 = StandardNormal.sample(rng);
        z.p[i] = n / inv_mass[i].sqrt();
    }
    let h0 = z.energy(inv_mass);
    let mut b = Builder {
        density,
        inv_mass,
        step,
        h0,
        rng,
        n_leapfrog: 0,
        sum_accept: 0.0,
        divergent: false,
    };
    b.leapfrog(&mut z, 1.0);
    let delta = h0 - z.energy(inv_mass);
    if delta.is_nan() {
        f64::NEG_INFINITY
    } else {
        delta
    }
}

/// Runs one NUTS transition from `current`, replacing it with the new state.
pub(crate) fn transition<D, R>(
    density: &D,
    current: &mut Point,
    step: f64,
    inv_mass: &[f64],
    max_depth: usize,
    rng: &mut R,
) -> TransitionStats
where
    D: LogDensity + ?Sized,
    R: Rng,
{
    let dim = current.q.len();
    for i in 0..dim {
        let z: f64 = StandardNormal.sample(rng);
        current.p[i] = z / inv_mass[i].sqrt();
    }
    let h0 = current.energy(inv_mass);

    let mut fwd = current.clone();
    let mut bwd = current.clone();
    let mut sample = current.clone();
    let mut log_weight = 0.0;
    let v0 = current.velocity(inv_mass);
    let (mut v_fwd_fwd, mut v_bwd_bwd) = (v0.clone(), v0.clone());
    let (mut v_fwd_bwd, mut v_bwd_fwd) = (v0.clone(), v0);
    let (mut p_fwd_bwd, mut p_bwd_fwd) = (current.p.clone(), current.p.clone());
    let mut rho = current.p.clone();

    let mut b = Builder {
        density,
        inv_mass,
        step,
        h0,
        rng,
        n_leapfrog: 0,
        sum_accept: 0.0,
        divergent: false,
    };
    let mut depth = 0;
    let mut proposal = current.clone();

    while depth < max_depth {
        let mut rho_sub = vec![0.0; dim];
        let mut w_sub = f64::NEG_INFINITY;
        let forward = b.rng.random::<bool>();
        let (rho_fwd, rho_bwd);
        if forward {
            let edges = b.build(&mut fwd, depth, 1.0, &mut proposal, &mut rho_sub, &mut w_sub);
            let Some(e) = edges else { break };
            rho_fwd = rho_sub;
            rho_bwd = rho.clone();
            v_fwd_bwd = e.v_begin;
            v_fwd_fwd = e.v_end;
            p_fwd_bwd = e.p_begin;
        } else {
            let edges = b.build(&mut bwd, depth, -1.0, &mut proposal, &mut rho_sub, &mut w_sub);
            let Some(e) = edges else { break };
            rho_bwd = rho_sub;
            rho_fwd = rho.clone();
            v_bwd_fwd = e.v_begin;
            v_bwd_bwd = e.v_end;
            p_bwd_fwd = e.p_begin;
        }
        depth += 1;

        // biased progressive sampling favors the newer subtree
        if w_sub > log_weight || b.rng.random::<f64>() < (w_sub - log_weight).exp() {
            sample.copy_state_from(&proposal);
        }
        log_weight = log_add_exp(log_weight, w_sub);

        rho = sum(&rho_bwd, &rho_fwd);
        let ok = no_u_turn(&v_bwd_bwd, &v_fwd_fwd, &rho)
            && no_u_turn(&v_bwd_bwd, &v_fwd_bwd, &sum(&rho_bwd, &p_fwd_bwd))
            && no_u_turn(&v_bwd_fwd, &v_fwd_fwd, &sum(&rho_fwd, &p_bwd_fwd));
        if !ok {
            break;
        }
    }

    let stats = TransitionStats {
        accept_stat: if b.n_leapfrog == 0 {
            0.0
        } else {
            b.sum_accept / b.n_leapfrog as f64
        },
        tree_depth: depth,
        n_leapfrog: b.n_leapfrog,
        divergent: b.divergent,
        energy: 0.0,
    };
    current.copy_state_from(&sample);
    TransitionStats {
        energy: current.energy(inv_mass),
        ..stats
    }
}
