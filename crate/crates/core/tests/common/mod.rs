#![allow(dead_code)]

use cbfswarm::model::{AgentState, BarrierParams, Vec2};
use cbfswarm::policies::in_admissible_set;
use rand::Rng;

pub fn barrier() -> BarrierParams {
    BarrierParams::new(4.0, 6.0, 5.0).unwrap()
}

/// Rejection sampler for states in `h >= 0, lambda1 h + hdot >= 0`.
pub fn admissible_states<R: Rng>(rng: &mut R, n: usize, bp: &BarrierParams) -> Vec<AgentState> {
    loop {
        let mut states: Vec<AgentState> = Vec::with_capacity(n);
        while states.len() < n {
            let p = Vec2::new(rng.random_range(-14.0..14.0), rng.random_range(-14.0..14.0));
            if states.iter().all(|s| (s.pos - p).norm() >= bp.r()) {
                let v = Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                states.push(AgentState { pos: p, vel: v });
            }
        }
        if in_admissible_set(&states, bp).unwrap() {
            return states;
        }
    }
}

/// Pair constraint value `a + b (u_i - u_j)` written out from the barrier
/// definition.
pub fn pair_value(
    si: &AgentState,
    sj: &AgentState,
    ui: &Vec2,
    uj: &Vec2,
    bp: &BarrierParams,
) -> f64 {
    let xi = si.pos - sj.pos;
    let v = si.vel - sj.vel;
    let h = xi.norm_squared() - bp.r() * bp.r();
    let hdot = 2.0 * xi.dot(&v);
    2.0 * v.norm_squared() + bp.l1() * hdot + bp.l0() * h + 2.0 * xi.dot(&(ui - uj))
}

pub fn random_goals<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec2> {
    (0..n)
        .map(|_| Vec2::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)))
        .collect()
}

pub mod oracle {
    use cbfswarm::qp::{ConstraintRow, QpProblem, RowKind};
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    /// Brute-force solution: every subset of rows is tried as the active
    /// set and the candidate that is primal and dual feasible is returned.
    /// Soft rows become free slack variables with cost `w s^2`.
    pub fn enumerate(p: &QpProblem) -> Option<DVector<f64>> {
        let n = p.dim;
        let soft: Vec<usize> = (0..p.rows.len())
            .filter(|&i| !p.rows[i].is_hard())
            .collect();
        let m = n + soft.len();
        let mut h = DMatrix::zeros(m, m);
        h.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        let mut f = DVector::zeros(m);
        f.rows_mut(0, n).copy_from(&p.linear);
        let mut g = DMatrix::zeros(p.rows.len(), m);
        let o = DVector::from_iterator(p.rows.len(), p.rows.iter().map(|r| r.offset));
        for (i, r) in p.rows.iter().enumerate() {
            g.view_mut((i, 0), (1, n))
                .copy_from(&r.gradient.transpose());
        }
        for (k, &i) in soft.iter().enumerate() {
            if let RowKind::Soft { slack_weight } = p.rows[i].kind {
                h[(n + k, n + k)] = 2.0 * slack_weight;
            }
            g[(i, n + k)] = 1.0;
        }
        let rows = p.rows.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0u32..(1 << rows) {
            let act: Vec<usize> = (0..rows).filter(|i| mask & (1 << i) != 0).collect();
            let k = act.len();
            let mut kkt = DMatrix::zeros(m + k, m + k);
            kkt.view_mut((0, 0), (m, m)).copy_from(&h);
            let mut rhs = DVector::zeros(m + k);
            rhs.rows_mut(0, m).copy_from(&(-&f));
            for (c, &i) in act.iter().enumerate() {
                for j in 0..m {
                    kkt[(j, m + c)] = -g[(i, j)];
                    kkt[(m + c, j)] = g[(i, j)];
                }
                rhs[m + c] = -o[i];
            }
            let lu = kkt.lu();
            if lu.determinant().abs() < 1e-12 {
                continue;
            }
            let Some(sol) = lu.solve(&rhs) else { continue };
            let x = sol.rows(0, m).into_owned();
            let primal = (0..rows).all(|i| o[i] + g.row(i).dot(&x.transpose()) >= -1e-9);
            let dual = (0..k).all(|c| sol[m + c] >= -1e-9);
            if primal && dual {
                let obj = 0.5 * x.dot(&(&h * &x)) + f.dot(&x);
                if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                    best = Some((obj, x));
                }
            }
        }
        best.map(|(_, x)| x.rows(0, n).into_owned())
    }

    fn gaussian<R: Rng>(rng: &mut R) -> f64 {
        // Box-Muller
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let v: f64 = rng.random();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }

    fn vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| gaussian(rng)))
    }

    /// Random strictly convex problem with `dim <= 4` and `rows <= 6`. Most
    /// are feasible by construction; `soft` allows soft rows.
    pub fn random_problem<R: Rng>(rng: &mut R, soft: bool) -> QpProblem {
        let n = rng.random_range(1..=4);
        let a = DMatrix::from_fn(n, n, |_, _| gaussian(rng));
        let hess = a.transpose() * &a + DMatrix::identity(n, n) * 0.1;
        let mut p = QpProblem::new(hess, vector(rng, n));
        let anchor = vector(rng, n);
        let constructed = rng.random_bool(0.8);
        for _ in 0..rng.random_range(0..=6) {
            let grad = vector(rng, n);
            let offset = if constructed {
                -grad.dot(&anchor) + gaussian(rng).abs()
            } else {
                gaussian(rng) * 2.0
            };
            if soft && rng.random_bool(0.3) {
                p.push(ConstraintRow::soft(
                    offset,
                    grad,
                    10f64.powf(rng.random_range(-1.0..3.0)),
                ));
            } else {
                p.push(ConstraintRow::hard(offset, grad));
            }
        }
        p
    }

    /// Random problem whose hard rows contradict each other.
    pub fn random_infeasible<R: Rng>(rng: &mut R) -> QpProblem {
        let n = rng.random_range(1..=4);
        let a = DMatrix::from_fn(n, n, |_, _| gaussian(rng));
        let hess = a.transpose() * &a + DMatrix::identity(n, n) * 0.1;
        let mut p = QpProblem::new(hess, vector(rng, n));
        let g = vector(rng, n);
        let gap = gaussian(rng).abs() + 0.1;
        p.push(ConstraintRow::hard(-gap, g.clone()));
        p.push(ConstraintRow::hard(-gap, -g));
        for _ in 0..rng.random_range(0..=4) {
            p.push(ConstraintRow::hard(gaussian(rng), vector(rng, n)));
        }
        p
    }
}
