//! Small dense convex QP used to project the objective gradient onto the
//! linearized feasible set.
//!
//! ```text
//! minimize    ‖w + g‖² + ρ Σ_soft (a_sᵀ w − b_s)²
//! subject to  a_eᵀ w = b_e                      (hard equality rows)
//!             lb_in ≤ A_in w ≤ ub_in
//!             lb_box ≤ u + α w ≤ ub_box
//! ```
//!
//! Solved with the Goldfarb-Idnani dual active-set method on the
//! standard form `½ wᵀ G w + aᵀ w`, followed by one exact KKT solve on the
//! final working set.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Shifted gradient; the objective centre is `−g`.
    pub g: Vec<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: Vec<f64>,
    /// Per equality row: replace by a quadratic penalty of weight `rho`.
    pub eq_soft: Vec<bool>,
    pub rho: f64,
    pub a_in: DMatrix<f64>,
    pub lb_in: Vec<f64>,
    pub ub_in: Vec<f64>,
    /// Box on `offset + alpha * w`.
    pub lb_box: Vec<f64>,
    pub ub_box: Vec<f64>,
    pub offset: Vec<f64>,
    pub alpha: f64,
}

impl QpProblem {
    /// Unconstrained problem with the given `g`, unit step and no box.
    pub fn unconstrained(g: Vec<f64>) -> Self {
        let p = g.len();
        Self {
            g,
            a_eq: DMatrix::zeros(0, p),
            b_eq: vec![],
            eq_soft: vec![],
            rho: 1e4,
            a_in: DMatrix::zeros(0, p),
            lb_in: vec![],
            ub_in: vec![],
            lb_box: vec![f64::NEG_INFINITY; p],
            ub_box: vec![f64::INFINITY; p],
            offset: vec![0.0; p],
            alpha: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let p = self.dim();
        let dims_ok = self.a_eq.ncols() == p
            && self.a_eq.nrows() == self.b_eq.len()
            && self.eq_soft.len() == self.b_eq.len()
            && self.a_in.ncols() == p
            && self.a_in.nrows() == self.lb_in.len()
            && self.lb_in.len() == self.ub_in.len()
            && self.lb_box.len() == p
            && self.ub_box.len() == p
            && self.offset.len() == p;
        if !dims_ok {
            return Err(QpError::Dimension);
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(QpError::NonPositiveAlpha);
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(QpError::NegativePenalty);
        }
        if let Some(i) = (0..self.lb_in.len()).find(|&i| !(self.lb_in[i] <= self.ub_in[i])) {
            return Err(QpError::InvertedBounds(ConstraintRef::RowLower(i)));
        }
        if let Some(j) = (0..p).find(|&j| !(self.lb_box[j] <= self.ub_box[j])) {
            return Err(QpError::InvertedBounds(ConstraintRef::BoxLower(j)));
        }
        Ok(())
    }

    /// Box bounds translated to `w` space.
    pub fn box_in_w(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self
            .lb_box
            .iter()
            .zip(&self.offset)
            .map(|(lb, u)| (lb - u) / self.alpha)
            .collect();
        let hi = self
            .ub_box
            .iter()
            .zip(&self.offset)
            .map(|(ub, u)| (ub - u) / self.alpha)
            .collect();
        (lo, hi)
    }

    pub fn objective(&self, w: &[f64]) -> f64 {
        let mut f: f64 = w.iter().zip(&self.g).map(|(wi, gi)| (wi + gi).powi(2)).sum();
        for (i, &soft) in self.eq_soft.iter().enumerate() {
            if soft {
                let r = row_dot(&self.a_eq, i, w) - self.b_eq[i];
                f += self.rho * r * r;
            }
        }
        f
    }

    pub fn objective_gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut grad: Vec<f64> = w.iter().zip(&self.g).map(|(wi, gi)| 2.0 * (wi + gi)).collect();
        for (i, &soft) in self.eq_soft.iter().enumerate() {
            if soft {
                let r = row_dot(&self.a_eq, i, w) - self.b_eq[i];
                for (j, gj) in grad.iter_mut().enumerate() {
                    *gj += 2.0 * self.rho * r * self.a_eq[(i, j)];
                }
            }
        }
        grad
    }

    /// Residuals `a_sᵀ w − b_s` of the soft equality rows (0 for hard rows).
    pub fn soft_residuals(&self, w: &[f64]) -> Vec<f64> {
        (0..self.b_eq.len())
            .map(|i| {
                if self.eq_soft[i] {
                    row_dot(&self.a_eq, i, w) - self.b_eq[i]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Standard form `(G, a)` with `½ wᵀ G w + aᵀ w` equal to the objective
    /// up to a constant.
    pub fn standard_form(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.dim();
        let mut hess = DMatrix::identity(p, p) * 2.0;
        let mut lin = DVector::from_iterator(p, self.g.iter().map(|g| 2.0 * g));
        for (i, &soft) in self.eq_soft.iter().enumerate() {
            if soft {
                let row = self.a_eq.row(i).transpose();
                hess += (&row * row.transpose()) * (2.0 * self.rho);
                lin -= &row * (2.0 * self.rho * self.b_eq[i]);
            }
        }
        (hess, lin)
    }
}

fn row_dot(m: &DMatrix<f64>, row: usize, w: &[f64]) -> f64 {
    (0..m.ncols()).map(|j| m[(row, j)] * w[j]).sum()
}

/// Identifies one side of one constraint of a [`QpProblem`]. The derived
/// ordering is the tie-breaking order: equalities, box, general rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConstraintRef {
    Equality(usize),
    BoxLower(usize),
    BoxUpper(usize),
    RowLower(usize),
    RowUpper(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("inconsistent problem dimensions")]
    Dimension,
    #[error("step size must be positive and finite")]
    NonPositiveAlpha,
    #[error("penalty weight must be non-negative")]
    NegativePenalty,
    #[error("lower bound exceeds upper bound at {0:?}")]
    InvertedBounds(ConstraintRef),
    #[error("Hessian is not positive definite")]
    NotConvex,
}

/// Lagrange multipliers for `∇f = Σ λ ∇c` with every inequality written as
/// `c(w) ≥ 0`. Box multipliers refer to the `w`-space bounds. Soft rows
/// carry no multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub eq: Vec<f64>,
    pub box_lower: Vec<f64>,
    pub box_upper: Vec<f64>,
    pub row_lower: Vec<f64>,
    pub row_upper: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(p: &QpProblem) -> Self {
        Self {
            eq: vec![0.0; p.b_eq.len()],
            box_lower: vec![0.0; p.dim()],
            box_upper: vec![0.0; p.dim()],
            row_lower: vec![0.0; p.lb_in.len()],
            row_upper: vec![0.0; p.lb_in.len()],
        }
    }

    fn slot(&mut self, c: ConstraintRef) -> &mut f64 {
        match c {
            ConstraintRef::Equality(i) => &mut self.eq[i],
            ConstraintRef::BoxLower(j) => &mut self.box_lower[j],
            ConstraintRef::BoxUpper(j) => &mut self.box_upper[j],
            ConstraintRef::RowLower(i) => &mut self.row_lower[i],
            ConstraintRef::RowUpper(i) => &mut self.row_upper[i],
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let s = |v: &Vec<f64>| v.iter().map(|x| x * c).collect();
        Self {
            eq: s(&self.eq),
            box_lower: s(&self.box_lower),
            box_upper: s(&self.box_upper),
            row_lower: s(&self.row_lower),
            row_upper: s(&self.row_upper),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// ‖∇f − Σ λ ∇c‖∞.
    pub stationarity: f64,
    /// Largest constraint violation (hard rows only).
    pub primal: f64,
    /// max |λ_i c_i(w)| over inequalities, also covering negative λ_i.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

/// Evaluates the KKT residuals of `w` and `m` for `p`.
pub fn kkt_residuals(p: &QpProblem, w: &[f64], m: &Multipliers) -> KktResiduals {
    let (lo, hi) = p.box_in_w();
    let mut stat = p.objective_gradient(w);
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let ineq = |lambda: f64, c: f64, comp: &mut f64, primal: &mut f64| {
        *primal = primal.max(-c);
        if c.is_finite() {
            *comp = comp.max((lambda * c).abs());
        }
        *comp = comp.max(-lambda);
    };

    for i in 0..p.b_eq.len() {
        if p.eq_soft[i] {
            continue;
        }
        let r = row_dot(&p.a_eq, i, w) - p.b_eq[i];
        primal = primal.max(r.abs());
        for (j, s) in stat.iter_mut().enumerate() {
            *s -= m.eq[i] * p.a_eq[(i, j)];
        }
    }
    for j in 0..p.dim() {
        stat[j] -= m.box_lower[j];
        stat[j] += m.box_upper[j];
        ineq(m.box_lower[j], w[j] - lo[j], &mut comp, &mut primal);
        ineq(m.box_upper[j], hi[j] - w[j], &mut comp, &mut primal);
    }
    for i in 0..p.lb_in.len() {
        let aw = row_dot(&p.a_in, i, w);
        for (j, s) in stat.iter_mut().enumerate() {
            *s -= (m.row_lower[i] - m.row_upper[i]) * p.a_in[(i, j)];
        }
        ineq(m.row_lower[i], aw - p.lb_in[i], &mut comp, &mut primal);
        ineq(m.row_upper[i], p.ub_in[i] - aw, &mut comp, &mut primal);
    }
    KktResiduals {
        stationarity: stat.iter().fold(0.0, |a, s| a.max(s.abs())),
        primal: primal.max(0.0),
        complementarity: comp,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub w: Vec<f64>,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub multipliers: Multipliers,
    /// Working set at termination, sorted.
    pub active_set: Vec<ConstraintRef>,
    /// `a_sᵀ w − b_s` per equality row (0 for hard rows).
    pub soft_residuals: Vec<f64>,
    /// Most violated constraint at `w` when not optimal.
    pub violated: Option<ConstraintRef>,
    pub iterations: usize,
}

/// One `nᵀ w ≥ b` (or `= b`) row of the standard form, normalized so
/// that `‖n‖ = 1`.
#[derive(Debug, Clone)]
pub struct StandardRow {
    pub normal: DVector<f64>,
    pub rhs: f64,
    pub equality: bool,
    pub origin: ConstraintRef,
    /// Original row norm; multipliers of the original row are `λ / norm`.
    pub norm: f64,
}

impl StandardRow {
    fn new(normal: DVector<f64>, rhs: f64, equality: bool, origin: ConstraintRef) -> Option<Self> {
        let norm = normal.norm();
        if norm == 0.0 {
            return None;
        }
        Some(Self {
            normal: normal / norm,
            rhs: rhs / norm,
            equality,
            origin,
            norm,
        })
    }

    fn slack(&self, w: &DVector<f64>) -> f64 {
        self.normal.dot(w) - self.rhs
    }
}

/// Strictly convex dense QP `min ½ wᵀ G w + aᵀ w` over [`StandardRow`]s.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub rows: Vec<StandardRow>,
}

#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub w: DVector<f64>,
    pub status: QpStatus,
    /// `(row index, multiplier)` for the working set, multipliers in the
    /// normalized-row scale.
    pub active: Vec<(usize, f64)>,
    pub violated: Option<usize>,
    pub iterations: usize,
}

const FEAS_TOL: f64 = 1e-12;
const DEP_TOL: f64 = 1e-12;

struct Working {
    rows: Vec<usize>,
    signs: Vec<f64>,
    lambda: Vec<f64>,
}

impl DenseQp {
    pub fn from_problem(p: &QpProblem) -> Self {
        let (hessian, linear) = p.standard_form();
        let n = p.dim();
        let mut rows = Vec::new();
        for i in 0..p.b_eq.len() {
            if !p.eq_soft[i] {
                let normal = p.a_eq.row(i).transpose();
                rows.extend(StandardRow::new(normal, p.b_eq[i], true, ConstraintRef::Equality(i)));
            }
        }
        let (lo, hi) = p.box_in_w();
        for j in 0..n {
            let e = DVector::from_fn(n, |k, _| if k == j { 1.0 } else { 0.0 });
            if lo[j].is_finite() {
                rows.extend(StandardRow::new(e.clone(), lo[j], false, ConstraintRef::BoxLower(j)));
            }
            if hi[j].is_finite() {
                rows.extend(StandardRow::new(-e, -hi[j], false, ConstraintRef::BoxUpper(j)));
            }
        }
        for i in 0..p.lb_in.len() {
            let a = p.a_in.row(i).transpose();
            if p.lb_in[i].is_finite() {
                rows.extend(StandardRow::new(a.clone(), p.lb_in[i], false, ConstraintRef::RowLower(i)));
            }
            if p.ub_in[i].is_finite() {
                rows.extend(StandardRow::new(-a, -p.ub_in[i], false, ConstraintRef::RowUpper(i)));
            }
        }
        Self {
            hessian,
            linear,
            rows,
        }
    }

    pub fn solve(&self) -> Result<DenseSolution, QpError> {
        let n = self.linear.len();
        let chol = Cholesky::new(self.hessian.clone()).ok_or(QpError::NotConvex)?;
        let ginv = chol.inverse();
        let mut w = -(&ginv * &self.linear);
        let mut ws = Working {
            rows: vec![],
            signs: vec![],
            lambda: vec![],
        };
        let max_iter = 50 * (self.rows.len() + n + 1);
        let mut iterations = 0;
        let mut skipped = vec![false; self.rows.len()];

        loop {
            let Some(pick) = self.select(&w, &ws, &skipped) else {
                break;
            };
            let row = &self.rows[pick];
            let sign = if row.equality && row.slack(&w) > 0.0 { -1.0 } else { 1.0 };
            let np = &row.normal * sign;
            let bp = row.rhs * sign;
            let mut added_multiplier = 0.0;
            loop {
                iterations += 1;
                if iterations > max_iter {
                    return Ok(self.finish(w, ws, QpStatus::MaxIter, Some(pick), iterations));
                }
                let (z, r) = self.direction(&ginv, &ws, &np);
                let mut t1 = f64::INFINITY;
                let mut drop: Option<usize> = None;
                for (k, &ri) in r.iter().enumerate() {
                    let idx = ws.rows[k];
                    if self.rows[idx].equality || ri <= 1e-14 {
                        continue;
                    }
                    let ratio = ws.lambda[k] / ri;
                    let better = match drop {
                        None => true,
                        Some(d) => {
                            let d: usize = d;
                            ratio < t1 || (ratio == t1 && self.rows[idx].origin < self.rows[ws.rows[d]].origin)
                        }
                    };
                    if better {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
                let zn = z.dot(&np);
                let reference = np.dot(&(&ginv * &np));
                let slack = np.dot(&w) - bp;
                let t2 = if zn > DEP_TOL * reference {
                    (-slack / zn).max(0.0)
                } else {
                    f64::INFINITY
                };
                if t2.is_infinite() && row.equality && slack.abs() <= FEAS_TOL {
                    // Redundant equality already satisfied.
                    skipped[pick] = true;
                    break;
                }
                if t1.is_infinite() && t2.is_infinite() {
                    return Ok(self.finish(w, ws, QpStatus::Infeasible, Some(pick), iterations));
                }
                if t2.is_infinite() {
                    for (l, ri) in ws.lambda.iter_mut().zip(r.iter()) {
                        *l -= t1 * ri;
                    }
                    added_multiplier += t1;
                    let k = drop.expect("finite partial step has a blocking row");
                    ws.rows.remove(k);
                    ws.signs.remove(k);
                    ws.lambda.remove(k);
                    continue;
                }
                let t = t1.min(t2);
                w += &z * t;
                for (l, ri) in ws.lambda.iter_mut().zip(r.iter()) {
                    *l -= t * ri;
                }
                added_multiplier += t;
                if t2 <= t1 {
                    ws.rows.push(pick);
                    ws.signs.push(sign);
                    ws.lambda.push(added_multiplier);
                    break;
                }
                let k = drop.expect("partial step has a blocking row");
                ws.rows.remove(k);
                ws.signs.remove(k);
                ws.lambda.remove(k);
            }
        }
        let (w, ws) = self.polish(w, ws);
        Ok(self.finish(w, ws, QpStatus::Optimal, None, iterations))
    }

    /// Next constraint to add: pending equalities in order, then the most
    /// violated inequality (lowest index on ties).
    fn select(&self, w: &DVector<f64>, ws: &Working, skipped: &[bool]) -> Option<usize> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.equality && !skipped[i] && !ws.rows.contains(&i) {
                return Some(i);
            }
        }
        let mut best = None;
        let mut worst = -FEAS_TOL;
        for (i, row) in self.rows.iter().enumerate() {
            if row.equality || ws.rows.contains(&i) {
                continue;
            }
            let s = row.slack(w);
            if s < worst {
                worst = s;
                best = Some(i);
            }
        }
        best
    }

    fn direction(
        &self,
        ginv: &DMatrix<f64>,
        ws: &Working,
        np: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let gnp = ginv * np;
        if ws.rows.is_empty() {
            return (gnp, DVector::zeros(0));
        }
        let n = np.len();
        let q = ws.rows.len();
        let mut nmat = DMatrix::zeros(n, q);
        for (k, (&idx, &s)) in ws.rows.iter().zip(&ws.signs).enumerate() {
            nmat.set_column(k, &(&self.rows[idx].normal * s));
        }
        let gin = ginv * &nmat;
        let m = nmat.transpose() * &gin;
        let rhs = gin.transpose() * np;
        let r = m
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| m.lu().solve(&rhs))
            .unwrap_or_else(|| DVector::zeros(q));
        let z = gnp - gin * &r;
        (z, r)
    }

    /// Re-solves the equality-constrained KKT system of the final working
    /// set to remove accumulated rounding.
    fn polish(&self, w: DVector<f64>, ws: Working) -> (DVector<f64>, Working) {
        let n = w.len();
        let q = ws.rows.len();
        let mut kkt = DMatrix::zeros(n + q, n + q);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.hessian);
        let mut rhs = DVector::zeros(n + q);
        rhs.rows_mut(0, n).copy_from(&(-&self.linear));
        for (k, (&idx, &s)) in ws.rows.iter().zip(&ws.signs).enumerate() {
            let nk = &self.rows[idx].normal * s;
            kkt.view_mut((0, n + k), (n, 1)).copy_from(&(-&nk));
            kkt.view_mut((n + k, 0), (1, n)).copy_from(&nk.transpose());
            rhs[n + k] = self.rows[idx].rhs * s;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            return (w, ws);
        };
        let w_new = sol.rows(0, n).into_owned();
        let lambda: Vec<f64> = sol.rows(n, q).iter().copied().collect();
        let dual_ok = ws
            .rows
            .iter()
            .zip(&lambda)
            .all(|(&idx, &l)| self.rows[idx].equality || l >= -1e-10);
        let primal_ok = self.rows.iter().all(|r| {
            let s = r.slack(&w_new);
            if r.equality {
                s.abs() <= 1e-9
            } else {
                s >= -1e-9
            }
        });
        if dual_ok && primal_ok && w_new.iter().all(|x| x.is_finite()) {
            let lambda = ws
                .rows
                .iter()
                .zip(lambda)
                .map(|(&idx, l)| if self.rows[idx].equality { l } else { l.max(0.0) })
                .collect();
            (w_new, Working { lambda, ..ws })
        } else {
            (w, ws)
        }
    }

    fn finish(
        &self,
        w: DVector<f64>,
        ws: Working,
        status: QpStatus,
        pending: Option<usize>,
        iterations: usize,
    ) -> DenseSolution {
        let violated = if status == QpStatus::Optimal {
            None
        } else {
            let mut best = pending;
            let mut worst = pending.map(|i| violation(&self.rows[i], &w)).unwrap_or(0.0);
            for (i, row) in self.rows.iter().enumerate() {
                let v = violation(row, &w);
                if v > worst {
                    worst = v;
                    best = Some(i);
                }
            }
            best
        };
        let active = ws
            .rows
            .iter()
            .zip(ws.signs.iter().zip(&ws.lambda))
            .map(|(&idx, (&s, &l))| (idx, s * l))
            .collect();
        DenseSolution {
            w,
            status,
            active,
            violated,
            iterations,
        }
    }
}

fn violation(row: &StandardRow, w: &DVector<f64>) -> f64 {
    let s = row.slack(w);
    if row.equality {
        s.abs()
    } else {
        (-s).max(0.0)
    }
}

/// Solves `p`; infeasibility and the iteration cap are reported through
/// [`QpSolution::status`], malformed input through `Err`.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution, QpError> {
    p.validate()?;
    let dense = DenseQp::from_problem(p);
    let sol = dense.solve()?;
    let w: Vec<f64> = sol.w.iter().copied().collect();
    let mut multipliers = Multipliers::zeros(p);
    let mut active_set = Vec::with_capacity(sol.active.len());
    for &(idx, lambda) in &sol.active {
        let row = &dense.rows[idx];
        *multipliers.slot(row.origin) = lambda / row.norm;
        active_set.push(row.origin);
    }
    active_set.sort();
    let kkt = kkt_residuals(p, &w, &multipliers);
    Ok(QpSolution {
        soft_residuals: p.soft_residuals(&w),
        w,
        status: sol.status,
        kkt,
        multipliers,
        active_set,
        violated: sol.violated.map(|i| dense.rows[i].origin),
        iterations: sol.iterations,
    })
}
