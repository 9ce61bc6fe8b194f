//! Similarity and distance families.
//!
//! Every family is exposed twice: as plain scalar functions over slices,
//! and as [`pairwise_scores`], a batched differentiable kernel on a
//! [`Graph`]. Attention and classification consume *scores* where higher
//! means more similar: cosine passes through unchanged, distances are
//! negated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Norms below this make cosine similarity 0.
pub const COSINE_ZERO_NORM: f64 = 1e-12;
pub const DEFAULT_BALL_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricKind {
    Cosine,
    Euclidean,
    Minkowski(f64),
    Poincare { epsilon: f64 },
}

impl MetricKind {
    pub fn poincare() -> Self {
        MetricKind::Poincare {
            epsilon: DEFAULT_BALL_EPSILON,
        }
    }

    /// Row order of the metric-comparison table.
    pub fn table_order() -> [MetricKind; 5] {
        [
            MetricKind::Cosine,
            MetricKind::Euclidean,
            MetricKind::poincare(),
            MetricKind::Minkowski(1.0),
            MetricKind::Minkowski(3.0),
        ]
    }

    pub fn is_distance(&self) -> bool {
        !matches!(self, MetricKind::Cosine)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MetricKind::Minkowski(p) if !(p > 0.0 && p.is_finite()) => Err(Error::invalid(
                "metric",
                format!("minkowski order must be positive, got {p}"),
            )),
            MetricKind::Poincare { epsilon } if !(epsilon > 0.0 && epsilon < 1e-2) => {
                Err(Error::invalid(
                    "metric",
                    format!("poincare epsilon must lie in (0, 1e-2), got {epsilon}"),
                ))
            }
            _ => Ok(()),
        }
    }

    /// Distance between two vectors; cosine yields `-cosine`.
    pub fn distance(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        Ok(-similarity(self, u, v)?)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::Cosine => write!(f, "cosine"),
            MetricKind::Euclidean => write!(f, "euclidean"),
            MetricKind::Minkowski(p) => write!(f, "minkowski:p={p}"),
            MetricKind::Poincare { epsilon } if *epsilon == DEFAULT_BALL_EPSILON => {
                write!(f, "poincare")
            }
            MetricKind::Poincare { epsilon } => write!(f, "poincare:eps={epsilon}"),
        }
    }
}

pub const METRIC_SYNTAX: &str = "cosine, euclidean, minkowski:p=<real>, poincare";

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown metric '{s}'; expected one of: {METRIC_SYNTAX}"
            ))
        };
        let s = s.trim();
        let metric = match s {
            "cosine" => MetricKind::Cosine,
            "euclidean" => MetricKind::Euclidean,
            "poincare" => MetricKind::poincare(),
            _ => {
                if let Some(p) = s.strip_prefix("minkowski:p=") {
                    MetricKind::Minkowski(p.parse().map_err(|_| bad())?)
                } else if let Some(e) = s.strip_prefix("poincare:eps=") {
                    MetricKind::Poincare {
                        epsilon: e.parse().map_err(|_| bad())?,
                    }
                } else {
                    return Err(bad());
                }
            }
        };
        metric
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(metric)
    }
}

impl Serialize for MetricKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn same_len(op: &'static str, u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::shape(op, &[u.len()], &[v.len()]));
    }
    Ok(())
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    same_len("cosine", u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu < COSINE_ZERO_NORM || nv < COSINE_ZERO_NORM {
        return Ok(0.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

pub fn euclidean(u: &[f64], v: &[f64]) -> Result<f64> {
    same_len("euclidean", u, v)?;
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

pub fn minkowski(u: &[f64], v: &[f64], p: f64) -> Result<f64> {
    same_len("minkowski", u, v)?;
    if !(p > 0.0) {
        return Err(Error::invalid("minkowski", format!("order p = {p} must be > 0")));
    }
    let s: f64 = u.iter().zip(v).map(|(a, b)| (a - b).abs().powf(p)).sum();
    Ok(s.powf(1.0 / p))
}

/// `ln(x + sqrt(x² − 1))` with `x` clamped to at least 1.
pub fn arcosh(x: f64) -> f64 {
    let x = x.max(1.0);
    (x + (x * x - 1.0).sqrt()).ln()
}

/// Hyperbolic distance in the open unit ball. Both points must already be
/// strictly inside; see [`project_to_ball`].
pub fn poincare(u: &[f64], v: &[f64]) -> Result<f64> {
    same_len("poincare", u, v)?;
    let (nu2, nv2) = (norm(u).powi(2), norm(v).powi(2));
    if nu2 >= 1.0 || nv2 >= 1.0 {
        return Err(Error::domain(
            "poincare",
            format!(
                "operands must lie inside the unit ball (norms {}, {})",
                nu2.sqrt(),
                nv2.sqrt()
            ),
        ));
    }
    let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(arcosh(1.0 + 2.0 * d2 / ((1.0 - nu2) * (1.0 - nv2))))
}

/// Rescales `u` onto the sphere of radius `1 − epsilon` if it reaches it.
pub fn project_to_ball(u: &[f64], epsilon: f64) -> Vec<f64> {
    let n = norm(u);
    let max = 1.0 - epsilon;
    if n >= max {
        u.iter().map(|x| x * max / n).collect()
    } else {
        u.to_vec()
    }
}

/// Score where higher means more similar.
pub fn similarity(metric: &MetricKind, u: &[f64], v: &[f64]) -> Result<f64> {
    match *metric {
        MetricKind::Cosine => cosine(u, v),
        MetricKind::Euclidean => Ok(-euclidean(u, v)?),
        MetricKind::Minkowski(p) => Ok(-minkowski(u, v, p)?),
        MetricKind::Poincare { epsilon } => {
            let pu = project_to_ball(u, epsilon);
            let pv = project_to_ball(v, epsilon);
            Ok(-poincare(&pu, &pv)?)
        }
    }
}

/// `[q, s, d]` tensor of `queries[i] - supports[j]`.
fn pairwise_diff(g: &mut Graph<'_>, q: Var, s: Var) -> Result<Var> {
    let (nq, d) = (g.value(q).rows(), g.value(q).cols());
    let ns = g.value(s).rows();
    let q3 = g.reshape(q, &[nq, 1, d])?;
    let qb = g.broadcast_to(q3, &[nq, ns, d])?;
    let s3 = g.reshape(s, &[1, ns, d])?;
    let sb = g.broadcast_to(s3, &[nq, ns, d])?;
    g.sub(qb, sb)
}

fn row_norms(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let s = g.sum(sq, 1)?;
    g.sqrt(s)
}

/// Outer combination `a[i] (op) b[j]` of two vectors as a `[n, m]` matrix.
fn outer_mul(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let (n, m) = (g.value(a).numel(), g.value(b).numel());
    let a2 = g.reshape(a, &[n, 1])?;
    let ab = g.broadcast_to(a2, &[n, m])?;
    let b2 = g.reshape(b, &[1, m])?;
    let bb = g.broadcast_to(b2, &[n, m])?;
    g.mul(ab, bb)
}

/// Differentiable projection of every row onto the ball of radius `1 − eps`.
pub fn project_rows_to_ball(g: &mut Graph<'_>, x: Var, epsilon: f64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let max = 1.0 - epsilon;
    let norms = row_norms(g, x)?;
    let clamped = g.clamp_min(norms, max)?;
    let inv = g.safe_recip(clamped, 0.0)?;
    let factor = g.scale(inv, max)?;
    let f2 = g.reshape(factor, &[shape[0], 1])?;
    let fb = g.broadcast_to(f2, &shape)?;
    g.mul(x, fb)
}

/// Score matrix `[q, s]` with entry `(i, j) = similarity(queries[i], supports[j])`.
pub fn pairwise_scores(
    g: &mut Graph<'_>,
    metric: &MetricKind,
    queries: Var,
    supports: Var,
) -> Result<Var> {
    let (qs, ss) = (g.value(queries).shape(), g.value(supports).shape());
    if qs.len() != 2 || ss.len() != 2 || qs[1] != ss[1] {
        return Err(Error::shape("pairwise_scores", qs, ss));
    }
    metric.validate()?;
    match *metric {
        MetricKind::Cosine => {
            let st = g.transpose(supports)?;
            let dot = g.matmul(queries, st)?;
            let nq = row_norms(g, queries)?;
            let ns = row_norms(g, supports)?;
            let iq = g.safe_recip(nq, COSINE_ZERO_NORM)?;
            let is = g.safe_recip(ns, COSINE_ZERO_NORM)?;
            let inv = outer_mul(g, iq, is)?;
            g.mul(dot, inv)
        }
        MetricKind::Euclidean => {
            let diff = pairwise_diff(g, queries, supports)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq, 2)?;
            let d = g.sqrt(s)?;
            g.neg(d)
        }
        MetricKind::Minkowski(p) => {
            let diff = pairwise_diff(g, queries, supports)?;
            let a = g.abs(diff)?;
            let d = if p == 1.0 {
                g.sum(a, 2)?
            } else {
                let ap = g.pow(a, p)?;
                let s = g.sum(ap, 2)?;
                g.pow(s, 1.0 / p)?
            };
            g.neg(d)
        }
        MetricKind::Poincare { epsilon } => {
            let q = project_rows_to_ball(g, queries, epsilon)?;
            let s = project_rows_to_ball(g, supports, epsilon)?;
            let diff = pairwise_diff(g, q, s)?;
            let sq = g.mul(diff, diff)?;
            let d2 = g.sum(sq, 2)?;
            let conformal = |g: &mut Graph<'_>, x: Var| -> Result<Var> {
                let sq = g.mul(x, x)?;
                let n2 = g.sum(sq, 1)?;
                let neg = g.neg(n2)?;
                g.add_scalar(neg, 1.0)
            };
            let aq = conformal(g, q)?;
            let as_ = conformal(g, s)?;
            let denom = outer_mul(g, aq, as_)?;
            let ratio = g.div(d2, denom)?;
            let r2 = g.scale(ratio, 2.0)?;
            let arg = g.add_scalar(r2, 1.0)?;
            let x = g.clamp_min(arg, 1.0)?;
            let x2 = g.mul(x, x)?;
            let x2m1 = g.add_scalar(x2, -1.0)?;
            // x² − 1 can round to a tiny negative when x == 1
            let x2m1 = g.clamp_min(x2m1, 0.0)?;
            let root = g.sqrt(x2m1)?;
            let sum = g.add(x, root)?;
            let d = g.log(sum)?;
            g.neg(d)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, ParamStore};
    use crate::Tensor;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn cosine_examples() {
        close(cosine(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]).unwrap(), 1.0, 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), -1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn minkowski_examples() {
        assert_eq!(minkowski(&[0.0, 0.0], &[1.0, 2.0], 1.0).unwrap(), 3.0);
        assert_eq!(minkowski(&[0.0, 0.0], &[3.0, 4.0], 2.0).unwrap(), 5.0);
        // direct evaluation: (1 + 1)^(1/3)
        close(
            minkowski(&[0.0, 0.0], &[1.0, 1.0], 3.0).unwrap(),
            2f64.powf(1.0 / 3.0),
            1e-15,
        );
        close(minkowski(&[0.0, 0.0], &[1.0, 1.0], 3.0).unwrap(), 1.259921, 1e-6);
        assert!(minkowski(&[0.0], &[1.0], 0.0).is_err());
        assert!(minkowski(&[0.0], &[1.0], -1.0).is_err());
        assert!(minkowski(&[0.0], &[1.0, 2.0], 2.0).is_err());
    }

    #[test]
    fn poincare_examples() {
        assert_eq!(poincare(&[0.2, -0.3], &[0.2, -0.3]).unwrap(), 0.0);
        // 2 * 0.25 / (1 * 0.75) = 2/3, arcosh(5/3) = ln(5/3 + 4/3) = ln 3
        close(poincare(&[0.0, 0.0], &[0.5, 0.0]).unwrap(), 3f64.ln(), 1e-12);
        close(poincare(&[0.0, 0.0], &[0.5, 0.0]).unwrap(), 1.098612, 1e-6);
        assert!(matches!(
            poincare(&[1.0, 0.0], &[0.0, 0.0]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn poincare_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let u = project_to_ball(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], 1e-5);
            let v = project_to_ball(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], 1e-5);
            assert_eq!(poincare(&u, &v).unwrap(), poincare(&v, &u).unwrap());
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_to_ball(&[0.1, 0.1], 1e-5), vec![0.1, 0.1]);
        let p = project_to_ball(&[3.0, 4.0], 1e-5);
        // rescale oracle: (3, 4) / 5 * (1 - 1e-5)
        close(p[0], 0.6 * (1.0 - 1e-5), 1e-15);
        close(p[1], 0.8 * (1.0 - 1e-5), 1e-15);
        close(p[0], 0.599994, 1e-9);
        close(p[1], 0.799992, 1e-9);
        close(norm(&p), 1.0 - 1e-5, 1e-15);
        assert_eq!(project_to_ball(&p, 1e-5), p);
    }

    #[test]
    fn similarity_sign_convention() {
        let u = [0.4, -0.2, 0.9];
        assert_eq!(similarity(&MetricKind::Euclidean, &u, &u).unwrap(), 0.0);
        assert!(similarity(&MetricKind::Euclidean, &u, &[0.4, -0.2, 0.8]).unwrap() < 0.0);
        close(
            similarity(&MetricKind::Cosine, &u, &[0.8, -0.4, 1.8]).unwrap(),
            1.0,
            1e-15,
        );
    }

    #[test]
    fn argmax_similarity_is_argmin_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let metrics = [
            MetricKind::Euclidean,
            MetricKind::Minkowski(1.0),
            MetricKind::Minkowski(3.0),
            MetricKind::poincare(),
        ];
        for metric in metrics {
            for _ in 0..100 {
                let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.4..0.4)).collect();
                let cands: Vec<Vec<f64>> = (0..6)
                    .map(|_| (0..4).map(|_| rng.gen_range(-0.4..0.4)).collect())
                    .collect();
                let dist = |c: &Vec<f64>| match metric {
                    MetricKind::Euclidean => euclidean(&q, c).unwrap(),
                    MetricKind::Minkowski(p) => minkowski(&q, c, p).unwrap(),
                    _ => poincare(&q, c).unwrap(),
                };
                let by_dist = (0..6)
                    .min_by(|&a, &b| dist(&cands[a]).partial_cmp(&dist(&cands[b])).unwrap())
                    .unwrap();
                let by_sim = (0..6)
                    .max_by(|&a, &b| {
                        let sa = similarity(&metric, &q, &cands[a]).unwrap();
                        let sb = similarity(&metric, &q, &cands[b]).unwrap();
                        sa.partial_cmp(&sb).unwrap()
                    })
                    .unwrap();
                assert_eq!(by_dist, by_sim);
            }
        }
    }

    #[test]
    fn metric_strings_round_trip() {
        for s in ["cosine", "euclidean", "minkowski:p=1", "minkowski:p=3", "poincare"] {
            let m: MetricKind = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert_eq!(
            "minkowski:p=2.5".parse::<MetricKind>().unwrap(),
            MetricKind::Minkowski(2.5)
        );
        let err = "manhattan".parse::<MetricKind>().unwrap_err().to_string();
        assert!(err.contains("minkowski:p=<real>"), "{err}");
        assert!("minkowski:p=0".parse::<MetricKind>().is_err());
        assert!("poincare:eps=0.5".parse::<MetricKind>().is_err());
    }

    fn pairwise_values(metric: &MetricKind, q: &Tensor, s: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let qv = g.input(q.clone());
        let sv = g.input(s.clone());
        let out = pairwise_scores(&mut g, metric, qv, sv).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn pairwise_matches_scalar_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let metrics = [
            MetricKind::Cosine,
            MetricKind::Euclidean,
            MetricKind::Minkowski(1.0),
            MetricKind::Minkowski(2.0),
            MetricKind::Minkowski(3.0),
            MetricKind::poincare(),
        ];
        for metric in metrics {
            let q = Tensor::new(&[2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let s = Tensor::new(&[2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let m = pairwise_values(&metric, &q, &s);
            assert_eq!(m.shape(), &[2, 2]);
            for i in 0..2 {
                for j in 0..2 {
                    close(
                        m.at(i, j),
                        similarity(&metric, q.row(i), s.row(j)).unwrap(),
                        1e-12,
                    );
                }
            }
        }
    }

    #[test]
    fn pairwise_identical_entry_is_row_max() {
        let q = Tensor::from_rows(&[vec![0.5, 0.1]]).unwrap();
        let s = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.1], vec![0.6, 0.1]]).unwrap();
        let m = pairwise_values(&MetricKind::Euclidean, &q, &s);
        assert_eq!(m.at(0, 1), 0.0);
        assert!(m.at(0, 0) < 0.0 && m.at(0, 2) < 0.0);
    }

    #[test]
    fn pairwise_rejects_mismatched_dims() {
        let mut g = Graph::new();
        let q = g.input(Tensor::zeros(&[2, 3]));
        let s = g.input(Tensor::zeros(&[2, 4]));
        assert!(pairwise_scores(&mut g, &MetricKind::Cosine, q, s).is_err());
    }

    #[test]
    fn pairwise_zero_rows_are_finite() {
        let q = Tensor::zeros(&[2, 3]);
        let s = Tensor::zeros(&[2, 3]);
        for metric in MetricKind::table_order() {
            let m = pairwise_values(&metric, &q, &s);
            assert!(m.all_finite());
        }
    }

    #[test]
    fn pairwise_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let metrics = [
            MetricKind::Cosine,
            MetricKind::Euclidean,
            MetricKind::Minkowski(1.0),
            MetricKind::Minkowski(2.0),
            MetricKind::Minkowski(3.0),
            MetricKind::poincare(),
        ];
        for metric in metrics {
            for trial in 0..10 {
                // inside the ball, away from its boundary and from zero norm
                let mut store = ParamStore::new();
                let q = store
                    .add_uniform("q", &[3, 4], 0.4, &mut rng)
                    .unwrap();
                let s = store
                    .add_uniform("s", &[2, 4], 0.4, &mut rng)
                    .unwrap();
                let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let report = grad_check(
                    &store,
                    |g| {
                        let qv = g.param(q);
                        let sv = g.param(s);
                        let m = pairwise_scores(g, &metric, qv, sv)?;
                        let wv = g.constant(Tensor::new(&[3, 2], w.clone())?);
                        let p = g.mul(m, wv)?;
                        g.sum_all(p)
                    },
                    1e-6,
                    1e-4,
                )
                .unwrap();
                assert!(report.passed(), "{metric} trial {trial}: {report:?}");
            }
        }
    }

    #[test]
    fn projected_rows_gradient_outside_ball() {
        let mut store = ParamStore::new();
        let x = store
            .add("x", Tensor::from_rows(&[vec![3.0, 4.0], vec![0.1, 0.2]]).unwrap())
            .unwrap();
        let report = grad_check(
            &store,
            |g| {
                let xv = g.param(x);
                let p = project_rows_to_ball(g, xv, 1e-5)?;
                let w = g.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]])?);
                let m = g.mul(p, w)?;
                g.sum_all(m)
            },
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
