use proptest::prelude::*;

use fewshot_core::autodiff::Graph;
use fewshot_core::metrics::{cosine, euclidean, minkowski, pairwise_scores, poincare, MetricKind};
use fewshot_core::models::argmax;
use fewshot_core::Tensor;

fn vecs(dim: usize, n: usize, scale: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-scale..scale, dim), n)
}

/// Points of the given dimension strictly inside the unit ball.
fn in_ball(dim: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        (prop::collection::vec(-1.0f64..1.0, dim), 0.0f64..0.95).prop_map(|(v, r)| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / n * r).collect()
        }),
        n,
    )
}

fn axioms(d: impl Fn(&[f64], &[f64]) -> f64, p: &[Vec<f64>]) -> Result<(), TestCaseError> {
    let (u, v, w) = (&p[0], &p[1], &p[2]);
    let uv = d(u, v);
    prop_assert!(uv >= 0.0);
    prop_assert_eq!(uv.to_bits(), d(v, u).to_bits());
    prop_assert_eq!(d(u, u), 0.0);
    if u != v {
        prop_assert!(uv > 0.0);
    }
    prop_assert!(uv <= d(u, w) + d(w, v) + 1e-9);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn euclidean_is_a_metric(p in (1usize..9).prop_flat_map(|d| vecs(d, 3, 5.0))) {
        axioms(|a, b| euclidean(a, b).unwrap(), &p)?;
    }

    #[test]
    fn minkowski_is_a_metric_for_p_at_least_one(
        p in (1usize..9).prop_flat_map(|d| vecs(d, 3, 5.0)),
        order in prop::sample::select(vec![1.0, 1.5, 2.0, 3.0, 4.0]),
    ) {
        axioms(|a, b| minkowski(a, b, order).unwrap(), &p)?;
    }

    #[test]
    fn poincare_is_a_metric(p in (1usize..9).prop_flat_map(|d| in_ball(d, 3))) {
        axioms(|a, b| poincare(a, b).unwrap(), &p)?;
    }

    #[test]
    fn minkowski_two_is_euclidean(p in (1usize..17).prop_flat_map(|d| vecs(d, 2, 10.0))) {
        prop_assert!((minkowski(&p[0], &p[1], 2.0).unwrap() - euclidean(&p[0], &p[1]).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn poincare_grows_towards_the_boundary(dim in 1usize..6, t in 1e-3f64..0.99, dt in 1e-4f64..1e-2) {
        let t2 = (t + dt).min(1.0 - 1e-5 - 1e-9);
        prop_assume!(t2 > t);
        let origin = vec![0.0; dim];
        let at = |s: f64| {
            let mut v = origin.clone();
            v[0] = s;
            v
        };
        prop_assert!(poincare(&origin, &at(t)).unwrap() < poincare(&origin, &at(t2)).unwrap());
    }

    #[test]
    fn cosine_ignores_positive_scaling(
        p in (1usize..9).prop_flat_map(|d| vecs(d, 2, 3.0)),
        a in 1e-3f64..1e3,
        b in 1e-3f64..1e3,
    ) {
        prop_assume!(p.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let su: Vec<f64> = p[0].iter().map(|x| x * a).collect();
        let sv: Vec<f64> = p[1].iter().map(|x| x * b).collect();
        prop_assert!((cosine(&su, &sv).unwrap() - cosine(&p[0], &p[1]).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn softmax_argmax_is_nearest_support(
        q in vecs(6, 3, 0.5),
        s in vecs(6, 5, 0.5),
        which in 0usize..4,
    ) {
        let metric = [MetricKind::Euclidean, MetricKind::Minkowski(1.0), MetricKind::Minkowski(3.0), MetricKind::poincare()][which];
        let mut g = Graph::new();
        let qv = g.constant(Tensor::from_rows(&q).unwrap());
        let sv = g.constant(Tensor::from_rows(&s).unwrap());
        let scores = pairwise_scores(&mut g, &metric, qv, sv).unwrap();
        let a = g.softmax_rows(scores).unwrap();
        let a = g.value(a).clone();
        for (i, row) in q.iter().enumerate() {
            let d: Vec<f64> = s.iter().map(|x| metric.distance(row, x).unwrap()).collect();
            let nearest = d
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v < d[best] { j } else { best });
            let gap = d.iter().enumerate().filter(|&(j, _)| j != nearest).map(|(_, &v)| v - d[nearest]).fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-9);
            prop_assert_eq!(argmax(a.row(i)), nearest);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| vecs(c, r, 30.0)),
        shift in -50.0f64..50.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let y = g.constant(Tensor::from_rows(&shifted).unwrap());
        let a = g.softmax_rows(x).unwrap();
        let b = g.softmax_rows(y).unwrap();
        let (a, b) = (g.value(a).clone(), g.value(b).clone());
        for i in 0..rows.len() {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
