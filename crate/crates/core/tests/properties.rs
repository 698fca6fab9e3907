use nalgebra::DMatrix;
use pivsem::gauss::{bvn_cdf, norm_cdf, norm_quantile};
use pivsem::parse_model;
use pivsem::patcalc::{commutation_matrix, unvec, vec};
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0..10.0f64, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
    })
}

proptest! {
    #[test]
    fn vec_unvec_round_trip(x in matrix(6)) {
        let back = unvec(&vec(&x), x.nrows(), x.ncols());
        prop_assert_eq!(back, x);
    }

    #[test]
    fn commutation_maps_transpose(x in matrix(5)) {
        let k = commutation_matrix(x.nrows(), x.ncols());
        prop_assert_eq!(k * vec(&x.transpose()), vec(&x));
    }

    #[test]
    fn quantile_inverts_cdf(p in 1e-10..(1.0 - 1e-10f64)) {
        let x = norm_quantile(p);
        prop_assert!((norm_cdf(x) - p).abs() <= 1e-12 * p.max(1e-3).min(1.0) + 1e-15);
    }

    #[test]
    fn bvn_symmetric_and_bounded(a in -4.0..4.0f64, b in -4.0..4.0f64, rho in -0.99..0.99f64) {
        let f = bvn_cdf(a, b, rho).unwrap();
        prop_assert!((f - bvn_cdf(b, a, rho).unwrap()).abs() < 1e-12);
        prop_assert!(f >= (norm_cdf(a) + norm_cdf(b) - 1.0).max(0.0) - 1e-12);
        prop_assert!(f <= norm_cdf(a).min(norm_cdf(b)) + 1e-12);
    }

    #[test]
    fn bvn_increasing_in_rho(a in -3.0..3.0f64, b in -3.0..3.0f64, r in -0.9..0.8f64) {
        prop_assert!(bvn_cdf(a, b, r + 0.1).unwrap() >= bvn_cdf(a, b, r).unwrap() - 1e-12);
    }

    #[test]
    fn model_syntax_round_trip(n1 in 2..5usize, n2 in 2..5usize, cov in any::<bool>()) {
        let ind = |f: &str, k: usize, off: usize| {
            (0..k).map(|i| format!("x{}", off + i)).collect::<Vec<_>>().join(" + ")
                + &format!(" # {f}")
        };
        let mut text = format!("f1 =~ {}\nf2 =~ {}\nf2 ~ f1\n", ind("f1", n1, 1), ind("f2", n2, 1 + n1));
        if cov {
            text += "x1 ~~ x2\n";
        }
        let model = parse_model(&text).unwrap();
        let again = parse_model(&model.to_syntax()).unwrap();
        prop_assert_eq!(again.to_syntax(), model.to_syntax());
        prop_assert_eq!(again.n_observed(), n1 + n2);
    }
}
