use proptest::prelude::*;

use fmpca::benchmark::{cap_ranks, quantile};
use fmpca::fed::{masking, InMemoryBus, MaskDistribution, RoundTag};
use fmpca::linalg;
use fmpca::tensor::{self, ProjectionSet};
use fmpca::{tnsr, Matrix, Tensor};

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..4)
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    dims_strategy().prop_flat_map(|dims| {
        let len: usize = dims.iter().product();
        prop::collection::vec(-10.0f64..10.0, len).prop_map(move |data| Tensor::new(dims.clone(), data).unwrap())
    })
}

fn matrix_strategy(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..1.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v))
    })
}

/// Orthonormal factors with `P_n ≤ I_n` for every mode of `dims`.
fn projection_for(dims: &[usize], seed: &[f64]) -> ProjectionSet {
    let mut k = 0;
    let factors = dims
        .iter()
        .map(|&d| {
            let a = Matrix::from_fn(d, d, |_, _| {
                k += 1;
                seed[k % seed.len()] + 0.01 * k as f64
            });
            let p = 1 + (k % d);
            linalg::truncate_left(&linalg::left_svd(&a).unwrap(), p).unwrap()
        })
        .collect();
    ProjectionSet::new(factors).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fold_inverts_unfold(x in tensor_strategy()) {
        for n in 0..x.order() {
            let m = tensor::mode_n_matricize(&x, n).unwrap();
            prop_assert_eq!(tensor::mode_n_fold(&m, n, x.dims()).unwrap(), x.clone());
        }
    }

    #[test]
    fn unfolding_energy_is_mode_independent(x in tensor_strategy()) {
        let energy = tensor::squared_norm(&x);
        for n in 0..x.order() {
            let s = linalg::left_svd(&tensor::mode_n_matricize(&x, n).unwrap()).unwrap();
            let total: f64 = s.singular_values().iter().map(|v| v * v).sum();
            prop_assert!((total - energy).abs() <= 1e-9 * energy.max(1.0));
        }
    }

    #[test]
    fn partial_projection_matches_kronecker_form(x in tensor_strategy(), seed in prop::collection::vec(-1.0f64..1.0, 7)) {
        let p = projection_for(x.dims(), &seed);
        for n in 0..x.order() {
            let direct = tensor::partial_projection_unfolding(&x, &p, n).unwrap();
            let kron = tensor::mode_n_matricize(&x, n).unwrap() * tensor::phi_kron(&p, n).unwrap();
            prop_assert!((direct - kron).amax() <= 1e-10);
        }
    }

    #[test]
    fn full_projection_never_increases_norm(x in tensor_strategy(), seed in prop::collection::vec(-1.0f64..1.0, 7)) {
        let p = projection_for(x.dims(), &seed);
        let y = tensor::multi_mode_project(&x, &p, true).unwrap();
        prop_assert_eq!(y.dims().to_vec(), p.ranks());
        prop_assert!(tensor::frobenius_norm(&y) <= tensor::frobenius_norm(&x) + 1e-10);
    }

    #[test]
    fn incremental_update_matches_direct_svd(a in matrix_strategy(1..7, 1..6), extra in 1usize..6, fill in prop::collection::vec(-1.0f64..1.0, 42)) {
        let b = Matrix::from_fn(a.nrows(), extra, |i, j| fill[(i * 7 + j) % fill.len()] * (1.0 + i as f64));
        let updated = linalg::incremental_update(&linalg::left_svd(&a).unwrap(), &b).unwrap();
        let mut ab = Matrix::zeros(a.nrows(), a.ncols() + extra);
        ab.view_mut((0, 0), a.shape()).copy_from(&a);
        ab.view_mut((0, a.ncols()), b.shape()).copy_from(&b);
        let direct = linalg::left_svd(&ab).unwrap();
        let s_max = direct.singular_values()[0].max(1e-300);
        for (x, y) in updated.singular_values().iter().zip(direct.singular_values()) {
            prop_assert!((x - y).abs() <= 1e-9 * s_max);
        }
        prop_assert!(updated.orthonormality_error() <= 1e-10);
    }

    #[test]
    fn tnsr_roundtrip(x in tensor_strategy()) {
        let bytes = tnsr::encode(&x);
        prop_assert_eq!(tnsr::decode(&bytes).unwrap(), x);
    }

    #[test]
    fn pairwise_masks_cancel(users in 2u32..6, dims in dims_strategy(), seed in any::<u64>()) {
        let dist = MaskDistribution::default();
        let mut all = Vec::new();
        for d in 1..=users {
            for e in 1..=users {
                if d != e {
                    let sent = masking::pair_mask(seed, 1, d, e, &dims, &dist).unwrap();
                    let received = masking::pair_mask(seed, 1, e, d, &dims, &dist).unwrap();
                    all.push((d, e, masking::perturbation(&sent, &received).unwrap()));
                }
            }
        }
        prop_assert!(masking::perturbations_cancel(&all));
    }

    #[test]
    fn secure_sum_equals_plain_sum(values in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 4), 2..6), seed in any::<u64>()) {
        let contributions: Vec<(u32, Vec<f64>)> = values.iter().cloned().enumerate().map(|(i, v)| (i as u32 + 1, v)).collect();
        let mut bus = InMemoryBus::new();
        let total = fmpca::fed::secure_sum(&contributions, &mut bus, RoundTag::Regression { phase: 0 }, seed, &MaskDistribution::default()).unwrap();
        for (j, t) in total.iter().enumerate() {
            let plain: f64 = values.iter().map(|v| v[j]).sum();
            prop_assert!((t - plain).abs() <= 1e-10 * (1.0 + plain.abs()));
        }
    }

    #[test]
    fn capped_ranks_fit_the_budget(ranks in prop::collection::vec(1usize..12, 1..4), budget in 1usize..200) {
        let capped = cap_ranks(&ranks, budget);
        prop_assert_eq!(capped.len(), ranks.len());
        prop_assert!(capped.iter().zip(&ranks).all(|(c, r)| *c >= 1 && c <= r));
        let product: usize = capped.iter().product();
        prop_assert!(product <= budget || capped.iter().all(|&c| c == 1));
    }

    #[test]
    fn quantiles_are_monotone_and_bounded(mut v in prop::collection::vec(-1e3f64..1e3, 1..40), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = (a.min(b), a.max(b));
        let (ql, qh) = (quantile(&v, lo), quantile(&v, hi));
        prop_assert!(ql <= qh);
        prop_assert!(v[0] <= ql && qh <= v[v.len() - 1]);
    }
}
