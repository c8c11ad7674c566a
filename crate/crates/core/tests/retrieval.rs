mod common;

use advbin::codespace::{normalization_factor, normalize_uniform, BinaryCodeBatch, CodePrior, LambdaMode};
use advbin::dataset::{generate_synthetic, split_query_gallery, Label, SplitProtocol, SynthConfig};
use advbin::matrix::Matrix;
use advbin::retrieval::{
    build_index, build_real_index, evaluate, evaluate_codes, query_euclidean, query_hamming, RealIndex,
};
use common::{brute_force_ranking, naive_ap, naive_hamming, naive_sq_euclidean_f32, random_code, rng};
use proptest::prelude::*;
use rand::Rng;

fn labels_for(n: usize, r: &mut impl Rng) -> Vec<Label> {
    (0..n).map(|_| Label { identity: r.random_range(0..4), view: r.random_range(0..2) }).collect()
}

proptest! {
    #[test]
    fn hamming_scan_equals_brute_force(seed in any::<u64>(), bits in 1usize..200, n in 1usize..60, k in 0usize..70, excl in 0u32..5) {
        let mut r = rng(seed);
        let codes: Vec<_> = (0..n).map(|_| random_code(bits, &mut r)).collect();
        let labels = labels_for(n, &mut r);
        let q = random_code(bits, &mut r);
        let index = build_index(BinaryCodeBatch::from_codes(bits, &codes).unwrap(), labels.clone()).unwrap();
        let exclude = |l: Label| l.identity == excl;
        let got: Vec<(usize, u32)> = query_hamming(&index, &q, exclude, k).unwrap().iter().map(|nb| (nb.row, nb.distance)).collect();
        let dists: Vec<u32> = codes.iter().map(|c| naive_hamming(c, &q)).collect();
        let mut want = brute_force_ranking(&dists, &labels, exclude);
        want.truncate(k);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn euclidean_scan_equals_brute_force(seed in any::<u64>(), dim in 1usize..20, n in 1usize..60, k in 0usize..70, dup in any::<bool>()) {
        let mut r = rng(seed);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        if dup && n > 2 {
            rows[n - 1] = rows[0].clone();
        }
        let labels = labels_for(n, &mut r);
        let q: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let index = build_real_index(&Matrix::from_rows(&rows).unwrap(), labels.clone()).unwrap();
        let exclude = |l: Label| l.view == 1 && l.identity == 0;
        let got: Vec<usize> = query_euclidean(&index, &q, exclude, k).unwrap().iter().map(|nb| nb.row).collect();
        let q32: Vec<f32> = q.iter().map(|&x| x as f32).collect();
        let dists: Vec<f32> = rows
            .iter()
            .map(|row| naive_sq_euclidean_f32(&row.iter().map(|&x| x as f32).collect::<Vec<_>>(), &q32))
            .collect();
        let want: Vec<usize> = brute_force_ranking(&dists, &labels, exclude).into_iter().take(k).map(|(i, _)| i).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn uniform_embedding_preserves_hamming_order(seed in any::<u64>(), bits in 1usize..300, n in 1usize..40, literal in any::<bool>()) {
        let mut r = rng(seed);
        let mode = if literal { LambdaMode::SquaredMean } else { LambdaMode::NormMatching };
        let lambda = normalization_factor(&CodePrior::balanced(bits, mode).unwrap()).unwrap();
        let codes: Vec<_> = (0..n).map(|_| random_code(bits, &mut r)).collect();
        let labels = vec![Label { identity: 0, view: 0 }; n];
        let q = random_code(bits, &mut r);
        let hidx = build_index(BinaryCodeBatch::from_codes(bits, &codes).unwrap(), labels.clone()).unwrap();
        let emb: Vec<Vec<f64>> = codes.iter().map(|c| normalize_uniform(c, lambda).unwrap()).collect();
        let ridx = build_real_index(&Matrix::from_rows(&emb).unwrap(), labels).unwrap();
        let h: Vec<usize> = query_hamming(&hidx, &q, |_| false, n).unwrap().iter().map(|nb| nb.row).collect();
        let e: Vec<usize> = query_euclidean(&ridx, &normalize_uniform(&q, lambda).unwrap(), |_| false, n).unwrap().iter().map(|nb| nb.row).collect();
        prop_assert_eq!(h, e);
    }

    #[test]
    fn evaluation_matches_definitions(seed in any::<u64>(), queries in 1usize..10, len in 1usize..30) {
        let mut r = rng(seed);
        let rankings: Vec<Vec<bool>> = (0..queries)
            .map(|_| {
                let mut v: Vec<bool> = (0..len).map(|_| r.random_bool(0.3)).collect();
                let at = r.random_range(0..len);
                v[at] = true;
                v
            })
            .collect();
        let report = evaluate(&rankings, len).unwrap();
        prop_assert!(report.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(report.cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
        prop_assert!((0.0..=1.0).contains(&report.map));
        for (q, rel) in rankings.iter().enumerate() {
            prop_assert!((report.per_query_ap[q] - naive_ap(rel)).abs() < 1e-12);
        }
        for k in 1..=len {
            let hits = rankings.iter().filter(|rel| rel[..k].iter().any(|&x| x)).count();
            prop_assert_eq!(report.cmc[k - 1], hits as f64 / queries as f64);
        }
    }

    #[test]
    fn dropping_a_leading_irrelevant_item_never_lowers_ap(seed in any::<u64>(), len in 2usize..30) {
        let mut r = rng(seed);
        let mut rel: Vec<bool> = (0..len).map(|_| r.random_bool(0.4)).collect();
        let last_hit = r.random_range(1..len);
        rel[last_hit] = true;
        let Some(miss) = rel[..last_hit].iter().position(|&x| !x) else { return Ok(()) };
        let before = evaluate(&[rel.clone()], 1).unwrap().map;
        rel.remove(miss);
        let after = evaluate(&[rel], 1).unwrap().map;
        prop_assert!(after >= before - 1e-15);
    }
}

#[test]
fn constructed_examples() {
    let r = evaluate(&[vec![true, false, true]], 3).unwrap();
    assert_eq!(r.per_query_ap[0], (1.0 + 2.0 / 3.0) / 2.0);
    assert_eq!(evaluate(&[vec![false, true]], 2).unwrap().cmc, vec![0.0, 1.0]);
    assert!(RealIndex::from_f32(2, vec![0.0; 3], vec![Label { identity: 0, view: 0 }]).is_err());
}

#[test]
fn identity_codes_give_perfect_cross_view_matching() {
    let ds = generate_synthetic(&SynthConfig { num_identities: 8, ..SynthConfig::default() }).unwrap();
    let split = split_query_gallery(&ds, &SplitProtocol::default(), 1).unwrap();
    let mut codes = BinaryCodeBatch::new(8).unwrap();
    for rec in ds.records() {
        let mut c = advbin::BinaryCode::zeros(8).unwrap();
        c.set(rec.identity as usize, true);
        codes.push(&c).unwrap();
    }
    let report = evaluate_codes(&codes, &ds.labels(), &split, 5).unwrap();
    assert_eq!(report.rank1(), 1.0);
    assert_eq!(report.map, 1.0);
}

#[test]
fn same_view_matches_are_excluded() {
    // Every query's only identical code shares its view; the cross-view twin differs by one bit.
    let labels = vec![
        Label { identity: 0, view: 0 },
        Label { identity: 0, view: 0 },
        Label { identity: 0, view: 1 },
        Label { identity: 1, view: 0 },
    ];
    let bits = |s: &str| advbin::BinaryCode::from_bits(&s.bytes().map(|c| c - b'0').collect::<Vec<_>>()).unwrap();
    let codes = BinaryCodeBatch::from_codes(4, &[bits("0000"), bits("0000"), bits("0001"), bits("1111")]).unwrap();
    let split = advbin::Split { queries: vec![0], gallery: vec![1, 2, 3] };
    let report = evaluate_codes(&codes, &labels, &split, 2).unwrap();
    assert_eq!(report.cmc, vec![1.0, 1.0]);
    assert_eq!(report.map, 1.0);
}
