use std::collections::BTreeSet;

use selectkit_web::{greedy_report, projection_report, transport_report};

#[test]
fn greedy_mixes_where_topk_stacks_the_cluster() {
    let r = greedy_report(120, 12, 0.3, 7).unwrap();
    assert_eq!(r.select.len(), 12);
    assert_eq!(r.topk.len(), 12);
    assert!(r.topk.iter().all(|&i| r.clustered[i]));
    assert!(r.select.iter().any(|&i| !r.clustered[i]));
    assert!(r.select_cosine > r.topk_cosine);
    assert_eq!(r.select.iter().collect::<BTreeSet<_>>().len(), 12);
}

#[test]
fn greedy_rejects_bad_sizes() {
    assert!(greedy_report(5, 6, 0.3, 0).is_err());
    assert!(greedy_report(5, 0, 0.3, 0).is_err());
}

#[test]
fn sinkhorn_close_to_exact_for_small_epsilon() {
    let r = transport_report(20, 30, 0.005, 3).unwrap();
    assert!(r.converged);
    assert!(((r.sinkhorn - r.exact) / r.exact).abs() < 0.05, "{} vs {}", r.sinkhorn, r.exact);
    let loose = transport_report(20, 30, 0.5, 3).unwrap();
    assert_eq!(loose.exact, r.exact);
    assert!(loose.sinkhorn >= r.sinkhorn);
}

#[test]
fn projection_distortion_shrinks_with_k() {
    let small = projection_report(400, 16, 100, 1).unwrap();
    let large = projection_report(400, 1024, 100, 1).unwrap();
    assert!(large.within >= small.within);
    assert!(large.pearson > 0.95, "{}", large.pearson);
    assert_eq!(large.pairs.len(), 100);
    assert!(large.pairs.iter().all(|p| p[0].abs() <= 1.0 + 1e-9));
}
