//! Every module invariant, at the minimum case count.
use telerisk::properties::{self, MIN_CASES};

#[test]
fn haversine_symmetry() {
    properties::haversine_symmetry(MIN_CASES).unwrap();
}

#[test]
fn angle_scale_invariance() {
    properties::angle_scale_invariance(MIN_CASES).unwrap();
}

#[test]
fn reversed_speeds_negate_accel() {
    properties::reversed_speeds_negate_accel(MIN_CASES).unwrap();
}

#[test]
fn attributes_finite_or_absent() {
    properties::attributes_finite_or_absent(MIN_CASES).unwrap();
}

#[test]
fn road_type_partition() {
    properties::road_type_partition(MIN_CASES).unwrap();
}

#[test]
fn twilight_monotonic() {
    properties::twilight_monotonic(MIN_CASES).unwrap();
}

#[test]
fn turns_shift_invariant() {
    properties::turns_shift_invariant(MIN_CASES).unwrap();
}

#[test]
fn turns_sorted_disjoint() {
    properties::turns_sorted_disjoint(MIN_CASES).unwrap();
}

#[test]
fn binning_matches_oracle() {
    properties::binning_matches_oracle(MIN_CASES).unwrap();
}

#[test]
fn permutation_invariance() {
    properties::permutation_invariance(MIN_CASES).unwrap();
}

#[test]
fn filter_monotonicity() {
    properties::filter_monotonicity(MIN_CASES).unwrap();
}

#[test]
fn group_coverage() {
    properties::group_coverage(MIN_CASES).unwrap();
}

#[test]
fn hellinger_metric() {
    properties::hellinger_metric(MIN_CASES).unwrap();
}

#[test]
fn deviation_ranges() {
    properties::deviation_ranges(MIN_CASES).unwrap();
}

#[test]
fn deviation_determinism() {
    properties::deviation_determinism(MIN_CASES).unwrap();
}

#[test]
fn batched_matches_independent() {
    properties::batched_matches_independent(MIN_CASES).unwrap();
}

#[test]
fn voting_monotonicity() {
    properties::voting_monotonicity(MIN_CASES).unwrap();
}

#[test]
fn vote_accounting() {
    properties::vote_accounting(MIN_CASES).unwrap();
}

#[test]
fn kmeans_best_restart() {
    properties::kmeans_best_restart(MIN_CASES).unwrap();
}

#[test]
fn relabel_invariance() {
    properties::relabel_invariance(MIN_CASES).unwrap();
}

#[test]
fn training_determinism() {
    properties::training_determinism(MIN_CASES).unwrap();
}

#[test]
fn label_score_consistency() {
    properties::label_score_consistency(MIN_CASES).unwrap();
}

#[test]
fn boosting_loss_non_increasing() {
    properties::boosting_loss_non_increasing(MIN_CASES).unwrap();
}

#[test]
fn layout_prefix_restriction() {
    properties::layout_prefix_restriction(MIN_CASES).unwrap();
}

#[test]
fn reference_purity() {
    properties::reference_purity(MIN_CASES).unwrap();
}

#[test]
fn distributional_separation() {
    properties::distributional_separation(MIN_CASES).unwrap();
}

#[test]
fn weak_label_noise() {
    properties::weak_label_noise(MIN_CASES).unwrap();
}

#[test]
fn report_conservation() {
    properties::report_conservation(MIN_CASES).unwrap();
}

#[test]
fn suite_lists_every_property() {
    assert_eq!(properties::all().len(), 28);
}
