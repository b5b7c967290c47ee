mod support;

use support::oracle_mismatches;

#[test]
fn predictors_match_brute_force_on_a_thousand_episodes() {
    let (proto, sproto, lensem, ties) = oracle_mismatches(1000, 11);
    assert_eq!((proto, sproto, lensem), (0, 0, 0));
    assert!(ties > 0, "integer episodes should produce distance ties");
}
