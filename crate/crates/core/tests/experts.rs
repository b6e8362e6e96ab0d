//! Expert combination against a brute-force weighted sum, and gradient isolation of
//! unselected experts.

use cmvqa::mmoe::Structure;
use cmvqa_oracles::expert_case;

fn check(structure: Structure, seed_base: u64) {
    for seed in 0..100 {
        let case = expert_case(seed_base + seed, structure);
        assert!(case.max_diff <= 1e-12, "seed {seed}: diff {:e}", case.max_diff);
        assert_eq!(case.leaked_grads, 0, "seed {seed}: unselected expert received gradient");
        assert_eq!(
            case.missing_grads, 0,
            "seed {seed}: selected expert received no gradient"
        );
    }
}

#[test]
fn multi_level_matches_brute_force() {
    check(Structure::MultiLevel, 1000);
}

#[test]
fn multi_view_matches_brute_force() {
    check(Structure::MultiView, 2000);
}
