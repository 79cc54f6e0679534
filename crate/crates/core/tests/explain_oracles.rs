mod oracle;

use oracle::{gradcampp_derivative_check, lrp_conservation, random_net};

#[test]
fn gradcampp_derivatives_match_finite_differences() {
    for seed in 0..10 {
        let net = random_net(100 + seed, false);
        let r = gradcampp_derivative_check(&net, seed);
        assert!(r.max_second_err <= 1e-3 && r.max_third_err <= 1e-3, "net {seed}: {r:?}");
        // max-pool ties between dead units are kinks with no derivative
        assert!(r.checked > 0 && r.skipped * 4 < r.checked + r.skipped, "net {seed}: {r:?}");
    }
}

#[test]
fn lrp_conserves_relevance_on_bias_free_nets() {
    for seed in 0..20 {
        let net = random_net(200 + seed, true);
        let err = lrp_conservation(&net, seed);
        assert!(err <= 1e-5, "net {seed}: {err:e}");
    }
}

