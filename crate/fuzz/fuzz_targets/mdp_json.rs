#![no_main]

use cmlo_core::mdp::{policy_evaluation, value_iteration_capped, EvalContext, TabularMdp, TabularPolicy};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(mdp) = serde_json::from_slice::<TabularMdp>(data) else {
        return;
    };
    if mdp.n_states() > 32 || mdp.n_actions() > 8 {
        return;
    }
    let ctx = EvalContext::uniform(mdp.n_states());
    let pi = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let _ = policy_evaluation(&mdp, &pi, &ctx);
    let _ = value_iteration_capped(&mdp, 1e-6, 10_000);
    let text = serde_json::to_string(&mdp).unwrap();
    assert_eq!(serde_json::from_str::<TabularMdp>(&text).unwrap(), mdp);
});
