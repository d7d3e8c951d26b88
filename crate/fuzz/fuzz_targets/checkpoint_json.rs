#![no_main]

use cmlo_core::nn::GaussianEnsemble;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ens) = serde_json::from_slice::<GaussianEnsemble>(data) else {
        return;
    };
    let state = vec![0.0; ens.state_dim()];
    let action = vec![0.0; ens.action_dim()];
    let _ = ens.predict_mean(&state, &action);
});
