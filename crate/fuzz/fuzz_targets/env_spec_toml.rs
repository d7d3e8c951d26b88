#![no_main]

use cmlo_core::envs::EnvSpec;
use cmlo_core::rng;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(spec) = EnvSpec::from_toml(text) else {
        return;
    };
    if let Ok(env) = spec.build() {
        let mut r = rng::seeded(0);
        let s = env.reset(&mut r);
        let a = env.spec().action_low.clone();
        let _ = env.step(&s, &a, &mut r);
    }
});
