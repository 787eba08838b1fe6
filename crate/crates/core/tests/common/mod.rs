#![allow(dead_code)]

pub mod stub;

use orchestra::spec_model::{AgentEntry, CapacityLevel, Defaults, OrchestrationSpec, RolePool, Step};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EXAMPLE_SPEC: &str = include_str!("../../../../fixtures/math_word_problem.yaml");

pub fn fixture(name: &str) -> String {
    let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

const DUTY_WORDS: &[&str] = &[
    "check", "the", "units", "of", "each", "quantity", "return", "a", "number", "compute", "answer:", "#1", "x - y",
    "\"quoted\"", "it's", "50%", "{braces}", "[list]", "a: b", "- dash", "&", "*star", "tab\there", "ünïcode",
];

fn random_duty(rng: &mut ChaCha8Rng, pool: &RolePool, role: &str) -> String {
    if rng.random_bool(0.4) {
        return pool.canonical_duty(role).expect("pool role").to_string();
    }
    let n = rng.random_range(1..8);
    (0..n).map(|_| *DUTY_WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// A random specification satisfying every validation rule.
pub fn random_spec(rng: &mut ChaCha8Rng, pool: &RolePool) -> OrchestrationSpec {
    let roles: Vec<&str> = pool.roles().collect();
    let n_steps = rng.random_range(1..=5);
    let mut steps: Vec<Step> = Vec::new();
    let mut earlier: Vec<String> = Vec::new();
    for s in 0..n_steps {
        let n_agents = rng.random_range(1..=3);
        let mut agents = Vec::new();
        for a in 0..n_agents {
            let role = *roles.choose(rng).unwrap();
            let name = format!("{role}_s{}a{}", s + 1, a + 1);
            let mut refs: Vec<String> = if s == 0 {
                Vec::new()
            } else {
                let k = rng.random_range(0..=earlier.len().min(3));
                earlier.choose_multiple(rng, k).cloned().collect()
            };
            refs.shuffle(rng);
            let capacity = CapacityLevel::from_rank(rng.random_range(0..3)).unwrap();
            agents.push(AgentEntry::new(name, role, random_duty(rng, pool, role), refs, capacity));
        }
        earlier.extend(agents.iter().map(|a| a.agent_type().to_string()));
        steps.push(Step { agents });
    }
    let defaults = Defaults {
        capacity: rng.random_bool(0.5).then(|| CapacityLevel::from_rank(rng.random_range(0..3)).unwrap()),
    };
    OrchestrationSpec { defaults, steps }
}

/// Central finite-difference gradient of `f` at the given coordinates.
pub fn numeric_grad(theta: &[f64], coords: &[usize], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    coords
        .iter()
        .map(|&i| {
            let x = t[i];
            t[i] = x + h;
            let up = f(&t);
            t[i] = x - h;
            let down = f(&t);
            t[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
