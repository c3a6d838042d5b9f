//! A toy bank where one question is always in the real scripts: a trained
//! generator must learn to rank it first.

use scriptgen_core::assess::ExamScript;
use scriptgen_core::gan::{disc_forward, gen_forward, generate_script, train_examgan, GanConfig};
use scriptgen_core::seeding::{Condition, TrainingInstance};

const BANK: usize = 12;
const KEY: usize = 7;

fn toy_data() -> Vec<TrainingInstance> {
    (0..24)
        .map(|i| {
            let other = [0, 2, 4, 9][i % 4];
            let mut q = vec![KEY, other];
            q.sort_unstable();
            TrainingInstance {
                condition: Condition {
                    values: vec![0.5 + 0.01 * (i % 5) as f64, 0.1],
                },
                script: serde_json::from_value::<ExamScript>(serde_json::json!({ "questions": q })).unwrap(),
            }
        })
        .collect()
}

fn cfg() -> GanConfig {
    GanConfig {
        epochs: 300,
        batch_size: 8,
        noise_dim: 4,
        generator_hidden: 16,
        discriminator_hidden: 16,
        learning_rate: 0.01,
        ..GanConfig::default()
    }
}

#[test]
fn generator_learns_the_key_question() {
    let data = toy_data();
    let trained = train_examgan(&data, BANK, &cfg(), 5).unwrap();
    let c = &data[0].condition;
    for seed in 0..10 {
        let e = generate_script(&trained.generator, c, 2, seed).unwrap();
        assert!(e.questions().contains(&KEY), "seed {seed}: {:?}", e.questions());
    }
    let real = data[0].target_vector(BANK);
    let fake = gen_forward(&trained.generator, &vec![0.0; 4], c).unwrap();
    let uniform = vec![0.5; BANK];
    let d = &trained.discriminator;
    assert!(disc_forward(d, c, &real).unwrap() > disc_forward(d, c, &uniform).unwrap());
    assert!(fake[KEY] > 0.5);
}

#[test]
fn training_is_deterministic() {
    let data = toy_data();
    let a = train_examgan(&data, BANK, &cfg(), 11).unwrap();
    let b = train_examgan(&data, BANK, &cfg(), 11).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(
        serde_json::to_string(&a.generator).unwrap(),
        serde_json::to_string(&b.generator).unwrap()
    );
}
