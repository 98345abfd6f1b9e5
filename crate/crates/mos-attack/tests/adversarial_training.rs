//! Adversarially trained toy models must stay accurate and be measurably
//! harder to attack than their standard counterparts.

use mos_attack::attack::{apgd_single, AttackConfig};
use mos_attack::classifier::{train_toy, ClassifierWeights, Dataset, TrainConfig};
use mos_attack::losses::LossId;

const EPSILON: f64 = 0.1;
const SIGMA: f64 = 0.08;

fn blobs(seed: u64, n: usize) -> Dataset {
    Dataset::gaussian_blobs(seed, n, 2, 3, SIGMA)
}

fn train(adversarial: bool) -> (ClassifierWeights, f64) {
    let data = blobs(7, 1500);
    let cfg = TrainConfig::new(vec![2, 16, 3], 7);
    let out = train_toy(&cfg, &data, adversarial).unwrap();
    (out.weights, out.clean_accuracy)
}

fn pgd_ce_asr(model: &ClassifierWeights, eval: &Dataset) -> f64 {
    let ce = LossId::new(0).unwrap();
    let mut successes = 0usize;
    for (idx, point) in eval.points.iter().enumerate() {
        let clean_wrong = model.predict(&point.x).unwrap() != point.y;
        let mut cfg = AttackConfig::new(EPSILON);
        cfg.losses = vec![ce];
        cfg.seed = 9000 + idx as u64;
        let out = apgd_single(model, point, ce, &cfg).unwrap();
        if clean_wrong || out.success {
            successes += 1;
        }
    }
    successes as f64 / eval.points.len() as f64
}

#[test]
fn adversarial_training_trades_little_accuracy_for_robustness() {
    let (standard, std_acc) = train(false);
    let (robust, rob_acc) = train(true);
    assert!(std_acc >= 0.95, "standard clean accuracy {std_acc}");
    assert!(rob_acc >= 0.85, "robust clean accuracy {rob_acc}");

    let eval = blobs(1007, 500);
    let asr_std = pgd_ce_asr(&standard, &eval);
    let asr_rob = pgd_ce_asr(&robust, &eval);
    assert!(
        asr_rob < asr_std,
        "robust model should be strictly harder to attack: robust {asr_rob} vs standard {asr_std}"
    );
}
