//! End-to-end properties through the public API.

use cpflow::autodiff::ArrayValue;
use cpflow::flow::{hessians, FlowLayer, FlowStack, InverseOptions, LogDetMode};
use cpflow::icnn::{self, IcnnConfig};
use cpflow::training::{Checkpoint, Dataset, DatasetKind, TrainConfig, Trainer};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn points(rows: usize, d: usize, scale: f64, raw: &[f64]) -> ArrayValue {
    ArrayValue::matrix(rows, d, raw.iter().take(rows * d).map(|v| v * scale).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stacks_are_bijections(
        d in 2usize..6,
        blocks in 1usize..3,
        seed in any::<u64>(),
        raw in prop::collection::vec(-1.0f64..1.0, 16 * 5),
        init in prop::collection::vec(-1.0f64..1.0, 64 * 5),
    ) {
        let mut stack = FlowStack::new(&IcnnConfig::new(d, 2, 8), blocks, true, seed).unwrap();
        stack.initialize(&points(64, d, 2.0, &init)).unwrap();
        let x = points(16, d, 3.0, &raw);
        let y = stack.forward(&x).unwrap();
        let (back, _) = stack.inverse(&y, &InverseOptions::default()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        let (z, _) = stack.inverse(&x, &InverseOptions::default()).unwrap();
        let fz = stack.forward(&z).unwrap();
        for (a, b) in fz.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_jacobians_are_symmetric_positive_definite(
        d in 1usize..9,
        seed in any::<u64>(),
        raw in prop::collection::vec(-1.0f64..1.0, 4 * 8),
        init in prop::collection::vec(-1.0f64..1.0, 64 * 8),
    ) {
        let mut layer = FlowLayer::new(IcnnConfig::new(d, 3, 12), seed).unwrap();
        icnn::actnorm_data_init(&mut layer.params, &layer.config, &points(64, d, 2.0, &init)).unwrap();
        for h in hessians(&layer, &points(4, d, 4.0, &raw)).unwrap() {
            let m = DMatrix::from_row_slice(d, d, h.data());
            prop_assert!((&m - m.transpose()).amax() < 1e-10);
            prop_assert!(m.symmetric_eigen().eigenvalues.min() > 0.0);
        }
    }
}

#[test]
fn trained_model_survives_a_checkpoint_round_trip() {
    let config = TrainConfig {
        n_flows: 2,
        n_hidden_layers: 2,
        n_hidden_units: 8,
        batch_size: 64,
        epochs: 1,
        log_every: 5,
        ..TrainConfig::default()
    };
    let data = Dataset::toy(DatasetKind::OneMoon, 800, 3).unwrap();
    let mut trainer = Trainer::new(config, 2).unwrap();
    let history = trainer.run(&data, |_, _| Ok(())).unwrap();
    assert_eq!(history.rows.last().unwrap().step, 10);
    assert!(history.rows.iter().all(|r| r.val_nll.is_finite()));

    let bytes = trainer.to_checkpoint().encode();
    let restored = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(restored.step, trainer.step);
    let a = trainer.stack.log_density(&data.test, LogDetMode::Exact).unwrap();
    let b = restored.stack.log_density(&data.test, LogDetMode::Exact).unwrap();
    assert_eq!(a.logp, b.logp);

    // Samples map forward to base draws, whose mean squared norm is d.
    let s = restored.stack.sample(200, 9, &InverseOptions::default()).unwrap();
    let z = restored.stack.forward(&s).unwrap();
    let mean_sq = z.data().iter().map(|v| v * v).sum::<f64>() / 200.0;
    assert!((mean_sq - 2.0).abs() < 0.6, "{mean_sq}");
}
