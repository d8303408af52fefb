use pqs::accumulate::{AccumConfig, Policy};
use pqs::cli::idx;
use pqs::nn::{self, Model, Preset, ScheduleKind, TrainConfig};
use pqs::quant::RealTensor;
use pqs::sparsity::PruneSchedule;

mod common;

fn trained(preset: Preset) -> (Model, RealTensor) {
    let tmp = tempfile::tempdir().unwrap();
    common::write_fixture(tmp.path(), 200, 40);
    let train = idx::load_mnist(tmp.path(), idx::Split::Train).unwrap();
    let test = idx::load_mnist(tmp.path(), idx::Split::Test).unwrap();
    let mut m = Model::from_preset(preset, 6, 6, AccumConfig::wide(), 16, 2).unwrap();
    let cfg = TrainConfig {
        schedule: ScheduleKind::QtoP,
        epochs: 1,
        qat_epochs: 1,
        prune: PruneSchedule { target: 0.25, interval: 1, increment: 0.25, group_size: 16 },
        learning_rate: 0.02,
        momentum: 0.9,
        batch_size: 20,
        seed: 2,
    };
    nn::train(&mut m, &train, &cfg).unwrap();
    let mut shape = vec![test.len()];
    shape.extend(&test.sample_shape);
    (m, RealTensor::new(shape, test.images.clone()).unwrap())
}

/// Clamping sorted accumulation reproduces exact logits whenever no dot product overflows
/// persistently.
fn check(preset: Preset) {
    let (m, batch) = trained(preset);
    let (wide, _) = nn::forward_model(&m, &batch, Some(AccumConfig::wide())).unwrap();
    let mut compared = 0;
    for p in 12..=28 {
        let (exact, counts) = nn::forward_model(&m, &batch, Some(AccumConfig::new(p, Policy::Exact).unwrap())).unwrap();
        assert_eq!(exact, wide, "the logging register never changes results");
        let persistent: u64 = counts.iter().map(|c| c.persistent).sum();
        if persistent > 0 {
            continue;
        }
        let (sorted, _) = nn::forward_model(&m, &batch, Some(AccumConfig::new(p, Policy::SortedSaturate).unwrap())).unwrap();
        assert_eq!(sorted, wide, "{preset:?} p={p}");
        compared += 1;
    }
    assert!(compared > 0);
}

#[test]
fn sorted_matches_exact_logits_mlp() {
    check(Preset::Mlp1);
}

#[test]
fn sorted_matches_exact_logits_conv() {
    check(Preset::SmallConv);
}
