use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use spikecalib::calibration::{self, CalibrationConfig, WeightCalibration};
use spikecalib::threshold::search_threshold;
use spikecalib::{Pipeline, RoundMode, SimOptions, SpikingNetwork, ThresholdMode, ThresholdPolicy};
use spikecalib_bench::{cnn_fixture, mlp_fixture};

fn convert(net: &spikecalib::Network, calib: &spikecalib::Tensor, t: usize) -> SpikingNetwork {
    calibration::convert(
        net,
        calib,
        t,
        &ThresholdPolicy::default(),
        RoundMode::Round,
        &CalibrationConfig::default(),
    )
    .expect("convert")
    .snn
}

fn simulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    let (net, data) = cnn_fixture(64, 0);
    for t in [8, 32] {
        let snn = convert(&net, &data.inputs, t);
        group.bench_with_input(BenchmarkId::new("cnn-small/64", t), &snn, |b, snn| {
            b.iter(|| snn.simulate(&data.inputs, &SimOptions::default()).unwrap())
        });
    }
    let (net, data) = mlp_fixture(256, 0);
    let snn = convert(&net, &data.inputs, 16);
    group.bench_function("mlp-small/256/16", |b| {
        b.iter(|| snn.simulate(&data.inputs, &SimOptions::default()).unwrap())
    });
    group.finish();
}

fn thresholds(c: &mut Criterion) {
    let mut group = c.benchmark_group("threshold_search");
    let (net, data) = cnn_fixture(256, 1);
    let trace = net.forward(&data.inputs).unwrap();
    let acts = trace.layer_output(0);
    for mode in [
        ThresholdMode::MaxAct,
        ThresholdMode::Percentile,
        ThresholdMode::Mmse,
        ThresholdMode::MmseChannel,
    ] {
        let policy = ThresholdPolicy::with_mode(mode);
        group.bench_function(mode.name(), |b| b.iter(|| search_threshold(acts, 16, &policy).unwrap()));
    }
    group.finish();
}

fn pipelines(c: &mut Criterion) {
    let mut group = c.benchmark_group("calibrate");
    group.sample_size(10);
    let (net, data) = mlp_fixture(512, 2);
    let snn = convert(&net, &data.inputs, 16);
    for pipeline in [Pipeline::Light, Pipeline::Advanced] {
        let cfg = CalibrationConfig {
            weights: WeightCalibration {
                iterations: 50,
                ..WeightCalibration::default()
            },
            ..CalibrationConfig::with_pipeline(pipeline)
        };
        group.bench_function(pipeline.name(), |b| {
            b.iter(|| calibration::run_pipeline(&net, &snn, &data.inputs, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, simulate, thresholds, pipelines);
criterion_main!(benches);
